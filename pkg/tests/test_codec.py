"""Sequence layout and vocabulary contracts."""

import numpy as np
import pytest

from pnglab import codec, corpus as cp
from pnglab.codec import CLS, MASK, PAD, SEP
from pnglab.errors import DataError


def one_word_sentence():
    return cp.Sentence([cp.Word(("g1",), ("p1", "p2"), ("%L", "L%"), 0)], [True])


def tiny_vocab():
    return codec.Vocabulary(("p1", "p2"), ("g1",))


def test_special_ids_fixed():
    assert (PAD, CLS, SEP, MASK) == (0, 1, 2, 3)


def test_vocabulary_layout():
    v = tiny_vocab()
    assert v.phoneme_id("p1") == 4
    assert v.phoneme_id("p2") == 5
    assert v.grapheme_id("g1") == 6
    assert v.size == 7
    assert [v.symbol(i) for i in range(7)] == ["PAD", "CLS", "SEP", "MASK", "p1", "p2", "g1"]


def test_vocabulary_from_lexicon_sorted_and_deterministic():
    spec = cp.CorpusSpec(seed=1, lexicon_size=20, split_sizes=(10, 2, 2))
    lex = cp.build_lexicon(spec)
    v1 = codec.build_vocabulary(lex)
    v2 = codec.build_vocabulary(lex)
    assert v1 == v2
    assert list(v1.phonemes) == sorted(v1.phonemes)
    assert list(v1.graphemes) == sorted(v1.graphemes)


def test_vocabulary_rejects_duplicates():
    with pytest.raises(DataError):
        codec.Vocabulary(("p1", "p1"), ("g1",))


def test_colliding_symbol_names_get_distinct_ids(tmp_path):
    v = codec.Vocabulary(("x",), ("x",))
    assert v.phoneme_id("x") != v.grapheme_id("x")
    path = tmp_path / "vocab.txt"
    codec.write_vocabulary(path, v)
    assert codec.read_vocabulary(path) == v


def test_assemble_layout_example():
    seq = codec.assemble_sequence(one_word_sentence(), tiny_vocab())
    assert seq.ids.tolist() == [CLS, 4, 5, SEP, 6, SEP]
    assert seq.segment_ids.tolist() == [0, 0, 0, 0, 1, 1]
    assert seq.word_ids.tolist() == [-1, 0, 0, -1, 0, -1]
    assert seq.token_positions.tolist() == [0, 1, 2, 3, 4, 5]
    assert seq.word_positions is None
    assert codec.phoneme_span(seq).tolist() == [1, 2]


def test_word_positions_channel():
    seq = codec.assemble_sequence(one_word_sentence(), tiny_vocab(), use_word_positions=True)
    assert seq.word_positions.tolist() == [0, 1, 1, 0, 1, 0]


def test_assemble_errors():
    with pytest.raises(DataError):
        codec.assemble_sequence(cp.Sentence([], []), tiny_vocab())
    bad = cp.Sentence([cp.Word(("gX",), ("p1",), ("L%",), 0)], [True])
    with pytest.raises(DataError, match="missing"):
        codec.assemble_sequence(bad, tiny_vocab())
    empty_word = cp.Sentence([cp.Word((), ("p1",), ("L%",), 0)], [True])
    with pytest.raises(DataError):
        codec.assemble_sequence(empty_word, tiny_vocab())


def test_max_length_rejection():
    phonemes = tuple(["p1", "p2"] * 130)
    tones = tuple(["H"] * 260)
    s = cp.Sentence([cp.Word(("g1",), phonemes, tones, 0)], [True])
    with pytest.raises(DataError, match="maximum length"):
        codec.assemble_sequence(s, tiny_vocab())


def test_layout_on_generated_corpus():
    spec = cp.CorpusSpec(seed=5, lexicon_size=20, split_sizes=(60, 5, 5))
    lexicon, _, (train, _, _) = cp.generate_corpus(spec)
    vocab = codec.build_vocabulary(lexicon)
    for s in train:
        seq = codec.assemble_sequence(s, vocab)
        n_p = sum(len(w.phonemes) for w in s.words)
        n_g = sum(len(w.graphemes) for w in s.words)
        # exact [CLS, P..., SEP, G..., SEP] layout
        assert seq.ids[0] == CLS
        assert seq.ids[1 + n_p] == SEP
        assert seq.ids[-1] == SEP
        assert len(seq) == n_p + n_g + 3
        assert set(seq.segment_ids.tolist()) == {0, 1}
        assert seq.segment_ids[: 2 + n_p].tolist() == [0] * (2 + n_p)
        assert seq.segment_ids[2 + n_p :].tolist() == [1] * (n_g + 1)
        assert seq.token_positions.tolist() == list(range(len(seq)))
        # every word's tokens are contiguous within each segment and the
        # word_id appears in both segments
        for i in range(len(s.words)):
            pos = np.nonzero(seq.word_ids == i)[0]
            segs = seq.segment_ids[pos]
            for seg in (0, 1):
                span = pos[segs == seg]
                assert len(span) > 0
                assert np.array_equal(span, np.arange(span[0], span[-1] + 1))
        # round trip
        phon, grap = codec.detokenize(seq, vocab)
        assert phon == cp.sentence_phonemes(s)
        assert grap == [g for w in s.words for g in w.graphemes]
        assert len(codec.phoneme_span(seq)) == n_p


def test_vocab_file_roundtrip(tmp_path):
    spec = cp.CorpusSpec(seed=2, lexicon_size=15, split_sizes=(10, 2, 2))
    vocab = codec.build_vocabulary(cp.build_lexicon(spec))
    path = tmp_path / "vocab.txt"
    codec.write_vocabulary(path, vocab)
    assert codec.read_vocabulary(path) == vocab
    lines = path.read_text().splitlines()
    assert lines[:4] == ["PAD", "CLS", "SEP", "MASK"]
    assert lines[4] == "p:" + vocab.phonemes[0]


def test_vocab_file_errors(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("PAD\nCLS\nSEP\nMASK\nq:oops\n")
    with pytest.raises(DataError, match="line 5"):
        codec.read_vocabulary(path)
    path.write_text("CLS\nPAD\nSEP\nMASK\n")
    with pytest.raises(DataError):
        codec.read_vocabulary(path)

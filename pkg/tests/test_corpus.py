"""Hand-derived oracles for the synthetic language and its file formats."""

import numpy as np
import pytest

from pnglab import corpus as cp
from pnglab.errors import DataError


def small_spec(**kw):
    defaults = dict(seed=1, lexicon_size=20, split_sizes=(80, 10, 10))
    defaults.update(kw)
    return cp.CorpusSpec(**defaults)


@pytest.fixture(scope="module")
def generated():
    lexicon, embeddings, (train, valid, test) = cp.generate_corpus(small_spec())
    return lexicon, embeddings, train, valid, test


# -- tones and sandhi -------------------------------------------------------


def test_derive_tones_hand_cases():
    assert cp.derive_tones(3, 2) == ("%L", "A", "L%")
    assert cp.derive_tones(3, 0) == ("%L", "H", "L%")
    assert cp.derive_tones(1, 0) == ("L%",)
    assert cp.derive_tones(1, 1) == ("L%",)
    assert cp.derive_tones(4, 1) == ("A", "L", "L", "L%")
    assert cp.derive_tones(5, 3) == ("%L", "H", "A", "L", "L%")
    assert cp.derive_tones(2, 2) == ("%L", "L%")   # final-mora override eats the nucleus
    assert cp.derive_tones(4, 0) == ("%L", "H", "H", "L%")


def test_derive_tones_errors():
    with pytest.raises(DataError):
        cp.derive_tones(0, 0)
    with pytest.raises(DataError):
        cp.derive_tones(2, 3)


def test_apply_sandhi_hand_cases():
    # first accented word keeps its nucleus, re-indexed to phrase moras
    assert cp.apply_sandhi([2, 1], [3, 2]) == 2
    assert cp.apply_sandhi([0, 1], [3, 2]) == 4
    assert cp.apply_sandhi([3], [3]) == 3
    assert cp.apply_sandhi([0, 0, 0], [1, 2, 3]) == 0
    assert cp.apply_sandhi([0, 2, 1], [2, 3, 1]) == 4
    with pytest.raises(DataError):
        cp.apply_sandhi([], [])
    with pytest.raises(DataError):
        cp.apply_sandhi([4], [3])


def test_tone_pattern_validator():
    assert cp.validate_tone_pattern(("%L", "A", "L%"))
    assert cp.validate_tone_pattern(("A", "L", "L%"))
    assert cp.validate_tone_pattern(("L%",))
    assert cp.validate_tone_pattern(("%L", "H", "H", "L%"))
    assert not cp.validate_tone_pattern(("%L", "A", "A", "L%"))
    assert not cp.validate_tone_pattern(("%L", "H"))
    assert not cp.validate_tone_pattern(("H", "L%"))
    assert not cp.validate_tone_pattern(("%L", "L", "H", "L%"))   # rise after fall


def test_generated_phrases_are_well_formed(generated):
    lexicon, _, train, valid, test = generated
    for s in train + valid + test:
        start = 0
        words = s.words
        n = len(words)
        assert s.phrase_breaks[0] is True
        while start < n:
            end = start + 1
            while end < n and not s.phrase_breaks[end]:
                end += 1
            tones = tuple(t for w in words[start:end] for t in w.tones)
            assert cp.validate_tone_pattern(tones), tones
            start = end


def test_tones_rederivable_from_lexicon(generated):
    lexicon, _, train, _, _ = generated
    for s in train[:200]:
        accents = [lexicon.entries[w.lexicon_id].accent_type for w in s.words]
        clone = [cp.Word(w.graphemes, w.phonemes, (), w.lexicon_id) for w in s.words]
        cp._retone(clone, s.phrase_breaks, accents)
        for orig, re in zip(s.words, clone):
            assert orig.tones == re.tones


# -- lexicon ----------------------------------------------------------------


def test_lexicon_homograph_count_and_determinism():
    spec = cp.CorpusSpec(seed=1, lexicon_size=10, homograph_fraction=0.2, split_sizes=(10, 2, 2))
    lex1 = cp.build_lexicon(spec)
    lex2 = cp.build_lexicon(spec)
    assert len(lex1.homograph_ids) == 2
    assert lex1.entries == lex2.entries
    assert lex1.phonemes == lex2.phonemes


def test_lexicon_rejects_bad_specs():
    with pytest.raises(DataError):
        cp.build_lexicon(cp.CorpusSpec(word_classes=0))
    with pytest.raises(DataError):
        cp.build_lexicon(cp.CorpusSpec(lexicon_size=5))
    with pytest.raises(DataError):
        cp.build_lexicon(cp.CorpusSpec(homograph_fraction=0.001))


def test_homograph_invariants(generated):
    lexicon = generated[0]
    assert len(lexicon.homograph_ids) == round(0.2 * 20)
    for wid in lexicon.homograph_ids:
        e = lexicon.entries[wid]
        assert len(e.readings) == 2
        regular = tuple(lexicon.letter_readings[g] for g in e.graphemes)
        assert e.readings[0] == regular
        assert all(a != b for a, b in zip(*e.readings))
        # informativeness: at least two classes select different readings
        assert len(set(e.reading_rule)) >= 2
        assert all(0 <= i < len(e.readings) for i in e.reading_rule)
    for e in lexicon.entries:
        assert 2 <= len(e.graphemes) <= 3
        # transparent orthography: one mora per letter in every reading
        assert all(len(r) == len(e.graphemes) for r in e.readings)
        assert 0 <= e.accent_type <= e.mora_count
        for r in e.readings:
            assert all(a != b for a, b in zip(r, r[1:])), "adjacent duplicate phoneme"


def test_letter_map_is_bijective_and_spellings_unique(generated):
    lexicon = generated[0]
    assert sorted(lexicon.letter_readings) == lexicon.graphemes
    assert sorted(set(lexicon.letter_readings.values())) == lexicon.phonemes
    assert len(set(lexicon.letter_readings.values())) == len(lexicon.graphemes)
    forms = [e.graphemes for e in lexicon.entries]
    assert len(set(forms)) == len(forms)


def test_accent_homophones_borrow_regular_readings(generated):
    lexicon = generated[0]
    regular_of = {
        e.readings[0]: e
        for e in lexicon.entries
        if not e.is_homograph and e.readings[0] == tuple(lexicon.letter_readings[g] for g in e.graphemes)
    }
    irregular = [
        e
        for e in lexicon.entries
        if not e.is_homograph and e.readings[0] != tuple(lexicon.letter_readings[g] for g in e.graphemes)
    ]
    for e in irregular:
        donor = regular_of.get(e.readings[0])
        assert donor is not None, "irregular reading must be borrowed from a regular word"
        assert donor.accent_type != e.accent_type, "homophones must differ in accent"


def test_homograph_free_corpus_is_context_free_for_g2p():
    spec = cp.CorpusSpec(seed=3, lexicon_size=20, homograph_fraction=0.0, split_sizes=(150, 10, 10))
    lexicon, _, (train, valid, test) = cp.generate_corpus(spec)
    assert lexicon.homograph_ids == []
    lookup: dict[tuple, tuple] = {}
    hits = total = 0
    for s in train + valid + test:
        for w in s.words:
            key = w.graphemes
            lookup.setdefault(key, w.phonemes)
            hits += lookup[key] == w.phonemes
            total += 1
    assert hits == total, "unigram G2P oracle must reach 100% without homographs"


# -- sentence generation ----------------------------------------------------


def test_readings_follow_rule_on_left_class(generated):
    lexicon, _, train, _, _ = generated
    for s in train:
        prev_class = 0
        for i, w in enumerate(s.words):
            e = lexicon.entries[w.lexicon_id]
            left = prev_class if i > 0 else 0
            assert w.phonemes == e.readings[e.reading_rule[left]]
            prev_class = e.word_class


def test_no_adjacent_duplicate_phonemes(generated):
    for s in generated[2]:
        seq = cp.sentence_phonemes(s)
        assert all(a != b for a, b in zip(seq, seq[1:]))


def test_join_probability_extremes():
    lexicon = generated_lexicon = cp.build_lexicon(small_spec())
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = cp.generate_sentence(lexicon, rng, (2, 5), join_probability=0.0)
        assert all(s.phrase_breaks)
        s = cp.generate_sentence(lexicon, rng, (2, 5), join_probability=1.0)
        assert s.phrase_breaks == [True] + [False] * (len(s.words) - 1)


def test_single_unaccented_monomora_word_gets_final_low():
    lexicon = cp.Lexicon(
        [cp.LexiconEntry(0, ("A",), (("ka",),), (0,), 0, 0)],
        ["ka"],
        ["A"],
        1,
    )
    s = cp.generate_sentence(lexicon, np.random.default_rng(0), (1, 1), 0.35)
    assert [w.tones for w in s.words] == [("L%",)]


def test_splits_disjoint_and_sized(generated):
    _, _, train, valid, test = generated
    assert (len(train), len(valid), len(test)) == (80, 10, 10)

    def key(s):
        return (tuple(w.graphemes for w in s.words), tuple(s.phrase_breaks))

    keys = [key(s) for s in train + valid + test]
    assert len(set(keys)) == len(keys)


def test_corpus_generation_deterministic(tmp_path):
    spec = small_spec()
    a = cp.generate_corpus(spec)
    b = cp.generate_corpus(spec)
    pa, pb = tmp_path / "a.txt", tmp_path / "b.txt"
    cp.write_dataset(pa, a[2][0])
    cp.write_dataset(pb, b[2][0])
    assert pa.read_bytes() == pb.read_bytes()
    other = cp.generate_corpus(small_spec(seed=2))
    cp.write_dataset(pb, other[2][0])
    assert pa.read_bytes() != pb.read_bytes()


# -- frames -----------------------------------------------------------------


def test_render_frames_durations_and_fields(generated):
    lexicon, embeddings, train, _, _ = generated
    s = train[0]
    frames, stops = cp.render_frames(s, embeddings)
    phonemes = cp.sentence_phonemes(s)
    tones = cp.sentence_tones(s)
    want = sum(2 + i % 3 for i in range(len(phonemes)))
    assert frames.shape == (want, cp.FRAME_DIM)
    assert stops.sum() == 1 and stops[-1] == 1
    row = 0
    for i, (p, t) in enumerate(zip(phonemes, tones)):
        for _ in range(2 + i % 3):
            assert np.allclose(frames[row, :8], embeddings[p])
            assert frames[row, 8] == cp.F0_BY_TONE[t]
            assert frames[row, 9] == 1.0
            row += 1


def test_render_frames_unknown_phoneme(generated):
    lexicon, embeddings, train, _, _ = generated
    s = cp.Sentence([cp.Word(("A",), ("zz-not-a-phoneme",), ("L%",), -1)], [True])
    with pytest.raises(DataError):
        cp.render_frames(s, embeddings)


def test_embedding_margin_and_roundtrip(generated, tmp_path):
    _, embeddings, _, _, _ = generated
    vecs = list(embeddings.values())
    for v in vecs:
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12
    dists = [np.linalg.norm(a - b) for i, a in enumerate(vecs) for b in vecs[i + 1 :]]
    assert min(dists) >= cp.MIN_EMBED_DISTANCE
    path = tmp_path / "emb.tsv"
    cp.write_embedding_table(path, embeddings)
    back = cp.read_embedding_table(path)
    assert set(back) == set(embeddings)
    for k in embeddings:
        assert np.array_equal(back[k], embeddings[k]), "repr round-trip must be exact"


# -- dataset files ----------------------------------------------------------


def test_dataset_roundtrip(generated, tmp_path):
    lexicon, _, train, _, _ = generated
    path = tmp_path / "train.txt"
    cp.write_dataset(path, train)
    back = cp.read_dataset(path, lexicon)
    assert len(back) == len(train)
    for a, b in zip(train, back):
        assert a.phrase_breaks == b.phrase_breaks
        for wa, wb in zip(a.words, b.words):
            assert (wa.graphemes, wa.phonemes, wa.tones, wa.lexicon_id) == (
                wb.graphemes,
                wb.phonemes,
                wb.tones,
                wb.lexicon_id,
            )


def test_dataset_format_example_line(tmp_path):
    path = tmp_path / "d.txt"
    s = cp.Sentence(
        [
            cp.Word(("g1", "g2"), ("p1", "p2"), ("%L", "H"), -1),
            cp.Word(("g3",), ("p3",), ("L%",), -1),
        ],
        [True, False],
    )
    cp.write_dataset(path, [s])
    assert path.read_text() == "^g1 g2 | g3\t^p1 p2 | p3\t^%L H | L%\n"
    back = cp.read_dataset(path)
    assert back[0].words[0].tones == ("%L", "H")
    assert back[0].phrase_breaks == [True, False]


def test_dataset_parse_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("^g1\t^p1 p2\t^%L\n")
    with pytest.raises(DataError, match="line 1"):
        cp.read_dataset(path)
    path.write_text("^g1\t^p1\t^%L\nonly two\tcolumns\n")
    with pytest.raises(DataError, match="line 2"):
        cp.read_dataset(path)
    path.write_text("^g1\t^p1\t^XX\n")
    with pytest.raises(DataError, match="tone"):
        cp.read_dataset(path)
    path.write_text("g1\tp1\t%L\n")   # first word must start a phrase
    with pytest.raises(DataError, match="phrase"):
        cp.read_dataset(path)
    path.write_text("^g1 | g2\t^p1 p2\t^%L L%\n")
    with pytest.raises(DataError, match="word counts"):
        cp.read_dataset(path)


def test_empty_dataset_file(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    assert cp.read_dataset(path) == []


def test_lexicon_roundtrip(generated, tmp_path):
    lexicon = generated[0]
    path = tmp_path / "lex.tsv"
    cp.write_lexicon(path, lexicon)
    back = cp.read_lexicon(path)
    assert back.entries == lexicon.entries
    assert back.phonemes == lexicon.phonemes
    assert back.graphemes == lexicon.graphemes
    assert back.word_classes == lexicon.word_classes
    assert back.letter_readings == lexicon.letter_readings

"""Independent oracles for edit distance, attention diagnostics, the
acoustic decoder, baselines, probes, and the report format."""

import json

import numpy as np
import pytest

from pnglab import codec, corpus, masking, metrics
from pnglab.errors import DataError
from pnglab.metrics import AttentionRecord, MetricsReport

RNG = np.random.default_rng(7)


@pytest.fixture(scope="module")
def world():
    spec = corpus.CorpusSpec(seed=5, lexicon_size=30, split_sizes=(200, 40, 40))
    lexicon, embeddings, (train, valid, test) = corpus.generate_corpus(spec)
    return lexicon, embeddings, train, valid, test


# -- edit distance ----------------------------------------------------------


def dp_levenshtein(a, b):
    """Textbook full-table dynamic program, written independently of the
    production kernel."""
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    table[:, 0] = np.arange(len(a) + 1)
    table[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i, j] = min(
                table[i - 1, j] + 1,
                table[i, j - 1] + 1,
                table[i - 1, j - 1] + cost,
            )
    return int(table[len(a), len(b)])


def test_levenshtein_hand_cases():
    assert metrics.levenshtein("kitten", "sitting") == 3
    assert metrics.levenshtein("", "") == 0
    assert metrics.levenshtein("abc", "") == 3
    assert metrics.levenshtein("", "abc") == 3
    assert metrics.levenshtein(["pa", "to"], ["pa", "to"]) == 0
    assert metrics.levenshtein([1, 2, 3], [1, 3]) == 1


def test_levenshtein_matches_dp_oracle_on_random_pairs():
    for _ in range(300):
        a = RNG.integers(0, 6, size=RNG.integers(0, 12)).tolist()
        b = RNG.integers(0, 6, size=RNG.integers(0, 12)).tolist()
        assert metrics.levenshtein(a, b) == dp_levenshtein(a, b)


def test_levenshtein_is_a_metric():
    for _ in range(60):
        seqs = [RNG.integers(0, 4, size=RNG.integers(0, 9)).tolist() for _ in range(3)]
        a, b, c = seqs
        assert metrics.levenshtein(a, b) == metrics.levenshtein(b, a)
        assert metrics.levenshtein(a, a) == 0
        assert metrics.levenshtein(a, c) <= metrics.levenshtein(a, b) + metrics.levenshtein(b, c)


def test_cer_is_distance_over_reference_length():
    refs = [list("abcd"), list("xy")]
    hyps = [list("abed"), list("xy")]
    assert metrics.cer(refs, hyps) == pytest.approx(1 / 6)
    with pytest.raises(DataError):
        metrics.cer([list("ab")], [])
    with pytest.raises(DataError):
        metrics.cer([[], []], [[], []])


# -- attention error rate ---------------------------------------------------


def path_weights(path, width):
    w = np.zeros((len(path), width))
    w[np.arange(len(path)), path] = 1.0
    return w


def test_diagonal_attention_is_clean():
    rec = AttentionRecord(path_weights([0, 1, 2, 3, 4], 5))
    assert not metrics.attention_errors(rec)


def test_long_jump_is_flagged():
    rec = AttentionRecord(path_weights([0, 1, 7, 8], 9))   # jump of 6 > 4
    assert metrics.attention_errors(rec)


def test_jump_at_threshold_is_allowed():
    rec = AttentionRecord(path_weights([0, 4, 8], 9))      # jumps of exactly 4
    assert not metrics.attention_errors(rec)


def test_overlong_dwell_is_flagged():
    rec = AttentionRecord(path_weights([0] * 31 + [1], 2))  # 31 > 30 dwell
    assert metrics.attention_errors(rec)
    ok = AttentionRecord(path_weights([0] * 30 + [1], 2))   # exactly 30 is fine
    assert not metrics.attention_errors(ok)


def test_exhausted_synthesis_counts_as_error():
    rec = AttentionRecord(path_weights([0, 1, 2], 3), exhausted=True)
    assert metrics.attention_errors(rec)
    empty = AttentionRecord(np.zeros((0, 4)))
    assert metrics.attention_errors(empty)


def test_attention_error_rate_averages_flags():
    good = AttentionRecord(path_weights([0, 1, 2], 3))
    bad = AttentionRecord(path_weights([0, 6], 7))
    assert metrics.attention_error_rate([good, bad, good, good]) == pytest.approx(0.25)
    with pytest.raises(DataError):
        metrics.attention_error_rate([])


def test_nondecreasing_path_fraction():
    mono = AttentionRecord(path_weights([0, 0, 1, 2], 3))
    back = AttentionRecord(path_weights([0, 2, 1], 3))
    assert metrics.nondecreasing_path_fraction([mono, back]) == pytest.approx(0.5)


# -- acoustic oracle --------------------------------------------------------


def test_oracle_decode_inverts_rendering(world):
    lexicon, embeddings, train, valid, test = world
    for sentence in test:
        frames, _ = corpus.render_frames(sentence, embeddings)
        assert metrics.oracle_decode(frames, embeddings) == corpus.sentence_phonemes(sentence)


def test_oracle_decode_survives_small_noise(world):
    lexicon, embeddings, train, valid, test = world
    sentence = test[0]
    frames, _ = corpus.render_frames(sentence, embeddings)
    noise = RNG.normal(size=frames.shape)
    noise *= 0.3 / np.linalg.norm(noise, axis=1, keepdims=True)   # < half the 0.8 margin
    assert metrics.oracle_decode(frames + noise, embeddings) == corpus.sentence_phonemes(sentence)


def test_oracle_decode_rejects_bad_shapes(world):
    _, embeddings, *_ = world
    with pytest.raises(DataError):
        metrics.oracle_decode(np.zeros((4, 3)), embeddings)


def test_oracle_decode_collapses_consecutive_duplicates(world):
    _, embeddings, *_ = world
    symbols = sorted(embeddings)
    frames = np.stack([np.concatenate([embeddings[symbols[0]], [0.5, 1.0]])] * 3
                      + [np.concatenate([embeddings[symbols[1]], [0.5, 1.0]])] * 2)
    assert metrics.oracle_decode(frames, embeddings) == [symbols[0], symbols[1]]


# -- context-free baselines -------------------------------------------------


def test_homograph_reading_prior_matches_manual_recount(world):
    lexicon, embeddings, train, valid, test = world
    prior, total = metrics.homograph_reading_prior(train, test, lexicon)
    homographs = set(lexicon.homograph_ids)
    counts = {}
    for s in train:
        for w in s.words:
            if w.lexicon_id in homographs:
                counts.setdefault(w.lexicon_id, {}).setdefault(w.phonemes, 0)
                counts[w.lexicon_id][w.phonemes] += 1
    hits = n = 0
    for s in test:
        for w in s.words:
            if w.lexicon_id not in homographs:
                continue
            per = counts.get(w.lexicon_id)
            pred = (max(sorted(per), key=per.get) if per
                    else lexicon.entries[w.lexicon_id].readings[0])
            for a, b in zip(pred, w.phonemes):
                hits += a == b
                n += 1
    assert total == n and n > 0
    assert prior == pytest.approx(hits / n)


def test_homograph_token_filter_selects_phoneme_tokens(world):
    lexicon, embeddings, train, valid, test = world
    vocab = codec.build_vocabulary(lexicon)
    f = metrics.homograph_token_filter(lexicon)
    homographs = set(lexicon.homograph_ids)
    seq = next(codec.assemble_sequence(s, vocab) for s in test
               if any(w.lexicon_id in homographs for w in s.words))
    keep = f(seq)
    assert keep.any()
    assert not keep[seq.segment_ids == 1].any()
    for pos in np.nonzero(keep)[0]:
        assert seq.lexeme_ids[pos] in homographs


def test_segment_majority_baseline_equals_marginal_frequency(world):
    lexicon, embeddings, train, valid, test = world
    vocab = codec.build_vocabulary(lexicon)
    ranges = ((vocab.phoneme_offset, vocab.grapheme_offset), (vocab.grapheme_offset, vocab.size))
    tr = [codec.assemble_sequence(s, vocab) for s in train]
    ev = [codec.assemble_sequence(s, vocab) for s in test]
    acc = metrics.segment_majority_accuracy(tr, ev, "g2p", None, ranges)
    best = {}
    for seg in (0, 1):
        pool = np.concatenate([s.ids[(s.word_ids >= 0) & (s.segment_ids == seg)] for s in tr])
        ids, freq = np.unique(pool, return_counts=True)
        best[seg] = ids[np.argmax(freq)]
    hits = n = 0
    for s in ev:
        scored = (s.segment_ids == 0) & (s.word_ids >= 0)
        hits += int((s.ids[scored] == best[0]).sum())
        n += int(scored.sum())
    assert acc == pytest.approx(hits / n)


# -- linear probe -----------------------------------------------------------


def test_probe_separates_one_hot_features():
    labels = RNG.integers(0, 5, size=400)
    feats = np.eye(5)[labels] + RNG.normal(scale=0.01, size=(400, 5))
    res = metrics.linear_probe(feats[:300], labels[:300], feats[300:], labels[300:], steps=1500)
    assert res.ta > 0.95 and res.pa > 0.9 and res.aa > 0.9
    assert res.counts["ta"] == 100


def test_probe_on_constant_features_predicts_majority():
    labels = np.array([0] * 60 + [1] * 20 + [2] * 10 + [3] * 6 + [4] * 4)
    feats = np.ones((100, 3))
    res = metrics.linear_probe(feats, labels, feats, labels, steps=300)
    assert res.ta == pytest.approx(0.60)


def test_probe_is_deterministic():
    labels = RNG.integers(0, 5, size=120)
    feats = RNG.normal(size=(120, 8))
    a = metrics.linear_probe(feats, labels, feats, labels, steps=100, seed=3)
    b = metrics.linear_probe(feats, labels, feats, labels, steps=100, seed=3)
    assert (a.ta, a.pa, a.aa) == (b.ta, b.pa, b.aa)


def test_probe_rejects_bad_inputs():
    with pytest.raises(DataError):
        metrics.linear_probe(np.zeros((3, 2)), np.zeros(4, dtype=int), np.zeros((1, 2)), np.zeros(1, dtype=int))
    feats = np.zeros((6, 2))
    labels = np.zeros(6, dtype=int)       # no boundary or nucleus tones present
    with pytest.raises(DataError):
        metrics.linear_probe(feats, labels, feats, labels, steps=1)


# -- masked accuracy plumbing -----------------------------------------------


def test_build_eval_masks_modes(world):
    lexicon, embeddings, train, valid, test = world
    vocab = codec.build_vocabulary(lexicon)
    ranges = ((vocab.phoneme_offset, vocab.grapheme_offset), (vocab.grapheme_offset, vocab.size))
    seqs = [codec.assemble_sequence(s, vocab) for s in test[:4]]
    g2p = metrics.build_eval_masks(seqs, "g2p", None, ranges)
    for seq, ms in zip(seqs, g2p):
        phon = (seq.segment_ids == 0) & (seq.word_ids >= 0)
        assert (ms.input_ids[phon] == codec.MASK).all()
        assert (ms.loss_mask == phon).all()
    with pytest.raises(DataError):
        metrics.build_eval_masks(seqs, "mlm", None, ranges)
    with pytest.raises(DataError):
        metrics.build_eval_masks(seqs, "x2y", None, ranges)


# -- report format ----------------------------------------------------------


def test_report_round_trips_through_json():
    rep = MetricsReport("PGB2", "abc123", 7, {"mlm_acc": 0.5, "aer": 0.125}, {"mlm_acc": 100, "aer": 8}, {"note": 1})
    back = MetricsReport.from_json(rep.to_json())
    assert back == rep


def test_report_validation_rejects_bad_values():
    with pytest.raises(DataError):
        MetricsReport(values={"bogus": 0.5}).validate()
    with pytest.raises(DataError):
        MetricsReport(values={"aer": 1.5}).validate()
    with pytest.raises(DataError):
        MetricsReport(values={"cer": -0.1}).validate()
    with pytest.raises(DataError):
        MetricsReport(values={"cer": 0.5}, counts={"cer": 0}).validate()
    # cer alone is unbounded above (insertion-heavy hypotheses)
    MetricsReport(values={"cer": 1.5}, counts={"cer": 3}).validate()


def test_report_csv_layout():
    rep = MetricsReport("TAC", "h", 1, {"aer": 0.5, "ta": 0.25}, {"aer": 4, "ta": 4})
    assert MetricsReport.csv_header().split(",")[:3] == ["system", "seed", "mlm_acc"]
    row = rep.csv_row().split(",")
    assert row[0] == "TAC" and row[1] == "1"
    assert row[MetricsReport.csv_header().split(",").index("aer")] == "0.5000"
    assert row[MetricsReport.csv_header().split(",").index("mlm_acc")] == ""

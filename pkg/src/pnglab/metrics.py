"""Objective evaluation: masked-prediction accuracies, attention error
rate, edit-distance CER through the synthetic-acoustic oracle, and linear
probes for tone structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import engine, kernels, masking
from .codec import TokenSequence
from .corpus import TONES
from .engine import Tensor
from .errors import DataError
from .masking import MaskingPolicy

EVAL_EPOCH = 1_000_003   # fixed pseudo-epoch so evaluation masking is stable


# ---------------------------------------------------------------------------
# edit distance


def levenshtein(ref, hyp) -> int:
    """Unit-cost edit distance between two symbol (or id) sequences."""
    table: dict = {}
    enc_ref = np.array([table.setdefault(s, len(table)) for s in ref], dtype=np.int64)
    enc_hyp = np.array([table.setdefault(s, len(table)) for s in hyp], dtype=np.int64)
    return int(kernels.levenshtein(enc_ref, enc_hyp))


def cer(refs: list, hyps: list) -> float:
    """Sum of edit distances over sum of reference lengths."""
    if len(refs) != len(hyps):
        raise DataError("cer: reference and hypothesis counts differ")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise DataError("cer: empty reference set")
    return sum(levenshtein(r, h) for r, h in zip(refs, hyps)) / total_ref


# ---------------------------------------------------------------------------
# attention error rate


@dataclass
class AttentionRecord:
    weights: np.ndarray          # (decoder_steps, encoder_positions)
    utterance_id: int | str = 0
    exhausted: bool = False      # synthesis hit the max-steps cap


def attention_errors(record: AttentionRecord, jump_threshold: int = 4, duration_threshold: int = 30) -> bool:
    """True when the argmax path jumps too far, dwells too long, or the
    utterance never stopped on its own."""
    if record.exhausted:
        return True
    path = np.argmax(record.weights, axis=1)
    if len(path) == 0:
        return True
    if np.abs(np.diff(path)).max(initial=0) > jump_threshold:
        return True
    run = 1
    for a, b in zip(path, path[1:]):
        run = run + 1 if a == b else 1
        if run > duration_threshold:
            return True
    return False


def attention_error_rate(records: list[AttentionRecord], jump_threshold: int = 4, duration_threshold: int = 30) -> float:
    if not records:
        raise DataError("attention_error_rate: no records")
    flags = [attention_errors(r, jump_threshold, duration_threshold) for r in records]
    return sum(flags) / len(flags)


def nondecreasing_path_fraction(records: list[AttentionRecord]) -> float:
    ok = 0
    for r in records:
        path = np.argmax(r.weights, axis=1)
        ok += bool(np.all(np.diff(path) >= 0))
    return ok / len(records)


# ---------------------------------------------------------------------------
# acoustic oracle


def oracle_decode(frames: np.ndarray, embeddings: dict[str, np.ndarray]) -> list[str]:
    """Nearest phoneme embedding per frame (first 8 dims, Euclidean),
    consecutive duplicates collapsed."""
    symbols = sorted(embeddings)
    table = np.stack([embeddings[s] for s in symbols])
    if frames.ndim != 2 or frames.shape[1] < table.shape[1]:
        raise DataError("oracle_decode: frame dimension mismatch")
    d2 = ((frames[:, None, : table.shape[1]] - table[None]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)
    out: list[str] = []
    for i in nearest:
        s = symbols[int(i)]
        if not out or out[-1] != s:
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# masked prediction accuracy


def build_eval_masks(seqs: list[TokenSequence], mode: str, policy: MaskingPolicy | None, vocab_ranges, pb_mode: bool = False):
    from . import encoder as enc_mod

    masked = []
    for idx, seq in enumerate(seqs):
        if mode == "mlm":
            if policy is None:
                raise DataError("mlm evaluation needs a masking policy")
            ms = masking.mask_for_mlm(seq, policy, masking.sentence_rng(policy.seed, idx, EVAL_EPOCH), vocab_ranges)
        elif mode == "g2p":
            ms = masking.mask_segment(seq, "phonemes")
        elif mode == "p2g":
            ms = masking.mask_segment(seq, "graphemes")
        else:
            raise DataError(f"unknown masking mode {mode!r}")
        if pb_mode and mode != "p2g":
            ms = enc_mod._apply_pb_mode(seq, ms)
        masked.append(ms)
    return masked


def masked_accuracy(
    params,
    cfg,
    seqs: list[TokenSequence],
    mode: str,
    policy: MaskingPolicy | None = None,
    vocab_ranges=None,
    pb_mode: bool = False,
    token_filter=None,
    batch_size: int = 64,
) -> tuple[float, int]:
    """Fraction of loss positions whose argmax logit equals the original
    token.  token_filter(seq) -> bool array restricts scoring positions."""
    from . import encoder as enc_mod

    masked = build_eval_masks(seqs, mode, policy, vocab_ranges, pb_mode)
    filters = [token_filter(s) if token_filter else None for s in seqs]
    correct = total = 0
    for pred, targets, seq_idx, pos in enc_mod.predict_masked(params, cfg, seqs, masked, batch_size):
        keep = np.ones(len(pred), dtype=bool)
        if token_filter:
            keep = np.array([filters[i][p] for i, p in zip(seq_idx, pos)])
        correct += int((pred[keep] == targets[keep]).sum())
        total += int(keep.sum())
    if total == 0:
        raise DataError("masked_accuracy: no positions to score")
    return correct / total, total


def validation_accuracies(params, cfg, seqs, policy, vocab_ranges, pb_mode: bool = False) -> dict[str, float]:
    out = {}
    for mode, key in (("mlm", "mlm_acc"), ("g2p", "g2p_acc"), ("p2g", "p2g_acc")):
        acc, _ = masked_accuracy(params, cfg, seqs, mode, policy, vocab_ranges, pb_mode=pb_mode)
        out[key] = acc
    return out


# ---------------------------------------------------------------------------
# context-free baselines


def homograph_token_filter(lexicon):
    """token_filter selecting phoneme tokens of homograph words."""
    homographs = np.array(sorted(lexicon.homograph_ids), dtype=np.int64)

    def f(seq: TokenSequence) -> np.ndarray:
        if seq.lexeme_ids is None:
            raise DataError("sequence lacks lexeme ids; assemble it from a lexicon-linked sentence")
        phon = (seq.segment_ids == 0) & (seq.word_ids >= 0)
        return phon & np.isin(seq.lexeme_ids, homographs)

    return f


def homograph_reading_prior(train_sentences, eval_sentences, lexicon) -> tuple[float, int]:
    """Context-free baseline for homograph G2P: predict each homograph's
    majority reading from the training split, score per phoneme token on
    the evaluation split."""
    homographs = set(lexicon.homograph_ids)
    counts: dict[int, dict[tuple, int]] = {}
    for s in train_sentences:
        for w in s.words:
            if w.lexicon_id in homographs:
                per = counts.setdefault(w.lexicon_id, {})
                per[w.phonemes] = per.get(w.phonemes, 0) + 1
    majority = {wid: max(sorted(per), key=per.get) for wid, per in counts.items()}
    correct = total = 0
    for s in eval_sentences:
        for w in s.words:
            if w.lexicon_id not in homographs:
                continue
            # homographs unseen in training fall back to the first reading
            pred = majority.get(w.lexicon_id, lexicon.entries[w.lexicon_id].readings[0])
            for a, b in zip(pred, w.phonemes):
                correct += a == b
                total += 1
    if total == 0:
        raise DataError("no homograph tokens in the evaluation split")
    return correct / total, total


def segment_majority_accuracy(train_seqs, eval_seqs, mode, policy, vocab_ranges) -> float:
    """Frequency-prior baseline: predict each segment's most frequent
    token id (from training data) at every loss position."""
    counts = {0: {}, 1: {}}
    for seq in train_seqs:
        content = seq.word_ids >= 0
        for seg in (0, 1):
            ids, freq = np.unique(seq.ids[content & (seq.segment_ids == seg)], return_counts=True)
            for i, f in zip(ids, freq):
                counts[seg][int(i)] = counts[seg].get(int(i), 0) + int(f)
    best = {seg: max(sorted(c), key=lambda k: c[k]) for seg, c in counts.items()}
    masked = build_eval_masks(eval_seqs, mode, policy, vocab_ranges)
    correct = total = 0
    for seq, ms in zip(eval_seqs, masked):
        for pos in np.nonzero(ms.loss_mask)[0]:
            correct += best[int(seq.segment_ids[pos])] == int(ms.target_ids[pos])
            total += 1
    return correct / total


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    ta: float
    pa: float
    aa: float
    counts: dict[str, int]


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    eval_features: np.ndarray,
    eval_labels: np.ndarray,
    lr: float = 1e-3,
    steps: int = 2000,
    seed: int = 0,
) -> ProbeResult:
    """Single affine 5-way classifier on frozen features, full-batch Adam.

    TA scores all tokens, PA only those whose reference is a phrase
    boundary tone (%L or L%), AA only accent nuclei (A).
    """
    if train_features.shape[0] != train_labels.shape[0]:
        raise DataError("probe: feature/label count mismatch")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    d = train_features.shape[1]
    w = engine.param(rng, (d, len(TONES)))
    b = Tensor(np.zeros(len(TONES)), requires_grad=True)
    params = {"w": w, "b": b}
    state = engine.AdamState(params)
    x = Tensor(train_features)
    for _ in range(steps):
        logits = engine.matmul(x, w) + b
        loss = engine.cross_entropy(logits, train_labels)
        loss.backward()
        engine.adam_step(params, state, lr)
        engine.zero_grads(params)
    with engine.no_grad():
        pred = np.argmax(eval_features @ w.data + b.data, axis=1)
    boundary = np.isin(eval_labels, [TONES.index("%L"), TONES.index("L%")])
    nucleus = eval_labels == TONES.index("A")
    counts = {"ta": int(len(eval_labels)), "pa": int(boundary.sum()), "aa": int(nucleus.sum())}
    if counts["ta"] == 0 or counts["pa"] == 0 or counts["aa"] == 0:
        raise DataError(f"probe: empty evaluation stratum ({counts})")
    ta = float((pred == eval_labels).mean())
    pa = float((pred[boundary] == eval_labels[boundary]).mean())
    aa = float((pred[nucleus] == eval_labels[nucleus]).mean())
    return ProbeResult(ta, pa, aa, counts)


# ---------------------------------------------------------------------------
# report


REPORT_FIELDS = ("mlm_acc", "g2p_acc", "p2g_acc", "aer", "cer", "ta", "pa", "aa")


@dataclass
class MetricsReport:
    system: str = ""
    config_hash: str = ""
    seed: int = 0
    values: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for k, v in self.values.items():
            if k not in REPORT_FIELDS:
                raise DataError(f"unknown report field {k!r}")
            # cer is edits over reference length, so insertions push it past 1
            upper = np.inf if k == "cer" else 1.0
            if not 0.0 <= v <= upper:
                raise DataError(f"report rate {k}={v} out of range")
            if self.counts.get(k, 1) <= 0:
                raise DataError(f"report field {k} present with nonpositive count")

    def to_json(self) -> str:
        self.validate()
        payload = {
            "system": self.system,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "values": {k: self.values[k] for k in sorted(self.values)},
            "counts": {k: self.counts[k] for k in sorted(self.counts)},
            "extra": {k: self.extra[k] for k in sorted(self.extra)},
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        report = cls(raw["system"], raw["config_hash"], raw["seed"], raw["values"], raw["counts"], raw.get("extra", {}))
        report.validate()
        return report

    @staticmethod
    def csv_header() -> str:
        return ",".join(("system", "seed") + REPORT_FIELDS)

    def csv_row(self) -> str:
        cells = [self.system, str(self.seed)]
        for k in REPORT_FIELDS:
            cells.append(f"{self.values[k]:.4f}" if k in self.values else "")
        return ",".join(cells)

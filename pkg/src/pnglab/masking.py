"""Word-level MLM masking and whole-segment G2P/P2G masking.

Masking operates on whole words: a selected word's tokens are treated
identically in the phoneme and grapheme segments according to the drawn
strategy.  The five strategies and their default weights follow the
48/8/8/10/10 scheme, renormalized to a proper distribution (the raw
percentages sum to 84).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import MASK, TokenSequence

STRATEGIES = ("mask_both", "mask_grapheme_only", "mask_phoneme_only", "keep_intact", "random_replace")
DEFAULT_WEIGHTS = (48.0, 8.0, 8.0, 10.0, 10.0)


@dataclass(frozen=True)
class MaskingPolicy:
    select_fraction: float = 0.25
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.select_fraction <= 1.0:
            raise ValueError("select_fraction must be in (0, 1]")
        if len(self.weights) != len(STRATEGIES):
            raise ValueError(f"need {len(STRATEGIES)} strategy weights")
        if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
            raise ValueError("weights must be nonnegative with at least one positive")

    @property
    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


@dataclass
class MaskedSequence:
    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray                 # bool, true on every selected word's token
    strategy_tags: dict[int, str] = field(default_factory=dict)   # word index -> strategy
    sequence: TokenSequence | None = None


def sentence_rng(seed: int, sentence_index: int, epoch: int) -> np.random.Generator:
    """Masking randomness is reproducible from (seed, sentence index, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, sentence_index, epoch]))


def _segment_draw(rng: np.random.Generator, vocab_ranges: tuple[tuple[int, int], tuple[int, int]], segment: int) -> int:
    lo, hi = vocab_ranges[segment]
    return int(rng.integers(lo, hi))


def mask_for_mlm(
    seq: TokenSequence,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    vocab_ranges: tuple[tuple[int, int], tuple[int, int]],
) -> MaskedSequence:
    """Select ceil(select_fraction * word_count) words and apply one
    strategy each.  vocab_ranges gives the [lo, hi) id range per segment
    for random replacement."""
    word_count = int(seq.word_ids.max()) + 1
    if word_count < 1:
        raise ValueError("sequence has no words to mask")
    k = math.ceil(policy.select_fraction * word_count)
    selected = np.sort(rng.choice(word_count, size=k, replace=False))
    probs = policy.probabilities

    input_ids = seq.ids.copy()
    loss_mask = np.zeros(len(seq.ids), dtype=bool)
    tags: dict[int, str] = {}
    for w in selected:
        strategy = STRATEGIES[int(rng.choice(len(STRATEGIES), p=probs))]
        tags[int(w)] = strategy
        tokens = np.nonzero(seq.word_ids == w)[0]
        loss_mask[tokens] = True
        if strategy == "mask_both":
            input_ids[tokens] = MASK
        elif strategy == "mask_grapheme_only":
            input_ids[tokens[seq.segment_ids[tokens] == 1]] = MASK
        elif strategy == "mask_phoneme_only":
            input_ids[tokens[seq.segment_ids[tokens] == 0]] = MASK
        elif strategy == "random_replace":
            for t in tokens:
                input_ids[t] = _segment_draw(rng, vocab_ranges, int(seq.segment_ids[t]))
        # keep_intact: inputs unchanged, tokens still count as targets
    return MaskedSequence(input_ids, seq.ids.copy(), loss_mask, tags, seq)


def mask_segment(seq: TokenSequence, which: str) -> MaskedSequence:
    """Mask every content token of one segment ("phonemes" for G2P
    evaluation, "graphemes" for P2G)."""
    if which not in ("phonemes", "graphemes"):
        raise ValueError(f"unknown segment: {which!r}")
    segment = 0 if which == "phonemes" else 1
    tokens = (seq.segment_ids == segment) & (seq.word_ids >= 0)
    input_ids = seq.ids.copy()
    input_ids[tokens] = MASK
    return MaskedSequence(input_ids, seq.ids.copy(), tokens.copy(), {}, seq)


def mask_graphemes_for_inference(seq: TokenSequence) -> TokenSequence:
    """Grapheme-free inference input (the MC system variants); no loss
    targets, idempotent."""
    out = seq.copy()
    out.ids[(seq.segment_ids == 1) & (seq.word_ids >= 0)] = MASK
    return out

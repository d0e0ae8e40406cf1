"""Vocabulary and input-sequence assembly.

A model input is the concatenation [CLS, phonemes..., SEP, graphemes...,
SEP] with parallel channels: segment ids (0 = CLS + phoneme segment incl.
its SEP, 1 = grapheme segment incl. its SEP), global token positions,
word ids linking each content token to its source word (-1 on specials),
and an optional word-position channel for the ablation switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Lexicon, Sentence
from .errors import DataError

PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIALS = ("PAD", "CLS", "SEP", "MASK")
MAX_LEN = 256


@dataclass(frozen=True)
class Vocabulary:
    phonemes: tuple[str, ...]      # sorted, ids [4, 4+P)
    graphemes: tuple[str, ...]     # sorted, ids [4+P, 4+P+G)

    @property
    def phoneme_offset(self) -> int:
        return len(SPECIALS)

    @property
    def grapheme_offset(self) -> int:
        return len(SPECIALS) + len(self.phonemes)

    @property
    def size(self) -> int:
        return len(SPECIALS) + len(self.phonemes) + len(self.graphemes)

    def phoneme_id(self, symbol: str) -> int:
        try:
            return self.phoneme_offset + self._pindex[symbol]
        except KeyError:
            raise DataError(f"phoneme {symbol!r} missing from vocabulary") from None

    def grapheme_id(self, symbol: str) -> int:
        try:
            return self.grapheme_offset + self._gindex[symbol]
        except KeyError:
            raise DataError(f"grapheme {symbol!r} missing from vocabulary") from None

    def symbol(self, token_id: int) -> str:
        """Inverse lookup; specials return their names."""
        if 0 <= token_id < len(SPECIALS):
            return SPECIALS[token_id]
        if token_id < self.grapheme_offset:
            return self.phonemes[token_id - self.phoneme_offset]
        if token_id < self.size:
            return self.graphemes[token_id - self.grapheme_offset]
        raise DataError(f"token id {token_id} out of range")

    def __post_init__(self):
        if len(set(self.phonemes)) != len(self.phonemes):
            raise DataError("duplicate phoneme symbols in vocabulary")
        if len(set(self.graphemes)) != len(self.graphemes):
            raise DataError("duplicate grapheme symbols in vocabulary")
        object.__setattr__(self, "_pindex", {s: i for i, s in enumerate(self.phonemes)})
        object.__setattr__(self, "_gindex", {s: i for i, s in enumerate(self.graphemes)})


def build_vocabulary(lexicon: Lexicon) -> Vocabulary:
    if not lexicon.phonemes or not lexicon.graphemes:
        raise DataError("lexicon inventories must be nonempty")
    return Vocabulary(tuple(sorted(lexicon.phonemes)), tuple(sorted(lexicon.graphemes)))


def write_vocabulary(path, vocab: Vocabulary) -> None:
    """One symbol per line, line number = id; inventory symbols carry a
    segment qualifier (p:/g:) so ranges survive name collisions."""
    with open(path, "w", encoding="utf-8") as f:
        for s in SPECIALS:
            f.write(s + "\n")
        for s in vocab.phonemes:
            f.write("p:" + s + "\n")
        for s in vocab.graphemes:
            f.write("g:" + s + "\n")


def read_vocabulary(path) -> Vocabulary:
    phonemes: list[str] = []
    graphemes: list[str] = []
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if tuple(lines[: len(SPECIALS)]) != SPECIALS:
        raise DataError(f"{path} line 1, column 1: vocabulary must start with {SPECIALS}")
    for line_no, line in enumerate(lines[len(SPECIALS) :], start=len(SPECIALS) + 1):
        if not line:
            continue
        if line.startswith("p:"):
            if graphemes:
                raise DataError(f"{path} line {line_no}, column 1: phoneme after grapheme block")
            phonemes.append(line[2:])
        elif line.startswith("g:"):
            graphemes.append(line[2:])
        else:
            raise DataError(f"{path} line {line_no}, column 1: expected p: or g: prefix")
    return Vocabulary(tuple(phonemes), tuple(graphemes))


@dataclass
class TokenSequence:
    ids: np.ndarray                      # int64
    segment_ids: np.ndarray
    token_positions: np.ndarray          # global 0..len-1
    word_ids: np.ndarray                 # -1 on specials
    word_positions: np.ndarray | None    # present iff enabled
    lexeme_ids: np.ndarray | None = None  # lexicon entry per token, -1 if unlinked

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> "TokenSequence":
        return TokenSequence(
            self.ids.copy(),
            self.segment_ids.copy(),
            self.token_positions.copy(),
            self.word_ids.copy(),
            None if self.word_positions is None else self.word_positions.copy(),
            None if self.lexeme_ids is None else self.lexeme_ids.copy(),
        )


def assemble_sequence(sentence: Sentence, vocab: Vocabulary, use_word_positions: bool = False) -> TokenSequence:
    if not sentence.words:
        raise DataError("cannot assemble an empty sentence")
    for w in sentence.words:
        if not w.graphemes or not w.phonemes:
            raise DataError("words must have nonempty graphemes and phonemes")

    ids = [CLS]
    segments = [0]
    word_ids = [-1]
    word_pos = [0]
    lexemes = [-1]
    for i, w in enumerate(sentence.words):
        for p in w.phonemes:
            ids.append(vocab.phoneme_id(p))
            segments.append(0)
            word_ids.append(i)
            word_pos.append(i + 1)
            lexemes.append(w.lexicon_id)
    ids.append(SEP)
    segments.append(0)
    word_ids.append(-1)
    word_pos.append(0)
    lexemes.append(-1)
    for i, w in enumerate(sentence.words):
        for g in w.graphemes:
            ids.append(vocab.grapheme_id(g))
            segments.append(1)
            word_ids.append(i)
            word_pos.append(i + 1)
            lexemes.append(w.lexicon_id)
    ids.append(SEP)
    segments.append(1)
    word_ids.append(-1)
    word_pos.append(0)
    lexemes.append(-1)

    if len(ids) > MAX_LEN:
        raise DataError(f"sentence of {len(ids)} tokens exceeds the maximum length {MAX_LEN}")
    return TokenSequence(
        ids=np.array(ids, dtype=np.int64),
        segment_ids=np.array(segments, dtype=np.int64),
        token_positions=np.arange(len(ids), dtype=np.int64),
        word_ids=np.array(word_ids, dtype=np.int64),
        word_positions=np.array(word_pos, dtype=np.int64) if use_word_positions else None,
        lexeme_ids=np.array(lexemes, dtype=np.int64),
    )


def phoneme_span(seq: TokenSequence) -> np.ndarray:
    """Indices of phoneme tokens (CLS and SEP excluded)."""
    return np.nonzero((seq.segment_ids == 0) & (seq.word_ids >= 0))[0]


def grapheme_span(seq: TokenSequence) -> np.ndarray:
    return np.nonzero((seq.segment_ids == 1) & (seq.word_ids >= 0))[0]


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> tuple[list[str], list[str]]:
    """(phoneme symbols, grapheme symbols) of the content tokens."""
    phon = [vocab.symbol(int(i)) for i in seq.ids[phoneme_span(seq)]]
    grap = [vocab.symbol(int(i)) for i in seq.ids[grapheme_span(seq)]]
    return phon, grap

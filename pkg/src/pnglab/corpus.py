"""Synthetic pitch-accent language ("ToyJa") with an invertible acoustic map.

The orthography is transparent: every letter reads as one fixed mora, so
a regular word's pronunciation is the letter-by-letter mapping of its
spelling and the phoneme and grapheme streams of a sentence line up
position by position.  Irregular entries are the linguistic interest:

* homographs: the spelled form also has a second, same-length reading
  that differs at every mora, selected by the left neighbor's word class;
* homophones: some entries borrow another word's reading (with a
  different accent type), so grapheme context carries prosodic
  information the sounds alone do not;
* accent sandhi: within an accentual phrase only the first accented
  word's nucleus survives;
* tones: a simplified Tokyo-style pattern over the 5 labels
  {%L, L, H, A, L%}, one mora per phoneme.

Acoustic "frames" are 10-dimensional: a fixed unit embedding of the
phoneme (8 dims), an f0 value determined by the tone, and a constant
energy.  Nearest-neighbor decoding of clean frames recovers the phoneme
sequence exactly, which stands in for ASR when scoring synthesis.

Everything is a pure function of (CorpusSpec, seed); word frequencies
follow a Zipf law over word_id so that sampling weights survive a
lexicon-file round trip without extra fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

TONES: tuple[str, ...] = ("%L", "L", "H", "A", "L%")
F0_BY_TONE: dict[str, float] = {"%L": 0.2, "L": 0.3, "H": 0.8, "A": 1.0, "L%": 0.1}
FRAME_DIM = 10
EMBED_DIM = 8

# generator knobs (constants, not part of the spec surface)
WORD_LENGTH_RANGE = (2, 3)  # letters per word; readings have one mora per letter
HOMOPHONE_RATE = 0.2        # chance a fresh entry borrows an existing reading
ZIPF_EXPONENT = 1.3         # word frequency ~ 1/(1+word_id)^s
CLASS_STICKINESS = 0.6      # P(class -> (class+1) mod C) in the bigram
MIN_EMBED_DISTANCE = 0.8
MAX_RESAMPLE = 200

_VOWELS = "aiueo"
_CONSONANTS = ["", "k", "s", "t", "n", "h", "m", "r", "g", "z", "d", "b", "p", "w", "y"]
ALL_MORAS: tuple[str, ...] = tuple(c + v for c in _CONSONANTS for v in _VOWELS)
GRAPHEME_ALPHABET: tuple[str, ...] = tuple(chr(ord("A") + i) for i in range(26))


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    lexicon_size: int = 60
    homograph_fraction: float = 0.2
    word_classes: int = 4
    sentence_length: tuple[int, int] = (2, 6)
    join_probability: float = 0.35
    split_sizes: tuple[int, int, int] = (5000, 500, 500)

    def validate(self) -> None:
        if self.word_classes < 1:
            raise DataError("corpus spec needs at least one word class")
        if not 0.0 <= self.homograph_fraction <= 1.0:
            raise DataError("homograph_fraction must be in [0, 1]")
        if not 0.0 <= self.join_probability <= 1.0:
            raise DataError("join_probability must be in [0, 1]")
        if self.lexicon_size < 10:
            raise DataError("lexicon_size must be at least 10")
        lo, hi = self.sentence_length
        if not 1 <= lo <= hi:
            raise DataError("sentence_length range must satisfy 1 <= lo <= hi")
        if any(s < 0 for s in self.split_sizes):
            raise DataError("split sizes must be nonnegative")


@dataclass(frozen=True)
class LexiconEntry:
    word_id: int
    graphemes: tuple[str, ...]
    readings: tuple[tuple[str, ...], ...]
    reading_rule: tuple[int, ...]   # left-neighbor word class -> reading index
    word_class: int
    accent_type: int                # 0 = unaccented, else nucleus mora (1-based)

    @property
    def mora_count(self) -> int:
        return len(self.readings[0])

    @property
    def is_homograph(self) -> bool:
        return len(self.readings) >= 2


@dataclass
class Word:
    graphemes: tuple[str, ...]
    phonemes: tuple[str, ...]
    tones: tuple[str, ...]
    lexicon_id: int


@dataclass
class Sentence:
    words: list[Word]
    phrase_breaks: list[bool]       # True = word starts a new accentual phrase


@dataclass
class Lexicon:
    entries: list[LexiconEntry]
    phonemes: list[str]             # full phoneme inventory, sorted
    graphemes: list[str]            # full grapheme inventory, sorted
    word_classes: int
    letter_readings: dict[str, str] = field(default_factory=dict)   # letter -> mora

    def __post_init__(self):
        self.by_graphemes = {e.graphemes: e.word_id for e in self.entries}

    @property
    def homograph_ids(self) -> list[int]:
        return [e.word_id for e in self.entries if e.is_homograph]

    def frequency_weights(self) -> np.ndarray:
        w = 1.0 / (1.0 + np.arange(len(self.entries))) ** ZIPF_EXPONENT
        return w / w.sum()

    def class_transition(self) -> np.ndarray:
        """Bigram over word classes: sticky cycle c -> (c+1) mod C."""
        c = self.word_classes
        if c == 1:
            return np.ones((1, 1))
        t = np.full((c, c), (1.0 - CLASS_STICKINESS) / (c - 1))
        for i in range(c):
            t[i, (i + 1) % c] = CLASS_STICKINESS
        return t


# ---------------------------------------------------------------------------
# lexicon construction


def _letter_reading_table(rng: np.random.Generator, letters: list[str]) -> dict[str, str]:
    """Bijective letter -> mora table: the regular, transparent orthography."""
    picks = rng.choice(len(ALL_MORAS), size=len(letters), replace=False)
    return {g: ALL_MORAS[int(i)] for g, i in zip(letters, picks)}


def _draw_form(rng: np.random.Generator, letters: list[str], length: int) -> tuple[str, ...]:
    """A spelling with no adjacent duplicate letters.

    Under the bijective letter map this keeps regular readings free of
    adjacent duplicate phonemes, which keeps frames invertible.
    """
    out: list[str] = []
    for _ in range(length):
        for _ in range(MAX_RESAMPLE):
            g = letters[int(rng.integers(len(letters)))]
            if not out or out[-1] != g:
                out.append(g)
                break
        else:
            raise DataError("could not draw a duplicate-free spelling")
    return tuple(out)


def _draw_alternate(rng: np.random.Generator, inventory: list[str], regular: tuple[str, ...]) -> tuple[str, ...]:
    """Same-length irregular reading differing from the regular one at every mora."""
    alt: list[str] = []
    for r in regular:
        for _ in range(MAX_RESAMPLE):
            p = inventory[int(rng.integers(len(inventory)))]
            if p != r and (not alt or alt[-1] != p):
                alt.append(p)
                break
        else:
            raise DataError("could not draw a distinct homograph reading")
    return tuple(alt)


def _draw_rule(rng: np.random.Generator, classes: int, n_readings: int) -> tuple[int, ...]:
    """Total, non-constant map class -> reading index with a near-even split.

    Half the classes (rounded down) select the alternate reading, so the
    context-free prior over a homograph's readings stays close to uniform.
    """
    if not 2 <= n_readings <= classes:
        raise DataError("reading rule cannot cover every reading")
    rule = [0] * classes
    order = rng.permutation(classes)
    for r in range(1, n_readings):
        rule[int(order[r - 1])] = r
    for k in order[n_readings - 1 : classes // 2]:
        rule[int(k)] = int(rng.integers(1, n_readings))
    return tuple(rule)


def build_lexicon(spec: CorpusSpec, rng: np.random.Generator | None = None) -> Lexicon:
    spec.validate()
    n_homographs = round(spec.homograph_fraction * spec.lexicon_size)
    if spec.homograph_fraction > 0.0 and n_homographs < 1:
        raise DataError("homograph_fraction * lexicon_size must be >= 1 when homographs are requested")
    if spec.word_classes < 2 and n_homographs > 0:
        raise DataError("homographs need at least two word classes to be informative")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])

    grapheme_inventory = list(GRAPHEME_ALPHABET)
    letter_readings = _letter_reading_table(rng, grapheme_inventory)
    phoneme_inventory = sorted(set(letter_readings.values()))

    homograph_slots = set(rng.choice(spec.lexicon_size, size=n_homographs, replace=False).tolist())
    zipf = 1.0 / (1.0 + np.arange(spec.lexicon_size)) ** ZIPF_EXPONENT
    class_mass = np.zeros(spec.word_classes)
    entries: list[LexiconEntry] = []
    seen_graphemes: set[tuple[str, ...]] = set()
    donors_by_len: dict[int, list[tuple[tuple[str, ...], int]]] = {}   # regular plains

    for word_id in range(spec.lexicon_size):
        for _ in range(MAX_RESAMPLE):
            length = int(rng.integers(WORD_LENGTH_RANGE[0], WORD_LENGTH_RANGE[1] + 1))
            graphemes = _draw_form(rng, grapheme_inventory, length)
            if graphemes not in seen_graphemes:
                seen_graphemes.add(graphemes)
                break
        else:
            raise DataError("grapheme space exhausted; lexicon too large")
        regular = tuple(letter_readings[g] for g in graphemes)

        # frequent words spread over classes evenly, keeping the left-class
        # distribution (and hence homograph reading priors) near balanced
        word_class = int(np.argmin(class_mass))
        class_mass[word_class] += zipf[word_id]

        if word_id in homograph_slots:
            readings = (regular, _draw_alternate(rng, phoneme_inventory, regular))
            rule = _draw_rule(rng, spec.word_classes, 2)
            accent_type = int(rng.integers(length + 1))
        else:
            donors = donors_by_len.get(length, [])
            if donors and rng.random() < HOMOPHONE_RATE:
                donor_reading, donor_accent = donors[int(rng.integers(len(donors)))]
                readings = (donor_reading,)
                # accent homophone: same sounds, different spelling and
                # different accent shape, so graphemes carry prosody
                choices = [a for a in range(length + 1) if a != donor_accent]
                accent_type = int(choices[rng.integers(len(choices))])
            else:
                readings = (regular,)
                accent_type = int(rng.integers(length + 1))
                donors_by_len.setdefault(length, []).append((regular, accent_type))
            rule = tuple([0] * spec.word_classes)

        entries.append(
            LexiconEntry(
                word_id=word_id,
                graphemes=graphemes,
                readings=readings,
                reading_rule=rule,
                word_class=word_class,
                accent_type=accent_type,
            )
        )

    return Lexicon(entries, phoneme_inventory, grapheme_inventory, spec.word_classes, letter_readings)


# ---------------------------------------------------------------------------
# tones and sandhi


def apply_sandhi(accent_types: list[int], mora_counts: list[int]) -> int:
    """Surviving nucleus of one accentual phrase, in phrase-mora index.

    The first accented word keeps its nucleus (re-indexed to the phrase);
    later nuclei are deleted.  Returns 0 for an all-unaccented phrase.
    """
    if not accent_types:
        raise DataError("apply_sandhi on empty phrase")
    offset = 0
    for a, m in zip(accent_types, mora_counts):
        if a > 0:
            if a > m:
                raise DataError(f"accent type {a} beyond mora count {m}")
            return offset + a
        offset += m
    return 0


def derive_tones(mora_count: int, nucleus: int) -> tuple[str, ...]:
    """Tokyo-style tone string for one accentual phrase.

    Mora 1 gets %L (or A when the nucleus is mora 1); moras before the
    nucleus get H, the nucleus gets A, moras after it get L; an
    unaccented phrase is %L H ... H.  The final mora is always
    overridden to the boundary tone L%.
    """
    if mora_count < 1:
        raise DataError("phrase needs at least one mora")
    if nucleus > mora_count:
        raise DataError(f"nucleus {nucleus} beyond phrase mora count {mora_count}")
    tones = []
    for i in range(1, mora_count + 1):
        if i == nucleus:
            t = "A"
        elif i == 1:
            t = "%L"
        elif nucleus == 0 or i < nucleus:
            t = "H"
        else:
            t = "L"
        tones.append(t)
    tones[-1] = "L%"
    return tuple(tones)


def _retone(words: list[Word], phrase_breaks: list[bool], accent_types: list[int]) -> None:
    """Assign tones in place, phrase by phrase."""
    start = 0
    n = len(words)
    while start < n:
        end = start + 1
        while end < n and not phrase_breaks[end]:
            end += 1
        counts = [len(w.phonemes) for w in words[start:end]]
        nucleus = apply_sandhi(accent_types[start:end], counts)
        tones = derive_tones(sum(counts), nucleus)
        offset = 0
        for w, c in zip(words[start:end], counts):
            w.tones = tones[offset : offset + c]
            offset += c
        start = end


def validate_tone_pattern(tones: tuple[str, ...]) -> bool:
    """Phrase tone strings match (%L|A) H* A? L* with final L% and <= 1 A."""
    if not tones or tones[-1] != "L%":
        return False
    body = tones[:-1]
    if tones.count("A") > 1:
        return False
    i = 0
    if body:
        if body[0] not in ("%L", "A"):
            return False
        i = 1
    while i < len(body) and body[i] == "H":
        i += 1
    if i < len(body) and body[i] == "A":
        i += 1
    while i < len(body) and body[i] == "L":
        i += 1
    return i == len(body)


# ---------------------------------------------------------------------------
# sentence generation


def generate_sentence(lexicon: Lexicon, rng: np.random.Generator, length_range: tuple[int, int] = (2, 6), join_probability: float = 0.35) -> Sentence:
    entries = lexicon.entries
    zipf = lexicon.frequency_weights()
    transition = lexicon.class_transition()
    n_words = int(rng.integers(length_range[0], length_range[1] + 1))

    words: list[Word] = []
    accent_types: list[int] = []
    prev_class = 0
    for i in range(n_words):
        if i == 0:
            probs = zipf
        else:
            w = zipf * np.array([transition[prev_class, e.word_class] for e in entries])
            probs = w / w.sum()
        for _ in range(MAX_RESAMPLE):
            entry = entries[int(rng.choice(len(entries), p=probs))]
            left_class = prev_class if i > 0 else 0
            reading = entry.readings[entry.reading_rule[left_class]]
            if words and words[-1].phonemes[-1] == reading[0]:
                continue
            break
        else:
            raise DataError("could not draw a boundary-duplicate-free word")
        words.append(Word(entry.graphemes, reading, (), entry.word_id))
        accent_types.append(entry.accent_type)
        prev_class = entry.word_class

    phrase_breaks = [True] + [bool(rng.random() >= join_probability) for _ in range(n_words - 1)]
    _retone(words, phrase_breaks, accent_types)
    return Sentence(words, phrase_breaks)


def generate_corpus(spec: CorpusSpec):
    """Lexicon, embedding table, and disjoint train/valid/test splits."""
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(5)
    lexicon = build_lexicon(spec, np.random.default_rng(streams[0]))
    embeddings = build_phoneme_embeddings(lexicon.phonemes, np.random.default_rng(streams[1]))
    seen: set = set()
    splits = []
    for size, stream in zip(spec.split_sizes, streams[2:5]):
        rng = np.random.default_rng(stream)
        sentences = []
        attempts = 0
        while len(sentences) < size:
            attempts += 1
            if attempts > 50 * max(1, size):
                raise DataError("cannot generate disjoint splits; corpus too small")
            s = generate_sentence(lexicon, rng, spec.sentence_length, spec.join_probability)
            key = (
                tuple(w.graphemes for w in s.words),
                tuple(w.phonemes for w in s.words),
                tuple(s.phrase_breaks),
            )
            if key in seen:
                continue
            sentences.append(s)
            seen.add(key)
        splits.append(sentences)
    return lexicon, embeddings, splits


# ---------------------------------------------------------------------------
# acoustic oracle


def build_phoneme_embeddings(inventory: list[str], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fixed unit vectors, pairwise Euclidean distance >= MIN_EMBED_DISTANCE."""
    table: dict[str, np.ndarray] = {}
    chosen: list[np.ndarray] = []
    for symbol in sorted(inventory):
        for _ in range(MAX_RESAMPLE):
            v = rng.normal(size=EMBED_DIM)
            v /= np.linalg.norm(v)
            if all(np.linalg.norm(v - u) >= MIN_EMBED_DISTANCE for u in chosen):
                break
        else:
            raise DataError("could not place phoneme embeddings with the required margin")
        table[symbol] = v
        chosen.append(v)
    return table


def sentence_phonemes(sentence: Sentence) -> list[str]:
    return [p for w in sentence.words for p in w.phonemes]


def sentence_tones(sentence: Sentence) -> list[str]:
    return [t for w in sentence.words for t in w.tones]


def render_frames(sentence: Sentence, embeddings: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Frames (F, 10) and stop flags (F,): [embedding | f0(tone) | energy].

    Phoneme at position i lasts 2 + (i mod 3) frames; the stop flag is 1
    on the last frame only.
    """
    phonemes = sentence_phonemes(sentence)
    tones = sentence_tones(sentence)
    if not phonemes:
        raise DataError("cannot render an empty sentence")
    rows = []
    for i, (p, t) in enumerate(zip(phonemes, tones)):
        if p not in embeddings:
            raise DataError(f"unknown phoneme symbol: {p!r}")
        frame = np.concatenate([embeddings[p], [F0_BY_TONE[t], 1.0]])
        rows.extend([frame] * (2 + i % 3))
    frames = np.asarray(rows)
    stops = np.zeros(len(rows))
    stops[-1] = 1.0
    return frames, stops


# ---------------------------------------------------------------------------
# file formats


def write_dataset(path, sentences: list[Sentence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sentences:
            cols = []
            for proj in (lambda w: w.graphemes, lambda w: w.phonemes, lambda w: w.tones):
                parts = []
                for w, brk in zip(s.words, s.phrase_breaks):
                    toks = " ".join(proj(w))
                    parts.append(("^" if brk else "") + toks)
                cols.append(" | ".join(parts))
            f.write("\t".join(cols) + "\n")


def _parse_column(text: str, path, line_no: int, col_no: int) -> tuple[list[tuple[str, ...]], list[bool]]:
    words = []
    breaks = []
    for part in text.split(" | "):
        brk = part.startswith("^")
        if brk:
            part = part[1:]
        toks = tuple(part.split(" "))
        if not part or any(not t for t in toks):
            raise DataError(f"{path} line {line_no}, column {col_no}: empty token")
        words.append(toks)
        breaks.append(brk)
    return words, breaks


def read_dataset(path, lexicon: Lexicon | None = None) -> list[Sentence]:
    sentences: list[Sentence] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{path} line {line_no}, column {len(cols)}: expected 3 TAB-separated columns")
            (gw, gb), (pw, pb), (tw, tb) = (_parse_column(c, path, line_no, i + 1) for i, c in enumerate(cols))
            if not (len(gw) == len(pw) == len(tw)):
                raise DataError(f"{path} line {line_no}, column 2: word counts differ across columns")
            if gb != pb or pb != tb:
                raise DataError(f"{path} line {line_no}, column 2: phrase markers differ across columns")
            if not gb[0]:
                raise DataError(f"{path} line {line_no}, column 1: first word must start a phrase")
            words = []
            for i, (g, p, t) in enumerate(zip(gw, pw, tw)):
                if len(p) != len(t):
                    raise DataError(f"{path} line {line_no}, column 3: {len(t)} tones for {len(p)} phonemes")
                bad = [x for x in t if x not in TONES]
                if bad:
                    raise DataError(f"{path} line {line_no}, column 3: unknown tone {bad[0]!r}")
                lex_id = -1
                if lexicon is not None:
                    lex_id = lexicon.by_graphemes.get(g, -1)
                    if lex_id < 0:
                        raise DataError(f"{path} line {line_no}, column 1: graphemes {g!r} not in lexicon")
                words.append(Word(g, p, t, lex_id))
            sentences.append(Sentence(words, gb))
    return sentences


def write_lexicon(path, lexicon: Lexicon) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# phonemes: " + " ".join(lexicon.phonemes) + "\n")
        f.write("# graphemes: " + " ".join(lexicon.graphemes) + "\n")
        f.write(f"# word_classes: {lexicon.word_classes}\n")
        if lexicon.letter_readings:
            pairs = " ".join(f"{g}={m}" for g, m in sorted(lexicon.letter_readings.items()))
            f.write("# letters: " + pairs + "\n")
        for e in lexicon.entries:
            readings = ";".join(" ".join(r) for r in e.readings)
            rule = ",".join(str(r) for r in e.reading_rule)
            f.write(f"{e.word_id}\t{' '.join(e.graphemes)}\t{readings}\t{rule}\t{e.word_class}\t{e.accent_type}\n")


def read_lexicon(path) -> Lexicon:
    entries = []
    phonemes: list[str] = []
    graphemes: list[str] = []
    letter_readings: dict[str, str] = {}
    word_classes = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# phonemes: "):
                    phonemes = line[len("# phonemes: ") :].split(" ")
                elif line.startswith("# graphemes: "):
                    graphemes = line[len("# graphemes: ") :].split(" ")
                elif line.startswith("# word_classes: "):
                    word_classes = int(line[len("# word_classes: ") :])
                elif line.startswith("# letters: "):
                    for pair in line[len("# letters: ") :].split(" "):
                        g, _, m = pair.partition("=")
                        if not g or not m:
                            raise DataError(f"{path} line {line_no}, column 1: bad letter mapping {pair!r}")
                        letter_readings[g] = m
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise DataError(f"{path} line {line_no}, column {len(cols)}: expected 6 TAB-separated fields")
            try:
                word_id = int(cols[0])
                readings = tuple(tuple(r.split(" ")) for r in cols[2].split(";"))
                rule = tuple(int(x) for x in cols[3].split(","))
                entry = LexiconEntry(word_id, tuple(cols[1].split(" ")), readings, rule, int(cols[4]), int(cols[5]))
            except ValueError as exc:
                raise DataError(f"{path} line {line_no}, column 1: {exc}") from exc
            if entry.word_id != len(entries):
                raise DataError(f"{path} line {line_no}, column 1: word ids must be dense and ordered")
            if entry.accent_type > entry.mora_count:
                raise DataError(f"{path} line {line_no}, column 6: accent type beyond mora count")
            entries.append(entry)
    if not entries or not phonemes or not graphemes or word_classes < 1:
        raise DataError(f"{path}: missing lexicon header or entries")
    return Lexicon(entries, phonemes, graphemes, word_classes, letter_readings)


def write_embedding_table(path, table: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for symbol in sorted(table):
            f.write(symbol + "\t" + " ".join(repr(float(x)) for x in table[symbol]) + "\n")


def read_embedding_table(path) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path} line {line_no}, column {len(cols)}: expected symbol TAB floats")
            values = np.array([float(x) for x in cols[1].split(" ")])
            if values.shape != (EMBED_DIM,):
                raise DataError(f"{path} line {line_no}, column 2: expected {EMBED_DIM} floats")
            table[cols[0]] = values
    return table

"""Annotated corpora, pronunciation dictionaries, folds, and dictionary routing.

File formats (UTF-8, LF line endings, ``#`` comment lines):

* corpus: ``sentence<TAB>position<TAB>label`` with a zero-based character
  index; a sentence with several annotated characters appears once per
  annotation.
* dictionary: ``character<TAB>pron1,pron2,...``
* folds: ``sample_index<TAB>fold_id``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Malformed corpus, dictionary, or fold data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class RoutingError(ValueError):
    """A character cannot be routed to a pronunciation."""


class InternalConsistencyError(RuntimeError):
    """A component violated a structural guarantee (e.g. a predictor returned
    a label outside the candidate set)."""


@dataclass
class AnnotatedSentence:
    """A character sequence with annotated pronunciation targets."""

    chars: str
    targets: list[tuple[int, str]]

    def __post_init__(self):
        for pos, _ in self.targets:
            if not 0 <= pos < len(self.chars):
                raise CorpusError(f"target position {pos} out of range for sentence of length {len(self.chars)}")


@dataclass
class PronunciationDictionary:
    entries: dict[str, list[str]]

    def __post_init__(self):
        for ch, prons in self.entries.items():
            if not prons:
                raise CorpusError(f"character {ch!r} has no pronunciations")
            if len(set(prons)) != len(prons):
                raise CorpusError(f"character {ch!r} has duplicate pronunciations")

    def is_polyphonic(self, ch: str) -> bool:
        return len(self.entries.get(ch, ())) >= 2

    def __contains__(self, ch: str) -> bool:
        return ch in self.entries


@dataclass
class PolyphoneInventory:
    """Polyphonic characters admitted to modeling, with ordered candidates."""

    candidates: dict[str, list[str]]
    sample_counts: dict[str, int]
    coverage: float = 1.0

    def __post_init__(self):
        for ch, cands in self.candidates.items():
            if len(cands) < 2:
                raise CorpusError(f"inventory character {ch!r} has fewer than 2 candidates")
            if len(set(cands)) != len(cands):
                raise CorpusError(f"inventory character {ch!r} has duplicate candidates")

    def __contains__(self, ch: str) -> bool:
        return ch in self.candidates

    def label_index(self, ch: str, label: str) -> int:
        try:
            return self.candidates[ch].index(label)
        except ValueError:
            raise CorpusError(f"label {label!r} not a candidate of {ch!r}") from None

    def to_jsonable(self) -> dict:
        return {"candidates": self.candidates, "sample_counts": self.sample_counts,
                "coverage": self.coverage}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "PolyphoneInventory":
        return cls(candidates={k: list(v) for k, v in obj["candidates"].items()},
                   sample_counts={k: int(v) for k, v in obj["sample_counts"].items()},
                   coverage=float(obj["coverage"]))


@dataclass
class FoldAssignment:
    k: int
    assignment: np.ndarray  # sample index -> fold id

    def indices(self, fold: int) -> np.ndarray:
        return np.nonzero(self.assignment == fold)[0]


# ---- parsing and serialization --------------------------------------------

def parse_corpus(lines) -> list[AnnotatedSentence]:
    """Parse corpus lines into one single-target sentence per data line."""
    sentences = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise CorpusError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
        text, pos_str, label = fields
        if not text:
            raise CorpusError("empty sentence", lineno)
        try:
            pos = int(pos_str)
        except ValueError:
            raise CorpusError(f"position {pos_str!r} is not an integer", lineno)
        if not 0 <= pos < len(text):
            raise CorpusError(
                f"position {pos} out of range for sentence of length {len(text)}", lineno)
        if not label:
            raise CorpusError("empty label", lineno)
        sentences.append(AnnotatedSentence(text, [(pos, label)]))
    return sentences


def serialize_corpus(sentences) -> str:
    out = []
    for s in sentences:
        for pos, label in s.targets:
            out.append(f"{s.chars}\t{pos}\t{label}\n")
    return "".join(out)


def parse_dictionary(lines) -> PronunciationDictionary:
    entries: dict[str, list[str]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise CorpusError(f"expected 2 tab-separated fields, got {len(fields)}", lineno)
        ch, prons = fields
        if len(ch) != 1:
            raise CorpusError(f"dictionary key {ch!r} is not a single character", lineno)
        if ch in entries:
            raise CorpusError(f"duplicate dictionary entry for {ch!r}", lineno)
        items = [p for p in prons.split(",") if p]
        if not items:
            raise CorpusError(f"no pronunciations for {ch!r}", lineno)
        if len(set(items)) != len(items):
            raise CorpusError(f"duplicate pronunciations for {ch!r}", lineno)
        entries[ch] = items
    return PronunciationDictionary(entries)


def serialize_dictionary(dictionary: PronunciationDictionary) -> str:
    return "".join(f"{ch}\t{','.join(prons)}\n" for ch, prons in dictionary.entries.items())


def parse_folds(lines) -> FoldAssignment:
    pairs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise CorpusError(f"expected 2 tab-separated fields, got {len(fields)}", lineno)
        pairs.append((int(fields[0]), int(fields[1])))
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise CorpusError("fold file does not cover sample indices 0..n-1 exactly")
    assignment = np.array([f for _, f in pairs], dtype=np.int64)
    return FoldAssignment(int(assignment.max()) + 1 if len(assignment) else 0, assignment)


def serialize_folds(folds: FoldAssignment) -> str:
    return "".join(f"{i}\t{int(f)}\n" for i, f in enumerate(folds.assignment))


# ---- inventory and folds ---------------------------------------------------

def build_inventory(corpus, dictionary: PronunciationDictionary,
                    min_count: int) -> PolyphoneInventory:
    """Admit polyphonic characters with strictly more than min_count samples."""
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    counts: dict[str, int] = {}
    total = 0
    for s in corpus:
        for pos, label in s.targets:
            ch = s.chars[pos]
            if ch not in dictionary:
                raise CorpusError(f"annotated character {ch!r} missing from dictionary")
            if label not in dictionary.entries[ch]:
                raise CorpusError(f"label {label!r} is not a dictionary pronunciation of {ch!r}")
            if dictionary.is_polyphonic(ch):
                counts[ch] = counts.get(ch, 0) + 1
                total += 1
    kept = {ch: n for ch, n in counts.items() if n > min_count}
    coverage = (sum(kept.values()) / total) if total else 1.0
    candidates = {ch: list(dictionary.entries[ch]) for ch in sorted(kept)}
    return PolyphoneInventory(candidates=candidates,
                              sample_counts={ch: kept[ch] for ch in sorted(kept)},
                              coverage=coverage)


def stratified_kfold(corpus, inventory: PolyphoneInventory, k: int,
                     seed: int) -> FoldAssignment:
    """Per-character round-robin after a seeded shuffle.

    Guarantees per-character fold counts differing by at most 1; the starting
    fold rotates per character so small groups do not all land in fold 0.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    by_char: dict[str, list[int]] = {}
    for idx, s in enumerate(corpus):
        pos, _ = s.targets[0]
        ch = s.chars[pos]
        if ch not in inventory:
            raise CorpusError(f"sample {idx}: character {ch!r} not in inventory")
        by_char.setdefault(ch, []).append(idx)
    assignment = np.full(len(corpus), -1, dtype=np.int64)
    rng = np.random.default_rng(seed)
    for ch in sorted(by_char):
        indices = by_char[ch]
        if len(indices) < k:
            log.warning("character %r has %d samples for %d folds; some folds get none",
                        ch, len(indices), k)
        order = rng.permutation(len(indices))
        start = int(rng.integers(k))
        for j, pick in enumerate(order):
            assignment[indices[pick]] = (start + j) % k
    return FoldAssignment(k, assignment)


# ---- dictionary routing ----------------------------------------------------

def g2p_route(sentence: str, dictionary: PronunciationDictionary,
              inventory: PolyphoneInventory, predictor) -> list[str]:
    """Route each character to a pronunciation.

    Monophonic characters use their dictionary entry; inventory characters go
    through ``predictor(sentence, position, character) -> label``; polyphonic
    characters outside the inventory fall back to the first dictionary entry
    with a warning.
    """
    out = []
    for pos, ch in enumerate(sentence):
        if ch not in dictionary:
            raise RoutingError(f"unknown character {ch!r} at position {pos}")
        prons = dictionary.entries[ch]
        if ch in inventory:
            label = predictor(sentence, pos, ch)
            if label not in inventory.candidates[ch]:
                raise InternalConsistencyError(
                    f"predictor returned {label!r} for {ch!r}, not in candidate set")
            out.append(label)
        elif len(prons) == 1:
            out.append(prons[0])
        else:
            log.warning("polyphonic character %r at position %d is outside the "
                        "inventory; using first dictionary pronunciation", ch, pos)
            out.append(prons[0])
    return out


# ---- synthetic corpus generation -------------------------------------------

_SYLLABLES = ["zha", "shi", "hang", "lei", "tou", "min", "chao", "qu", "ban",
              "ge", "xin", "wo", "ren", "fu", "dai", "kan", "liu", "pei",
              "song", "yun", "zhu", "mei", "hei", "nan", "tuo", "wei", "xu",
              "yao", "zai", "bo", "cun", "dian", "en", "fan", "gou", "hua"]

_FILLER_BASE = 0x4E00
_POLY_BASE = 0x5F00
_MARKER_BASE = 0x6C00


@dataclass
class SyntheticSpec:
    """Configuration of the marker-rule corpus generator.

    The filler alphabet is partitioned into disjoint topic blocks of
    ``doc_charset`` characters; every document draws from a single block, so
    consecutive sentences are recognizably related.  Within a sentence,
    fillers follow a cyclic successor chain (with probability ``chain_prob``
    the next filler is the next character of the block), so a masked filler
    is recoverable from any single neighbor at a known offset.  Each sample
    embeds one pseudo-polyphone whose label is determined by a marker
    character placed within ``marker_window`` positions; the polyphone and
    marker also re-anchor the chain phase to the label index, so every
    downstream filler carries the label redundantly.  Labels are learnable
    with no irreducible error.
    """

    n_polyphones: int = 5
    candidates_per_char: tuple[int, ...] = (2, 3, 4, 2, 3)
    samples_per_char: int = 2000
    filler_alphabet: int = 100
    doc_charset: int = 4
    doc_sentences: int = 10
    chain_prob: float = 0.98
    marker_window: int = 3
    sentence_len: tuple[int, int] = (6, 10)
    label_probs: dict[str, tuple[float, ...]] | None = None

    def __post_init__(self):
        if len(self.candidates_per_char) != self.n_polyphones:
            raise ValueError("need one candidate count per polyphone")
        if any(not 2 <= c <= 8 for c in self.candidates_per_char):
            raise ValueError("candidate counts must be in [2, 8]")
        if self.marker_window < 1:
            raise ValueError("marker_window must be >= 1")
        if self.sentence_len[0] < 2 or self.sentence_len[1] < self.sentence_len[0]:
            raise ValueError(f"bad sentence length range {self.sentence_len}")
        if self.marker_window >= self.sentence_len[0]:
            raise ValueError("marker_window must be smaller than the shortest sentence")
        if self.filler_alphabet % self.doc_charset != 0:
            raise ValueError("filler_alphabet must be a multiple of doc_charset")
        if not 0.0 <= self.chain_prob < 1.0:
            raise ValueError("chain_prob must be in [0, 1)")

    def polyphone_chars(self) -> list[str]:
        return [chr(_POLY_BASE + i) for i in range(self.n_polyphones)]

    def marker_char(self, poly_index: int, label_index: int) -> str:
        return chr(_MARKER_BASE + 8 * poly_index + label_index)

    def labels_for(self, poly_index: int) -> list[str]:
        syllable = _SYLLABLES[poly_index % len(_SYLLABLES)]
        return [f"{syllable}{t + 1}" for t in range(self.candidates_per_char[poly_index])]


@dataclass
class SyntheticCorpus:
    sentences: list[AnnotatedSentence]
    dictionary: PronunciationDictionary
    documents: list[list[int]] = field(default_factory=list)  # sentence indices per document

    def sentence_pairs(self) -> list[tuple[str, str]]:
        """Consecutive-sentence pairs within each document, in corpus order."""
        pairs = []
        for doc in self.documents:
            for a, b in zip(doc, doc[1:]):
                pairs.append((self.sentences[a].chars, self.sentences[b].chars))
        return pairs


def _synthetic_dictionary(spec: SyntheticSpec) -> PronunciationDictionary:
    entries: dict[str, list[str]] = {}
    for i in range(spec.filler_alphabet):
        syllable = _SYLLABLES[i % len(_SYLLABLES)]
        entries[chr(_FILLER_BASE + i)] = [f"{syllable}{i % 4 + 1}"]
    for j in range(spec.n_polyphones):
        entries[chr(_POLY_BASE + j)] = spec.labels_for(j)
        for c in range(spec.candidates_per_char[j]):
            syllable = _SYLLABLES[(j * 7 + c) % len(_SYLLABLES)]
            entries[spec.marker_char(j, c)] = [f"{syllable}5"]
    return PronunciationDictionary(entries)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticCorpus:
    """Generate a deterministic corpus whose labels follow the marker rule."""
    rng = np.random.default_rng(seed)
    dictionary = _synthetic_dictionary(spec)
    fillers = [chr(_FILLER_BASE + i) for i in range(spec.filler_alphabet)]
    polys = spec.polyphone_chars()

    total = spec.n_polyphones * spec.samples_per_char
    # round-robin over polyphones so the per-character counts are exact
    poly_sequence = [j for j in range(spec.n_polyphones) for _ in range(spec.samples_per_char)]
    rng.shuffle(poly_sequence)

    sentences: list[AnnotatedSentence] = []
    documents: list[list[int]] = []
    lo, hi = spec.sentence_len
    n_topics = spec.filler_alphabet // spec.doc_charset
    for start in range(0, total, spec.doc_sentences):
        topic = int(rng.integers(n_topics))
        doc_pool = fillers[topic * spec.doc_charset:(topic + 1) * spec.doc_charset]
        doc: list[int] = []
        for j in poly_sequence[start:start + spec.doc_sentences]:
            n = int(rng.integers(lo, hi + 1))
            # keep one filler on each side of the polyphone/marker pair so the
            # phase shift is always observable
            pos = int(rng.integers(1, n - 1))
            offsets = [d for d in range(-spec.marker_window, spec.marker_window + 1)
                       if d != 0 and 1 <= pos + d <= n - 2]
            offset = offsets[int(rng.integers(len(offsets)))]
            probs = None if spec.label_probs is None else spec.label_probs.get(polys[j])
            if probs is None:
                label_index = int(rng.integers(spec.candidates_per_char[j]))
            else:
                label_index = int(rng.choice(len(probs), p=probs))

            chars = []
            pool_size = len(doc_pool)
            state = int(rng.integers(pool_size))
            for t in range(n):
                if t == pos:
                    chars.append(polys[j])
                    state = label_index % pool_size  # phase anchor: label at i
                elif t == pos + offset:
                    chars.append(spec.marker_char(j, label_index))
                    state = (label_index + t - pos) % pool_size
                else:
                    if t > 0 and rng.random() >= spec.chain_prob:
                        state = int(rng.integers(pool_size))
                    else:
                        state = (state + 1) % pool_size
                    chars.append(doc_pool[state])
            label = spec.labels_for(j)[label_index]
            doc.append(len(sentences))
            sentences.append(AnnotatedSentence("".join(chars), [(pos, label)]))
        documents.append(doc)
    return SyntheticCorpus(sentences, dictionary, documents)


def expected_label(spec: SyntheticSpec, sentence: str, position: int) -> str:
    """Recover the label from the marker rule alone (the generator's oracle)."""
    poly_index = ord(sentence[position]) - _POLY_BASE
    for d in range(-spec.marker_window, spec.marker_window + 1):
        if d == 0 or not 0 <= position + d < len(sentence):
            continue
        code = ord(sentence[position + d]) - _MARKER_BASE
        if 8 * poly_index <= code < 8 * poly_index + spec.candidates_per_char[poly_index]:
            return spec.labels_for(poly_index)[code - 8 * poly_index]
    raise CorpusError(f"no marker found near position {position} in {sentence!r}")

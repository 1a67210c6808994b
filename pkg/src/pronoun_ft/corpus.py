"""Parallel corpora: container, text I/O, vocabulary, and a synthetic pronoun task.

The synthetic language pair is built so that pronoun translation depends on
context. The source side has a single ambiguous pronoun token; its target
rendering (he / she / it / they) is fixed by the most recent noun. That noun
sits either earlier in the same sentence or in the previous sentence, so a
sentence-level model can only resolve the first kind.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import SPECIAL_TOKENS, UNK

GENDER_PRONOUN = {"masc": "he", "fem": "she", "neut": "it"}
PLURAL_PRONOUN = "they"
TARGET_PRONOUNS = ("he", "she", "it", "they")

# function words; letters chosen so they never collide with generated words
SRC_PRONOUN, SRC_DET, SRC_DET_PL, SRC_AND = "ero", "di", "dai", "unt"
TGT_DET, TGT_DET_PL, TGT_AND = "the", "these", "and"


@dataclass(frozen=True)
class PronounAnnotation:
    line: int
    position: int
    pronoun: str
    antecedent_line: int


@dataclass
class ParallelCorpus:
    """Document-ordered sentence pairs.

    ``doc_starts`` lists the 0-based index of each document's first pair.
    Subsets carry ``prev_src`` explicitly (the previous source sentence in the
    original corpus, empty at a document start) and ``index`` (original line
    numbers), so context survives extraction.
    """

    pairs: list
    doc_starts: list = field(default_factory=lambda: [0])
    prev_src: list | None = None
    index: list | None = None
    annotations: list | None = None
    lexicon: dict | None = None

    def __post_init__(self):
        self.pairs = [(list(s), list(t)) for s, t in self.pairs]
        starts = sorted(set(int(i) for i in self.doc_starts))
        if self.pairs and (not starts or starts[0] != 0):
            starts = [0] + starts
        if not self.pairs:
            starts = []
        for i in starts:
            if not 0 <= i < len(self.pairs):
                raise ValueError(f"document boundary {i} outside corpus of {len(self.pairs)} pairs")
        self.doc_starts = starts
        if self.prev_src is not None and len(self.prev_src) != len(self.pairs):
            raise ValueError("prev_src must parallel pairs")
        if self.index is not None and len(self.index) != len(self.pairs):
            raise ValueError("index must parallel pairs")

    def __len__(self):
        return len(self.pairs)

    @property
    def sources(self):
        return [s for s, _ in self.pairs]

    @property
    def targets(self):
        return [t for _, t in self.pairs]

    def context(self, i: int) -> list:
        """Previous source sentence of pair ``i``; never crosses a document boundary."""
        if self.prev_src is not None:
            return list(self.prev_src[i])
        if i == 0 or i in self._start_set():
            return []
        return list(self.pairs[i - 1][0])

    def _start_set(self):
        cache = getattr(self, "_starts_cache", None)
        if cache is None or cache[0] is not self.doc_starts:
            cache = (self.doc_starts, set(self.doc_starts))
            self._starts_cache = cache
        return cache[1]

    def doc_ids(self) -> np.ndarray:
        ids = np.zeros(len(self.pairs), dtype=np.int64)
        for d, start in enumerate(self.doc_starts):
            ids[start:] = d
        return ids

    def subset(self, indices: Sequence[int]) -> "ParallelCorpus":
        indices = [int(i) for i in indices]
        starts_set = self._start_set()
        base = self.index if self.index is not None else list(range(len(self.pairs)))
        return ParallelCorpus(
            pairs=[self.pairs[i] for i in indices],
            doc_starts=[k for k, i in enumerate(indices) if i in starts_set],
            prev_src=[self.context(i) for i in indices],
            index=[base[i] for i in indices],
            lexicon=self.lexicon,
        )

    def with_random_context(self, seed: int) -> "ParallelCorpus":
        """Replace each previous sentence by a random other source sentence (fixed per seed)."""
        rng = np.random.default_rng(seed)
        n = len(self.pairs)
        picks = rng.integers(0, max(n - 1, 1), size=n)
        ctx = []
        for i, j in enumerate(picks):
            j = int(j) + (1 if n > 1 and j >= i else 0)
            ctx.append(list(self.pairs[j][0]) if n > 1 else [])
        return ParallelCorpus(self.pairs, self.doc_starts, ctx, self.index, self.annotations, self.lexicon)

    def concatenated(self, other: "ParallelCorpus") -> "ParallelCorpus":
        offset = len(self)
        return ParallelCorpus(
            pairs=self.pairs + other.pairs,
            doc_starts=self.doc_starts + [offset + s for s in other.doc_starts],
            prev_src=[self.context(i) for i in range(len(self))] + [other.context(i) for i in range(len(other))],
            lexicon=self.lexicon,
        )


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    """Token <-> id bijection; ids 0-4 are reserved for special tokens."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(SPECIAL_TOKENS)
        for tok in tokens:
            if tok not in SPECIAL_TOKENS:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list:
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(SPECIAL_TOKENS):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def build_vocab(corpus: ParallelCorpus, side: str = "joint") -> Vocab:
    """Order: specials, then descending frequency, then lexicographic."""
    if len(corpus) == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if side not in ("source", "target", "joint"):
        raise ValueError(f"side must be source, target or joint, got {side!r}")
    counts = Counter()
    for s, t in corpus.pairs:
        if side in ("source", "joint"):
            counts.update(s)
        if side in ("target", "joint"):
            counts.update(t)
    for tok in SPECIAL_TOKENS:
        counts.pop(tok, None)
    return Vocab(sorted(counts, key=lambda tok: (-counts[tok], tok)))


# ---------------------------------------------------------------------------
# text I/O


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _write_lines(path, lines):
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    os.replace(tmp, path)


def read_parallel(src_path, tgt_path, docs_path=None, ctx_path=None, idx_path=None) -> ParallelCorpus:
    src = _read_lines(src_path)
    tgt = _read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"line-count mismatch: {src_path} has {len(src)} lines, {tgt_path} has {len(tgt)}")
    starts = [0]
    if docs_path is not None and os.path.exists(docs_path):
        starts = []
        for lineno, line in enumerate(_read_lines(docs_path), 1):
            if not line.strip():
                continue
            try:
                value = int(line)
            except ValueError:
                raise ValueError(f"{docs_path}:{lineno}: malformed boundary index {line!r}") from None
            if not 0 <= value < max(len(src), 1):
                raise ValueError(f"{docs_path}:{lineno}: boundary {value} outside corpus of {len(src)} lines")
            if starts and value <= starts[-1]:
                raise ValueError(f"{docs_path}:{lineno}: boundaries must be strictly increasing")
            starts.append(value)
    prev = None
    if ctx_path is not None and os.path.exists(ctx_path):
        prev = [line.split() for line in _read_lines(ctx_path)]
        if len(prev) != len(src):
            raise ValueError(f"line-count mismatch: {ctx_path} has {len(prev)} lines, expected {len(src)}")
    index = None
    if idx_path is not None and os.path.exists(idx_path):
        index = [int(x) for x in _read_lines(idx_path) if x.strip()]
    return ParallelCorpus([(s.split(), t.split()) for s, t in zip(src, tgt)], starts, prev, index)


def write_parallel(corpus: ParallelCorpus, prefix) -> dict:
    """Write ``prefix.src/.tgt/.docs`` (+ ``.ctx``, ``.idx``, ``.prn`` when present)."""
    prefix = os.fspath(prefix)
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    paths = {"src": prefix + ".src", "tgt": prefix + ".tgt", "docs": prefix + ".docs"}
    _write_lines(paths["src"], (" ".join(s) for s, _ in corpus.pairs))
    _write_lines(paths["tgt"], (" ".join(t) for _, t in corpus.pairs))
    _write_lines(paths["docs"], (str(i) for i in corpus.doc_starts))
    if corpus.prev_src is not None:
        paths["ctx"] = prefix + ".ctx"
        _write_lines(paths["ctx"], (" ".join(c) for c in corpus.prev_src))
    if corpus.index is not None:
        paths["idx"] = prefix + ".idx"
        _write_lines(paths["idx"], (str(i) for i in corpus.index))
    if corpus.annotations is not None:
        paths["prn"] = prefix + ".prn"
        _write_lines(
            paths["prn"],
            (f"{a.line}\t{a.position}\t{a.pronoun}\t{a.antecedent_line}" for a in corpus.annotations),
        )
    return paths


def read_prefix(prefix) -> ParallelCorpus:
    prefix = os.fspath(prefix)
    return read_parallel(
        prefix + ".src", prefix + ".tgt", prefix + ".docs", prefix + ".ctx", prefix + ".idx"
    )


def read_annotations(path) -> list:
    rows = []
    for line in _read_lines(path):
        if line.strip():
            a, b, c, d = line.split("\t")
            rows.append(PronounAnnotation(int(a), int(b), c, int(d)))
    return rows


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticConfig:
    num_docs: int = 500
    sents_per_doc: int = 40
    content_vocab: int = 120
    noun_genders: tuple = (150, 150, 150)  # masc, fem, neut
    cross_sentence_pronoun_ratio: float = 0.5
    pronoun_density: float = 0.6
    word_order_shuffle: float = 0.3
    plural_ratio: float = 0.1
    noun_zipf: float = 1.1
    seed: int = 1
    lexicon_seed: int = 0

    def validate(self):
        for name in ("cross_sentence_pronoun_ratio", "pronoun_density", "word_order_shuffle", "plural_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.content_vocab < 3:
            raise ValueError("content_vocab must be at least 3 (verbs, adjectives, adverbs)")
        if len(self.noun_genders) != 3 or sum(self.noun_genders) < 1 or min(self.noun_genders) < 0:
            raise ValueError("noun_genders needs three non-negative sizes with a positive total")
        if self.num_docs < 1 or self.sents_per_doc < 1:
            raise ValueError("num_docs and sents_per_doc must be positive")
        return self


@dataclass
class Lexicon:
    nouns: list  # (src, tgt, gender)
    verbs: list  # (src, tgt)
    adjectives: list
    adverbs: list

    @property
    def noun_gender(self) -> dict:
        return {tgt: g for _, tgt, g in self.nouns}

    @property
    def src_noun_gender(self) -> dict:
        return {src: g for src, _, g in self.nouns}

    @property
    def dictionary(self) -> dict:
        pairs = [(s, t) for s, t, _ in self.nouns] + self.verbs + self.adjectives + self.adverbs
        pairs += [(SRC_DET, TGT_DET), (SRC_DET_PL, TGT_DET_PL), (SRC_AND, TGT_AND)]
        return dict(pairs)


def _pseudo_words(rng, count, consonants, vowels, taken):
    words = []
    while len(words) < count:
        n = int(rng.integers(2, 4))
        w = "".join(rng.choice(list(consonants)) + rng.choice(list(vowels)) for _ in range(n))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def make_lexicon(config: SyntheticConfig) -> Lexicon:
    rng = np.random.default_rng([config.lexicon_seed, 7])
    n_nouns = sum(config.noun_genders)
    k = config.content_vocab
    n_verbs, n_adj = max(1, int(0.4 * k)), max(1, int(0.3 * k))
    n_adv = max(1, k - n_verbs - n_adj)
    total = n_nouns + n_verbs + n_adj + n_adv
    src = _pseudo_words(rng, total, "kmtzrv", "aou", set())
    tgt = _pseudo_words(rng, total, "bcfglnps", "eiy", set())
    genders = ["masc"] * config.noun_genders[0] + ["fem"] * config.noun_genders[1] + ["neut"] * config.noun_genders[2]
    genders = [genders[i] for i in rng.permutation(n_nouns)]
    nouns = [(src[i], tgt[i], genders[i]) for i in range(n_nouns)]
    rest = list(zip(src[n_nouns:], tgt[n_nouns:]))
    return Lexicon(nouns, rest[:n_verbs], rest[n_verbs : n_verbs + n_adj], rest[n_verbs + n_adj :])


class _SentenceBuilder:
    def __init__(self):
        self.src, self.tgt = [], []
        self.nouns = []  # (noun target token, plural) in order of appearance
        self.pronoun_pos = None

    def word(self, pair):
        self.src.append(pair[0])
        self.tgt.append(pair[1])

    def np_(self, noun, plural, adjective):
        # source is noun-adjective, target adjective-noun
        self.src.append(SRC_DET_PL if plural else SRC_DET)
        self.tgt.append(TGT_DET_PL if plural else TGT_DET)
        self.src.append(noun[0])
        if adjective is not None:
            self.src.append(adjective[0])
            self.tgt.append(adjective[1])
        self.tgt.append(noun[1])
        self.nouns.append((noun[1], noun[2], plural))

    def pronoun(self, antecedent):
        _, gender, plural = antecedent
        self.src.append(SRC_PRONOUN)
        self.pronoun_pos = len(self.tgt)
        self.tgt.append(PLURAL_PRONOUN if plural else GENDER_PRONOUN[gender])


def generate_synthetic(config: SyntheticConfig) -> ParallelCorpus:
    """Deterministic synthetic corpus with a gold pronoun sidecar (``annotations``)."""
    config.validate()
    lex = make_lexicon(config)
    rng = np.random.default_rng([config.seed, 11])
    ranks = np.arange(1, len(lex.nouns) + 1, dtype=np.float64)
    weights = ranks ** (-config.noun_zipf)
    weights /= weights.sum()
    # shuffle which noun gets which frequency rank so genders are spread across ranks
    order = np.random.default_rng([config.lexicon_seed, 13]).permutation(len(lex.nouns))
    noun_probs = np.empty_like(weights)
    noun_probs[order] = weights

    def draw(items):
        return items[int(rng.integers(len(items)))]

    def noun_phrase(b):
        noun = lex.nouns[int(rng.choice(len(lex.nouns), p=noun_probs))]
        plural = bool(rng.random() < config.plural_ratio)
        adj = draw(lex.adjectives) if rng.random() < config.word_order_shuffle else None
        b.np_(noun, plural, adj)

    def adverbs(b, most):
        for _ in range(int(rng.integers(0, most + 1))):
            b.word(draw(lex.adverbs))

    pairs, starts, notes = [], [], []
    for _ in range(config.num_docs):
        starts.append(len(pairs))
        last_noun = None  # (target noun, gender, plural, line)
        for k in range(config.sents_per_doc):
            line = len(pairs)
            b = _SentenceBuilder()
            antecedent_line = None
            has_pronoun = rng.random() < config.pronoun_density
            cross = rng.random() < config.cross_sentence_pronoun_ratio
            if has_pronoun and cross and last_noun is not None:
                # pronoun opens the sentence: antecedent is the previous sentence's last noun
                b.pronoun(last_noun[:3])
                antecedent_line = last_noun[3]
                b.word(draw(lex.verbs))
                noun_phrase(b)
                adverbs(b, 1)
            elif has_pronoun and not cross:
                noun_phrase(b)
                b.word(draw(lex.verbs))
                if rng.random() < 0.5:
                    noun_phrase(b)
                b.word((SRC_AND, TGT_AND))
                b.pronoun(b.nouns[-1])
                antecedent_line = line
                b.word(draw(lex.verbs))
                if rng.random() < 0.5:
                    noun_phrase(b)
                adverbs(b, 1)
            else:
                noun_phrase(b)
                b.word(draw(lex.verbs))
                if rng.random() < 0.6:
                    noun_phrase(b)
                adverbs(b, 2)
            if b.pronoun_pos is not None:
                notes.append(PronounAnnotation(line, b.pronoun_pos, b.tgt[b.pronoun_pos], antecedent_line))
            pairs.append((b.src, b.tgt))
            last_noun = b.nouns[-1] + (line,)
    corpus = ParallelCorpus(pairs, starts)
    corpus.annotations = notes
    corpus.lexicon = lex
    return corpus


def cross_sentence_fraction(corpus: ParallelCorpus) -> float:
    notes = corpus.annotations or []
    if not notes:
        return 0.0
    return sum(a.antecedent_line != a.line for a in notes) / len(notes)


"""IBM Model 1 aligner for system hypotheses against references.

Hypothesis tokens are generated from reference tokens, so every hypothesis
token receives one reference parent. An optional NULL parent absorbs tokens
with no counterpart; it is off by default because it slows EM down on short
sentences, where every token usually does have a counterpart. The EM loop is fully
vectorised: all (hypothesis token, candidate parent) pairs of the bitext are
flattened once and expected counts are gathered with ``np.bincount``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NULL = "<null>"
NULL_INDEX = -1
FLOOR = 1e-12


@dataclass
class TranslationTable:
    """``t[ref_word][hyp_word]`` = probability of producing ``hyp_word`` from ``ref_word``."""

    t: dict
    ref_vocab: list = field(default_factory=list)
    hyp_vocab: list = field(default_factory=list)

    def prob(self, hyp_word: str, ref_word: str) -> float:
        return self.t.get(ref_word, {}).get(hyp_word, FLOOR)

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in sorted(self.t):
                for h in sorted(self.t[r]):
                    fh.write(f"{r}\t{h}\t{self.t[r][h]!r}\n")

    @classmethod
    def read_tsv(cls, path):
        t = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    r, h, p = line.rstrip("\n").split("\t")
                    t.setdefault(r, {})[h] = float(p)
        hyp = sorted({h for row in t.values() for h in row})
        return cls(t, sorted(t), hyp)


class _Flattened:
    """All candidate (hyp token, parent) pairs of a bitext, as index arrays."""

    def __init__(self, bitext, null: bool):
        ref_words = sorted({w for _, ref in bitext for w in ref} | ({NULL} if null else set()))
        hyp_words = sorted({w for hyp, _ in bitext for w in hyp})
        self.ref_words, self.hyp_words = ref_words, hyp_words
        r_id = {w: i for i, w in enumerate(ref_words)}
        h_id = {w: i for i, w in enumerate(hyp_words)}
        n_hyp = len(hyp_words)
        keys, tok, norm = [], [], []
        tok_count = 0
        for hyp, ref in bitext:
            parents = np.array(([r_id[NULL]] if null else []) + [r_id[w] for w in ref], dtype=np.int64)
            if parents.size == 0:
                continue  # nothing to align to
            for w in hyp:
                keys.append(parents * n_hyp + h_id[w])
                tok.append(np.full(len(parents), tok_count, dtype=np.int64))
                norm.append(len(parents))
                tok_count += 1
        if keys:
            flat = np.concatenate(keys)
            self.tok = np.concatenate(tok)
        else:
            flat = np.zeros(0, dtype=np.int64)
            self.tok = np.zeros(0, dtype=np.int64)
        # unique (ref, hyp) parameters that ever co-occur
        self.params, self.pair = np.unique(flat, return_inverse=True)
        self.param_ref = self.params // n_hyp
        self.param_hyp = self.params % n_hyp
        self.n_tokens = tok_count
        self.parent_counts = np.array(norm, dtype=np.float64)

    def uniform(self) -> np.ndarray:
        per_ref = np.bincount(self.param_ref, minlength=len(self.ref_words)).astype(np.float64)
        return 1.0 / per_ref[self.param_ref]

    def log_likelihood(self, theta: np.ndarray) -> float:
        if self.n_tokens == 0:
            return 0.0
        denom = np.bincount(self.tok, weights=theta[self.pair], minlength=self.n_tokens)
        return float(np.sum(np.log(denom / self.parent_counts)))

    def em_step(self, theta: np.ndarray) -> np.ndarray:
        p = theta[self.pair]
        denom = np.bincount(self.tok, weights=p, minlength=self.n_tokens)
        post = p / denom[self.tok]
        counts = np.bincount(self.pair, weights=post, minlength=len(self.params))
        totals = np.bincount(self.param_ref, weights=counts, minlength=len(self.ref_words))
        return counts / totals[self.param_ref]

    def table(self, theta: np.ndarray) -> TranslationTable:
        t = {}
        for r, h, p in zip(self.param_ref.tolist(), self.param_hyp.tolist(), theta.tolist()):
            t.setdefault(self.ref_words[r], {})[self.hyp_words[h]] = p
        return TranslationTable(t, [w for w in self.ref_words if w != NULL], list(self.hyp_words))


def ibm1_train(bitext, iterations: int = 5, return_history: bool = False, null: bool = False):
    """Fit ``t(hyp | ref)`` by EM from a uniform-over-co-occurrence start.

    ``bitext`` is a list of ``(hyp_tokens, ref_tokens)``. With
    ``return_history`` the log-likelihood before the first and after every
    iteration is returned alongside the table.
    """
    bitext = [(list(h), list(r)) for h, r in bitext]
    if not bitext:
        raise ValueError("cannot train an aligner on an empty bitext")
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    flat = _Flattened(bitext, null)
    theta = flat.uniform()
    history = [flat.log_likelihood(theta)]
    for _ in range(iterations):
        theta = flat.em_step(theta)
        history.append(flat.log_likelihood(theta))
    table = flat.table(theta)
    return (table, history) if return_history else table


def viterbi_align(table: TranslationTable, hyp, ref) -> set:
    """Best parent for each hypothesis token; NULL-aligned tokens are dropped.

    Ties go to the lowest reference index; NULL wins only when strictly better.
    """
    links = set()
    if not hyp or not ref:
        return links
    for j, h in enumerate(hyp):
        best_i, best_p = 0, table.prob(h, ref[0])
        for i in range(1, len(ref)):
            p = table.prob(h, ref[i])
            if p > best_p:
                best_i, best_p = i, p
        if table.prob(h, NULL) > best_p:
            continue
        links.add((j, best_i))
    return links


def align_corpus(hyps, refs, iterations: int = 5, null: bool = False):
    table = ibm1_train(list(zip(hyps, refs)), iterations, null=null)
    return table, [viterbi_align(table, h, r) for h, r in zip(hyps, refs)]


def format_pharaoh(links) -> str:
    return " ".join(f"{j}-{i}" for j, i in sorted(links))


def parse_pharaoh(line: str) -> set:
    links = set()
    for item in line.split():
        a, _, b = item.partition("-")
        try:
            links.add((int(a), int(b)))
        except ValueError:
            raise ValueError(f"malformed alignment link {item!r}") from None
    return links


def write_pharaoh(alignments, path):
    with open(path, "w", encoding="utf-8") as fh:
        for links in alignments:
            fh.write(format_pharaoh(links) + "\n")


def read_pharaoh(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [parse_pharaoh(line) for line in fh]


def log_likelihood(table: TranslationTable, bitext, null: bool = False) -> float:
    """Bitext log-likelihood under IBM-1 with uniform alignment over the reference (plus NULL)."""
    total = 0.0
    for hyp, ref in bitext:
        parents = ([NULL] if null else []) + list(ref)
        if not parents:
            continue
        for h in hyp:
            total += math.log(sum(table.prob(h, r) for r in parents) / len(parents))
    return total

"""Pronoun-targeted subset extraction and the size-matched random control subset."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .corpus import ParallelCorpus


@dataclass
class PronounInventory:
    pronouns: tuple
    equivalence: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pronouns = tuple(p.lower() for p in self.pronouns)
        self.equivalence = {k.lower(): {a.lower() for a in v} for k, v in self.equivalence.items()}
        unknown = set(self.equivalence) - set(self.pronouns)
        if unknown:
            raise ValueError(f"equivalence keys not in the pronoun list: {sorted(unknown)}")

    def acceptable(self, pronoun: str) -> set:
        p = pronoun.lower()
        return {p} | self.equivalence.get(p, set())


def parse_inventory(text: str) -> PronounInventory:
    """Lines of ``pronoun: alt1, alt2``; a bare ``pronoun`` has no alternatives; ``#`` comments."""
    pronouns, equiv = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, sep, tail = line.partition(":")
        head = head.strip().lower()
        if not head or " " in head:
            raise ValueError(f"inventory line {lineno}: bad pronoun entry {raw!r}")
        pronouns.append(head)
        if sep:
            alts = [a.strip().lower() for a in tail.split(",") if a.strip()]
            if alts:
                equiv[head] = set(alts)
    return PronounInventory(tuple(pronouns), equiv)


def load_inventory(path=None) -> PronounInventory:
    if path is None:
        text = resources.files("pronoun_ft").joinpath("data/pronouns.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_inventory(text)


@dataclass
class MismatchRecord:
    sentence_index: int
    ref_position: int
    ref_pronoun: str
    aligned_hyp_tokens: list


def find_pronoun_mismatches(hyps, refs, alignments, inventory: PronounInventory, unaligned_is_mismatch=True):
    """Reference pronouns whose aligned hypothesis tokens contain no acceptable rendering."""
    if not len(hyps) == len(refs) == len(alignments):
        raise ValueError(
            f"parallel inputs differ in length: {len(hyps)} hyps, {len(refs)} refs, {len(alignments)} alignments"
        )
    pronouns = set(inventory.pronouns)
    records = []
    for s, (hyp, ref, links) in enumerate(zip(hyps, refs, alignments)):
        linked = {}
        for j, i in links:
            if not (0 <= j < len(hyp) and 0 <= i < len(ref)):
                raise ValueError(f"sentence {s}: alignment link {j}-{i} out of bounds")
            linked.setdefault(i, []).append(j)
        for i, tok in enumerate(ref):
            p = tok.lower()
            if p not in pronouns:
                continue
            aligned = [hyp[j] for j in sorted(linked.get(i, []))]
            if not aligned:
                if unaligned_is_mismatch:
                    records.append(MismatchRecord(s, i, p, []))
                continue
            ok = inventory.acceptable(p)
            if not any(a.lower() in ok for a in aligned):
                records.append(MismatchRecord(s, i, p, aligned))
    return records


def build_targeted_subset(corpus: ParallelCorpus, hyps, alignments, inventory, records=None, unaligned_is_mismatch=True):
    """Pairs with at least one mismatched reference pronoun, in corpus order, once each."""
    if records is None:
        records = find_pronoun_mismatches(hyps, corpus.targets, alignments, inventory, unaligned_is_mismatch)
    keep = sorted({r.sentence_index for r in records})
    return corpus.subset(keep)


def sample_random_subset(corpus: ParallelCorpus, size: int, seed: int) -> ParallelCorpus:
    if size < 0:
        raise ValueError("size must be non-negative")
    n = len(corpus)
    k = min(size, n)
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    return corpus.subset(picks.tolist())


def write_mismatch_report(records, path):
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("sentence_index\tref_pronoun\taligned_tokens\n")
        for r in records:
            fh.write(f"{r.sentence_index}\t{r.ref_pronoun}\t{' '.join(r.aligned_hyp_tokens)}\n")
    os.replace(tmp, path)

"""Corpus BLEU and a clipped-count pronoun precision / recall / F1.

Both metrics expect pre-tokenised, lowercased sentences (token lists or
whitespace-joined strings).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction


def _tokens(sentence):
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuReport:
    score: float
    ngram_precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def corpus_bleu(hyps, refs, max_n: int = 4, smoothing: str = "none") -> BleuReport:
    if len(hyps) != len(refs):
        raise ValueError(f"length mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    if smoothing not in ("none", "floor"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = ngram_counts(h, n), ngram_counts(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = []
    for m, t in zip(matches, totals):
        if smoothing == "floor" and m == 0:
            precisions.append(0.01 / max(t, 1))
        else:
            precisions.append(m / t if t else 0.0)
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


@dataclass
class PronounStats:
    tp: int
    sys_total: int
    ref_total: int
    precision: float
    recall: float
    f1: float


@dataclass
class PronounReport:
    per_type: dict = field(default_factory=dict)
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    macro_f1: float = 0.0


def pronoun_prf(hyps, refs, pronoun_set) -> PronounReport:
    """Per-type clipped counts ``min(count in hyp, count in ref)`` per sentence, macro-averaged.

    Types that occur in neither hypotheses nor references are left out of the
    averages. Arithmetic is exact (fractions) until the final conversion.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"length mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    types = sorted({p.lower() for p in pronoun_set})
    tp = dict.fromkeys(types, 0)
    sys_total = dict.fromkeys(types, 0)
    ref_total = dict.fromkeys(types, 0)
    for h, r in zip(hyps, refs):
        hc = Counter(t.lower() for t in _tokens(h))
        rc = Counter(t.lower() for t in _tokens(r))
        for p in types:
            tp[p] += min(hc[p], rc[p])
            sys_total[p] += hc[p]
            ref_total[p] += rc[p]
    report = PronounReport()
    sums = [Fraction(0)] * 3
    included = 0
    for p in types:
        prec = Fraction(tp[p], sys_total[p]) if sys_total[p] else Fraction(0)
        rec = Fraction(tp[p], ref_total[p]) if ref_total[p] else Fraction(0)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        report.per_type[p] = PronounStats(tp[p], sys_total[p], ref_total[p], float(prec), float(rec), float(f1))
        if sys_total[p] or ref_total[p]:
            included += 1
            sums = [sums[0] + prec, sums[1] + rec, sums[2] + f1]
    if included:
        report.macro_precision, report.macro_recall, report.macro_f1 = (float(s / included) for s in sums)
    return report


def report_lines(bleu: BleuReport | None, prf: PronounReport | None) -> list:
    """Machine-readable ``key = value`` lines; BLEU on a 0-100 scale, P/R/F1 as fractions."""
    out = []
    if bleu is not None:
        out.append(f"bleu = {bleu.score:.4f}")
        out.append(f"bp = {bleu.brevity_penalty:.6f}")
        for i, p in enumerate(bleu.ngram_precisions, 1):
            out.append(f"p{i} = {p:.6f}")
        out.append(f"hyp_len = {bleu.hyp_len}")
        out.append(f"ref_len = {bleu.ref_len}")
    if prf is not None:
        out.append(f"macro_precision = {prf.macro_precision:.6f}")
        out.append(f"macro_recall = {prf.macro_recall:.6f}")
        out.append(f"macro_f1 = {prf.macro_f1:.6f}")
        for p, s in prf.per_type.items():
            out.append(
                f"type.{p} = tp:{s.tp} sys:{s.sys_total} ref:{s.ref_total} "
                f"p:{s.precision:.6f} r:{s.recall:.6f} f1:{s.f1:.6f}"
            )
    return out


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, _, v = line.partition("=")
            v = v.strip()
            try:
                out[k.strip()] = float(v)
            except ValueError:
                out[k.strip()] = v
    return out

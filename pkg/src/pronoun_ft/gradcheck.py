"""Finite-difference checks of the analytic loss gradients.

Two levels are checked for every loss configuration:

* logit level: the gradient returned by ``hybrid_loss_packed`` against central
  differences of its value, on random logit matrices;
* parameter level: the gradient reaching the model parameters through
  ``loss_and_grads`` against central differences of the loss with respect to
  randomly chosen parameter coordinates of a tiny model.

The discriminative terms are piecewise smooth (argmax negative selection, hinge),
so problems whose logits sit within a small margin of a kink are redrawn; the
finite difference is meaningless across a kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import torch

from . import loss as L
from .model import ModelConfig, batch_logits, init_model, loss_and_grads, pack_rows
from .trainer import smoothed_ce_rows

LOGIT_TOL = 1e-4
PARAM_TOL = 1e-3
ABS_FLOOR = 1e-8


def check_specs():
    """``(name, LossSpec, generative)`` for every configuration under test."""
    out = [
        ("clm", L.LossSpec(kind="clm"), None),
        ("clm-smoothed", L.LossSpec(kind="clm"), partial(smoothed_ce_rows, eps=0.1)),
    ]
    for kind in ("hybrid-nll", "hybrid-mm"):
        for mask in L.MASK_POLICIES:
            for neg in L.NEGATIVE_POLICIES:
                spec = L.LossSpec(kind=kind, mask_policy=mask, negative_policy=neg)
                out.append((f"{kind}/{mask}/{neg}", spec, None))
    return out


@dataclass
class CheckResult:
    level: str
    name: str
    tol: float
    checks: int = 0
    failures: int = 0
    max_rel: float = 0.0
    max_abs: float = 0.0
    redraws: int = 0

    @property
    def passed(self) -> bool:
        return self.checks > 0 and self.failures == 0

    def add(self, analytic, numeric):
        analytic = np.asarray(analytic, dtype=np.float64).ravel()
        numeric = np.asarray(numeric, dtype=np.float64).ravel()
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)
        bad = (rel > self.tol) & (diff > ABS_FLOOR)
        self.checks += analytic.size
        self.failures += int(bad.sum())
        # relative error is reported only for entries that are not numerically zero
        counted = np.where(scale > 1e-6, rel, 0.0)
        if analytic.size:
            self.max_rel = max(self.max_rel, float(counted.max()))
            self.max_abs = max(self.max_abs, float(diff.max()))


def near_kink(logits, refs, mask, spec, margin) -> bool:
    """True when a small logit perturbation could flip a negative choice or a hinge."""
    if not spec.discriminative:
        return False
    rows = np.arange(logits.shape[0])
    cand = logits.copy()
    if spec.negative_policy == "max-excluding-reference":
        cand[rows, refs] = -np.inf
    top2 = np.sort(cand, axis=1)[:, -2:]
    use = mask if spec.mask_policy == "pronoun-only" else np.ones(len(refs), dtype=bool)
    if np.any(use & (top2[:, 1] - top2[:, 0] < margin)):
        return True
    if spec.kind == "hybrid-mm":
        neg = L.negative_indices(logits, refs, spec.negative_policy)
        slack = spec.mu - logits[rows, refs] + logits[rows, neg]
        if np.any(use & (neg != refs) & (np.abs(slack) < margin)):
            return True
    return False


def _random_packed(rng):
    num = int(rng.integers(1, 4))
    lengths = rng.integers(1, 5, size=num)
    sent_ids = np.repeat(np.arange(num), lengths)
    n, v = int(lengths.sum()), int(rng.integers(3, 8))
    logits = rng.normal(scale=1.5, size=(n, v))
    refs = rng.integers(0, v, size=n)
    mask = rng.random(n) < 0.5
    return logits, refs, mask, sent_ids, num


def logit_check(seed: int, results: dict, h: float = 1e-6, max_redraws: int = 100):
    rng = np.random.default_rng([seed, 0])
    for name, spec, gen in check_specs():
        res = results.setdefault(("logit", name), CheckResult("logit", name, LOGIT_TOL))
        for _ in range(max_redraws):
            logits, refs, mask, sent_ids, num = _random_packed(rng)
            if not near_kink(logits, refs, mask, spec, 100 * h):
                break
            res.redraws += 1
        else:
            raise RuntimeError(f"{name}: no kink-free problem after {max_redraws} draws")

        def f(x):
            return L.hybrid_loss_packed(x, refs, mask, sent_ids, num, spec, gen)[0].total

        _, grad = L.hybrid_loss_packed(logits, refs, mask, sent_ids, num, spec, gen)
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(*logits.shape):
            plus, minus = logits.copy(), logits.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric[idx] = (f(plus) - f(minus)) / (2 * h)
        res.add(grad, numeric)


TINY = ModelConfig(vocab_size=11, d_model=8, heads=2, enc_layers=1, dec_layers=1, ffn_dim=16, dropout=0.0, max_len=12)


def _random_batch(rng, vocab):
    batch, masks = [], []
    for _ in range(int(rng.integers(1, 4))):
        src = rng.integers(5, vocab, size=int(rng.integers(1, 6))).tolist()
        tgt = rng.integers(5, vocab, size=int(rng.integers(1, 6))).tolist()
        batch.append((src, tgt))
        masks.append(rng.random(len(tgt)) < 0.5)
    return batch, masks


def _rows(model, batch, masks, mask_policy):
    with torch.no_grad():
        logits, lengths = batch_logits(model, batch)
    flat, refs, flags, sent_ids, _ = pack_rows(logits.numpy(), batch, lengths, masks, mask_policy)
    return flat, refs, flags, sent_ids


def param_check(seed: int, results: dict, coords: int = 4, h: float = 1e-6, max_redraws: int = 100):
    rng = np.random.default_rng([seed, 1])
    model = init_model(TINY, seed)
    model.eval()
    specs = check_specs()
    for _ in range(max_redraws):
        batch, masks = _random_batch(rng, TINY.vocab_size)
        ok = True
        for name, spec, _ in specs:
            flat, refs, flags, _ = _rows(model, batch, masks, spec.mask_policy)
            if near_kink(flat, refs, flags, spec, 1e-3):
                results.setdefault(("param", name), CheckResult("param", name, PARAM_TOL)).redraws += 1
                ok = False
                break
        if ok:
            break
    else:
        raise RuntimeError(f"seed {seed}: no kink-free batch after {max_redraws} draws")

    params = dict(model.named_parameters())
    names = sorted(params)
    sizes = np.array([params[n].numel() for n in names], dtype=np.float64)
    picks = []
    for _ in range(coords):
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        picks.append((names[k], int(rng.integers(params[names[k]].numel()))))

    # losses at the perturbed points, all specs evaluated from the same forward passes
    shifted = {}
    for pname, flat_idx in picks:
        view = params[pname].data.view(-1)
        orig = float(view[flat_idx])
        for sign in (1, -1):
            view[flat_idx] = orig + sign * h
            shifted[(pname, flat_idx, sign)] = {
                pol: _rows(model, batch, masks, pol) for pol in L.MASK_POLICIES
            }
        view[flat_idx] = orig

    for name, spec, gen in specs:
        res = results.setdefault(("param", name), CheckResult("param", name, PARAM_TOL))
        _, grads = loss_and_grads(model, batch, spec, masks, None, gen)
        analytic, numeric = [], []
        for pname, flat_idx in picks:
            analytic.append(float(grads[pname].reshape(-1)[flat_idx]))
            vals = []
            for sign in (1, -1):
                flat, refs, flags, sent_ids = shifted[(pname, flat_idx, sign)][spec.mask_policy]
                vals.append(L.hybrid_loss_packed(flat, refs, flags, sent_ids, len(batch), spec, gen)[0].total)
            numeric.append((vals[0] - vals[1]) / (2 * h))
        res.add(analytic, numeric)
    model.zero_grad(set_to_none=True)


def run_gradcheck(seeds, levels=("logit", "param")) -> list:
    """Run both suites over ``seeds``; returns one ``CheckResult`` per (level, loss)."""
    results = {}
    for s in seeds:
        if "logit" in levels:
            logit_check(int(s), results)
        if "param" in levels:
            param_check(int(s), results)
    return [results[k] for k in sorted(results)]


def format_table(results) -> str:
    head = f"{'level':<6} {'loss':<48} {'checks':>7} {'fail':>5} {'max_rel':>10} {'max_abs':>10} {'tol':>7}"
    lines = [head, "-" * len(head)]
    for r in results:
        lines.append(
            f"{r.level:<6} {r.name:<48} {r.checks:>7d} {r.failures:>5d} {r.max_rel:>10.2e} {r.max_abs:>10.2e} {r.tol:>7.0e}"
        )
    return "\n".join(lines)

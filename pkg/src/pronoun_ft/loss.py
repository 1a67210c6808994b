"""Token-level training objectives and their gradients with respect to logits.

Every function here works on plain ``float64`` numpy arrays. A logits matrix
has one row per target position and one column per vocabulary entry. Losses
return ``(value, grad)`` where ``grad`` has the shape of the logits and is the
exact derivative of ``value``.

Three objectives are provided:

* ``clm_loss``: mean token negative log-likelihood (the usual translation loss).
* ``nll_disc_loss``: per-token two-way softmax between the reference logit and
  the logit of the model's own top token, at temperature ``tau``.
* ``mm_disc_loss``: per-token hinge ``max(0, mu - ref_logit + neg_logit)``.

``hybrid_loss`` mixes the generative and one discriminative term with weight
``lam`` and reduces over a batch of sentences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

KINDS = ("clm", "hybrid-nll", "hybrid-mm")
MASK_POLICIES = ("all-tokens", "pronoun-only")
NEGATIVE_POLICIES = ("max-all", "max-excluding-reference")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "clm"
    lam: float = 0.5
    tau: float = 0.5
    mu: float = 0.3
    mask_policy: str = "all-tokens"
    negative_policy: str = "max-all"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.mask_policy not in MASK_POLICIES:
            raise ValueError(f"unknown mask policy {self.mask_policy!r}")
        if self.negative_policy not in NEGATIVE_POLICIES:
            raise ValueError(f"unknown negative policy {self.negative_policy!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mu < 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")

    @property
    def discriminative(self) -> bool:
        return self.kind != "clm"


@dataclass
class LossBreakdown:
    total: float
    generative: float
    discriminative: float
    masked_token_count: int
    sentence_count: int


# ---------------------------------------------------------------------------
# validation helpers


def _as_logits(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"logits must be a 2-d matrix, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 2:
        raise ValueError(f"logits need >= 1 row and >= 2 columns, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits contain non-finite values")
    return x


def _as_refs(refs, logits: np.ndarray) -> np.ndarray:
    r = np.asarray(refs, dtype=np.int64).reshape(-1)
    if r.shape[0] != logits.shape[0]:
        raise ValueError(
            f"dimension mismatch: {r.shape[0]} reference ids for {logits.shape[0]} logit rows"
        )
    if r.size and (r.min() < 0 or r.max() >= logits.shape[1]):
        raise ValueError(f"reference id out of range for vocabulary of size {logits.shape[1]}")
    return r


def _as_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape[0] != n:
        raise ValueError(f"mask length {m.shape[0]} does not match {n} target positions")
    return m


# ---------------------------------------------------------------------------
# row-level kernels (vectorised over all positions of a packed batch)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def clm_rows(logits: np.ndarray, refs: np.ndarray):
    """Per-row ``-log softmax(logits)[ref]`` and its gradient."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    values = -logp[rows, refs]
    grad = np.exp(logp)
    grad[rows, refs] -= 1.0
    return values, grad


def negative_indices(logits: np.ndarray, refs: np.ndarray, policy: str) -> np.ndarray:
    """Vectorised ``select_negative`` over every row (ties -> lowest index)."""
    if policy == "max-all":
        return np.argmax(logits, axis=1)
    if policy == "max-excluding-reference":
        if logits.shape[1] < 2:
            raise ValueError("max-excluding-reference needs at least two columns")
        masked = logits.copy()
        masked[np.arange(logits.shape[0]), refs] = -np.inf
        return np.argmax(masked, axis=1)
    raise ValueError(f"unknown negative policy {policy!r}")


def nll_rows(logits, refs, tau, policy):
    """``softplus((neg - pos) / tau)`` per row, i.e. -log of the two-way softmax."""
    rows = np.arange(logits.shape[0])
    neg = negative_indices(logits, refs, policy)
    gap = (logits[rows, neg] - logits[rows, refs]) / tau
    values = np.logaddexp(0.0, gap)
    slope = np.exp(gap - values) / tau  # sigmoid(gap) / tau
    grad = np.zeros_like(logits)
    # the two updates cancel exactly when neg == ref
    np.add.at(grad, (rows, refs), -slope)
    np.add.at(grad, (rows, neg), slope)
    return values, grad


def mm_rows(logits, refs, mu, policy):
    rows = np.arange(logits.shape[0])
    neg = negative_indices(logits, refs, policy)
    slack = mu - logits[rows, refs] + logits[rows, neg]
    active = (slack > 0.0).astype(np.float64)  # subgradient 0 at the hinge point
    values = np.maximum(slack, 0.0)
    grad = np.zeros_like(logits)
    np.add.at(grad, (rows, refs), -active)
    np.add.at(grad, (rows, neg), active)
    return values, grad


def disc_rows(logits, refs, spec: LossSpec):
    if spec.kind == "hybrid-nll":
        return nll_rows(logits, refs, spec.tau, spec.negative_policy)
    if spec.kind == "hybrid-mm":
        return mm_rows(logits, refs, spec.mu, spec.negative_policy)
    raise ValueError(f"loss kind {spec.kind!r} has no discriminative term")


# ---------------------------------------------------------------------------
# sentence-level API


def clm_loss(logits, refs):
    """Mean token negative log-likelihood of ``refs`` under ``softmax(logits)``."""
    x = _as_logits(logits)
    r = _as_refs(refs, x)
    values, grad = clm_rows(x, r)
    n = x.shape[0]
    return float(values.sum() / n), grad / n


def select_negative(logit_row, ref_index: int, policy: str = "max-all") -> int:
    row = np.asarray(logit_row, dtype=np.float64).reshape(-1)
    if row.size == 0:
        raise ValueError("empty logit row")
    if not 0 <= ref_index < row.size:
        raise ValueError(f"reference index {ref_index} outside row of length {row.size}")
    if policy == "max-excluding-reference" and row.size < 2:
        raise ValueError("max-excluding-reference needs a row of length >= 2")
    return int(negative_indices(row[None, :], np.array([ref_index]), policy)[0])


def _masked_mean(values, grad, mask):
    m = int(mask.sum())
    if m == 0:
        return 0.0, np.zeros_like(grad)
    keep = mask.astype(np.float64)
    return float((values * keep).sum() / m), grad * keep[:, None] / m


def nll_disc_loss(logits, refs, mask=None, tau: float = 0.5, policy: str = "max-all"):
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = _as_logits(logits)
    r = _as_refs(refs, x)
    m = _as_mask(mask, x.shape[0])
    return _masked_mean(*nll_rows(x, r, tau, policy), m)


def mm_disc_loss(logits, refs, mask=None, mu: float = 0.3, policy: str = "max-all"):
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    x = _as_logits(logits)
    r = _as_refs(refs, x)
    m = _as_mask(mask, x.shape[0])
    return _masked_mean(*mm_rows(x, r, mu, policy), m)


def pronoun_mask(ref_tokens: Sequence[str], pronoun_set: Iterable[str]) -> np.ndarray:
    """Flag the reference positions holding a pronoun (case-insensitive)."""
    pronouns = {p.lower() for p in pronoun_set}
    return np.array([tok.lower() in pronouns for tok in ref_tokens], dtype=bool)


# ---------------------------------------------------------------------------
# batch reduction

RowLoss = Callable[[np.ndarray, np.ndarray], tuple]


def hybrid_loss_packed(
    logits: np.ndarray,
    refs: np.ndarray,
    mask: np.ndarray,
    sent_ids: np.ndarray,
    num_sentences: int,
    spec: LossSpec,
    generative: RowLoss | None = None,
):
    """Batch objective over rows of several sentences stacked into one matrix.

    ``sent_ids[i]`` names the sentence row ``i`` belongs to. ``generative`` may
    replace the plain CLM row loss (the trainer passes a label-smoothed one).
    Returns ``(LossBreakdown, grad)`` with ``grad`` aligned to ``logits``.
    """
    if num_sentences < 1:
        raise ValueError("empty batch")
    gen_fn = generative or clm_rows
    # fixed-order reductions: bincount sums rows in index order
    lengths = np.bincount(sent_ids, minlength=num_sentences).astype(np.float64)
    g_vals, g_grad = gen_fn(logits, refs)
    g_sent = np.bincount(sent_ids, weights=g_vals, minlength=num_sentences) / lengths
    generative_value = float(g_sent.sum() / num_sentences)
    g_scale = 1.0 / (lengths[sent_ids] * num_sentences)

    masked = int(mask.sum())
    if not spec.discriminative or spec.lam == 1.0:
        d_value, d_grad = 0.0, None
        if spec.discriminative:
            d_value = _disc_value(logits, refs, mask, sent_ids, num_sentences, spec)[0]
    else:
        d_value, d_grad = _disc_value(logits, refs, mask, sent_ids, num_sentences, spec)

    if spec.discriminative:
        lam = spec.lam
        total = lam * generative_value + (1.0 - lam) * d_value
        grad = g_grad * (lam * g_scale)[:, None]
        if d_grad is not None:
            grad = grad + (1.0 - lam) * d_grad
    else:
        total = generative_value
        grad = g_grad * g_scale[:, None]
    breakdown = LossBreakdown(
        total=float(total),
        generative=generative_value,
        discriminative=float(d_value),
        masked_token_count=masked,
        sentence_count=num_sentences,
    )
    return breakdown, grad


def _disc_value(logits, refs, mask, sent_ids, num_sentences, spec):
    d_vals, d_grad = disc_rows(logits, refs, spec)
    keep = mask.astype(np.float64)
    counts = np.bincount(sent_ids, weights=keep, minlength=num_sentences)
    sums = np.bincount(sent_ids, weights=d_vals * keep, minlength=num_sentences)
    has_mask = counts > 0
    k = int(has_mask.sum())
    if k == 0:
        return 0.0, np.zeros_like(logits)
    per_sent = sums[has_mask] / counts[has_mask]
    value = float(per_sent.sum() / k)
    safe = np.where(has_mask, counts, 1.0)
    row_scale = keep / (safe[sent_ids] * k)
    return value, d_grad * row_scale[:, None]


def hybrid_loss(logits_per_sentence, refs_per_sentence, masks, spec: LossSpec, generative=None):
    """Sentence-averaged then batch-averaged objective for a list of sentences.

    ``masks`` may be ``None`` (every token is a discriminative target) or a list
    with one boolean vector per sentence; ``spec.mask_policy == "all-tokens"``
    also ignores the given masks. Returns ``(LossBreakdown, grads)`` with one
    gradient matrix per sentence.
    """
    if len(logits_per_sentence) == 0:
        raise ValueError("empty batch")
    if len(refs_per_sentence) != len(logits_per_sentence):
        raise ValueError("logits and references must be parallel lists")
    if masks is not None and len(masks) != len(logits_per_sentence):
        raise ValueError("masks must parallel the logits list")
    mats, refs, flags, ids = [], [], [], []
    for i, (lg, rf) in enumerate(zip(logits_per_sentence, refs_per_sentence)):
        x = _as_logits(lg)
        mats.append(x)
        refs.append(_as_refs(rf, x))
        if masks is None or spec.mask_policy == "all-tokens":
            flags.append(np.ones(x.shape[0], dtype=bool))
        else:
            flags.append(_as_mask(masks[i], x.shape[0]))
        ids.append(np.full(x.shape[0], i, dtype=np.int64))
    if len({m.shape[1] for m in mats}) != 1:
        raise ValueError("all logits matrices must share the vocabulary dimension")
    breakdown, grad = hybrid_loss_packed(
        np.concatenate(mats),
        np.concatenate(refs),
        np.concatenate(flags),
        np.concatenate(ids),
        len(mats),
        spec,
        generative,
    )
    splits = np.cumsum([m.shape[0] for m in mats])[:-1]
    return breakdown, np.split(grad, splits)

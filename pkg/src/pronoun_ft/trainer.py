"""Optimisation: inverse-sqrt warmup schedule, Adam, batching, epochs and fine-tuning schedules."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import torch

from . import loss as L
from .model import (
    Checkpoint,
    Seq2Seq,
    concat_input,
    dropout_generator,
    loss_and_grads,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    base_lr: float = 0.0007
    warmup_init_lr: float = 1e-7
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    label_smoothing: float = 0.1
    clip_norm: float = 0.0
    batch_tokens: int = 768
    max_steps: int = 5000
    save_every: int = 100
    keep_last: int = 10


@dataclass
class ScheduleSpec:
    total_epochs: int = 9
    upsample_factor: int = 2

    def pattern(self) -> list:
        return schedule_pattern(self.total_epochs, self.upsample_factor)


def schedule_pattern(total_epochs: int, upsample_factor: int = 2) -> list:
    """Alternate subset epochs ``"P"`` with upsampled full epochs ``"F<k>"``, starting with ``"P"``."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if upsample_factor < 1:
        raise ValueError("upsample_factor must be >= 1")
    return ["P" if e % 2 == 0 else f"F{upsample_factor}" for e in range(total_epochs)]


def lr_at(step: int, hyper: TrainHyper) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < hyper.warmup_steps:
        return hyper.warmup_init_lr + step * (hyper.base_lr - hyper.warmup_init_lr) / hyper.warmup_steps
    return hyper.base_lr * math.sqrt(hyper.warmup_steps / step) if step else hyper.base_lr


# ---------------------------------------------------------------------------
# optimiser


def init_adam_state(params: dict) -> dict:
    return {
        "m": {k: torch.zeros_like(v) for k, v in params.items()},
        "v": {k: torch.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, hyper: TrainHyper, step: int) -> float:
    """In-place bias-corrected Adam update number ``step + 1``; returns the learning rate used."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g is not None and g.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: grad {tuple(g.shape)} vs param {tuple(params[name].shape)}")
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name} at step {step}")
    if hyper.clip_norm > 0:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
        if total > hyper.clip_norm:
            scale = hyper.clip_norm / (total + 1e-6)
            grads = {k: (g * scale if g is not None else None) for k, g in grads.items()}
    lr = lr_at(step, hyper)
    t = step + 1
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m, v = state["m"][name], state["v"][name]
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(hyper.eps), value=-lr)
    return lr


def smoothed_ce_rows(logits: np.ndarray, refs: np.ndarray, eps: float):
    """Label-smoothed cross-entropy per row: target ``(1-eps)*onehot + eps/V``."""
    logp = L.log_softmax(logits)
    v = logits.shape[1]
    rows = np.arange(logits.shape[0])
    values = -(1.0 - eps) * logp[rows, refs] - eps * logp.mean(axis=1)
    grad = np.exp(logp) - eps / v
    grad[rows, refs] -= 1.0 - eps
    return values, grad


def label_smoothed_loss(logits, refs, eps: float):
    """Sentence-mean label-smoothed loss; equals ``loss.clm_loss`` when ``eps == 0``."""
    if eps == 0.0:
        return L.clm_loss(logits, refs)
    x = np.asarray(logits, dtype=np.float64)
    r = np.asarray(refs, dtype=np.int64)
    values, grad = smoothed_ce_rows(x, r, eps)
    n = x.shape[0]
    return float(values.sum() / n), grad / n


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    src: list
    tgt: list
    mask: np.ndarray


def encode_corpus(corpus, vocab, mode: str, max_len: int, pronouns=()) -> list:
    """Id-encode a corpus for ``mode`` ("sen2sen" or "concat"), with pronoun masks."""
    pron = {p.lower() for p in pronouns}
    out = []
    for i, (s, t) in enumerate(corpus.pairs):
        src_tokens = concat_input(corpus.context(i), s, max_len) if mode == "concat" else s
        if len(src_tokens) > max_len or len(t) + 1 > max_len:
            raise ValueError(f"pair {i} does not fit max_len={max_len}")
        mask = np.array([tok.lower() in pron for tok in t], dtype=bool)
        out.append(Example(vocab.encode(src_tokens), vocab.encode(t), mask))
    return out


def make_batches(examples, batch_tokens: int, seed: int) -> list:
    """Length-bucketed batches whose padded size stays within ``batch_tokens``."""
    n = len(examples)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    src_len = np.array([len(examples[i].src) for i in perm])
    tgt_len = np.array([len(examples[i].tgt) + 1 for i in perm])
    order = perm[np.lexsort((tgt_len, src_len))]
    batches, cur, width = [], [], 0
    for i in order:
        w = max(width, len(examples[i].src), len(examples[i].tgt) + 1)
        if cur and w * (len(cur) + 1) > batch_tokens:
            batches.append(cur)
            cur, w = [], max(len(examples[i].src), len(examples[i].tgt) + 1)
        cur.append(int(i))
        width = w
    if cur:
        batches.append(cur)
    return [batches[k] for k in rng.permutation(len(batches))]


def _mean_breakdown(items) -> L.LossBreakdown:
    k = len(items)
    return L.LossBreakdown(
        total=sum(b.total for b in items) / k,
        generative=sum(b.generative for b in items) / k,
        discriminative=sum(b.discriminative for b in items) / k,
        masked_token_count=sum(b.masked_token_count for b in items),
        sentence_count=sum(b.sentence_count for b in items),
    )


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    """Single-writer optimisation loop around one model."""

    def __init__(self, model: Seq2Seq, hyper: TrainHyper, seed: int, ckpt_dir=None, meta=None):
        self.model = model
        self.hyper = hyper
        self.seed = int(seed)
        self.ckpt_dir = ckpt_dir
        self.meta = dict(meta or {})
        self.reset_optimizer()

    def reset_optimizer(self):
        self.params = dict(self.model.named_parameters())
        self.state = init_adam_state(self.params)
        self.step = 0

    def _generative(self):
        eps = self.hyper.label_smoothing
        return partial(smoothed_ce_rows, eps=eps) if eps > 0 else None

    def update(self, batch: list, spec: L.LossSpec) -> L.LossBreakdown:
        self.model.train()
        gen = dropout_generator(self.seed, self.step) if self.model.config.dropout > 0 else None
        pairs = [(ex.src, ex.tgt) for ex in batch]
        masks = [ex.mask for ex in batch]
        breakdown, grads = loss_and_grads(self.model, pairs, spec, masks, gen, self._generative())
        adam_step(self.params, grads, self.state, self.hyper, self.step)
        self.step += 1
        return breakdown

    def train_epoch(self, examples: list, spec: L.LossSpec, epoch_seed: int) -> L.LossBreakdown:
        if not examples:
            raise ValueError("cannot train on an empty corpus")
        stats = []
        for idx in make_batches(examples, self.hyper.batch_tokens, epoch_seed):
            stats.append(self.update([examples[i] for i in idx], spec))
        return _mean_breakdown(stats)

    def train_steps(self, examples: list, spec: L.LossSpec, max_steps: int | None = None) -> list:
        """Baseline training for a fixed step budget with periodic checkpoints."""
        if not examples:
            raise ValueError("cannot train on an empty corpus")
        max_steps = self.hyper.max_steps if max_steps is None else max_steps
        saved, epoch = [], 0
        while self.step < max_steps:
            window = []
            for idx in make_batches(examples, self.hyper.batch_tokens, derive_seed(self.seed, "epoch", epoch)):
                window.append(self.update([examples[i] for i in idx], spec))
                if self.step % self.hyper.save_every == 0 or self.step == max_steps:
                    saved.append(self.save(f"step-{self.step}"))
                    mean = _mean_breakdown(window)
                    log.info("step %d lr %.2e loss %.4f", self.step, lr_at(self.step, self.hyper), mean.total)
                    window = []
                if self.step >= max_steps:
                    break
            epoch += 1
        return saved

    def checkpoint(self) -> Checkpoint:
        opt = {
            "m": {k: v.numpy().copy() for k, v in self.state["m"].items()},
            "v": {k: v.numpy().copy() for k, v in self.state["v"].items()},
        }
        return Checkpoint.from_model(self.model, opt, self.step, self.seed, self.meta)

    def load_optimizer(self, ckpt: Checkpoint):
        for group in ("m", "v"):
            for k, arr in ckpt.optimizer.get(group, {}).items():
                self.state[group][k].copy_(torch.from_numpy(arr))
        self.step = ckpt.step

    def save(self, name: str):
        """Save under ``ckpt_dir/name``; returns the in-memory checkpoint when no directory is set."""
        ckpt = self.checkpoint()
        if self.ckpt_dir is None:
            return ckpt
        path = os.path.join(self.ckpt_dir, name)
        save_checkpoint(ckpt, path)
        self._rotate()
        return path

    def _rotate(self):
        keep = self.hyper.keep_last
        if keep <= 0:
            return
        names = [n for n in os.listdir(self.ckpt_dir) if n.startswith("step-") and not n.endswith(".tmp")]
        names.sort(key=lambda n: int(n.split("-")[1]))
        for n in names[:-keep]:
            os.remove(os.path.join(self.ckpt_dir, n))


def derive_seed(seed: int, *labels) -> int:
    """Labelled child seed, stable across processes."""
    text = ":".join(str(x) for x in (seed,) + labels)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1



def train_epoch(trainer: Trainer, examples, spec, rng_seed):
    return trainer.train_epoch(examples, spec, rng_seed)


@dataclass
class EpochRecord:
    epoch: int
    label: str
    passes: int
    stats: list = field(default_factory=list)
    checkpoint: object = None


def run_epochs(trainer: Trainer, plan: list, epoch_seed_label="ft") -> list:
    """Run ``plan`` = list of ``(label, examples, spec, passes)``; checkpoint after each epoch."""
    records = []
    for e, (label, examples, spec, passes) in enumerate(plan, 1):
        if not examples:
            raise ValueError(f"epoch {e} ({label}) has an empty corpus")
        rec = EpochRecord(e, label, passes)
        for p in range(passes):
            rec.stats.append(trainer.train_epoch(examples, spec, derive_seed(trainer.seed, epoch_seed_label, e, p)))
        rec.checkpoint = trainer.save(f"epoch-{e}")
        log.info("epoch %d %s loss %.4f", e, label, rec.stats[-1].total)
        records.append(rec)
    return records


def schedule_plan(full: list, subset: list, schedule: ScheduleSpec, disc_spec: L.LossSpec, full_spec=None) -> list:
    """Epoch plan for alternating fine-tuning: subset epochs use ``disc_spec``, upsampled full epochs CLM."""
    if not full or not subset:
        raise ValueError("alternating fine-tuning needs non-empty full and subset corpora")
    full_spec = full_spec or L.LossSpec(kind="clm")
    plan = []
    for tag in schedule.pattern():
        if tag == "P":
            plan.append(("P", subset, disc_spec, 1))
        else:
            plan.append((tag, full, full_spec, int(tag[1:])))
    return plan


def run_schedule(
    trainer: Trainer,
    full: list,
    subset: list,
    schedule: ScheduleSpec,
    disc_spec: L.LossSpec,
    full_spec: L.LossSpec | None = None,
) -> list:
    return run_epochs(trainer, schedule_plan(full, subset, schedule, disc_spec, full_spec))


# ---------------------------------------------------------------------------
# checkpoint averaging


def average_params(checkpoints: list, last: int = 10) -> Checkpoint:
    if not checkpoints:
        raise ValueError("need at least one checkpoint to average")
    chosen = checkpoints[-last:]
    ref = chosen[0]
    for c in chosen[1:]:
        if c.config != ref.config:
            raise ValueError("cannot average checkpoints with different model configs")
        if set(c.params) != set(ref.params):
            raise ValueError("cannot average checkpoints with different parameter sets")
    avg = {}
    for name in ref.params:
        # offsets from the first checkpoint, so identical inputs average to themselves exactly
        base = np.asarray(ref.params[name], dtype=np.float64)
        acc = np.zeros_like(base)
        for c in chosen[1:]:
            acc += c.params[name] - base
        avg[name] = base + acc / len(chosen)
    return Checkpoint(ref.config, avg, {}, chosen[-1].step, chosen[-1].seed, dict(chosen[-1].meta))


def average_checkpoints(checkpoints: list, last: int = 10) -> Seq2Seq:
    """Element-wise mean of the last ``min(last, len)`` checkpoints, as a model."""
    return average_params(checkpoints, last).to_model()

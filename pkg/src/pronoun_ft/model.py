"""Compact encoder-decoder transformer for sentence-level and concatenated-context MT.

All parameters live in float64 so that loss gradients computed in numpy can be
pushed back through the network without precision loss. The decoder's
attended state is what conditions each next-token distribution.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import loss as L

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<sep>", "<unk>")
SEP_TOKEN = SPECIAL_TOKENS[SEP]

DTYPE = torch.float64


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_len: int = 64
    mode: str = "sen2sen"

    def validate(self):
        if self.vocab_size < len(SPECIAL_TOKENS) + 1:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no room for regular tokens")
        if self.d_model <= 0 or self.heads <= 0 or self.d_model % self.heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if self.enc_layers < 1 or self.dec_layers < 1 or self.ffn_dim < 1:
            raise ValueError("layer counts and ffn_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.mode not in ("sen2sen", "concat"):
            raise ValueError(f"mode must be 'sen2sen' or 'concat', got {self.mode!r}")
        return self


def _dropout(x, p, gen):
    if gen is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class Attention(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, memory, mask):
        # mask: boolean, True where attention is blocked; broadcast to (B, H, Tq, Tk)
        b, tq, d = x.shape
        tk = memory.shape[1]
        h = self.heads
        q = self.q(x).view(b, tq, h, d // h).transpose(1, 2)
        k = self.k(memory).view(b, tk, h, d // h).transpose(1, 2)
        v = self.v(memory).view(b, tk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(mask, -1e9)
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(b, tq, d))


class FeedForward(nn.Module):
    def __init__(self, d_model, ffn_dim):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.p = cfg.dropout

    def forward(self, x, pad_mask, gen):
        y = self.norm1(x)
        x = x + _dropout(self.attn(y, y, pad_mask), self.p, gen)
        return x + _dropout(self.ffn(self.norm2(x)), self.p, gen)


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.heads)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.p = cfg.dropout

    def forward(self, x, memory, causal_mask, src_mask, gen):
        y = self.norm1(x)
        x = x + _dropout(self.self_attn(y, y, causal_mask), self.p, gen)
        x = x + _dropout(self.cross_attn(self.norm2(x), memory, src_mask), self.p, gen)
        return x + _dropout(self.ffn(self.norm3(x)), self.p, gen)


def sinusoidal_positions(max_len, d_model):
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.tensor(table, dtype=DTYPE)


class Seq2Seq(nn.Module):
    """Encoder-decoder with all embeddings shared and tied to the output layer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config) for _ in range(config.dec_layers))
        self.enc_norm = nn.LayerNorm(config.d_model)
        self.dec_norm = nn.LayerNorm(config.d_model)
        # +1 for the BOS slot in the decoder input
        self.register_buffer("positions", sinusoidal_positions(config.max_len + 1, config.d_model))
        self.to(DTYPE)

    def _embed(self, ids, gen):
        x = self.embed(ids) * math.sqrt(self.config.d_model) + self.positions[: ids.shape[1]]
        return _dropout(x, self.config.dropout, gen)

    def encode(self, src, gen=None):
        pad = (src == PAD)[:, None, None, :]
        x = self._embed(src, gen)
        for layer in self.encoder:
            x = layer(x, pad, gen)
        return self.enc_norm(x), pad

    def decode(self, tgt_in, memory, src_pad, gen=None):
        t = tgt_in.shape[1]
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)[None, None]
        x = self._embed(tgt_in, gen)
        for layer in self.decoder:
            x = layer(x, memory, causal, src_pad, gen)
        return self.dec_norm(x) @ self.embed.weight.T

    def forward(self, src, tgt_in, gen=None):
        memory, pad = self.encode(src, gen)
        return self.decode(tgt_in, memory, pad, gen)


# ---------------------------------------------------------------------------
# construction


def init_model(config: ModelConfig, seed: int) -> Seq2Seq:
    """Build a model with deterministic scaled-uniform weights and zero biases."""
    config.validate()
    model = Seq2Seq(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "embed.weight":
                bound = math.sqrt(3.0 / config.d_model)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
            elif "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_out, fan_in = p.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
    return model


def param_checksum(model: Seq2Seq) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def dropout_generator(seed: int, step: int) -> torch.Generator:
    """Counter-based generator: one independent stream per (seed, step)."""
    digest = hashlib.sha256(f"dropout:{seed}:{step}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") >> 1)


# ---------------------------------------------------------------------------
# inputs


def concat_input(prev_src: Sequence, cur_src: Sequence, max_len: int | None = None, sep=SEP_TOKEN):
    """``prev ++ [sep] ++ cur``, left-truncating ``prev`` to fit ``max_len``."""
    prev, cur = list(prev_src), list(cur_src)
    if max_len is not None:
        room = max_len - len(cur) - 1
        prev = prev[len(prev) - room:] if room > 0 else []
    return prev + [sep] + cur


def _check_ids(ids, cfg, what):
    if len(ids) > cfg.max_len:
        raise ValueError(f"{what} length {len(ids)} exceeds max_len {cfg.max_len}")
    if any(i < 0 or i >= cfg.vocab_size for i in ids):
        raise ValueError(f"{what} contains an id outside [0, {cfg.vocab_size})")


def pad_batch(seqs, prefix=None, suffix=None):
    rows = [([prefix] if prefix is not None else []) + list(s) + ([suffix] if suffix is not None else []) for s in seqs]
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def forward(model: Seq2Seq, src_ids, tgt_ids, train_mode: bool = False, gen=None) -> np.ndarray:
    """Teacher-forced logits: row ``t`` scores ``tgt_ids[t]`` given ``tgt_ids[:t]``."""
    cfg = model.config
    _check_ids(src_ids, cfg, "source")
    _check_ids(tgt_ids, cfg, "target")
    if len(tgt_ids) == 0:
        raise ValueError("target must contain at least one token")
    src = torch.tensor([list(src_ids)], dtype=torch.long)
    tgt_in = torch.tensor([[BOS] + list(tgt_ids[:-1])], dtype=torch.long)
    with torch.no_grad():
        logits = model(src, tgt_in, gen if train_mode else None)
    return logits[0].numpy().copy()


def translate_batch(model: Seq2Seq, sources, max_len: int | None = None):
    """Greedy decoding (ties -> lowest id) for a list of source id sequences."""
    cfg = model.config
    max_len = cfg.max_len if max_len is None else min(max_len, cfg.max_len)
    if not sources:
        return []
    for s in sources:
        _check_ids(s, cfg, "source")
    src = pad_batch(sources)
    out = [[] for _ in sources]
    done = np.zeros(len(sources), dtype=bool)
    with torch.no_grad():
        memory, pad = model.encode(src)
        tgt = torch.full((len(sources), 1), BOS, dtype=torch.long)
        for _ in range(max_len):
            logits = model.decode(tgt, memory, pad)[:, -1]
            nxt = torch.argmax(logits, dim=-1)  # first maximal index on ties
            for i, tok in enumerate(nxt.tolist()):
                if done[i]:
                    continue
                if tok == EOS:
                    done[i] = True
                else:
                    out[i].append(tok)
            if done.all():
                break
            tgt = torch.cat([tgt, nxt[:, None]], dim=1)
    return out


def translate_greedy(model: Seq2Seq, src_ids, max_len: int | None = None):
    return translate_batch(model, [list(src_ids)], max_len)[0]


# ---------------------------------------------------------------------------
# loss and gradients


def batch_logits(model, batch, gen=None):
    """Stacked teacher-forced logits for ``(src, tgt)`` pairs; targets get EOS appended."""
    src = pad_batch([s for s, _ in batch])
    tgt_in = pad_batch([t for _, t in batch], prefix=BOS)
    logits = model(src, tgt_in, gen)
    lengths = [len(t) + 1 for _, t in batch]
    return logits, lengths


def pack_rows(logits: np.ndarray, batch, lengths, masks, mask_policy: str):
    """Flatten padded ``(b, width, V)`` logits to the valid rows of a batch.

    Returns ``(rows, refs, flags, sent_ids, sel)``; ``sel`` picks the valid
    positions out of the ``b * width`` flattened grid.
    """
    b, width, v = logits.shape
    valid = np.zeros((b, width), dtype=bool)
    refs = np.zeros((b, width), dtype=np.int64)
    flags = np.zeros((b, width), dtype=bool)
    for i, (_, t) in enumerate(batch):
        n = lengths[i]
        valid[i, :n] = True
        refs[i, :n] = list(t) + [EOS]
        if masks is None or mask_policy == "all-tokens":
            flags[i, :n] = True
        else:
            m = np.asarray(masks[i], dtype=bool)
            if m.shape[0] != n - 1:
                raise ValueError(f"mask {i} has length {m.shape[0]}, target has {n - 1} tokens")
            flags[i, : n - 1] = m
    sel = valid.reshape(-1)
    sent_ids = np.repeat(np.arange(b), width)[sel]
    flat = logits.reshape(b * width, v)[sel]
    return flat, refs.reshape(-1)[sel], flags.reshape(-1)[sel], sent_ids, sel


def loss_and_grads(
    model: Seq2Seq,
    batch,
    spec: L.LossSpec,
    masks=None,
    gen=None,
    generative=None,
):
    """Batch ``LossBreakdown`` and parameter gradients (stored in ``p.grad``).

    ``batch`` holds ``(src_ids, tgt_ids)`` pairs without EOS; the loss covers
    every target token plus the final EOS. ``masks`` (one boolean vector per
    sentence, over ``tgt_ids``) selects discriminative positions when
    ``spec.mask_policy == "pronoun-only"``. Returns ``(breakdown, grads)`` with
    ``grads`` a name -> tensor dict.
    """
    if not batch:
        raise ValueError("empty batch")
    cfg = model.config
    for s, t in batch:
        _check_ids(s, cfg, "source")
        _check_ids(list(t) + [EOS], cfg, "target")
    model.zero_grad(set_to_none=True)
    logits, lengths = batch_logits(model, batch, gen)
    b, width, v = logits.shape
    flat, refs, flags, sent_ids, sel = pack_rows(logits.detach().numpy(), batch, lengths, masks, spec.mask_policy)
    breakdown, grad = L.hybrid_loss_packed(flat, refs, flags, sent_ids, b, spec, generative)
    full = np.zeros((b * width, v))
    full[sel] = grad
    logits.backward(torch.from_numpy(full.reshape(b, width, v)).to(logits.dtype))
    grads = {name: p.grad for name, p in model.named_parameters()}
    return breakdown, grads


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PRNFTCK1"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, optimizer=None, step=0, seed=0, meta=None):
        params = {k: v.detach().numpy().copy() for k, v in model.state_dict().items() if k != "positions"}
        return cls(model.config, params, dict(optimizer or {}), step, seed, dict(meta or {}))

    def to_model(self) -> Seq2Seq:
        model = Seq2Seq(ModelConfig(**asdict(self.config)))
        state = {k: torch.from_numpy(np.array(v, dtype=np.float64)) for k, v in self.params.items()}
        model.load_state_dict(state, strict=False)
        return model


def _tensor_blob(prefix, tensors, header, chunks, offset):
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        header.append({"name": f"{prefix}{name}", "shape": list(arr.shape), "offset": offset})
        data = arr.tobytes()
        chunks.append(data)
        offset += len(data)
    return offset


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks = [], []
    offset = _tensor_blob("param/", ckpt.params, entries, chunks, 0)
    opt_tensors, opt_scalars = {}, {}
    for key, val in ckpt.optimizer.items():
        if isinstance(val, dict):
            for name, arr in val.items():
                opt_tensors[f"{key}/{name}"] = arr
        else:
            opt_scalars[key] = val
    _tensor_blob("opt/", opt_tensors, entries, chunks, offset)
    header = {
        "config": asdict(ckpt.config),
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "meta": ckpt.meta,
        "optimizer_scalars": opt_scalars,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    body = memoryview(raw)[16 + hlen :]
    params, opt = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape).copy()
        kind, _, name = entry["name"].partition("/")
        if kind == "param":
            params[name] = arr
        else:
            group, _, pname = name.partition("/")
            opt.setdefault(group, {})[pname] = arr
    opt.update(header.get("optimizer_scalars", {}))
    return Checkpoint(
        ModelConfig(**header["config"]), params, opt, header["step"], header["seed"], header.get("meta", {})
    )

"""Attention encoder over token sequences.

Word embedding plus fixed sinusoidal positional encoding feeds N stacked
blocks of (multi-head self-attention -> residual -> layer norm -> two-layer
feedforward with one ReLU -> residual -> layer norm). The hidden state at
the CLS position is the flow representation; a two-layer projection head is
used only during contrastive pre-training and a dense classification head
produces class probabilities during fine-tuning.

All compute runs in float64 on CPU. Randomness (parameter init, dropout) is
drawn from explicit generators, so (input, params, seed, mode) fully
determine every output. Checkpoints are a versioned binary container of
named float32 tensors with a trailing digest.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import InputError, NumericError
from .tokenizer import PAD_ID

DTYPE = torch.float64

CHECKPOINT_MAGIC = b"FLCK"
CHECKPOINT_VERSION = 1

# paper-scale defaults; tests use a small config
DEFAULT_D = 512
DEFAULT_HEADS = 8
DEFAULT_FFN = 1024
DEFAULT_BLOCKS = 6


@dataclass
class EncoderConfig:
    vocab_size: int
    max_len: int
    d: int = DEFAULT_D
    heads: int = DEFAULT_HEADS
    d_head: int = DEFAULT_D // DEFAULT_HEADS
    ffn_dim: int = DEFAULT_FFN
    n_blocks: int = DEFAULT_BLOCKS
    dropout_rate: float = 0.1
    proj_dim: int = 128
    n_classes: int = 0
    ln_eps: float = 1e-9

    def __post_init__(self):
        if self.d != self.heads * self.d_head:
            raise ValueError(
                f"d={self.d} must equal heads*d_head={self.heads * self.d_head}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0,1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


def positional_encoding(max_len: int, d: int) -> torch.Tensor:
    """Fixed sinusoidal table: sin on even channels, cos on odd."""
    pos = torch.arange(max_len, dtype=DTYPE).unsqueeze(1)
    idx = torch.arange(0, d, 2, dtype=DTYPE)
    angle = pos / torch.pow(10000.0, idx / d)
    pe = torch.zeros(max_len, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


def layer_norm(x: torch.Tensor, scale: torch.Tensor, offset: torch.Tensor,
               eps: float):
    """Per-position normalization; returns (output, pre-scale normalized)."""
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    normed = (x - mu) / torch.sqrt(var + eps)
    return normed * scale + offset, normed


def _dropout(x: torch.Tensor, rate: float, gen: Optional[torch.Generator]):
    if rate <= 0.0 or gen is None:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


class AttentionBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d
        self.cfg = cfg
        self.wq = nn.Linear(d, d).to(DTYPE)
        self.wk = nn.Linear(d, d).to(DTYPE)
        self.wv = nn.Linear(d, d).to(DTYPE)
        self.wo = nn.Linear(d, d).to(DTYPE)
        self.ln1_scale = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln1_offset = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.ffn1 = nn.Linear(d, cfg.ffn_dim).to(DTYPE)
        self.ffn2 = nn.Linear(cfg.ffn_dim, d).to(DTYPE)
        self.ln2_scale = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln2_offset = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x, pad_mask, gen, dropout_rate, internals=None):
        cfg = self.cfg
        bsz, length, d = x.shape
        heads, d_head = cfg.heads, cfg.d_head

        def split(t):
            return t.view(bsz, length, heads, d_head).transpose(1, 2)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(d_head)
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(bsz, length, d)
        attn_out = _dropout(self.wo(ctx), dropout_rate, gen)
        h1, normed1 = layer_norm(x + attn_out, self.ln1_scale, self.ln1_offset,
                                 cfg.ln_eps)

        ffn_hidden = _dropout(torch.relu(self.ffn1(h1)), dropout_rate, gen)
        ffn_out = _dropout(self.ffn2(ffn_hidden), dropout_rate, gen)
        h2, normed2 = layer_norm(h1 + ffn_out, self.ln2_scale, self.ln2_offset,
                                 cfg.ln_eps)

        if internals is not None:
            internals.append({"attn": attn, "normed": (normed1, normed2)})
        return h2


@dataclass
class ForwardTrace:
    """Outputs of one forward pass, with the autograd graph attached so
    arbitrary losses built from these tensors can be differentiated."""

    hidden: torch.Tensor            # B x L x d
    cls: torch.Tensor               # B x d
    mode: str
    seed: Optional[int]
    proj: Optional[torch.Tensor] = None
    logits: Optional[torch.Tensor] = None
    probs: Optional[torch.Tensor] = None
    internals: Optional[list] = None  # per-block attn weights / LN stats


class TrafficEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Parameter(torch.zeros(cfg.vocab_size, cfg.d, dtype=DTYPE))
        self.blocks = nn.ModuleList(AttentionBlock(cfg) for _ in range(cfg.n_blocks))
        self.proj1 = nn.Linear(cfg.d, cfg.d).to(DTYPE)
        self.proj2 = nn.Linear(cfg.d, cfg.proj_dim).to(DTYPE)
        self.classifier = (nn.Linear(cfg.d, cfg.n_classes).to(DTYPE)
                           if cfg.n_classes > 0 else None)
        pe = positional_encoding(cfg.max_len, cfg.d)
        self.register_buffer("pos_encoding", pe, persistent=False)

    # -- forward ----------------------------------------------------------

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """Token embedding plus positional encoding; ids is B x L or L."""
        if int(ids.max()) >= self.cfg.vocab_size:
            raise InputError(
                f"token id {int(ids.max())} >= vocab size {self.cfg.vocab_size}")
        x = self.embedding[ids]
        return x + self.pos_encoding[: ids.shape[-1]]

    def forward(self, ids: torch.Tensor, mode: str = "eval",
                seed: Optional[int] = None, keep_internals: bool = False,
                with_proj: bool = False, with_logits: bool = False) -> ForwardTrace:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        gen = None
        rate = 0.0
        if mode == "train" and self.cfg.dropout_rate > 0.0:
            if seed is None:
                raise ValueError("train mode requires a dropout seed")
            gen = torch.Generator().manual_seed(int(seed))
            rate = self.cfg.dropout_rate
        pad_mask = ids == PAD_ID
        x = self.embed(ids)
        internals = [] if keep_internals else None
        for i, block in enumerate(self.blocks):
            x = block(x, pad_mask, gen, rate, internals)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite hidden state after block {i}")
        trace = ForwardTrace(hidden=x, cls=x[:, 0], mode=mode, seed=seed,
                             internals=internals)
        if with_proj:
            trace.proj = self.project(trace.cls)
        if with_logits:
            trace.logits = self.logits(trace.cls)
            trace.probs = torch.softmax(trace.logits, dim=-1)
        return trace

    def project(self, h_cls: torch.Tensor) -> torch.Tensor:
        """Contrastive projection: dense -> ReLU -> dense."""
        return self.proj2(torch.relu(self.proj1(h_cls)))

    def logits(self, h_cls: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise InputError("model has no classification head")
        return self.classifier(h_cls)

    def classify(self, h_cls: torch.Tensor):
        """Class probabilities with argmax and max-probability confidence."""
        probs = torch.softmax(self.logits(h_cls), dim=-1)
        conf, pred = probs.max(dim=-1)
        return probs, pred, conf

    # -- setup ------------------------------------------------------------

    def add_classifier(self, n_classes: int, seed: int) -> None:
        self.cfg.n_classes = n_classes
        self.classifier = nn.Linear(self.cfg.d, n_classes).to(DTYPE)
        gen = torch.Generator().manual_seed(int(seed))
        _init_linear(self.classifier, gen)

    def clone(self) -> "TrafficEncoder":
        import copy
        other = TrafficEncoder(copy.deepcopy(self.cfg))
        other.load_state_dict(self.state_dict())
        return other


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.zero_()


def build_model(cfg: EncoderConfig, seed: int) -> TrafficEncoder:
    """Seed-deterministic init: symmetric uniform scaled by fan-in for all
    dense weights (bound 1/sqrt(in_features)), zeros for biases, identity
    layer norm. The embedding is a lookup (fan-in 1), so its bound is 1;
    token rows must stay comparable in norm to the positional encoding or
    every CLS state starts out nearly collinear and cosine-based contrast
    has no signal to train on."""
    model = TrafficEncoder(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        model.embedding.uniform_(-1.0, 1.0, generator=gen)
    for block in model.blocks:
        for lin in (block.wq, block.wk, block.wv, block.wo, block.ffn1, block.ffn2):
            _init_linear(lin, gen)
    _init_linear(model.proj1, gen)
    _init_linear(model.proj2, gen)
    if model.classifier is not None:
        _init_linear(model.classifier, gen)
    return model


def gradients(model: TrafficEncoder, loss: torch.Tensor) -> "OrderedDict":
    """Exact reverse-mode gradients of a scalar loss built from a ForwardTrace
    of this model. Parameters that do not participate get zero gradients.
    Backpropagating through a trace taken before a parameter update is a
    hard error (the stale graph is detected by the autograd engine)."""
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = OrderedDict()
    for (name, param), grad in zip(named, grads):
        out[name] = torch.zeros_like(param) if grad is None else grad
    return out


def batch_ids(sequences) -> torch.Tensor:
    """Stack token id lists (or TokenRecords / TokenSequences) into B x L."""
    rows = []
    for seq in sequences:
        ids = seq if isinstance(seq, (list, tuple)) else seq.ids
        rows.append(ids)
    return torch.tensor(rows, dtype=torch.long)


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON header (config + free-form
# meta), named float32 little-endian row-major tensors, sha256 digest.
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: TrafficEncoder, meta: Optional[dict] = None) -> None:
    header = json.dumps(
        {"config": model.cfg.to_dict(), "meta": meta or {}},
        sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    state = model.state_dict()
    blob += struct.pack("<I", len(state))
    for name, tensor in state.items():
        raw = name.encode()
        blob += struct.pack("<H", len(raw))
        blob += raw
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=True)
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes(order="C")
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Returns (model, meta). Verifies magic, version and digest."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 42 or blob[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise InputError(f"{path}: checkpoint digest mismatch")
    off = 4
    (version,) = struct.unpack_from("<H", body, off); off += 2
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", body, off); off += 4
    header = json.loads(body[off:off + hlen].decode()); off += hlen
    cfg = EncoderConfig.from_dict(header["config"])
    (n_tensors,) = struct.unpack_from("<I", body, off); off += 4
    state = OrderedDict()
    for _ in range(n_tensors):
        (nlen,) = struct.unpack_from("<H", body, off); off += 2
        name = body[off:off + nlen].decode(); off += nlen
        (ndim,) = struct.unpack_from("<B", body, off); off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", body, off); off += 4
            shape.append(dim)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        state[name] = torch.from_numpy(arr.copy()).to(DTYPE)
    model = TrafficEncoder(cfg)
    model.load_state_dict(state)
    return model, header["meta"]

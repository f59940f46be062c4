"""Differentiable building blocks: dense layers, self-attention, a residual-only transformer
encoder, a multi-layer LSTM, dropout, sinusoidal positional encoding, Adam with global-norm
clipping, and a versioned binary checkpoint format.

The layers are written out from their defining equations on top of torch tensors so that
autograd supplies the backward pass; the finite-difference suite in ``gradcheck`` verifies it.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import Tensor, nn

DEFAULT_DTYPE = torch.float64
LEAKY_SLOPE = 0.01


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map with W stored as (in, out)."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight rows {W.shape[0]}")
    y = x @ W
    return y if b is None else y + b


class Linear(nn.Module):
    def __init__(self, fan_in: int, fan_out: int, bias: bool = True, gain: float | None = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(fan_in, fan_out, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(fan_out, dtype=dtype)) if bias else None
        if gain is None:
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(self.weight, -bound, bound)
        else:
            nn.init.orthogonal_(self.weight, gain=gain)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def positional_encoding(pos, d_model: int, tau: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos encoding; `pos` may be an int or an array of positions."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    pos = np.asarray(pos, dtype=float)
    i = np.arange(d_model // 2, dtype=float)
    angle = pos[..., None] / tau ** (2 * i / d_model)
    out = np.empty(pos.shape + (d_model,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


class Dropout(nn.Module):
    """Inverted dropout drawing its mask from an optional explicit generator."""

    def __init__(self, p: float = 0.1):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.d_model, self.heads, self.head_dim = d_model, heads, d_model // heads
        self.q = Linear(d_model, d_model, dtype=dtype)
        self.k = Linear(d_model, d_model, dtype=dtype)
        self.v = Linear(d_model, d_model, dtype=dtype)
        self.out = Linear(d_model, d_model, dtype=dtype)
        self.last_weights: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        # x: (..., S, d)
        *lead, S, d = x.shape
        if d != self.d_model:
            raise ValueError(f"expected width {self.d_model}, got {d}")

        def split(t: Tensor) -> Tensor:
            return t.reshape(*lead, S, self.heads, self.head_dim).transpose(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        ctx = (weights @ v).transpose(-3, -2).reshape(*lead, S, d)
        return self.out(ctx)


class TransformerEncoderLayer(nn.Module):
    """x + attn(x), then + ffn(.); no normalization anywhere."""

    def __init__(self, d_model: int = 4, heads: int = 2, ff_dim: int = 165, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d_model, heads, dtype=dtype)
        self.ff1 = Linear(d_model, ff_dim, dtype=dtype)
        self.ff2 = Linear(ff_dim, d_model, dtype=dtype)
        self.d_model = d_model

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_model:
            raise ValueError(f"expected width {self.d_model}, got {x.shape[-1]}")
        x = x + self.attn(x)
        return x + self.ff2(torch.relu(self.ff1(x)))


class TransformerEncoder(nn.Module):
    def __init__(self, layers: int = 3, d_model: int = 4, heads: int = 2, ff_dim: int = 165,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.layers = nn.ModuleList(TransformerEncoderLayer(d_model, heads, ff_dim, dtype) for _ in range(layers))

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LSTMLayer(nn.Module):
    """One LSTM layer; gate order in the packed weights is input, forget, cell, output."""

    def __init__(self, input_size: int, hidden: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)
        self.hidden = hidden
        self.w_ih = nn.Parameter(torch.empty(input_size, 4 * hidden, dtype=dtype).uniform_(-bound, bound))
        self.w_hh = nn.Parameter(torch.empty(hidden, 4 * hidden, dtype=dtype).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(4 * hidden, dtype=dtype).uniform_(-bound, bound))

    def cell(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return self._cell(x @ self.w_ih + self.bias, h, c)

    def _cell(self, xw: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        gates = xw + h @ self.w_hh
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def forward(self, x: Tensor, state: tuple[Tensor, Tensor] | None = None):
        T, B = x.shape[0], x.shape[1]
        if state is None:
            zeros = x.new_zeros(B, self.hidden)
            state = (zeros, zeros)
        h, c = state
        xw = x @ self.w_ih + self.bias
        outs = []
        for t in range(T):
            h, c = self._cell(xw[t], h, c)
            outs.append(h)
        return torch.stack(outs), (h, c)


class LSTM(nn.Module):
    def __init__(self, input_size: int, hidden: int, layers: int = 1, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.layers = nn.ModuleList(
            LSTMLayer(input_size if k == 0 else hidden, hidden, dtype) for k in range(layers))

    def forward(self, x: Tensor) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        """x: (T, B, in) -> outputs (T, B, hidden) and per-layer final (h, c)."""
        if x.shape[0] < 1:
            raise ValueError("sequence must have at least one step")
        finals = []
        for layer in self.layers:
            x, hc = layer(x)
            finals.append(hc)
        return x, finals


def lstm_forward(x: Tensor, lstm: LSTM):
    return lstm(x)


# -- optimization --------------------------------------------------------------------

def global_grad_norm(grads: Iterable[Tensor | None]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(torch.sum(g.detach().double() ** 2))
    return math.sqrt(total)


class Adam:
    """Adam with bias correction, preceded by global-norm gradient clipping.

    A step whose gradients contain NaN or inf is skipped and counted in `rejected`.
    """

    def __init__(self, params: Iterable[nn.Parameter], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = 10.0):
        self.params = [p for p in params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.rejected = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.last_grad_norm = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> bool:
        grads = [p.grad for p in self.params]
        norm = global_grad_norm(grads)
        self.last_grad_norm = norm
        if not math.isfinite(norm):
            self.rejected += 1
            return False
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            g = g * scale
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))
        return True

    def state(self) -> dict:
        return {"step": self.step_count, "rejected": self.rejected, "lr": self.lr,
                "m": [t.clone() for t in self.m], "v": [t.clone() for t in self.v]}

    def load_state(self, state: Mapping) -> None:
        self.step_count = int(state["step"])
        self.rejected = int(state.get("rejected", 0))
        self.lr = float(state["lr"])
        for dst, src in zip(self.m, state["m"]):
            dst.copy_(src)
        for dst, src in zip(self.v, state["v"]):
            dst.copy_(src)


def clip_by_global_norm(grads: list[Tensor], max_norm: float) -> tuple[list[Tensor], float]:
    norm = global_grad_norm(grads)
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads], norm
    return list(grads), norm


def adam_step(params: list[Tensor], grads: list[Tensor], lr: float, step: int,
              m: list[Tensor] | None = None, v: list[Tensor] | None = None,
              betas=(0.9, 0.999), eps: float = 1e-8, max_grad_norm: float = 10.0):
    """Functional Adam update; returns (new_params, m, v).

    Raises FloatingPointError on non-finite gradients so the caller can flag the step.
    """
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        raise FloatingPointError("non-finite gradient; update rejected")
    grads, _ = clip_by_global_norm(grads, max_grad_norm)
    m = m or [torch.zeros_like(p) for p in params]
    v = v or [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = b1 * mi + (1 - b1) * g
        vi = b2 * vi + (1 - b2) * g * g
        mhat = mi / (1 - b1 ** step)
        vhat = vi / (1 - b2 ** step)
        new_p.append(p - lr * mhat / (torch.sqrt(vhat) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, new_m, new_v


# -- checkpoints ---------------------------------------------------------------------

MAGIC = b"HTSCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray],
                    meta: Mapping | None = None) -> None:
    """Write named arrays as raw little-endian float64 after a JSON header.

    Layout: MAGIC, u32 version, u64 header length, header JSON, payload.
    """
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "tensors": entries, "meta": dict(meta or {})},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {FORMAT_VERSION})")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        arr = np.frombuffer(data[lo:lo + e["nbytes"]], dtype="<f8").reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return tensors, header["meta"]

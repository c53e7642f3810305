"""Layers built on :mod:`critart.autodiff`: dense, multi-head self-attention,
a post-norm transformer encoder, per-frame min-max normalisation and the
straight-through ground-truth substitution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEGENERATE_EPS = 1e-12
DEGENERATE_FILL = 0.5


class Module:
    """Parameter container; parameters are discovered from attributes in
    definition order, which fixes their names for checkpoints."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for _, p in self.named_parameters():
            seen.setdefault(id(p), p)
        return list(seen.values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class DenseLayer(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, n_in, (n_in, n_out))
        self.bias = _uniform(rng, n_in, (n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = DenseLayer(d_model, d_model, rng)
        # a key bias only shifts each score row, which softmax ignores
        self.k = DenseLayer(d_model, d_model, rng, bias=False)
        self.v = DenseLayer(d_model, d_model, rng)
        self.o = DenseLayer(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, t, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        """``x`` is [B, T, d_model]; ``key_mask`` is boolean [B, T]."""
        b, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
        attn = ad.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return self.o(ctx)


class EncoderBlock(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ff1 = DenseLayer(d_model, d_ff, rng)
        self.ff2 = DenseLayer(d_ff, d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, key_mask: np.ndarray) -> Tensor:
        x = self.norm1(ad.add(x, self.attn(x, key_mask)))
        return self.norm2(ad.add(x, self.ff2(ad.relu(self.ff1(x)))))


def sinusoidal_table(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerEncoder(Module):
    """Input projection + sinusoidal positions + L post-norm blocks."""

    def __init__(
        self,
        n_in: int,
        d_model: int = 64,
        n_heads: int = 2,
        d_ff: int = 128,
        n_layers: int = 2,
        max_len: int = 1024,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_in = n_in
        self.d_model = d_model
        self.proj = DenseLayer(n_in, d_model, rng)
        self.blocks = [EncoderBlock(d_model, n_heads, d_ff, rng) for _ in range(n_layers)]
        self.positions = sinusoidal_table(max_len, d_model)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = ad._lift(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        b, t, f = x.shape
        if f != self.n_in:
            raise ValueError(f"encoder expects {self.n_in} input features, got {f}")
        if t > len(self.positions):
            raise ValueError(f"{t} frames exceed the positional table ({len(self.positions)})")
        key_mask = np.ones((b, t), dtype=bool) if mask is None else np.asarray(mask).reshape(b, t) > 0
        h = ad.add(self.proj(x), self.positions[:t])
        for block in self.blocks:
            h = block(h, key_mask)
        return ad.reshape(h, (t, self.d_model)) if squeeze else h


@dataclass
class NormalizedWeights:
    """Per-frame articulator weights in [0, 1] plus the degenerate-frame flags."""

    values: Tensor
    degenerate: np.ndarray

    @property
    def data(self) -> np.ndarray:
        return self.values.data


def min_max_normalize(raw: Tensor, mode: str = "frame", mask=None) -> NormalizedWeights:
    """Min-max scale ``raw`` [..., T, C] to [0, 1].

    ``mode="frame"`` rescales each frame across its channels; ``mode="channel"``
    rescales each channel across the (unpadded) frames of its utterance.
    Spans whose range is below 1e-12 become 0.5 everywhere, are flagged
    degenerate, and pass no gradient. Min/max subgradients go to the first
    achieving index.
    """
    raw = ad._lift(raw)
    if mode == "frame":
        axis = -1
    elif mode == "channel":
        axis = -2
    else:
        raise ValueError(f"unknown normalisation mode {mode!r}")
    r = raw.data
    valid = None
    if mode == "channel" and mask is not None:
        valid = np.broadcast_to((np.asarray(mask) > 0)[..., None], r.shape)
        lo_src = np.where(valid, r, np.inf)
        hi_src = np.where(valid, r, -np.inf)
    else:
        lo_src = hi_src = r
    amin = np.argmin(lo_src, axis=axis)[..., None] if axis == -1 else np.argmin(lo_src, axis=axis)[..., None, :]
    amax = np.argmax(hi_src, axis=axis)[..., None] if axis == -1 else np.argmax(hi_src, axis=axis)[..., None, :]
    lo = np.take_along_axis(r, amin, axis=axis)
    hi = np.take_along_axis(r, amax, axis=axis)
    span = hi - lo
    degenerate = span <= DEGENERATE_EPS
    safe = np.where(degenerate, 1.0, span)
    w = np.where(degenerate, DEGENERATE_FILL, (r - lo) / safe)
    if valid is not None:
        w = np.where(valid, w, 0.0)

    def bw(g):
        if valid is not None:
            g = np.where(valid, g, 0.0)
        g = np.where(degenerate, 0.0, g)
        total = g.sum(axis=axis, keepdims=True)
        weighted = (g * w).sum(axis=axis, keepdims=True)
        out = g / safe
        np.put_along_axis(out, amin, np.take_along_axis(out, amin, axis=axis) + (weighted - total) / safe, axis=axis)
        np.put_along_axis(out, amax, np.take_along_axis(out, amax, axis=axis) - weighted / safe, axis=axis)
        return (out,)

    flags = np.squeeze(degenerate, axis=axis)
    return NormalizedWeights(ad._make(w, (raw,), bw, "min_max_normalize"), flags)


def ste_replace(pred: Tensor, ground_truth) -> Tensor:
    """Forward: the ground truth, exactly. Backward: identity to ``pred``."""
    pred = ad._lift(pred)
    gt = ad.as_array(ground_truth)
    if gt.shape != pred.shape:
        raise ValueError(f"ste_replace: pred {pred.shape} vs ground truth {gt.shape}")

    def bw(g):
        return (g,)

    return ad._make(gt.copy(), (pred,), bw, "ste_replace")

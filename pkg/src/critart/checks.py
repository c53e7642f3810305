"""Finite-difference verification of every differentiable op and of the
assembled pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .nn import DenseLayer, LayerNorm, MultiHeadSelfAttention, TransformerEncoder, min_max_normalize, ste_replace
from .pipeline import ModelConfig, Pipeline, aai_forward, awp_forward, forward, fpc_forward, loss

OP_TOL = 1e-6
ENCODER_TOL = 1e-5
PIPELINE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _p(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _op_cases(rng) -> list[tuple]:
    """(name, f, params, tolerance[, numeric surrogate])."""
    def probe(shape):
        return rng.normal(size=shape)

    a, b = _p(rng, 4, 3), _p(rng, 3, 5)
    x, y, v = _p(rng, 3, 5), _p(rng, 3, 5), _p(rng, 5)
    w35 = probe((3, 5))
    ln_x, ln_g, ln_b = _p(rng, 2, 3, 5), _p(rng, 5), _p(rng, 5)
    w235 = probe((2, 3, 5))
    pred, target = _p(rng, 2, 4, 3), rng.normal(size=(2, 4, 3))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
    logits, labels = _p(rng, 2, 4, 5), rng.integers(0, 5, size=(2, 4))
    raw, w12 = _p(rng, 2, 3, 12), probe((2, 3, 12))
    gt = rng.normal(size=(2, 3, 12))
    dense = DenseLayer(5, 4, rng)
    dx = _p(rng, 3, 5)
    w34 = probe((3, 4))
    raw0 = raw.data.copy()
    norm = LayerNorm(5)
    norm.gamma.data[:] = rng.normal(size=5)
    attn = MultiHeadSelfAttention(8, 2, rng)
    ax = _p(rng, 2, 4, 8)
    amask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    wa = probe((2, 4, 8)) * amask[..., None]

    def relu_input():
        t = _p(rng, 3, 5)
        t.data += np.where(np.abs(t.data) < 1e-3, 0.01, 0.0)  # keep away from the kink
        return t

    r = relu_input()
    return [
        ("matmul", lambda: ad.sum(ad.matmul(a, b)), [a, b], OP_TOL),
        ("add", lambda: ad.sum(ad.mul(ad.add(x, v), w35)), [x, v], OP_TOL),
        ("sub", lambda: ad.sum(ad.mul(ad.sub(x, v), w35)), [x, v], OP_TOL),
        ("mul", lambda: ad.sum(ad.mul(ad.mul(x, y), w35)), [x, y], OP_TOL),
        ("relu", lambda: ad.sum(ad.mul(ad.relu(r), w35)), [r], OP_TOL),
        ("scale", lambda: ad.sum(ad.mul(ad.scale(x, 1.7), w35)), [x], OP_TOL),
        ("softmax", lambda: ad.sum(ad.mul(ad.softmax(x, -1), w35)), [x], OP_TOL),
        ("layer_norm", lambda: ad.sum(ad.mul(ad.layer_norm(ln_x, ln_g, ln_b), w235)), [ln_x, ln_g, ln_b], OP_TOL),
        (
            "dropout",
            lambda: ad.sum(ad.mul(ad.dropout(x, 0.5, True, np.random.default_rng(5)), w35)),
            [x],
            OP_TOL,
        ),
        ("mse_loss", lambda: ad.mse_loss(pred, target, mask), [pred], OP_TOL),
        ("cross_entropy_loss", lambda: ad.cross_entropy_loss(logits, labels, mask), [logits], OP_TOL),
        ("min_max_normalize", lambda: ad.sum(ad.mul(min_max_normalize(raw).values, w12)), [raw], OP_TOL),
        (
            "ste_replace",
            lambda: ad.sum(ad.mul(ste_replace(raw, gt), w12)),
            [raw],
            OP_TOL,
            lambda: ad.sum(ad.mul(ad.add(raw, gt - raw0), w12)),
        ),
        ("dense", lambda: ad.sum(ad.mul(dense(dx), w34)), [dx] + dense.parameters(), OP_TOL),
        ("layer_norm_module", lambda: ad.sum(ad.mul(norm(dx), w35)), [dx] + norm.parameters(), OP_TOL),
        ("self_attention", lambda: ad.sum(ad.mul(attn(ax, amask), wa)), [ax] + attn.parameters(), OP_TOL),
    ]


def micro_batch(rng, frames: int = 4, batch: int = 1, n_classes: int = 4):
    mfcc = rng.normal(size=(batch, frames, 13))
    ema = rng.normal(size=(batch, frames, 12))
    labels = rng.integers(0, n_classes, size=(batch, frames))
    mask = np.ones((batch, frames))
    return mfcc, ema, labels, mask


def pipeline_check(size: str = "micro", seed: int = 0, ste: bool = False):
    """Closures and parameters for the full-pipeline gradient check.

    Returns ``(f, params, numeric_f)``. Without ``ste`` the classifier reads
    the predicted articulators and plain differences apply. With ``ste`` the
    analytic side runs the straight-through forward and the numeric side adds
    the frozen offset ``gt - pred(theta0)`` to the prediction instead; only
    the inversion network's parameters are checked, since the others see the
    same graph either way.
    """
    rng = np.random.default_rng(seed)
    if size == "micro":
        cfg = ModelConfig(n_classes=4, d_model=8, n_heads=2, d_ff=16, n_layers=1, seed=seed)
        mfcc, ema, labels, mask = micro_batch(rng, frames=4)
    elif size == "small":
        cfg = ModelConfig(n_classes=5, d_model=16, n_heads=2, d_ff=32, n_layers=2, seed=seed)
        mfcc, ema, labels, mask = micro_batch(rng, frames=6, batch=2, n_classes=5)
        mask[1, 4:] = 0
    else:
        raise ValueError(f"unknown gradcheck size {size!r}")
    p = Pipeline(cfg)

    if not ste:

        def f():
            out = forward(p, mfcc, None, mask, training=False)
            return loss(out, ema, labels, mask, 1.0, 1.0)[0]

        return f, p.parameters(), None

    def f():
        out = forward(p, mfcc, ema, mask, training=False)
        return loss(out, ema, labels, mask, 1.0, 1.0)[0]

    offset = ema - aai_forward(p, mfcc, mask).data

    def numeric_f():
        pred = aai_forward(p, mfcc, mask)
        weights = awp_forward(p, mfcc, mask, training=False)
        logits = fpc_forward(p, ad.mul(weights.values, ad.add(pred, offset)), mask)
        return ad.add(ad.mse_loss(pred, ema, mask), ad.cross_entropy_loss(logits, labels, mask))

    return f, p.aai.parameters(), numeric_f


def run_checks(size: str = "micro", seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, f, params, tol, *surrogate in _op_cases(rng):
        t0 = time.perf_counter()
        err = grad_check(f, params, numeric_f=surrogate[0] if surrogate else None)
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))

    enc = TransformerEncoder(5, d_model=8, n_heads=2, d_ff=16, n_layers=1, rng=rng)
    ex = _p(rng, 2, 3, 5)
    emask = np.array([[1, 1, 1], [1, 1, 0]])
    ew = rng.normal(size=(2, 3, 8)) * emask[..., None]
    t0 = time.perf_counter()
    err = grad_check(lambda: ad.sum(ad.mul(enc(ex, emask), ew)), [ex] + enc.parameters())
    results.append(CheckResult("transformer_encoder", err, ENCODER_TOL, time.perf_counter() - t0))

    for ste in (False, True):
        f, params, numeric_f = pipeline_check(size, seed, ste)
        t0 = time.perf_counter()
        err = grad_check(f, params, numeric_f=numeric_f)
        label = f"pipeline[{size}{',ste' if ste else ''}]"
        results.append(CheckResult(label, err, PIPELINE_TOL, time.perf_counter() - t0))
    return results

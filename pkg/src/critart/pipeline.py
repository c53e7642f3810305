"""The end-to-end model: inversion (AAI), articulator weight prediction (AWP)
and the frame-level phoneme classifier (FPC)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_EMA, N_MFCC
from .nn import DenseLayer, Module, NormalizedWeights, TransformerEncoder, min_max_normalize, ste_replace


@dataclass
class ModelConfig:
    n_classes: int = 8
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    n_layers: int = 2
    max_len: int = 1024
    dropout_p: float = 0.5
    share_trunk: bool = False
    normalization: str = "frame"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineOutput:
    ema_pred: Tensor
    weights: NormalizedWeights
    weighted_ema: Tensor
    logits: Tensor
    degenerate_frame_count: int


class Network(Module):
    """Encoder trunk plus dense output head."""

    def __init__(self, encoder: TransformerEncoder, head: DenseLayer):
        self.encoder = encoder
        self.head = head

    def __call__(self, x, mask) -> Tensor:
        return self.head(self.encoder(x, mask))


class Pipeline(Module):
    def __init__(self, config: ModelConfig | None = None):
        cfg = config or ModelConfig()
        if cfg.n_classes < 2:
            raise ValueError("pipeline needs at least two phoneme classes")
        if cfg.normalization not in ("frame", "channel"):
            raise ValueError(f"normalization must be 'frame' or 'channel', got {cfg.normalization!r}")
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)

        def encoder(n_in):
            return TransformerEncoder(n_in, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_layers, cfg.max_len, rng)

        aai_enc = encoder(N_MFCC)
        self.aai = Network(aai_enc, DenseLayer(cfg.d_model, N_EMA, rng))
        awp_enc = aai_enc if cfg.share_trunk else encoder(N_MFCC)
        self.awp = Network(awp_enc, DenseLayer(cfg.d_model, N_EMA, rng))
        self.fpc = Network(encoder(N_EMA), DenseLayer(cfg.d_model, cfg.n_classes, rng))

    def named_parameters(self, prefix: str = ""):
        # a shared trunk must be listed once
        seen = set()
        for name, p in super().named_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p


def _check_features(x, n: int, what: str) -> Tensor:
    x = ad._lift(x)
    if x.shape[-1] != n:
        raise ValueError(f"{what} expects {n}-dim features, got {x.shape[-1]}")
    return x


def aai_forward(p: Pipeline, mfcc, mask=None) -> Tensor:
    mfcc = _check_features(mfcc, N_MFCC, "aai_forward")
    return p.aai(mfcc, mask)


def awp_forward(p: Pipeline, mfcc, mask=None, training: bool = False, rng=None) -> NormalizedWeights:
    """Raw 12-dim head output -> dropout -> min-max normalisation."""
    mfcc = _check_features(mfcc, N_MFCC, "awp_forward")
    raw = p.awp(mfcc, mask)
    raw = ad.dropout(raw, p.config.dropout_p, training, rng)
    return min_max_normalize(raw, p.config.normalization, mask)


def fpc_forward(p: Pipeline, weighted_ema, mask=None) -> Tensor:
    weighted_ema = _check_features(weighted_ema, N_EMA, "fpc_forward")
    return p.fpc(weighted_ema, mask)


def forward(
    p: Pipeline,
    mfcc,
    gt_ema=None,
    mask=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    weight_override=None,
) -> PipelineOutput:
    """Run all three networks.

    With ``gt_ema`` the classifier sees the ground-truth articulators (gradient
    still reaches the inversion network through the straight-through op).
    ``weight_override`` bypasses AWP with fixed weights, for probing.
    """
    if training and gt_ema is None:
        raise ValueError("training forward needs ground-truth articulators")
    ema_pred = aai_forward(p, mfcc, mask)
    if weight_override is not None:
        w = np.broadcast_to(np.asarray(weight_override, dtype=np.float64), ema_pred.shape)
        weights = NormalizedWeights(Tensor(w.copy()), np.zeros(ema_pred.shape[:-1], dtype=bool))
    else:
        weights = awp_forward(p, mfcc, mask, training, rng)
    articulators = ste_replace(ema_pred, gt_ema) if gt_ema is not None else ema_pred
    weighted = ad.mul(weights.values, articulators)
    logits = fpc_forward(p, weighted, mask)

    flags = weights.degenerate
    if flags.shape == ema_pred.shape[:-1] and mask is not None:
        count = int((flags & (np.asarray(mask).reshape(flags.shape) > 0)).sum())
    else:
        count = int(flags.sum()) if flags.shape == ema_pred.shape[:-1] else 0
    return PipelineOutput(ema_pred, weights, weighted, logits, count)


def loss(out: PipelineOutput, gt_ema, labels, mask=None, lam_aai: float = 1.0, lam_fpc: float = 1.0):
    """Return ``(total, l_aai, l_fpc)`` with total = lam_aai*MSE + lam_fpc*CE."""
    if lam_aai < 0 or lam_fpc < 0:
        raise ValueError("loss weights must be non-negative")
    if lam_aai == 0 and lam_fpc == 0:
        raise ValueError("at least one loss weight must be positive")
    l_aai = ad.mse_loss(out.ema_pred, gt_ema, mask)
    l_fpc = ad.cross_entropy_loss(out.logits, labels, mask)
    total = ad.add(ad.scale(l_aai, lam_aai), ad.scale(l_fpc, lam_fpc))
    return total, l_aai, l_fpc

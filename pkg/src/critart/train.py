"""Adam, the joint training loop, evaluation and binary checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_EMA, NormStats, Utterance, make_batches
from .pipeline import ModelConfig, Pipeline, forward, loss

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_aai: float = 1.0
    lambda_fpc: float = 1.0
    clip_grad: float = 0.0
    bucket_by_length: bool = False
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


class Adam:
    """Adam with bias correction over a fixed, named parameter set."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        ids = [id(p) for _, p in named_params]
        if len(set(ids)) != len(ids):
            raise ValueError("a parameter is registered twice with the optimizer")
        names = [n for n, _ in named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.step_count = 0

    def step(self, clip: float = 0.0) -> None:
        grads = {}
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter {name}")
            grads[name] = g
        if clip > 0:
            norm = np.sqrt(np.sum([np.sum(g * g) for g in grads.values()]))
            if norm > clip:
                grads = {n: g * (clip / norm) for n, g in grads.items()}
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(optimizer: Adam, clip: float = 0.0) -> None:
    optimizer.step(clip)


# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    pipeline: Pipeline
    optimizer: Adam
    norm: NormStats
    config: TrainConfig
    epoch: int = 0


def new_state(pipeline: Pipeline, corpus: Sequence[Utterance], config: TrainConfig, norm: NormStats | None = None) -> TrainState:
    norm = norm if norm is not None else NormStats.fit(corpus)
    opt = Adam(list(pipeline.named_parameters()), config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    return TrainState(pipeline, opt, norm, config)


def _frame_correct(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    hit = (logits.argmax(axis=-1) == labels) & (mask > 0)
    return int(hit.sum()), int((mask > 0).sum())


def run_epochs(state: TrainState, corpus: Sequence[Utterance], epochs: int, eval_corpus=None) -> list[dict]:
    """Advance ``state`` by ``epochs`` epochs and return one log row per epoch.

    Shuffling and dropout draw from generators keyed on (seed, epoch[, batch]),
    so resuming from a checkpoint at an epoch boundary repeats the same path.
    """
    if not corpus:
        raise ValueError("train: empty corpus")
    cfg = state.config
    p = state.pipeline
    data = [state.norm.apply(u) for u in corpus]
    held = [state.norm.apply(u) for u in eval_corpus] if eval_corpus else None
    log = []
    for _ in range(epochs):
        epoch = state.epoch + 1
        batches = make_batches(data, cfg.batch_size, shuffle_seed=cfg.seed * 1_000_003 + epoch, bucket_by_length=cfg.bucket_by_length)
        sums = np.zeros(3)
        correct = total_frames = 0
        for bi, b in enumerate(batches):
            rng = np.random.default_rng([cfg.seed, epoch, bi])
            out = forward(p, b.mfcc, b.ema, b.mask, training=True, rng=rng)
            tot, l_aai, l_fpc = loss(out, b.ema, b.labels, b.mask, cfg.lambda_aai, cfg.lambda_fpc)
            if not np.isfinite(tot.data):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {bi}")
            p.zero_grad()
            ad.backward(tot)
            state.optimizer.step(cfg.clip_grad)
            sums += [float(l_aai.data), float(l_fpc.data), float(tot.data)]
            c, n = _frame_correct(out.logits.data, b.labels, b.mask)
            correct += c
            total_frames += n
        state.epoch = epoch
        row = {
            "epoch": epoch,
            "l_aai": sums[0] / len(batches),
            "l_fpc": sums[1] / len(batches),
            "total": sums[2] / len(batches),
            "train_acc": correct / total_frames,
            "eval_acc": float("nan"),
        }
        if held and cfg.eval_every > 0 and epoch % cfg.eval_every == 0:
            row["eval_acc"] = _accuracy(p, held, cfg.batch_size)
        logger.info("epoch %d total=%.4f l_aai=%.4f l_fpc=%.4f acc=%.3f", epoch, row["total"], row["l_aai"], row["l_fpc"], row["train_acc"])
        log.append(row)
    return log


def train(pipeline: Pipeline, corpus: Sequence[Utterance], config: TrainConfig, eval_corpus=None):
    """Train from scratch; returns ``(state, metrics_log)``."""
    state = new_state(pipeline, corpus, config)
    log = run_epochs(state, corpus, config.epochs, eval_corpus)
    return state, log


def _accuracy(p: Pipeline, data: Sequence[Utterance], batch_size: int, substitute: bool = True) -> float:
    correct = total = 0
    for b in make_batches(data, batch_size):
        out = forward(p, b.mfcc, b.ema if substitute else None, b.mask)
        c, n = _frame_correct(out.logits.data, b.labels, b.mask)
        correct += c
        total += n
    return correct / total


def evaluate(p: Pipeline, corpus: Sequence[Utterance], norm: NormStats, batch_size: int = 16) -> dict:
    """Eval-mode metrics: frame accuracy with and without ground-truth
    substitution, per-channel inversion RMSE (z-score units) and the rate
    of degenerate weight frames."""
    if not corpus:
        raise ValueError("evaluate: empty corpus")
    data = [norm.apply(u) for u in corpus]
    correct = {True: 0, False: 0}
    frames = 0
    sq = np.zeros(N_EMA)
    degenerate = 0
    for b in make_batches(data, batch_size):
        out = forward(p, b.mfcc, b.ema, b.mask)
        c, n = _frame_correct(out.logits.data, b.labels, b.mask)
        correct[True] += c
        frames += n
        degenerate += out.degenerate_frame_count
        sq += (((out.ema_pred.data - b.ema) ** 2) * b.mask[..., None]).sum(axis=(0, 1))
        bare = forward(p, b.mfcc, None, b.mask)
        correct[False] += _frame_correct(bare.logits.data, b.labels, b.mask)[0]
    return {
        "frame_acc": correct[True] / frames,
        "frame_acc_no_ste": correct[False] / frames,
        "aai_rmse": np.sqrt(sq / frames),
        "degenerate_rate": degenerate / frames,
    }


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 meta length, JSON meta, u32 block count,
# then per block: u32 name length, name, u32 ndim, u64 dims, float64 data.
# Everything little-endian.

MAGIC = b"CRITART\x00"
FORMAT_VERSION = 1


def _pack_blocks(blocks: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes())
    return b"".join(out)


def save_checkpoint(state: TrainState, path: Path, extra: dict | None = None) -> None:
    p, opt = state.pipeline, state.optimizer
    meta = {
        "format_version": FORMAT_VERSION,
        "model": p.config.to_dict(),
        "train": asdict(state.config),
        "epoch": state.epoch,
        "step": opt.step_count,
        **(extra or {}),
    }
    blocks: dict[str, np.ndarray] = {}
    for name, t in p.named_parameters():
        blocks[f"param/{name}"] = t.data
    for name in opt.m:
        blocks[f"adam_m/{name}"] = opt.m[name]
        blocks[f"adam_v/{name}"] = opt.v[name]
    for key in ("mfcc_mean", "mfcc_std", "ema_mean", "ema_std"):
        blocks[f"norm/{key}"] = getattr(state.norm, key)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    payload = MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta_raw)) + meta_raw + _pack_blocks(blocks)
    Path(path).write_bytes(payload)


def read_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<II", buf, pos)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(buf[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return meta, blocks


def load_checkpoint(path: Path) -> tuple[TrainState, dict]:
    """Rebuild pipeline, optimizer and normalisation state; returns ``(state, meta)``."""
    meta, blocks = read_checkpoint(path)
    model_cfg = ModelConfig(**meta["model"])
    train_cfg = TrainConfig(**{f.name: meta["train"][f.name] for f in fields(TrainConfig) if f.name in meta["train"]})
    p = Pipeline(model_cfg)
    for name, t in p.named_parameters():
        key = f"param/{name}"
        if key not in blocks:
            raise ValueError(f"{path}: checkpoint lacks parameter {name}")
        if blocks[key].shape != t.shape:
            raise ValueError(f"{path}: parameter {name} has shape {blocks[key].shape}, expected {t.shape}")
        t.data[...] = blocks[key]
    norm = NormStats(*(blocks[f"norm/{k}"] for k in ("mfcc_mean", "mfcc_std", "ema_mean", "ema_std")))
    opt = Adam(list(p.named_parameters()), train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    for name in opt.m:
        opt.m[name][...] = blocks[f"adam_m/{name}"]
        opt.v[name][...] = blocks[f"adam_v/{name}"]
    opt.step_count = int(meta["step"])
    return TrainState(p, opt, norm, train_cfg, int(meta["epoch"])), meta

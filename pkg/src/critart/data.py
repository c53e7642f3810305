"""Utterances, the text file format, padded batching and the synthetic
planted-criticality corpus."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

N_MFCC = 13
N_EMA = 12


class ArticulatorChannel(IntEnum):
    UL_x = 0
    UL_y = 1
    LL_x = 2
    LL_y = 3
    JAW_x = 4
    JAW_y = 5
    TT_x = 6
    TT_y = 7
    TB_x = 8
    TB_y = 9
    TD_x = 10
    TD_y = 11

    @property
    def display(self) -> str:
        """Report spelling, e.g. ``Jaw_y`` rather than ``JAW_y``."""
        return self.name.replace("JAW", "Jaw")

    @classmethod
    def parse(cls, text: str) -> "ArticulatorChannel":
        key = text.strip()
        for ch in cls:
            if key in (ch.name, ch.display) or key.upper() == ch.name.upper():
                return ch
        raise ValueError(f"unknown articulator channel {text!r}")


CHANNEL_NAMES = [ch.name for ch in ArticulatorChannel]


class CorpusFormatError(ValueError):
    """Malformed utterance file or manifest."""


@dataclass
class Utterance:
    id: str
    subject: str
    mfcc: np.ndarray
    ema: np.ndarray
    labels: np.ndarray
    phoneme_table: list[str]

    def __post_init__(self):
        self.mfcc = np.asarray(self.mfcc, dtype=np.float64)
        self.ema = np.asarray(self.ema, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.mfcc.shape != (n, N_MFCC) or self.ema.shape != (n, N_EMA):
            raise ValueError(
                f"utterance {self.id}: frame counts disagree "
                f"(mfcc {self.mfcc.shape}, ema {self.ema.shape}, labels {n})"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.phoneme_table)):
            raise ValueError(f"utterance {self.id}: label outside phoneme table")

    @property
    def frames(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# file format


def write_utterance(utt: Utterance, path: Path) -> None:
    lines = [f"frames={utt.frames} subject={utt.subject} phoneme_table={','.join(utt.phoneme_table)}"]
    for t in range(utt.frames):
        values = [repr(float(v)) for v in utt.mfcc[t]] + [repr(float(v)) for v in utt.ema[t]]
        lines.append(" ".join(values + [str(int(utt.labels[t]))]))
    path.write_text("\n".join(lines) + "\n")


def read_utterance(path: Path) -> Utterance:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CorpusFormatError(f"{path}: cannot read utterance file ({exc.strerror})") from exc
    lines = text.splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}:1: empty file")
    header = {}
    for token in lines[0].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise CorpusFormatError(f"{path}:1: header token {token!r} is not key=value")
        header[key] = value
    missing = {"frames", "subject", "phoneme_table"} - header.keys()
    if missing:
        raise CorpusFormatError(f"{path}:1: header lacks {sorted(missing)}")
    try:
        frames = int(header["frames"])
    except ValueError:
        raise CorpusFormatError(f"{path}:1: frames={header['frames']!r} is not an integer") from None
    table = header["phoneme_table"].split(",")
    rows = [ln for ln in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != frames:
        raise CorpusFormatError(f"{path}: header says {frames} frames but {len(rows)} rows follow")
    mfcc = np.empty((frames, N_MFCC))
    ema = np.empty((frames, N_EMA))
    labels = np.empty(frames, dtype=np.int64)
    width = N_MFCC + N_EMA + 1
    for t, row in enumerate(rows):
        lineno = t + 2
        fields = row.split()
        if len(fields) != width:
            raise CorpusFormatError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields[:-1]]
            label = int(fields[-1])
        except ValueError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= label < len(table):
            raise CorpusFormatError(f"{path}:{lineno}: label {label} outside phoneme table of {len(table)}")
        mfcc[t] = values[:N_MFCC]
        ema[t] = values[N_MFCC:]
        labels[t] = label
    return Utterance(path.stem, header["subject"], mfcc, ema, labels, table)


def write_corpus(corpus: Sequence[Utterance], directory: Path, manifest_name: str = "manifest.txt") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for utt in corpus:
        name = f"{utt.id}.utt"
        write_utterance(utt, directory / name)
        names.append(name)
    manifest = directory / manifest_name
    manifest.write_text("".join(n + "\n" for n in names))
    return manifest


def load_corpus(manifest_path: Path) -> list[Utterance]:
    """Read every utterance listed (one path per line, relative to the manifest)."""
    manifest_path = Path(manifest_path)
    try:
        entries = manifest_path.read_text().splitlines()
    except OSError as exc:
        raise CorpusFormatError(f"{manifest_path}: cannot read manifest ({exc.strerror})") from exc
    corpus = []
    for lineno, entry in enumerate(entries, start=1):
        entry = entry.strip()
        if not entry or entry.startswith("#"):
            continue
        path = Path(entry)
        if not path.is_absolute():
            path = manifest_path.parent / path
        if not path.exists():
            raise CorpusFormatError(f"{manifest_path}:{lineno}: missing utterance file {path}")
        corpus.append(read_utterance(path))
    if corpus:
        table = corpus[0].phoneme_table
        for utt in corpus[1:]:
            if utt.phoneme_table != table:
                raise CorpusFormatError(f"{manifest_path}: utterance {utt.id} has a different phoneme table")
    return corpus


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    """Per-channel z-score statistics fitted on the training corpus."""

    mfcc_mean: np.ndarray
    mfcc_std: np.ndarray
    ema_mean: np.ndarray
    ema_std: np.ndarray

    @classmethod
    def fit(cls, corpus: Sequence[Utterance]) -> "NormStats":
        mfcc = np.concatenate([u.mfcc for u in corpus])
        ema = np.concatenate([u.ema for u in corpus])

        def std(a):
            s = a.std(axis=0)
            return np.where(s > 1e-12, s, 1.0)

        return cls(mfcc.mean(axis=0), std(mfcc), ema.mean(axis=0), std(ema))

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(N_MFCC), np.ones(N_MFCC), np.zeros(N_EMA), np.ones(N_EMA))

    def apply(self, utt: Utterance) -> Utterance:
        return Utterance(
            utt.id,
            utt.subject,
            (utt.mfcc - self.mfcc_mean) / self.mfcc_std,
            (utt.ema - self.ema_mean) / self.ema_std,
            utt.labels,
            utt.phoneme_table,
        )


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    mfcc: np.ndarray
    ema: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    ids: list[str]

    @property
    def frames(self) -> int:
        return int(self.mask.sum())


def pad_batch(utts: Sequence[Utterance]) -> Batch:
    t_max = max(u.frames for u in utts)
    b = len(utts)
    mfcc = np.zeros((b, t_max, N_MFCC))
    ema = np.zeros((b, t_max, N_EMA))
    labels = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max))
    for i, u in enumerate(utts):
        n = u.frames
        mfcc[i, :n] = u.mfcc
        ema[i, :n] = u.ema
        labels[i, :n] = u.labels
        mask[i, :n] = 1.0
    return Batch(mfcc, ema, labels, mask, [u.id for u in utts])


def make_batches(
    corpus: Sequence[Utterance],
    batch_size: int,
    shuffle_seed: int | None = None,
    bucket_by_length: bool = False,
) -> list[Batch]:
    """Split ``corpus`` into padded batches.

    ``shuffle_seed=None`` keeps corpus order. With bucketing, utterances are
    length-sorted before chunking and the chunks are shuffled instead.
    """
    if not corpus:
        raise ValueError("make_batches: empty corpus")
    if batch_size < 1:
        raise ValueError("make_batches: batch_size must be >= 1")
    order = np.arange(len(corpus))
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    if bucket_by_length:
        order = np.argsort([u.frames for u in corpus], kind="stable")
    elif rng is not None:
        order = rng.permutation(len(corpus))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if bucket_by_length and rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [pad_batch([corpus[j] for j in chunk]) for chunk in chunks]


# ---------------------------------------------------------------------------
# synthetic corpus


def _default_critical() -> dict[str, list[tuple[ArticulatorChannel, float]]]:
    C = ArticulatorChannel
    # most salient channel first; |target| orders the oracle list
    return {
        "p": [(C.UL_y, -0.9), (C.LL_y, 0.6)],
        "m": [(C.LL_y, 0.9), (C.JAW_y, -0.6)],
        "f": [(C.LL_x, -0.9), (C.UL_x, 0.6)],
        "t": [(C.TT_y, 0.9), (C.TT_x, -0.6)],
        "s": [(C.TT_x, 0.9), (C.JAW_x, 0.6)],
        "k": [(C.TD_y, 0.9), (C.TB_y, -0.6)],
        "g": [(C.TD_x, -0.9), (C.TD_y, -0.6)],
        "l": [(C.TB_x, 0.9), (C.TT_y, -0.6)],
    }


@dataclass
class SyntheticSpec:
    """Generator parameters. ``critical`` maps phoneme -> [(channel, target)]."""

    critical: dict[str, list[tuple[ArticulatorChannel, float]]] = field(default_factory=_default_critical)
    alpha: float = 0.7
    sigma_a: float = 0.05
    sigma_w: float = 0.15
    sigma_c: float = 0.02
    seg_min: int = 5
    seg_max: int = 15
    seed: int = 0
    projection: np.ndarray | None = None

    def __post_init__(self):
        if not self.critical:
            raise ValueError("synthetic spec needs at least one phoneme")
        for ph, chans in self.critical.items():
            if not 1 <= len(chans) <= 3:
                raise ValueError(f"phoneme {ph!r} must have 1-3 critical channels, got {len(chans)}")
            for ch, target in chans:
                if not -1.0 <= target <= 1.0:
                    raise ValueError(f"phoneme {ph!r}: target {target} for {ch.name} outside [-1, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 1 <= self.seg_min <= self.seg_max:
            raise ValueError(f"segment range [{self.seg_min}, {self.seg_max}] is invalid")
        if self.projection is None:
            rng = np.random.default_rng([self.seed, 0x5EC])
            self.projection = rng.normal(0.0, 1.0, size=(N_MFCC, N_EMA)) / np.sqrt(N_EMA)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.shape != (N_MFCC, N_EMA):
            raise ValueError(f"projection must be {N_MFCC}x{N_EMA}, got {self.projection.shape}")
        for ph, chans in self.critical.items():
            for ch, _ in chans:
                if not np.any(self.projection[:, ch] != 0):
                    raise ValueError(f"projection column for critical channel {ch.name} is zero")

    @property
    def phonemes(self) -> list[str]:
        return list(self.critical)


def planted_oracle(spec: SyntheticSpec, phoneme: str) -> list[ArticulatorChannel]:
    """Planted critical channels of ``phoneme``, most salient target first."""
    if phoneme not in spec.critical:
        raise KeyError(f"unknown phoneme {phoneme!r}")
    chans = spec.critical[phoneme]
    order = sorted(range(len(chans)), key=lambda i: (-abs(chans[i][1]), i))
    return [chans[i][0] for i in order]


def _reflect(x: np.ndarray, bound: float = 1.0) -> np.ndarray:
    # fold into [-bound, bound]
    period = 4.0 * bound
    y = np.mod(x + bound, period)
    return np.where(y > 2.0 * bound, period - y, y) - bound


def generate_utterance(spec: SyntheticSpec, index: int, phones_per_utt: int) -> Utterance:
    rng = np.random.default_rng([spec.seed, index])
    phonemes = spec.phonemes
    k = len(phonemes)
    seq = [int(rng.integers(k))]
    while len(seq) < phones_per_utt:
        nxt = int(rng.integers(k - 1)) if k > 1 else 0
        seq.append(nxt + (nxt >= seq[-1]) if k > 1 else 0)
    lengths = rng.integers(spec.seg_min, spec.seg_max + 1, size=phones_per_utt)

    x = rng.uniform(-1.0, 1.0, size=N_EMA)
    ema, labels, active = [], [], []
    for ph, n in zip(seq, lengths):
        crit = np.zeros(N_EMA, dtype=bool)
        target = np.zeros(N_EMA)
        for ch, tgt in spec.critical[phonemes[ph]]:
            crit[ch] = True
            target[ch] = tgt
        for _ in range(n):
            step = rng.normal(size=N_EMA)
            settle = spec.alpha * x + (1.0 - spec.alpha) * target + spec.sigma_c * step
            wander = _reflect(x + spec.sigma_w * step)
            x = np.where(crit, settle, wander)
            ema.append(x.copy())
            labels.append(ph)
            active.append(crit)
    ema = np.array(ema)
    active = np.array(active)
    mfcc = (ema * active) @ spec.projection.T + spec.sigma_a * rng.normal(size=(len(ema), N_MFCC))
    return Utterance(f"utt{index:05d}", "synth", mfcc, ema, np.array(labels), phonemes)


def generate_corpus(spec: SyntheticSpec, n_utterances: int, phones_per_utt: int, start_index: int = 0) -> list[Utterance]:
    """Utterance ``i`` depends only on (spec, seed, i), so shards can be merged in any order."""
    if n_utterances < 1 or phones_per_utt < 1:
        raise ValueError("generate_corpus: counts must be positive")
    return [generate_utterance(spec, start_index + i, phones_per_utt) for i in range(n_utterances)]

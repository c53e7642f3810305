"""Per-phoneme aggregation of the learnt articulator weights."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CHANNEL_NAMES, N_EMA, ArticulatorChannel, NormStats, Utterance, make_batches
from .pipeline import Pipeline, forward


@dataclass
class SegmentWeights:
    phoneme: str
    utterance_id: str
    start: int
    end: int  # inclusive
    weights: np.ndarray | None = None


@dataclass
class CriticalityReport:
    phonemes: list[str]
    means: dict[str, np.ndarray]
    trajectories: dict[str, np.ndarray]
    segment_counts: dict[str, int]
    skipped: list[str] = field(default_factory=list)
    channels: list[str] = field(default_factory=lambda: list(CHANNEL_NAMES))

    def top_k(self, phoneme: str, k: int = 3) -> list[ArticulatorChannel]:
        return top_k(self, phoneme, k)


def extract_segments(labels: Sequence[int], table: Sequence[str] | None = None, utterance_id: str = "") -> list[SegmentWeights]:
    """Maximal runs of equal labels, in order."""
    labels = np.asarray(labels)
    spans = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            lab = int(labels[start])
            spans.append(SegmentWeights(table[lab] if table else str(lab), utterance_id, start, t - 1))
            start = t
    return spans


def resample(traj: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample a [n, C] trajectory to ``length`` frames."""
    if length < 2:
        raise ValueError("resample length must be >= 2")
    n = len(traj)
    if n == length:
        return traj.copy()
    if n == 1:
        return np.repeat(traj, length, axis=0)
    pos = np.linspace(0.0, n - 1, length)
    src = np.arange(n)
    return np.stack([np.interp(pos, src, traj[:, c]) for c in range(traj.shape[1])], axis=1)


def frame_weights(
    p: Pipeline,
    corpus: Sequence[Utterance],
    norm: NormStats,
    use_ste: bool = True,
    batch_size: int = 16,
) -> dict[str, np.ndarray]:
    """Eval-mode normalised weights for every utterance, keyed by id."""
    data = [norm.apply(u) for u in corpus]
    out = {}
    for b in make_batches(data, batch_size):
        res = forward(p, b.mfcc, b.ema if use_ste else None, b.mask)
        for i, uid in enumerate(b.ids):
            n = int(b.mask[i].sum())
            out[uid] = res.weights.data[i, :n].copy()
    return out


def aggregate(corpus: Sequence[Utterance], weights: dict[str, np.ndarray], resample_len: int = 10) -> CriticalityReport:
    if resample_len < 2:
        raise ValueError("resample length must be >= 2")
    table = list(corpus[0].phoneme_table)
    sums = {ph: np.zeros(N_EMA) for ph in table}
    frames = {ph: 0 for ph in table}
    traj = {ph: np.zeros((resample_len, N_EMA)) for ph in table}
    counts = {ph: 0 for ph in table}
    for utt in corpus:
        w = weights[utt.id]
        for seg in extract_segments(utt.labels, table, utt.id):
            span = w[seg.start : seg.end + 1]
            sums[seg.phoneme] += span.sum(axis=0)
            frames[seg.phoneme] += len(span)
            traj[seg.phoneme] += resample(span, resample_len)
            counts[seg.phoneme] += 1
    present = [ph for ph in table if counts[ph] > 0]
    return CriticalityReport(
        phonemes=present,
        means={ph: sums[ph] / frames[ph] for ph in present},
        trajectories={ph: traj[ph] / counts[ph] for ph in present},
        segment_counts={ph: counts[ph] for ph in present},
        skipped=[ph for ph in table if counts[ph] == 0],
    )


def build_report(
    p: Pipeline,
    corpus: Sequence[Utterance],
    norm: NormStats,
    resample_len: int = 10,
    use_ste: bool = True,
) -> CriticalityReport:
    return aggregate(corpus, frame_weights(p, corpus, norm, use_ste), resample_len)


def top_k(report: CriticalityReport, phoneme: str, k: int = 3) -> list[ArticulatorChannel]:
    """Channels by descending mean weight; ties keep canonical order."""
    if phoneme not in report.means:
        raise KeyError(f"phoneme {phoneme!r} is not in the report")
    if not 1 <= k <= N_EMA:
        raise ValueError(f"k must lie in [1, {N_EMA}]")
    means = report.means[phoneme]
    order = sorted(range(N_EMA), key=lambda c: (-means[c], c))
    return [ArticulatorChannel(c) for c in order[:k]]


def format_top(phoneme: str, channels: Sequence[ArticulatorChannel]) -> str:
    return f"/{phoneme}/ : " + " ".join(ch.display for ch in channels)


def phoneme_spread(report: CriticalityReport) -> float:
    """Across-phoneme variance of the per-channel mean weight, averaged over channels."""
    stack = np.stack([report.means[ph] for ph in report.phonemes])
    return float(stack.var(axis=0).mean())


def _csv_text(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def export(report: CriticalityReport, directory: Path, k: int = 3) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{directory}: cannot create report directory ({exc.strerror})") from exc
    rows = [["phoneme", *CHANNEL_NAMES, "segments", f"top{k}"]]
    for ph in report.phonemes:
        rows.append(
            [ph, *(repr(float(v)) for v in report.means[ph]), str(report.segment_counts[ph]), format_top(ph, top_k(report, ph, k))]
        )
    written = [directory / "summary.csv"]
    written[0].write_text(_csv_text(rows))
    for ph in report.phonemes:
        path = directory / f"heatmap_{ph}.csv"
        path.write_text(_csv_text([list(CHANNEL_NAMES)] + [[repr(float(v)) for v in r] for r in report.trajectories[ph]]))
        written.append(path)
    return written


def read_summary(path: Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        out = {}
        for row in reader:
            rec = dict(zip(header, row))
            out[rec["phoneme"]] = {
                "means": np.array([float(rec[c]) for c in CHANNEL_NAMES]),
                "segments": int(rec["segments"]),
                "top": row[-1],
            }
    return out


def score(report: CriticalityReport, oracle: dict[str, list[ArticulatorChannel]], k: int = 3) -> list[dict]:
    """Compare the predicted top-k against planted channels per phoneme."""
    rows = []
    for ph in report.phonemes:
        if ph not in oracle:
            continue
        planted = oracle[ph]
        top = top_k(report, ph, k)
        hits = sum(ch in top for ch in planted)
        rows.append(
            {
                "phoneme": ph,
                "planted": planted,
                "predicted": top,
                "hits": hits,
                "hit_rate": hits / len(planted),
                "all_planted_in_topk": int(hits == len(planted)),
                "top1_in_topk": int(planted[0] in top),
            }
        )
    return rows


def write_scoring(rows: list[dict], path: Path) -> None:
    table = [["phoneme", "planted", "predicted", "hits", "hit_rate", "all_planted_in_topk", "top1_in_topk"]]
    for r in rows:
        table.append(
            [
                r["phoneme"],
                " ".join(ch.name for ch in r["planted"]),
                " ".join(ch.name for ch in r["predicted"]),
                str(r["hits"]),
                repr(r["hit_rate"]),
                str(r["all_planted_in_topk"]),
                str(r["top1_in_topk"]),
            ]
        )
    Path(path).write_text(_csv_text(table))

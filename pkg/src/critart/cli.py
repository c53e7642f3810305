"""``critart`` command line: generate, train, evaluate, analyze, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import autodiff as ad
from .analyze import build_report, export, phoneme_spread, score, write_scoring
from .checks import run_checks
from .config import (
    ConfigError,
    format_run_config,
    format_synthetic_spec,
    load_run_config,
    load_synthetic_spec,
    split_run_config,
)
from .data import CHANNEL_NAMES, ArticulatorChannel, CorpusFormatError, generate_corpus, load_corpus, planted_oracle, write_corpus
from .pipeline import Pipeline
from .train import NonFiniteError, evaluate, load_checkpoint, new_state, run_epochs, save_checkpoint

log = logging.getLogger("critart")

METRIC_FIELDS = ["epoch", "l_aai", "l_fpc", "total", "train_acc", "eval_acc"]


def write_oracle(spec, path: Path) -> None:
    lines = [" ".join([ph] + [ch.name for ch in planted_oracle(spec, ph)]) for ph in spec.phonemes]
    path.write_text("\n".join(lines) + "\n")


def read_oracle(path: Path) -> dict[str, list[ArticulatorChannel]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            out[parts[0]] = [ArticulatorChannel.parse(p) for p in parts[1:]]
    return out


def write_metrics(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for r in rows:
            writer.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec, sizes = load_synthetic_spec(
        args.spec,
        {"seed": args.seed, "utterances": args.utterances, "test_utterances": args.test_utterances},
    )
    out = Path(args.out)
    n_train, n_test, phones = sizes["utterances"], sizes["test_utterances"], sizes["phones_per_utt"]
    train = generate_corpus(spec, n_train, phones)
    manifest = write_corpus(train, out)
    if n_test > 0:
        write_corpus(generate_corpus(spec, n_test, phones, start_index=n_train), out, "manifest_test.txt")
    write_oracle(spec, out / "oracle.txt")
    (out / "synthetic.cfg").write_text(format_synthetic_spec(spec, sizes))
    print(f"wrote {n_train} training and {n_test} held-out utterances; manifest {manifest}")
    return 0


def _load(manifest) -> list:
    corpus = load_corpus(manifest)
    if not corpus:
        raise CorpusFormatError(f"{manifest}: manifest lists no utterances")
    return corpus


def cmd_train(args) -> int:
    values = load_run_config(args.config, args.set)
    corpus = _load(args.manifest)
    held = _load(args.eval_manifest) if args.eval_manifest else None
    table = corpus[0].phoneme_table
    model_cfg, train_cfg = split_run_config(values, len(table))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_run_config(values))
    state = new_state(Pipeline(model_cfg), corpus, train_cfg)
    t0 = time.perf_counter()
    rows = run_epochs(state, corpus, train_cfg.epochs, held)
    write_metrics(rows, out / "metrics.csv")
    save_checkpoint(state, out / "checkpoint.bin", {"phoneme_table": table})
    print(f"trained {train_cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s; checkpoint {out / 'checkpoint.bin'}")
    return 0


def _restore(checkpoint, corpus):
    state, meta = load_checkpoint(checkpoint)
    table = meta.get("phoneme_table")
    if table is not None and table != corpus[0].phoneme_table:
        raise ValueError(
            f"phoneme table mismatch: checkpoint has {','.join(table)}, corpus has {','.join(corpus[0].phoneme_table)}"
        )
    return state


def cmd_evaluate(args) -> int:
    corpus = _load(args.manifest)
    state = _restore(args.checkpoint, corpus)
    m = evaluate(state.pipeline, corpus, state.norm)
    lines = [
        f"frame_acc = {m['frame_acc']!r}",
        f"frame_acc_no_ste = {m['frame_acc_no_ste']!r}",
        f"degenerate_rate = {m['degenerate_rate']!r}",
    ] + [f"aai_rmse.{name} = {v!r}" for name, v in zip(CHANNEL_NAMES, m["aai_rmse"])]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "evaluation.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_analyze(args) -> int:
    corpus = _load(args.manifest)
    state = _restore(args.checkpoint, corpus)
    out = Path(args.out)
    report = build_report(state.pipeline, corpus, state.norm, args.resample, use_ste=not args.no_ste)
    export(report, out, args.top_k)
    (out / "analysis.txt").write_text(
        f"checkpoint = {args.checkpoint}\nmanifest = {args.manifest}\nresample = {args.resample}\n"
        f"top_k = {args.top_k}\nste = {str(not args.no_ste).lower()}\n"
        f"phoneme_spread = {phoneme_spread(report)!r}\nskipped = {','.join(report.skipped)}\n"
    )
    oracle_path = Path(args.oracle) if args.oracle else Path(args.manifest).parent / "oracle.txt"
    if oracle_path.exists():
        rows = score(report, read_oracle(oracle_path), args.top_k)
        write_scoring(rows, out / "scoring.csv")
        both = sum(r["all_planted_in_topk"] for r in rows)
        print(f"planted channels all in top-{args.top_k}: {both}/{len(rows)} phonemes")
    print(f"report written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    for op in args.inject_fault or ():
        ad.BACKWARD_FAULTS[op] = 1.5
    try:
        t0 = time.perf_counter()
        results = run_checks(args.size)
        elapsed = time.perf_counter() - t0
    finally:
        ad.BACKWARD_FAULTS.clear()
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} max_rel_err={r.error:.3e} tol={r.tolerance:.0e} ({r.seconds:.2f}s)")
    print(f"{'all checks passed' if ok else 'gradient check FAILED'} in {elapsed:.1f}s")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critart", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic planted-criticality corpus")
    g.add_argument("--spec", help="corpus spec file (key = value); defaults if omitted")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--utterances", type=int)
    g.add_argument("--test-utterances", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the pipeline on a corpus")
    t.add_argument("manifest")
    t.add_argument("--config", help="run config file (key = value)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--eval-manifest", help="held-out corpus for per-epoch accuracy")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="frame accuracy, inversion RMSE and degenerate-frame rate")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="per-phoneme articulator weight report")
    a.add_argument("checkpoint")
    a.add_argument("manifest")
    a.add_argument("--out", required=True)
    a.add_argument("--resample", type=int, default=10)
    a.add_argument("--top-k", type=int, default=3)
    a.add_argument("--no-ste", action="store_true", help="feed predicted rather than true articulators")
    a.add_argument("--oracle", help="planted-channel file (default: oracle.txt beside the manifest)")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the pipeline")
    c.add_argument("--size", choices=["micro", "small"], default="micro")
    c.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CorpusFormatError, NonFiniteError, ValueError, KeyError, OSError) as exc:
        print(f"critart {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Flat ``key = value`` configuration files for runs and synthetic corpora."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Iterable

from .data import ArticulatorChannel, SyntheticSpec
from .pipeline import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (owner, description); defaults come from the dataclasses
RUN_KEYS = {
    "d_model": ("model", "encoder width"),
    "n_heads": ("model", "attention heads per layer"),
    "d_ff": ("model", "feed-forward width"),
    "n_layers": ("model", "encoder blocks per network"),
    "max_len": ("model", "longest utterance the positional table covers"),
    "dropout_p": ("model", "dropout on the raw 12-dim weight features"),
    "share_trunk": ("model", "inversion and weight networks share one encoder"),
    "normalization": ("model", "min-max axis: frame (across channels) or channel (across time)"),
    "epochs": ("train", "training epochs"),
    "batch_size": ("train", "utterances per batch"),
    "learning_rate": ("train", "Adam step size"),
    "beta1": ("train", "Adam first-moment decay"),
    "beta2": ("train", "Adam second-moment decay"),
    "adam_eps": ("train", "Adam denominator floor"),
    "lambda_aai": ("train", "weight of the inversion MSE"),
    "lambda_fpc": ("train", "weight of the phoneme cross-entropy"),
    "clip_grad": ("train", "global gradient-norm clip, 0 disables"),
    "bucket_by_length": ("train", "length-sorted batching"),
    "seed": ("train", "seed for initialisation, shuffling and dropout"),
    "eval_every": ("train", "epochs between held-out accuracy evaluations"),
}


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def run_defaults() -> dict:
    values = {}
    model, train = ModelConfig(), TrainConfig()
    for key, (owner, _) in RUN_KEYS.items():
        values[key] = getattr(model if owner == "model" else train, key)
    return values


def load_run_config(path: Path | None = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults <- config file <- ``key=value`` overrides. Unknown keys are errors."""
    values = run_defaults()
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(parse_pairs(Path(path).read_text().splitlines(), str(path)))
    raw.update(parse_pairs(overrides, "--set"))
    for key, text in raw.items():
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, text, values[key])
    return values


def split_run_config(values: dict, n_classes: int) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model = {k: v for k, v in values.items() if k in model_keys}
    model["n_classes"] = n_classes
    model["seed"] = values["seed"]
    try:
        return ModelConfig(**model), TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def format_run_config(values: dict) -> str:
    lines = []
    for key, (_, doc) in RUN_KEYS.items():
        v = values[key]
        text = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{key} = {text}  # {doc}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic corpus spec files

SYNTH_SCALARS = {
    "alpha": float,
    "sigma_a": float,
    "sigma_w": float,
    "sigma_c": float,
    "seg_min": int,
    "seg_max": int,
    "seed": int,
}
CORPUS_KEYS = {"utterances": 200, "test_utterances": 40, "phones_per_utt": 6}


def load_synthetic_spec(path: Path | None, overrides: dict | None = None) -> tuple[SyntheticSpec, dict]:
    """Parse a corpus spec file; returns the spec and the corpus sizes.

    Besides the scalar keys, ``critical.<phoneme> = CH:target, CH:target``
    lines define the inventory (in file order).
    """
    raw = parse_pairs(Path(path).read_text().splitlines(), str(path)) if path is not None else {}
    kwargs = {}
    critical = {}
    sizes = dict(CORPUS_KEYS)
    for key, text in raw.items():
        if key in SYNTH_SCALARS:
            try:
                kwargs[key] = SYNTH_SCALARS[key](text)
            except ValueError:
                raise ConfigError(f"spec key {key!r}: cannot parse {text!r}") from None
        elif key in CORPUS_KEYS:
            try:
                sizes[key] = int(text)
            except ValueError:
                raise ConfigError(f"spec key {key!r}: cannot parse {text!r}") from None
        elif key.startswith("critical."):
            ph = key[len("critical.") :]
            if not ph or any(c in ph for c in ", /"):
                raise ConfigError(f"spec key {key!r}: bad phoneme symbol")
            chans = []
            for item in text.split(","):
                name, sep, tgt = item.partition(":")
                try:
                    chans.append((ArticulatorChannel.parse(name), float(tgt)))
                except ValueError as exc:
                    raise ConfigError(f"spec key {key!r}: {exc}") from None
                if not sep:
                    raise ConfigError(f"spec key {key!r}: entry {item.strip()!r} needs CHANNEL:target")
            critical[ph] = chans
        else:
            raise ConfigError(f"unknown spec key {key!r}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in CORPUS_KEYS:
            sizes[key] = value
        else:
            kwargs[key] = value
    if critical:
        kwargs["critical"] = critical
    try:
        spec = SyntheticSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    return spec, sizes


def format_synthetic_spec(spec: SyntheticSpec, sizes: dict) -> str:
    lines = [f"{k} = {spec.__dict__[k]!r}" for k in SYNTH_SCALARS]
    lines += [f"{k} = {sizes[k]}" for k in CORPUS_KEYS]
    for ph, chans in spec.critical.items():
        lines.append(f"critical.{ph} = " + ", ".join(f"{ch.name}:{t!r}" for ch, t in chans))
    return "\n".join(lines) + "\n"

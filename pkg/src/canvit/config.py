"""Flat ``key=value`` run configs.

Recognized keys:

* ``preset``: base model config, one of ``desk`` (default), ``micro``, ``canvit-b``
* any ``ModelConfig`` field (``d_bb``, ``d_can``, ``depth``, ``rw_stride`` ...)
* any ``TrainConfig`` field (``steps``, ``lr``, ``batch_size``, ``K``, ``seed`` ...)
* ``n_scenes``, ``n_heldout``, ``scene_px``, ``data_seed``: synthetic data when no
  data directory is given
* ``ablation``: comma-separated names from ``distill.ABLATIONS``; overrides take
  ``name:value`` (``d_can:32``, ``rw_stride:1``)

Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .distill import ABLATIONS, TrainConfig, apply_ablation
from .model import CANVIT_B, DESK, MICRO, ModelConfig

PRESETS = {"desk": DESK, "micro": MICRO, "canvit-b": CANVIT_B}
DATA_KEYS = {"n_scenes": 256, "n_heldout": 64, "scene_px": 64, "data_seed": 0}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict = field(default_factory=lambda: dict(DATA_KEYS))
    ablations: list[str] = field(default_factory=list)


def _coerce(kind, raw: str, key: str):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind.startswith("bool"):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{key}: unsupported field type {kind}")


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep or not k.strip():
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        out[k.strip()] = v.strip()
    return out


def _apply(obj, pairs: dict[str, str]):
    types = {f.name: f.type for f in fields(obj)}
    return replace(obj, **{k: _coerce(types[k], v, k) for k, v in pairs.items()})


def parse_config(text: str) -> RunConfig:
    pairs = parse_pairs(text)
    preset = pairs.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(pairs) - model_keys - train_keys - set(DATA_KEYS) - {"ablation"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        model = _apply(PRESETS[preset], {k: v for k, v in pairs.items() if k in model_keys})
        train = _apply(TrainConfig(), {k: v for k, v in pairs.items() if k in train_keys})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    data = dict(DATA_KEYS)
    for k in DATA_KEYS:
        if k in pairs:
            data[k] = _coerce("int", pairs[k], k)
    ablations = [a.strip() for a in pairs.get("ablation", "").split(",") if a.strip()]
    for a in ablations:
        name, _, value = a.partition(":")
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
        try:
            model, train = apply_ablation(name, model, train, value or None)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"ablation {a}: {e}") from e
    return RunConfig(model, train, data, ablations)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg) -> dict[str, str]:
    """Dataclass -> ordered key -> text map that parses back to the same values."""
    return {f.name: _fmt(getattr(cfg, f.name)) for f in fields(cfg)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def model_config_from(pairs: dict[str, str]) -> ModelConfig:
    """Rebuild a ModelConfig from formatted pairs (extra keys ignored)."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    missing = set(types) - set(pairs)
    if missing:
        raise ConfigError(f"config block lacks {', '.join(sorted(missing))}")
    return ModelConfig(**{k: _coerce(types[k], pairs[k], k) for k in types})

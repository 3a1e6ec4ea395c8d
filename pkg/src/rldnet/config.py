"""Flat ``key = value`` configuration files for models, training and synthetic data.

Lines starting with ``#`` are comments. Keys mirror the field names of
:class:`~rldnet.model.ModelConfig` and :class:`~rldnet.model.TrainConfig`;
the backbone is described by ``backbone_widths`` (comma-separated stage widths).
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path

from .data import AugmentConfig, SynthSpec, spec_from_mapping
from .model import ModelConfig, TrainConfig, desk_backbone

_SECTION = "config"

MODEL_KEYS = {"num_classes", "backbone_widths", "identity_hidden_dim", "structure_hidden_dim", "lam", "input_size",
              "dropout", "structure_branch", "normalize_columns"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"lr_mult"} | {"backbone_lr_mult"}
AUGMENT_KEYS = {"scale", "crop_jitter", "flip_prob", "mean", "std"}
# written into checkpoint sidecars
RUN_KEYS = {"train_pids"}


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       delimiters=("=",), interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = dict(parser[_SECTION])
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    return values


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv(path.read_text(), str(path))


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.replace(",", " ").split())


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.replace(",", " ").split())


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def check_keys(values: dict[str, str], allowed: set[str], source: str) -> None:
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"{source}: unknown keys {', '.join(sorted(unknown))}")


def model_config(values: dict[str, str], num_classes: int | None = None) -> ModelConfig:
    """Build a :class:`ModelConfig`; ``num_classes`` overrides the file when given."""
    try:
        kw: dict = {}
        if "backbone_widths" in values:
            kw["backbone"] = desk_backbone(_ints(values["backbone_widths"]))
        for key in ("identity_hidden_dim", "structure_hidden_dim"):
            if key in values:
                kw[key] = int(values[key])
        for key in ("lam", "dropout"):
            if key in values:
                kw[key] = float(values[key])
        for key in ("structure_branch", "normalize_columns"):
            if key in values:
                kw[key] = _bool(values[key])
        if "input_size" in values:
            size = _ints(values["input_size"])
            if len(size) != 2:
                raise ConfigError("input_size needs two integers: height, width")
            kw["input_size"] = size
        n = num_classes if num_classes is not None else values.get("num_classes")
        if n is None:
            raise ConfigError("num_classes is not set")
        return ModelConfig(num_classes=int(n), **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    try:
        kw: dict = {}
        for f in fields(TrainConfig):
            if f.name in values and f.name != "lr_mult":
                kw[f.name] = type(getattr(TrainConfig(), f.name))(values[f.name])
        if "backbone_lr_mult" in values:
            kw["lr_mult"] = (("backbone.", float(values["backbone_lr_mult"])),)
        return replace(base or TrainConfig(), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def augment_config(values: dict[str, str]) -> AugmentConfig | None:
    """Augmentation settings if the file pins normalization statistics, else ``None``."""
    if "mean" not in values or "std" not in values:
        return None
    kw: dict = {"mean": _floats(values["mean"]), "std": _floats(values["std"])}
    for key in ("scale", "crop_jitter", "flip_prob"):
        if key in values:
            kw[key] = float(values[key])
    return AugmentConfig(**kw)


def synth_spec(values: dict[str, str]) -> SynthSpec:
    try:
        return spec_from_mapping(values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def describe(config: ModelConfig, tcfg: TrainConfig, augment: AugmentConfig, train_pids) -> dict[str, str]:
    """Everything needed to rebuild a trained model, as flat key-value pairs."""
    widths = [s.out_channels for s in config.backbone if s.kind == "conv2d"]
    out = {
        "num_classes": str(config.num_classes),
        "backbone_widths": ",".join(map(str, widths)),
        "identity_hidden_dim": str(config.identity_hidden_dim),
        "structure_hidden_dim": str(config.structure_hidden_dim),
        "lam": repr(config.lam),
        "input_size": ",".join(map(str, config.input_size)),
        "dropout": repr(config.dropout),
        "structure_branch": str(config.structure_branch).lower(),
        "normalize_columns": str(config.normalize_columns).lower(),
    }
    for f in fields(TrainConfig):
        if f.name != "lr_mult":
            out[f.name] = repr(getattr(tcfg, f.name))
    if tcfg.lr_mult:
        out["backbone_lr_mult"] = repr(dict(tcfg.lr_mult).get("backbone.", 1.0))
    out.update({
        "scale": repr(augment.scale), "crop_jitter": repr(augment.crop_jitter), "flip_prob": repr(augment.flip_prob),
        "mean": ",".join(repr(float(v)) for v in augment.mean), "std": ",".join(repr(float(v)) for v in augment.std),
        "train_pids": ",".join(str(int(p)) for p in train_pids),
    })
    return out

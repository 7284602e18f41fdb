"""Plain-text run configuration: one ``key = value`` per line, ``#`` comments.

Every key is checked against a typed schema; unknown keys, empty values and
out-of-range values raise :class:`ConfigError` naming the key and line.
Noise levels are written on the 0-255 scale.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

from .cfm import ModulationKind
from .errors import ConfigError
from .network import CFMNetConfig, Variant
from .noise import from_255
from .training import TrainConfig


def _positive(v) -> Optional[str]:
    return None if v > 0 else "must be positive"


def _non_negative(v) -> Optional[str]:
    return None if v >= 0 else "must be non-negative"


def _choice(options) -> Callable[[Any], Optional[str]]:
    def check(v):
        bad = [x for x in (v if isinstance(v, tuple) else (v,)) if x not in options]
        return f"unknown value(s) {bad}; expected one of {list(options)}" if bad else None
    return check


_VARIANTS = tuple(v.value for v in Variant)
_KINDS = tuple(k.value for k in ModulationKind)


@dataclass(frozen=True)
class RunConfig:
    # network
    in_channels: int = 1
    widths: tuple = (8, 16, 32)
    cfm_per_position: int = 2
    num_shifting_ops: int = 2
    kind: str = "shift"
    variant: str = "full"
    # training
    patch_size: int = 32
    batch_size: int = 8
    patches_per_epoch: int = 2048
    sigma_min: float = 0.0
    sigma_max: float = 75.0
    epochs_main: int = 75
    epochs_finetune: int = 10
    lr_start: float = 1e-4
    lr_end_main: float = 1e-6
    lr_end_ft: float = 1e-7
    flip: bool = True
    rotate: bool = True
    rescale: bool = False
    seed: int = 0
    calibration_batches: int = 8
    val_sigma: float = 25.0
    # paths
    corpus_dir: str = "data/train"
    val_dir: str = ""
    test_dir: str = ""
    out_dir: str = "runs/cfmnet"
    # ablation
    eval_sigma: float = 50.0
    ablate_variants: tuple = _VARIANTS
    ablate_kinds: tuple = _KINDS
    ablate_ops: tuple = (1, 2, 3, 4)
    timing_size: int = 64
    timing_repeats: int = 5

    def net_config(self, **overrides) -> CFMNetConfig:
        d = dict(in_channels=self.in_channels, widths=self.widths, cfm_per_position=self.cfm_per_position,
                 num_shifting_ops=self.num_shifting_ops, kind=self.kind, variant=self.variant)
        d.update(overrides)
        return CFMNetConfig(**d)

    def train_config(self, **overrides) -> TrainConfig:
        d = dict(
            patch_size=self.patch_size, batch_size=self.batch_size, patches_per_epoch=self.patches_per_epoch,
            sigma_min=from_255(self.sigma_min), sigma_max=from_255(self.sigma_max),
            epochs_main=self.epochs_main, epochs_finetune=self.epochs_finetune,
            lr_start=self.lr_start, lr_end_main=self.lr_end_main, lr_end_ft=self.lr_end_ft,
            flip=self.flip, rotate=self.rotate, rescale=self.rescale, seed=self.seed,
            val_sigma=from_255(self.val_sigma), calibration_batches=self.calibration_batches,
        )
        d.update(overrides)
        return TrainConfig(**d)

    def replace(self, **changes) -> "RunConfig":
        return validate(replace(self, **changes))


# key -> range check; the parser picks the type from the field default
_CHECKS: dict[str, Callable[[Any], Optional[str]]] = {
    "in_channels": _choice((1, 3)),
    "widths": lambda v: None if len(v) == 3 and 0 < v[0] < v[1] < v[2] else "need three increasing positive ints",
    "cfm_per_position": _positive,
    "num_shifting_ops": _choice((1, 2, 3, 4)),
    "kind": _choice(_KINDS),
    "variant": _choice(_VARIANTS),
    "patch_size": lambda v: None if v > 0 and v % 4 == 0 else "must be a positive multiple of 4",
    "batch_size": _positive,
    "patches_per_epoch": _positive,
    "sigma_min": _non_negative,
    "sigma_max": _non_negative,
    "epochs_main": _positive,
    "epochs_finetune": _non_negative,
    "lr_start": _positive,
    "lr_end_main": _positive,
    "lr_end_ft": _positive,
    "seed": _non_negative,
    "calibration_batches": _positive,
    "val_sigma": _non_negative,
    "eval_sigma": _non_negative,
    "ablate_variants": _choice(_VARIANTS),
    "ablate_kinds": _choice(_KINDS),
    "ablate_ops": _choice((1, 2, 3, 4)),
    "timing_size": lambda v: None if v > 0 and v % 4 == 0 else "must be a positive multiple of 4",
    "timing_repeats": _positive,
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _kind_of(name: str) -> type:
    default = getattr(_DEFAULTS, name)
    if isinstance(default, tuple):
        return (tuple, type(default[0]))
    return type(default)


def _parse_scalar(text: str, typ: type):
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def _parse_value(name: str, text: str):
    kind = _kind_of(name)
    if isinstance(kind, tuple):
        parts = [p.strip() for p in text.split(",")]
        if any(not p for p in parts):
            raise ValueError("empty list element")
        return tuple(_parse_scalar(p, kind[1]) for p in parts)
    return _parse_scalar(text, kind)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def validate(cfg: RunConfig, lines: Optional[dict] = None) -> RunConfig:
    lines = lines or {}
    for name, check in _CHECKS.items():
        problem = check(getattr(cfg, name))
        if problem:
            where = f" (line {lines[name]})" if name in lines else ""
            raise ConfigError(f"{name}{where}: {problem}")
    if cfg.sigma_max < cfg.sigma_min:
        raise ConfigError("sigma_max must be >= sigma_min")
    if not cfg.lr_start > cfg.lr_end_main > cfg.lr_end_ft:
        raise ConfigError("learning rates must satisfy lr_start > lr_end_main > lr_end_ft")
    return cfg


def parse(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        if value == "" and _kind_of(key) is not str:
            raise ConfigError(f"{source}:{lineno}: empty value for key {key!r}")
        try:
            values[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for key {key!r}: {exc}") from None
        lines[key] = lineno
    return validate(RunConfig(**values), {k: f"{source}:{n}" for k, n in lines.items()})


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse(text, str(p))


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")

"""Run configuration: typed dataclasses with an INI file representation.

The on-disk format is a flat structured-text document with sections
[problem], [encoding], [mlp], [optimizer], [curriculum], [collocation] and
[run].  Every field is addressable; unknown sections or keys are rejected.
Dotted command-line overrides ("encoding.levels=8") and environment
variables ("HERMFIELD_ENCODING__LEVELS=8") target the same keys.
"""

import configparser
import io
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .encoding import EncodingConfig

__all__ = [
    "ENV_PREFIX",
    "ProblemSettings",
    "EncodingSettings",
    "MlpSettings",
    "OptimizerSettings",
    "CurriculumSettings",
    "CollocationSettings",
    "RunSettings",
    "TrainConfig",
    "ConfigError",
    "parse_config",
    "serialize_config",
    "load_config",
    "apply_overrides",
    "env_overrides",
]

ENV_PREFIX = "HERMFIELD_"

CURRICULUM_TYPES = ("none", "coarse-to-fine", "fine-to-coarse", "v-cycle", "w-cycle")


class ConfigError(ValueError):
    pass


@dataclass
class ProblemSettings:
    name: str = "helmholtz2d"
    a1: float = 2.0
    a2: float | None = None
    a: float = 3.0
    k: float = 1.0
    c: float = 5.0
    nu: float = 0.01
    v_max: float | None = None

    def factory_kwargs(self) -> dict:
        if self.name == "helmholtz2d":
            return {"a1": self.a1, "a2": self.a2, "k": self.k}
        if self.name == "helmholtz3d":
            return {"a": self.a, "k": self.k}
        if self.name == "convection":
            return {"c": self.c}
        if self.name == "taylor_green":
            return {"nu": self.nu}
        if self.name == "flow_mixing":
            return {"v_max": self.v_max}
        raise ConfigError(f"unknown problem name {self.name!r}")


@dataclass
class EncodingSettings:
    levels: int = 6
    n_min: int = 4
    n_max: int | None = None
    ratio: float | None = 1.5
    log2_tables: tuple[int, ...] = (12, 12, 12, 12)
    features: int = 2
    interpolation: str = "hermite"

    def to_encoding_config(self, dim: int) -> EncodingConfig:
        n_orders = dim + 1 if self.interpolation == "hermite" else 1
        log2 = self.log2_tables
        if len(log2) == 1:
            log2 = log2 * n_orders
        if len(log2) < n_orders:
            raise ConfigError(
                f"log2_tables needs {n_orders} entries for dim {dim}, got {len(log2)}"
            )
        return EncodingConfig(
            dim=dim,
            levels=self.levels,
            table_sizes=tuple(2**g for g in log2[:n_orders]),
            features=self.features,
            n_min=self.n_min,
            n_max=self.n_max,
            ratio=self.ratio,
            interpolation=self.interpolation,
        )


@dataclass
class MlpSettings:
    width: int = 128
    depth: int = 2
    omega0: float = 30.0
    omega_hidden: float = 1.0
    activation: str = "sine"


@dataclass
class OptimizerSettings:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    restart_t0: int = 10000
    restart_mult: float = 2.0
    lr_min: float = 0.0
    lambda_max: float = 100.0
    balance_stride: int = 1
    ema_decay: float = 0.999
    grad_norm_scope: str = "all"  # or "mlp"


@dataclass
class CurriculumSettings:
    type: str = "none"
    l0: int = 1
    tau: int = 0  # 0 -> epochs // levels

    def __post_init__(self):
        if self.type not in CURRICULUM_TYPES:
            raise ConfigError(f"unknown curriculum type {self.type!r}")


@dataclass
class CollocationSettings:
    interior: int = 10000
    boundary: int = 5000  # per edge/face set
    initial: int = 5000
    data: int = 256
    resample: str = "fixed"  # or "per_epoch"


@dataclass
class RunSettings:
    epochs: int = 20000
    seed: int = 0
    deterministic: bool = True
    eval_stride: int = 500
    threads: int = 1
    precision: str = "f64"  # or "f32"
    eval_shape: tuple[int, ...] | None = None
    checkpoint_stride: int = 0  # 0: final/best only

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class TrainConfig:
    problem: ProblemSettings = field(default_factory=ProblemSettings)
    encoding: EncodingSettings = field(default_factory=EncodingSettings)
    mlp: MlpSettings = field(default_factory=MlpSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    curriculum: CurriculumSettings = field(default_factory=CurriculumSettings)
    collocation: CollocationSettings = field(default_factory=CollocationSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self):
        if self.run.epochs < 1:
            raise ConfigError("run.epochs must be positive")
        if self.curriculum.tau > self.run.epochs:
            raise ConfigError("curriculum.tau must not exceed run.epochs")
        if not 1 <= self.curriculum.l0 <= self.encoding.levels:
            raise ConfigError("curriculum.l0 outside [1, levels]")
        if self.run.precision not in ("f64", "f32"):
            raise ConfigError("run.precision must be f64 or f32")
        if self.collocation.resample not in ("fixed", "per_epoch"):
            raise ConfigError("collocation.resample must be fixed or per_epoch")
        if self.optimizer.grad_norm_scope not in ("all", "mlp"):
            raise ConfigError("optimizer.grad_norm_scope must be all or mlp")
        for c in (self.collocation.interior,):
            if c < 1:
                raise ConfigError("collocation.interior must be positive")
        return self


_SECTIONS = {
    "problem": ProblemSettings,
    "encoding": EncodingSettings,
    "mlp": MlpSettings,
    "optimizer": OptimizerSettings,
    "curriculum": CurriculumSettings,
    "collocation": CollocationSettings,
    "run": RunSettings,
}

# sections tools may append to a run manifest; ignored on load
_IGNORED_SECTIONS = ("manifest",)


def _parse_value(text: str, ftype):
    import types
    import typing

    text = text.strip()
    base = ftype
    origin = typing.get_origin(base)
    optional = False
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(base)
        optional = type(None) in args
        base = [a for a in args if a is not type(None)][0]
        origin = typing.get_origin(base)
    if text == "" or (optional and text.lower() == "none"):
        return None
    if origin is tuple:
        return tuple(int(v) for v in text.replace(",", " ").split())
    if base is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"invalid boolean {text!r}")
    if base is int:
        return int(text)
    if base is float:
        return float(text)
    return text


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _new_parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case
    return cp


def parse_config(text: str) -> TrainConfig:
    cp = _new_parser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = TrainConfig()
    for section in cp.sections():
        if section in _IGNORED_SECTIONS:
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        ftypes = {f.name: f.type for f in fields(target)}
        for key, raw in cp.items(section):
            if key not in ftypes:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _parse_value(raw, _resolve_type(target, key)))
    # re-run dataclass validation that __post_init__ would have done
    CurriculumSettings(cfg.curriculum.type, cfg.curriculum.l0, cfg.curriculum.tau)
    return cfg.validate()


def _resolve_type(obj, key):
    import typing

    hints = typing.get_type_hints(type(obj))
    return hints[key]


def serialize_config(cfg: TrainConfig, extra_sections: dict | None = None) -> str:
    cp = _new_parser()
    for section, _ in _SECTIONS.items():
        cp.add_section(section)
        target = getattr(cfg, section)
        for f in fields(target):
            cp.set(section, f.name, _format_value(getattr(target, f.name)))
    for section, items in (extra_sections or {}).items():
        cp.add_section(section)
        for k, v in items.items():
            cp.set(section, k, _format_value(v))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path: str, overrides=(), use_env: bool = True) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = parse_config(text)
    if use_env:
        cfg = apply_overrides(cfg, env_overrides())
    cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply "section.key=value" strings on top of a parsed config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} is not section.key")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override")
        target = getattr(cfg, section)
        if key not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown key {section}.{key} in override")
        setattr(target, key, _parse_value(raw, _resolve_type(target, key)))
    return cfg.validate()


def env_overrides(environ=None) -> list[str]:
    """Collect HERMFIELD_SECTION__KEY=value environment overrides."""
    environ = os.environ if environ is None else environ
    out = []
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :]
        if "__" not in rest:
            continue
        section, key = rest.split("__", 1)
        out.append(f"{section.lower()}.{key.lower()}={value}")
    return sorted(out)

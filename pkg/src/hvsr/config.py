"""Experiment configuration: one YAML file per experiment plus dotted overrides.

Sections mirror the command surface::

    seed: 0
    spec: desk              # preset name or an explicit HierarchySpec mapping
    paths: {data_dir, out_dir, vae_checkpoint, lrenc_checkpoint}
    data: {val_fraction, toy_n, toy_seed}
    degradation: {kind, scale, kernel}
    vae: <TrainConfig fields>
    lrenc: <TrainConfig fields> + {k, width_factor}
    analysis: {k_list, s_list, n_codes, n_samples, mode, n_images}

``train.<field>`` is an alias for the section the running command trains.
"""
from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .degradation import DegradationOperator, from_config as degradation_from_config
from .errors import ConfigError
from .hvae import HierarchySpec, desk_spec, micro_spec
from .lr_encoder import select_k, vdvae_ffhq256_spec
from .training import TrainConfig

SPEC_PRESETS = {"desk": desk_spec, "micro": micro_spec, "vdvae-ffhq256": vdvae_ffhq256_spec}
MODES = ("sample", "mean")
_NUMBER = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+")


@dataclass
class PathsConfig:
    data_dir: str | None = None
    out_dir: str = "runs"
    vae_checkpoint: str | None = None
    lrenc_checkpoint: str | None = None


@dataclass
class DataConfig:
    val_fraction: float = 0.1
    # used when no data_dir is given: procedural toy faces generated in memory
    toy_n: int = 2000
    toy_seed: int = 0


@dataclass
class LrencConfig(TrainConfig):
    k: int | None = None
    width_factor: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if self.k is not None and self.k < 1:
            raise ValueError(f"lrenc.k must be >= 1, got {self.k}")
        if not self.width_factor > 0:
            raise ValueError("lrenc.width_factor must be positive")

    def train_config(self) -> TrainConfig:
        d = asdict(self)
        del d["k"], d["width_factor"]
        return TrainConfig(**d)


@dataclass
class AnalysisConfig:
    k_list: list[int] | None = None  # None -> 0..L
    s_list: list[int] = field(default_factory=lambda: [1, 2, 4])
    n_codes: int = 50
    n_samples: int = 5
    mode: str = "sample"
    n_images: int = 64  # dataset images used by the encoder-based estimators

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"analysis.mode must be one of {MODES}")
        if self.n_codes < 1 or self.n_samples < 2 or self.n_images < 1:
            raise ValueError("analysis budgets need n_codes >= 1, n_samples >= 2, n_images >= 1")


_SECTIONS = {"paths": PathsConfig, "data": DataConfig, "vae": TrainConfig, "lrenc": LrencConfig,
             "analysis": AnalysisConfig}


@dataclass
class ExperimentConfig:
    seed: int = 0
    spec: str | dict = "desk"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    degradation: dict = field(default_factory=lambda: {"kind": "block-average", "scale": 4})
    vae: TrainConfig = field(default_factory=TrainConfig)
    lrenc: LrencConfig = field(default_factory=LrencConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    # ---- derived objects

    def hierarchy(self) -> HierarchySpec:
        if isinstance(self.spec, str):
            if self.spec not in SPEC_PRESETS:
                raise ConfigError(f"unknown spec preset {self.spec!r}; choose from {sorted(SPEC_PRESETS)}")
            return SPEC_PRESETS[self.spec]()
        try:
            return HierarchySpec.from_dict(self.spec)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid spec: {e}") from e

    def operator(self, scale: int | None = None) -> DegradationOperator:
        d = dict(self.degradation)
        if scale is not None:
            d["scale"] = scale
        try:
            return degradation_from_config(d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid degradation settings: {e}") from e

    def resolved_k(self) -> int:
        """``lrenc.k`` if set, else the number of groups at or below the LR resolution."""
        spec = self.hierarchy()
        size = spec.image_shape[1]
        scale = int(self.degradation.get("scale", 4))
        if size % scale:
            raise ConfigError(f"degradation.scale {scale} does not divide image size {size}")
        return self.lrenc.k if self.lrenc.k is not None else select_k(spec, size // scale)

    # ---- (de)serialization

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = copy.deepcopy(d or {})
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            if name in _SECTIONS:
                kwargs[name] = _section(name, value)
            elif name == "degradation":
                if not isinstance(value, dict):
                    raise ConfigError("degradation must be a mapping")
                kwargs[name] = value
            elif name == "seed":
                if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                    raise ConfigError(f"seed must be a non-negative integer, got {value!r}")
                kwargs[name] = value
            else:
                kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.hierarchy()
        cfg.operator()
        return cfg


def _section(name: str, value) -> object:
    cls = _SECTIONS[name]
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(value) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**{k: _coerce(allowed[k], v, f"{name}.{k}") for k, v in value.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} section: {e}") from e


def _coerce(f, v, key: str):
    """Light type coercion so that YAML ``1e-4`` strings and ints-as-floats load."""
    if v is None:
        return None
    ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    try:
        if ann == "bool":
            if not isinstance(v, bool):
                raise ValueError
            return v
        if ann == "int" or ann == "int | None":
            if isinstance(v, bool) or float(v) != int(float(v)):
                raise ValueError
            return int(float(v))
        if ann == "float":
            if isinstance(v, bool):
                raise ValueError
            return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {v!r} as {ann}") from None
    return v


def parse_overrides(tokens: list[str], train_section: str | None = None) -> dict:
    """``['--a.b', '3', '--c.d=x']`` -> nested dict; values parsed as YAML scalars."""
    out: dict = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key, sep, raw = tok[2:].partition("=")
        if not sep:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok!r} has no value")
            raw = tokens[i + 1]
            i += 1
        i += 1
        parts = key.split(".")
        if parts[0] == "train":
            if train_section is None:
                raise ConfigError(f"{key}: this command trains nothing; use vae.* or lrenc.*")
            parts[0] = train_section
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        if isinstance(value, str) and _NUMBER.fullmatch(value):
            value = float(value)  # YAML 1.1 leaves "5e-4" as a string
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key} conflicts with another override")
        node[parts[-1]] = value
    return out


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    base: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            base = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (yaml.YAMLError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        if not isinstance(base, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    return ExperimentConfig.from_dict(merge(base, overrides or {}))


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``desk`` or ``table1_x4``."""
    p = resources.files("hvsr") / "configs" / f"{name}.yaml"
    if not p.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return Path(str(p))

"""Pipeline configuration: every stage's knobs in one serializable tree.

All stage defaults live on the stage config dataclasses; this module
composes them, adds the driver-level settings (paths, working resolution,
seed), and provides lossless JSON round-tripping so a config can be
parsed, serialized, and parsed again into an identical object.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import SpecParseError
from .fieldopt import FieldOptConfig
from .orientrender import KernelParams
from .refine import RefineConfig
from .tracer import TraceConfig


@dataclass
class Orient2dConfig:
    """Oriented filter-bank settings for the 2D stage."""

    radius: int = 8
    wavelength: float = 4.0
    sigma: float = 2.0
    aspect: float = 0.25
    bins: int = 64


@dataclass
class ArtifactPaths:
    """Stage artifact names, all relative to <bundle>/<out_dir>."""

    out_dir: str = "out"
    orient_dir: str = "orient2d"
    field_file: str = "field.hfld"
    traced_file: str = "traced.hair"
    refined_file: str = "refined.hair"
    losses_file: str = "loss_log.csv"
    eval_file: str = "eval.json"


@dataclass
class PipelineConfig:
    """Driver settings plus one config block per pipeline stage."""

    seed: int = 0
    working_resolution: int = 256
    paths: ArtifactPaths = field(default_factory=ArtifactPaths)
    orient2d: Orient2dConfig = field(default_factory=Orient2dConfig)
    kernel: KernelParams = field(default_factory=KernelParams)
    volume: FieldOptConfig = field(default_factory=FieldOptConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)

    def __post_init__(self):
        if self.working_resolution < 8:
            raise SpecParseError("working resolution must be at least 8")


_NESTED = {
    "paths": ArtifactPaths,
    "orient2d": Orient2dConfig,
    "kernel": KernelParams,
    "volume": FieldOptConfig,
    "trace": TraceConfig,
    "refine": RefineConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise SpecParseError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise SpecParseError(
            f"{where}: unknown config keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and cls is PipelineConfig:
            kwargs[key] = _build(_NESTED[key], value, f"{where}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def parse_config(text: str) -> PipelineConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecParseError(f"config: {e}") from e
    return config_from_dict(data)


def serialize_config(cfg: PipelineConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise SpecParseError(f"{path}: {e}") from e
    return parse_config(text)


def save_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))

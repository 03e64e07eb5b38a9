"""Run configuration: one TOML file, one section per module, unknown keys rejected."""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .detection import CirParams, DbscanParams
from .geometry import FrameGraph, ImagingGeometry, MAPPING_MODES
from .needle import GuideGeometry
from .phantom import AtlasConfig, PhantomConfig
from .planner import SNAP_MODES, ControllerParams
from .registration import ROI_MODES, IcpParams
from .ultrasound import NoiseModel

DEFAULT_CONFIG = Path(__file__).with_name("data") / "default.toml"


class ConfigError(ValueError):
    pass


@dataclass
class SubjectConfig:
    # phantom frame -> world: translation applied after the random yaw
    placement: tuple = (-750.0, 120.0, 40.0)
    max_yaw: float = 10.0  # deg, about the vertical through the phantom centre
    max_shift: float = 20.0  # mm, uniform in x and y
    cloud_noise: float = 0.5
    keypoint_sigma: float = 2.0

    def __post_init__(self):
        if self.cloud_noise < 0 or self.keypoint_sigma < 0 or self.max_shift < 0:
            raise ValueError("subject noise and shift must be non-negative")
        if not 0 <= self.max_yaw <= 30:
            raise ValueError("max_yaw must lie in [0, 30] degrees")


@dataclass
class RegistrationConfig:
    organ: str = "liver"
    roi_mode: str = "dilated"
    roi_margin: float | None = None
    max_iterations: int = 60
    convergence_delta: float = 1e-5
    max_pair_distance: float = 25.0
    workers: int = 1

    def __post_init__(self):
        if self.roi_mode not in ROI_MODES:
            raise ValueError(f"roi_mode must be one of {ROI_MODES}")
        if self.max_iterations < 1 or self.convergence_delta <= 0 or self.max_pair_distance <= 0:
            raise ValueError("ICP parameters must be positive")

    def icp(self):
        return IcpParams(self.max_iterations, self.convergence_delta, self.max_pair_distance, self.workers)


@dataclass
class PlannerConfig:
    spacing: tuple = (13.0, 2.5)  # (along x, along y) mm
    normal_radius: float = 10.0
    y_global: tuple = (0.0, 1.0, 0.0)
    safety_workspace: tuple | None = (-700.0, -500.0, 130.0, 300.0)
    snap_distance: float | None = None
    snap: str = "project"

    def __post_init__(self):
        if self.snap not in SNAP_MODES:
            raise ValueError(f"snap must be one of {SNAP_MODES}")
        sp = (self.spacing, self.spacing) if isinstance(self.spacing, (int, float)) else tuple(self.spacing)
        if len(sp) != 2 or min(sp) <= 0:
            raise ValueError("spacing must be a positive scalar or pair")
        self.spacing = sp
        if self.normal_radius <= 0:
            raise ValueError("normal_radius must be positive")
        if self.safety_workspace is not None:
            ws = tuple(float(v) for v in self.safety_workspace)
            if len(ws) == 0:
                ws = None
            elif len(ws) != 4 or ws[0] >= ws[1] or ws[2] >= ws[3]:
                raise ValueError("safety_workspace is (xmin, xmax, ymin, ymax)")
            self.safety_workspace = ws


@dataclass
class DetectionConfig:
    cir: CirParams = field(default_factory=CirParams)
    mapping: str = "literal"
    voxel_resolution: float = 1.0

    def __post_init__(self):
        if self.mapping not in MAPPING_MODES:
            raise ValueError(f"mapping must be one of {MAPPING_MODES}")
        if self.voxel_resolution <= 0:
            raise ValueError("voxel_resolution must be positive")


@dataclass
class NeedleConfig:
    guide: GuideGeometry = field(default_factory=GuideGeometry)
    misalignment_sigma: float = 1.0
    n_samples: int = 20
    calibration_angles: tuple = tuple(float(a) for a in range(30, 41))

    def __post_init__(self):
        if self.misalignment_sigma < 0:
            raise ValueError("misalignment_sigma must be non-negative")
        if self.n_samples < 10:
            raise ValueError("n_samples must be at least 10")


@dataclass
class EvaluationConfig:
    repetitions: int = 10
    assessments: int = 3
    pick_noise_sigma: float = 0.4
    match_gate: float = 15.0
    save_frames: bool = False
    save_clouds: bool = True

    def __post_init__(self):
        if self.repetitions < 1 or self.assessments < 1:
            raise ValueError("repetitions and assessments must be >= 1")
        if self.pick_noise_sigma < 0 or self.match_gate <= 0:
            raise ValueError("pick_noise_sigma >= 0 and match_gate > 0 required")


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    atlas: AtlasConfig = field(default_factory=AtlasConfig)
    subject: SubjectConfig = field(default_factory=SubjectConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    controller: ControllerParams = field(default_factory=ControllerParams)
    ultrasound: NoiseModel = field(default_factory=NoiseModel)
    imaging: ImagingGeometry = field(default_factory=ImagingGeometry)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    clustering: DbscanParams = field(default_factory=DbscanParams)
    needle: NeedleConfig = field(default_factory=NeedleConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    frames: FrameGraph | None = None
    raw: dict = field(default_factory=dict, repr=False)


# sections whose dataclass has a nested dataclass fed from the same table
_NESTED = {
    "detection": ("cir", CirParams),
    "needle": ("guide", GuideGeometry),
}

_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name not in ("raw", "frames")}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, table, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    kwargs = {}
    for k, v in table.items():
        # dict-valued fields (lesion specs, organs, torso) keep their lists
        kwargs[k] = v if isinstance(v, dict) or k in ("lesions",) else _tuplify(v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _build_section(name, table):
    cls = _SECTIONS[name].default_factory().__class__
    if name in _NESTED:
        inner_name, inner_cls = _NESTED[name]
        inner_keys = {f.name for f in dataclasses.fields(inner_cls)}
        inner = {k: v for k, v in table.items() if k in inner_keys}
        outer = {k: v for k, v in table.items() if k not in inner_keys}
        obj = _build(cls, outer, name)
        setattr(obj, inner_name, _build(inner_cls, inner, name))
        return obj
    return _build(cls, table, name)


def merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("organs", "torso"):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(data):
    """Validate every section up front; raises ConfigError on any problem."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table")
    unknown = sorted(set(data) - set(_SECTIONS) - {"frames"})
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    kwargs = {name: _build_section(name, data[name]) for name in _SECTIONS if name in data}
    frames = None
    if "frames" in data:
        try:
            frames = FrameGraph.from_config(data["frames"])
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"[frames] {exc}") from exc
    cfg = ExperimentConfig(**kwargs, frames=frames, raw=copy.deepcopy(data))
    _cross_check(cfg)
    return cfg


def _cross_check(cfg):
    try:
        cfg.detection.cir.check_geometry(cfg.imaging)
    except ValueError as exc:
        raise ConfigError(f"[detection] {exc}") from exc
    if cfg.registration.organ not in cfg.atlas.organs and not cfg.atlas.organ_files:
        raise ConfigError(f"[registration] organ {cfg.registration.organ!r} is not in the atlas")
    k = cfg.phantom.k_skin
    if not (k > 0 or math.isinf(k)):
        raise ConfigError("[phantom] k_skin must be positive (inf for a rigid surface)")


def load_config(path=None, overrides=None):
    """Load ``path`` (default: the packaged defaults) and apply ``overrides``."""
    path = Path(path) if path is not None else DEFAULT_CONFIG
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if overrides:
        data = merge(data, overrides)
    return from_dict(data)


def default_config(overrides=None):
    return load_config(None, overrides)

"""Run configuration: one flat ``section.key = value`` text file, every field defaulted."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class GroundConfig:
    grid_size: float = 2.0
    delta_h1: float = 0.35
    delta_h2: float = 0.25
    ransac_iters: int = 16
    inlier_dist: float = 0.1
    min_points: int = 3
    voxel_dense: float = 0.8
    voxel_sparse: float = 2.4


@dataclass
class FeatureConfig:
    min_range: float = 2.0
    max_range: float = 80.0
    intrinsic_angle_deg: float = 0.0
    nonground_max_points: int = 40000
    pca_k: int = 25
    pca_radius: float = 1.0
    pca_k_min: int = 8
    linearity_min: float = 0.6
    planarity_min: float = 0.5
    curvature_min: float = 0.1
    roof_height_min: float = 2.0
    vertical_deg: float = 30.0
    nms_radius: float = 0.25
    voxel_dense: float = 0.3
    voxel_sparse: float = 1.2
    ncc_radius: float = 3.0
    intensity_max: float = 255.0
    height_max: float = 30.0
    seed: int = 0


@dataclass
class RegistrationConfig:
    kappa: float = 1.0
    inlier_noise: float = 0.05
    max_dist_start: float = 1.5
    max_dist_min: float = 0.3
    max_dist_decay: float = 0.9
    direction_deg: float = 30.0
    max_iter: int = 30
    converge_eps: float = 1e-5
    sigma_floor: float = 1e-4
    overlap_dist: float = 0.5
    balanced_min: float = 0.1
    balanced_max: float = 10.0
    use_vertex: bool = False
    use_residual_weight: bool = True
    # "irls": kernel influence divided by eps (a proper IRLS weight, 1 at eps = 0)
    # "literal": the kernel influence itself, which vanishes at eps = 0
    residual_weight_form: str = "irls"
    use_balanced_weight: bool = True
    use_intensity_weight: bool = True
    condition_max: float = 1e12


@dataclass
class FrontendConfig:
    s2s_iters: int = 3
    s2m_iters: int = 30
    deskew: bool = False
    dynamic_filter: bool = True
    dynamic_near: float = 30.0
    dynamic_dist: float = 0.5
    crop_radius: float = 80.0
    map_max_points: int = 10000
    map_voxel: float = 0.0


@dataclass
class BackendConfig:
    submap_max_trans: float = 30.0
    submap_max_rot_deg: float = 90.0
    submap_max_frames: int = 100
    submap_voxel: float = 0.3
    loop_radius: float = 50.0
    loop_radius_growth: float = 0.0
    ncc_cos_min: float = 0.9
    ransac_iters: int = 1000
    ransac_inlier: float = 1.0
    ransac_min_inliers: int = 8
    odometry_prior: bool = True
    edge_sigma_max: float = 0.2
    edge_overlap_min: float = 0.3
    pgo_max_iter: int = 50
    pgo_rel_tol: float = 1e-9
    seed: int = 0


SECTIONS = {
    "ground": GroundConfig,
    "features": FeatureConfig,
    "registration": RegistrationConfig,
    "frontend": FrontendConfig,
    "backend": BackendConfig,
}

# zero is a meaningful value for these (disabled / no correction)
_MAY_BE_ZERO = {
    "features.intrinsic_angle_deg",
    "features.min_range",
    "features.seed",
    "frontend.s2s_iters",
    "frontend.map_voxel",
    "backend.loop_radius",
    "backend.loop_radius_growth",
    "backend.seed",
}
_MAY_BE_NEGATIVE = {"features.intrinsic_angle_deg"}


@dataclass
class RunConfig:
    ground: GroundConfig = field(default_factory=GroundConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key '{key}'")
        obj = getattr(self, section)
        types = {f.name: f.type for f in fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown config key '{key}'")
        setattr(obj, name, _coerce(key, types[name], value))

    def validate(self) -> None:
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                key = f"{section}.{f.name}"
                v = getattr(obj, f.name)
                if isinstance(v, str):
                    if key in _CHOICES and v not in _CHOICES[key]:
                        raise ConfigError(f"config key '{key}' must be one of {sorted(_CHOICES[key])}, got '{v}'")
                    continue
                if isinstance(v, bool) or key in _MAY_BE_NEGATIVE:
                    continue
                if not math.isfinite(v):
                    raise ConfigError(f"config key '{key}' must be finite")
                if v < 0 or (v == 0 and key not in _MAY_BE_ZERO):
                    raise ConfigError(f"config key '{key}' must be positive, got {v}")

    def items(self):
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)


_CHOICES = {"registration.residual_weight_form": {"irls", "literal"}}


def _coerce(key: str, typ, value):
    typ = typ if isinstance(typ, str) else typ.__name__
    if not isinstance(value, str):
        value = str(value)
    value = value.strip()
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key '{key}' expects {typ}, got '{value}'") from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value or "=" in value:
            raise ConfigError(f"line {lineno}: malformed entry '{raw.strip()}'")
        try:
            cfg.set(key, value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.items()) + "\n"

"""Pipeline configuration, canonical serialization and config digests.

All lengths are in meters, conductivities in S/m, contact resistances in
Ohm*m (per unit arc length of electrode), angles in radians.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

TOOL_VERSION = "0.1.0"
FORMAT_VERSION = 1

SIGMA_MIN = 1e-5
SIGMA_MAX = 1e2
Z_MIN = 1e-6
Z_MAX = 10.0


@dataclass(frozen=True)
class GaussianSpec:
    """Scalar Gaussian prior N(mean, std^2)."""

    mean: float
    std: float


@dataclass(frozen=True)
class TissuePriors:
    """Per-parameter sampling distributions for target generation.

    Defaults: scalp N(0.2, 0.02^2), skull N(0.06, 0.006^2),
    brain N(0.2, 0.02^2) S/m, contact N(0.01, 0.0025^2) Ohm*m (i.i.d. per
    electrode) and electrode center angles N(intended, 0.015^2) rad.
    """

    scalp: GaussianSpec = GaussianSpec(0.2, 0.02)
    skull: GaussianSpec = GaussianSpec(0.06, 0.006)
    brain: GaussianSpec = GaussianSpec(0.2, 0.02)
    contact: GaussianSpec = GaussianSpec(0.01, 0.0025)
    electrode_angle_std: float = 0.015


@dataclass(frozen=True)
class StrokeSpec:
    """Disk inclusion placed inside the brain layer."""

    center: tuple[float, float] = (0.02, 0.03)
    radius: float = 0.0225
    hemorrhagic: float = 2.0
    ischemic: float = 0.02


@dataclass(frozen=True)
class LibraryConfig:
    """Synthetic anatomy-library generator settings."""

    n: int = 50
    grid: int = 256
    modes: int = 10
    seed: int = 21
    base_radii: tuple[float, float, float] = (0.09, 0.082, 0.075)
    fourier_order: int = 4
    radial_std: float = 0.003
    layer_corr: float = 0.7


@dataclass(frozen=True)
class MeshConfig:
    """Reference-mesh grading parameters (unit-disk scale)."""

    h0: float = 0.2
    electrode_refine: float = 2.0
    boundary_refine: float = 1.5


@dataclass(frozen=True)
class ReconConfig:
    """Free parameters of the edge-promoting reconstruction."""

    tv_smoothing: float = 1e-6
    c_upsilon: float = 300.0  # 1/m
    d_upsilon: float = 0.01  # m
    n_ld: int = 5
    max_outer: int = 30
    lsqr_cap: int = 500
    eig_tol: float = 1e-3
    eig_cap: int = 500
    sigma_bounds: tuple[float, float] = (SIGMA_MIN, SIGMA_MAX)
    z_bounds: tuple[float, float] = (Z_MIN, Z_MAX)


@dataclass(frozen=True)
class PipelineConfig:
    """Full configuration shared by simulation, training and reconstruction."""

    electrodes: int = 16
    feed: int = 1  # 1-based label of the current-feeding electrode
    electrode_length: float = 0.015
    sim_refinement: int = 3
    recon_refinement: int = 2
    noise_level: float = 1e-3
    aem_samples: int = 400
    aem_seed: int = 11
    aem_case: int = 2
    library: LibraryConfig = field(default_factory=LibraryConfig)
    tissue: TissuePriors = field(default_factory=TissuePriors)
    stroke: StrokeSpec = field(default_factory=StrokeSpec)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)

    def validate(self) -> "PipelineConfig":
        if self.electrodes < 2:
            raise ConfigError("at least 2 electrodes required")
        if not 1 <= self.feed <= self.electrodes:
            raise ConfigError(
                f"feed electrode {self.feed} outside 1..{self.electrodes}"
            )
        if self.sim_refinement <= self.recon_refinement:
            raise ConfigError(
                "simulation refinement must exceed reconstruction refinement "
                f"(got sim={self.sim_refinement}, recon={self.recon_refinement})"
            )
        if self.electrode_length <= 0:
            raise ConfigError("electrode length must be positive")
        if self.noise_level < 0:
            raise ConfigError("noise level must be non-negative")
        for name in ("scalp", "skull", "brain", "contact"):
            spec = getattr(self.tissue, name)
            if spec.std < 0:
                raise ConfigError(f"negative std for {name}")
        if self.tissue.electrode_angle_std < 0:
            raise ConfigError("negative electrode angle std")
        lib = self.library
        if lib.n < 2 or lib.grid < 16:
            raise ConfigError("library needs n >= 2 and grid >= 16")
        if not 1 <= lib.modes <= lib.n:
            raise ConfigError("library modes must lie in 1..n")
        if not (lib.base_radii[0] > lib.base_radii[1] > lib.base_radii[2] > 0):
            raise ConfigError("base radii must be positive and strictly nested")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return digest_of(self.to_dict())


def digest_of(obj) -> str:
    """SHA-256 digest of the canonical JSON form of ``obj``."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _merge(cls, defaults, override: dict):
    kwargs = {}
    valid = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in override.items():
        if key not in valid:
            raise ConfigError(f"unknown config key '{key}' for {cls.__name__}")
        kwargs[key] = value
    merged = dataclasses.asdict(defaults)
    merged.update(kwargs)
    return merged


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a validated PipelineConfig from a (possibly partial) dict."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = dict(data)

    def sub(cls, key, default):
        raw = data.pop(key, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"config section '{key}' must be an object")
        merged = _merge(cls, default, raw)
        return _build_nested(cls, merged)

    library = sub(LibraryConfig, "library", LibraryConfig())
    tissue = sub(TissuePriors, "tissue", TissuePriors())
    stroke = sub(StrokeSpec, "stroke", StrokeSpec())
    mesh = sub(MeshConfig, "mesh", MeshConfig())
    recon = sub(ReconConfig, "recon", ReconConfig())
    merged = _merge(PipelineConfig, PipelineConfig(), data)
    merged.update(
        library=library, tissue=tissue, stroke=stroke, mesh=mesh, recon=recon
    )
    cfg = _build_nested(PipelineConfig, merged)
    return cfg.validate()


def _build_nested(cls, data):
    kwargs = {}
    for f in dataclasses.fields(cls):
        value = data[f.name]
        if isinstance(value, dict) and f.name in _NESTED:
            value = _build_nested(_NESTED[f.name], value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


_NESTED = {
    "scalp": GaussianSpec,
    "skull": GaussianSpec,
    "brain": GaussianSpec,
    "contact": GaussianSpec,
    "library": LibraryConfig,
    "tissue": TissuePriors,
    "stroke": StrokeSpec,
    "mesh": MeshConfig,
    "recon": ReconConfig,
}

"""Target patient sampling, conductivity rasterization and data simulation.

Case 1 draws every parameter with its std scaled by 0.5, Case 2 with the
nominal stds, Case 3 deterministically at the means.  Patients are healthy
(no inclusion), hemorrhagic (conductive disk) or ischemic (resistive disk);
the stroke disk sits at a fixed off-center position inside the brain layer.

Measurement noise is i.i.d. Gaussian per entry with std equal to the noise
level times the range (max - min) of the noiseless stacked data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import (
    SIGMA_MAX,
    SIGMA_MIN,
    StrokeSpec,
    TissuePriors,
    Z_MAX,
    Z_MIN,
)
from .errors import ConfigError, RetryCapError
from .forward import Measurements, solve_forward
from .mesh import Mesh
from .shape import LAYER_BRAIN, LAYER_SCALP, LAYER_SKULL, ShapeBasis, sample_shape_coeffs

PATIENTS = ("healthy", "hemorrhagic", "ischemic")
CASES = (1, 2, 3)

_CASE_SCALE = {1: 0.5, 2: 1.0, 3: 0.0}


@dataclass(frozen=True)
class Stroke:
    center: np.ndarray  # (2,) meters
    radius: float
    conductivity: float


@dataclass(frozen=True)
class TargetSpec:
    """One sampled patient: geometry, contacts, tissue levels, inclusion."""

    alpha: np.ndarray
    electrode_angles: np.ndarray
    z: np.ndarray
    conductivities: np.ndarray  # (scalp, skull, brain) S/m
    stroke: Stroke | None
    case: int
    patient: str
    seed: int | None = None


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal noise: std per entry = level * span of the noiseless data."""

    level: float
    span: float

    @property
    def std(self) -> float:
        return self.level * self.span

    def covariance_diag(self, dim: int) -> np.ndarray:
        return np.full(dim, self.std**2)


@dataclass(frozen=True)
class MeasurementRecord:
    """Noisy measurement with its noise metadata and target provenance."""

    measurements: Measurements
    noise: NoiseModel
    noise_seed: int | None
    case: int
    patient: str
    target_seed: int | None
    sim_refinement: int
    config_digest: str | None = None


def _draw_positive(rng, spec, scale, lo, hi, what, max_tries=100):
    if scale == 0.0:
        return spec.mean
    for _ in range(max_tries):
        value = rng.normal(spec.mean, scale * spec.std)
        if lo <= value <= hi:
            return value
    raise RetryCapError(f"no {what} draw inside [{lo:g}, {hi:g}] in {max_tries} tries")


def sample_target(
    basis: ShapeBasis,
    case: int,
    patient: str,
    rng: np.random.Generator,
    *,
    intended_angles: np.ndarray,
    priors: TissuePriors = TissuePriors(),
    stroke_spec: StrokeSpec = StrokeSpec(),
    seed: int | None = None,
) -> TargetSpec:
    """Draw one target patient for the given geometric case."""
    if case not in CASES:
        raise ConfigError(f"case must be one of {CASES}, got {case}")
    patient = _canonical_patient(patient)
    scale = _CASE_SCALE[case]
    n_el = intended_angles.size

    if scale == 0.0:
        alpha = np.zeros(basis.n_modes)
        angles = intended_angles.copy()
        z = np.full(n_el, priors.contact.mean)
        cond = np.array([priors.scalp.mean, priors.skull.mean, priors.brain.mean])
    else:
        alpha = sample_shape_coeffs(basis, rng, scale=scale)
        angles = intended_angles + rng.normal(
            0.0, scale * priors.electrode_angle_std, n_el
        )
        z = np.array(
            [
                _draw_positive(rng, priors.contact, scale, Z_MIN, Z_MAX, "contact")
                for _ in range(n_el)
            ]
        )
        cond = np.array(
            [
                _draw_positive(rng, spec, scale, SIGMA_MIN, SIGMA_MAX, name)
                for name, spec in (
                    ("scalp", priors.scalp),
                    ("skull", priors.skull),
                    ("brain", priors.brain),
                )
            ]
        )

    stroke = None
    if patient == "hemorrhagic":
        stroke = Stroke(
            center=np.asarray(stroke_spec.center, float),
            radius=stroke_spec.radius,
            conductivity=stroke_spec.hemorrhagic,
        )
    elif patient == "ischemic":
        stroke = Stroke(
            center=np.asarray(stroke_spec.center, float),
            radius=stroke_spec.radius,
            conductivity=stroke_spec.ischemic,
        )
    return TargetSpec(
        alpha=alpha,
        electrode_angles=angles,
        z=z,
        conductivities=cond,
        stroke=stroke,
        case=case,
        patient=patient,
        seed=seed,
    )


def _canonical_patient(patient: str) -> str:
    aliases = {
        "healthy": "healthy",
        "hem": "hemorrhagic",
        "hemorrhagic": "hemorrhagic",
        "isch": "ischemic",
        "ischemic": "ischemic",
    }
    try:
        return aliases[patient]
    except KeyError:
        raise ConfigError(f"unknown patient type '{patient}'") from None


def rasterize_conductivity(mesh: Mesh, target: TargetSpec) -> np.ndarray:
    """Nodal conductivity: layer levels plus the stroke disk, if any.

    Interface nodes take the inner layer's value; stroke membership is
    evaluated in the physical coordinates of the deformed mesh.
    """
    levels = target.conductivities
    sigma = np.empty(mesh.n_nodes)
    layer = mesh.node_layer
    sigma[layer == LAYER_SCALP] = levels[0]
    sigma[layer == LAYER_SKULL] = levels[1]
    sigma[layer == LAYER_BRAIN] = levels[2]
    if target.stroke is not None:
        stroke = target.stroke
        dist = np.linalg.norm(mesh.nodes - stroke.center[None, :], axis=1)
        inside = dist <= stroke.radius
        if np.any(inside & (layer != LAYER_BRAIN)):
            raise ConfigError("stroke disk extends outside the brain layer")
        sigma[inside] = stroke.conductivity
    return sigma


def simulate_measurement(
    basis: ShapeBasis,
    sim_mesh_ref,
    target: TargetSpec,
    noise_level: float,
    rng: np.random.Generator,
    *,
    feed: int,
    recon_refinement: int,
    noise_seed: int | None = None,
    config_digest: str | None = None,
) -> MeasurementRecord:
    """Forward-solve the target on the fine mesh and add measurement noise.

    ``sim_mesh_ref`` must be strictly finer than the reconstruction mesh;
    this guards against committing the inverse crime.
    """
    from .mesh import deform_mesh

    if sim_mesh_ref.refinement <= recon_refinement:
        raise ConfigError(
            "simulation refinement must exceed reconstruction refinement "
            f"({sim_mesh_ref.refinement} <= {recon_refinement})"
        )
    mesh = deform_mesh(sim_mesh_ref, basis, target.alpha, target.electrode_angles)
    sigma = rasterize_conductivity(mesh, target)
    clean = solve_forward(mesh, sigma, target.z, feed=feed)
    span = float(clean.values.max() - clean.values.min())
    noise = NoiseModel(level=noise_level, span=span)
    values = clean.values
    if noise_level > 0.0:
        values = values + rng.normal(0.0, noise.std, values.size)
    noisy = Measurements(
        values=values, feed=clean.feed, n_electrodes=clean.n_electrodes
    )
    return MeasurementRecord(
        measurements=noisy,
        noise=noise,
        noise_seed=noise_seed,
        case=target.case,
        patient=target.patient,
        target_seed=target.seed,
        sim_refinement=sim_mesh_ref.refinement,
        config_digest=config_digest,
    )

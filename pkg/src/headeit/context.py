"""Derived pipeline state: shape basis, reference meshes, surrogate model.

Everything here is a deterministic function of the PipelineConfig, so any
process holding the same config reproduces identical meshes and bases;
artifact files only need to carry the config digest.
"""

from __future__ import annotations

import numpy as np

from .config import PipelineConfig
from .mesh import Mesh, ReferenceMesh, build_reference_mesh, deform_mesh
from .phantom import MeasurementRecord, TargetSpec, sample_target, simulate_measurement
from .shape import (
    LAYER_BRAIN,
    LAYER_SCALP,
    LAYER_SKULL,
    ShapeBasis,
    build_library,
    compute_pca,
)


class PipelineContext:
    """Caches the config-derived basis and meshes used across the pipeline."""

    def __init__(self, config: PipelineConfig):
        self.config = config.validate()
        self._basis: ShapeBasis | None = None
        self._refs: dict[int, ReferenceMesh] = {}
        self._surrogates: dict[int, Mesh] = {}

    @property
    def basis(self) -> ShapeBasis:
        if self._basis is None:
            lib_cfg = self.config.library
            library = build_library(
                lib_cfg.n,
                lib_cfg.grid,
                lib_cfg.seed,
                base_radii=lib_cfg.base_radii,
                fourier_order=lib_cfg.fourier_order,
                radial_std=lib_cfg.radial_std,
                layer_corr=lib_cfg.layer_corr,
            )
            self._basis = compute_pca(library, lib_cfg.modes)
        return self._basis

    @property
    def electrode_halfwidth(self) -> float:
        """Template arc half-width from the physical electrode length."""
        mean_scalp = float(self.basis.mean[LAYER_SCALP].mean())
        return 0.5 * self.config.electrode_length / mean_scalp

    def reference_mesh(self, refinement: int) -> ReferenceMesh:
        if refinement not in self._refs:
            cfg = self.config
            base = cfg.library.base_radii
            self._refs[refinement] = build_reference_mesh(
                refinement,
                cfg.electrodes,
                self.electrode_halfwidth,
                h0=cfg.mesh.h0,
                electrode_refine=cfg.mesh.electrode_refine,
                boundary_refine=cfg.mesh.boundary_refine,
                rho_skull=base[1] / base[0],
                rho_brain=base[2] / base[0],
            )
        return self._refs[refinement]

    def surrogate_mesh(self, refinement: int | None = None) -> Mesh:
        """Mean-anatomy mesh with electrodes at their intended angles."""
        if refinement is None:
            refinement = self.config.recon_refinement
        if refinement not in self._surrogates:
            ref = self.reference_mesh(refinement)
            self._surrogates[refinement] = deform_mesh(
                ref, self.basis, np.zeros(self.basis.n_modes)
            )
        return self._surrogates[refinement]

    def intended_angles(self) -> np.ndarray:
        return self.reference_mesh(self.config.recon_refinement).electrode_centers

    def sigma_star(self, mesh: Mesh) -> np.ndarray:
        """Piecewise-constant literature conductivity on the given mesh."""
        tissue = self.config.tissue
        levels = {
            LAYER_SCALP: tissue.scalp.mean,
            LAYER_SKULL: tissue.skull.mean,
            LAYER_BRAIN: tissue.brain.mean,
        }
        sigma = np.empty(mesh.n_nodes)
        for layer, value in levels.items():
            sigma[mesh.node_layer == layer] = value
        return sigma

    # -- convenience entry points ---------------------------------------------

    def sample_target(
        self, case: int, patient: str, rng: np.random.Generator, seed=None
    ) -> TargetSpec:
        return sample_target(
            self.basis,
            case,
            patient,
            rng,
            intended_angles=self.reference_mesh(
                self.config.sim_refinement
            ).electrode_centers,
            priors=self.config.tissue,
            stroke_spec=self.config.stroke,
            seed=seed,
        )

    def simulate(
        self,
        case: int,
        patient: str,
        seed: int,
        noise_level: float | None = None,
    ) -> MeasurementRecord:
        cfg = self.config
        if noise_level is None:
            noise_level = cfg.noise_level
        rng = np.random.default_rng(seed)
        target = self.sample_target(case, patient, rng, seed=seed)
        return simulate_measurement(
            self.basis,
            self.reference_mesh(cfg.sim_refinement),
            target,
            noise_level,
            rng,
            feed=cfg.feed,
            recon_refinement=cfg.recon_refinement,
            noise_seed=seed,
            config_digest=cfg.digest(),
        )

"""Approximation-error statistics learning and the whitening transform.

The error model is trained from paired forward solves: an accurate solve on
a randomly drawn anatomy with drawn tissue levels and electrode positions,
and a surrogate solve on the mean anatomy with literature conductivities
sharing the same contact resistances.  The sample mean and unbiased sample
covariance of the differences define the enhanced noise model whose total
covariance (approximation error plus measurement noise) is factorized into
the whitener applied to all residuals during reconstruction.

Training is a deterministic map over per-sample seeds reduced in sample
order, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .config import PipelineConfig, config_from_dict
from .errors import ConfigError, NumericalError, TrainingError
from .phantom import NoiseModel

#: retries allowed for one training sample before counting it as failed
SAMPLE_RETRIES = 20

WORKERS_ENV = "HEADEIT_WORKERS"


@dataclass(frozen=True)
class ErrorModel:
    """Mean and covariance of the geometry-mismodeling error."""

    mean: np.ndarray  # (D,)
    cov: np.ndarray  # (D, D)
    n_samples: int
    n_failed: int
    case: int
    config_digest: str
    surrogate: dict

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class Whitener:
    """Triangular whitening factor G with G^T G = (total covariance)^-1.

    ``offset`` is subtracted from the data before whitening, absorbing the
    nonzero error mean into the measurement.
    """

    factor: np.ndarray  # (D, D) lower triangular
    offset: np.ndarray  # (D,)
    use_aem: bool

    def apply(self, residual: np.ndarray) -> np.ndarray:
        return self.factor @ residual

    @property
    def dim(self) -> int:
        return self.offset.size


def _sample_epsilon(ctx, seed_parts, case: int) -> np.ndarray:
    """One training realization: accurate minus surrogate stacked potentials."""
    from .forward import solve_forward
    from .mesh import deform_mesh
    from .phantom import rasterize_conductivity

    cfg = ctx.config
    rng = np.random.default_rng(seed_parts)
    target = ctx.sample_target(case, "healthy", rng)
    ref = ctx.reference_mesh(cfg.sim_refinement)
    accurate_mesh = deform_mesh(ref, ctx.basis, target.alpha, target.electrode_angles)
    sigma_true = rasterize_conductivity(accurate_mesh, target)
    accurate = solve_forward(accurate_mesh, sigma_true, target.z, feed=cfg.feed)

    surrogate_mesh = ctx.surrogate_mesh(cfg.sim_refinement)
    sigma_star = ctx.sigma_star(surrogate_mesh)
    reduced = solve_forward(surrogate_mesh, sigma_star, target.z, feed=cfg.feed)
    return accurate.values - reduced.values


def _run_sample(ctx, index: int, base_seed: int, case: int):
    """Sample with deterministic retry seeds; returns (epsilon, n_failed)."""
    failures = 0
    for retry in range(SAMPLE_RETRIES):
        seed = base_seed + index if retry == 0 else (base_seed + index, retry)
        try:
            return _sample_epsilon(ctx, seed, case), failures
        except NumericalError:
            failures += 1
    raise TrainingError(
        f"training sample {index} failed {failures} times in a row"
    )


_WORKER_CTX = None


def _worker_init(config_dict: dict):
    global _WORKER_CTX
    from .context import PipelineContext

    _WORKER_CTX = PipelineContext(config_from_dict(config_dict))


def _worker_run(args):
    index, base_seed, case = args
    eps, failures = _run_sample(_WORKER_CTX, index, base_seed, case)
    return index, eps, failures


def train_error_model(
    ctx,
    n_samples: int,
    base_seed: int,
    workers: int = 1,
    case: int | None = None,
    sample_fn=None,
) -> ErrorModel:
    """Estimate error statistics from ``n_samples`` paired forward solves.

    Sample ``i`` uses seed ``base_seed + i``; failed draws are retried with
    fresh deterministic seeds and counted.  Aborts when more than 10% of
    draws fail.  ``sample_fn(index, base_seed, case) -> (eps, n_failed)``
    can replace the forward-solve pair (used by tests).  The result is
    independent of ``workers``.
    """
    if n_samples < 2:
        raise ConfigError("error-model training needs at least 2 samples")
    cfg: PipelineConfig = ctx.config
    if case is None:
        case = cfg.aem_case
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers:
        workers = int(env_workers)
    workers = max(1, int(workers))

    results: list[np.ndarray | None] = [None] * n_samples
    failures = np.zeros(n_samples, dtype=int)
    if sample_fn is not None:
        for i in range(n_samples):
            results[i], failures[i] = sample_fn(i + 1, base_seed, case)
    elif workers == 1:
        for i in range(n_samples):
            results[i], failures[i] = _run_sample(ctx, i + 1, base_seed, case)
    else:
        config_dict = cfg.to_dict()
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init, initargs=(config_dict,)
        ) as pool:
            jobs = [(i + 1, base_seed, case) for i in range(n_samples)]
            for index, eps, n_failed in pool.map(_worker_run, jobs, chunksize=4):
                results[index - 1] = eps
                failures[index - 1] = n_failed

    total_failed = int(failures.sum())
    if total_failed > 0.1 * n_samples:
        raise TrainingError(
            f"{total_failed} failed draws for {n_samples} samples (> 10%)"
        )

    stack = np.stack(results)  # (n_samples, D), accumulated in sample order
    mean = stack.mean(axis=0)
    centered = stack - mean
    cov = centered.T @ centered / (n_samples - 1)

    surrogate_mesh = ctx.surrogate_mesh(cfg.sim_refinement)
    return ErrorModel(
        mean=mean,
        cov=cov,
        n_samples=n_samples,
        n_failed=total_failed,
        case=case,
        config_digest=cfg.digest(),
        surrogate={
            "refinement": cfg.sim_refinement,
            "nodes": surrogate_mesh.n_nodes,
            "conductivities": [
                cfg.tissue.scalp.mean,
                cfg.tissue.skull.mean,
                cfg.tissue.brain.mean,
            ],
        },
    )


def build_whitener(
    error_model: ErrorModel | None,
    noise: NoiseModel,
    use_aem: bool,
    dim: int | None = None,
) -> Whitener:
    """Whitener of the total noise covariance (enhanced model when AEM on).

    With AEM off the covariance is the diagonal measurement noise alone and
    a zero noise level is rejected; ``dim`` is then required unless an
    error model supplies it.  A rank-deficient error covariance is
    regularized by a jitter of 1e-12 * trace/dim before factorization.
    """
    if use_aem:
        if error_model is None:
            raise ConfigError("AEM requested but no error model given")
        dim = error_model.dim
        total = error_model.cov + np.diag(noise.covariance_diag(dim))
        offset = error_model.mean.copy()
    else:
        if noise.std <= 0.0:
            raise ConfigError("zero measurement noise requires the AEM")
        if dim is None:
            if error_model is None:
                raise ConfigError("pass dim when building a whitener without AEM")
            dim = error_model.dim
        total = np.diag(noise.covariance_diag(dim))
        offset = np.zeros(dim)
    return _whitener_from_cov(total, offset, use_aem)


def _whitener_from_cov(total, offset, use_aem) -> Whitener:
    dim = total.shape[0]
    try:
        lower = np.linalg.cholesky(total)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(total) / dim
        try:
            lower = np.linalg.cholesky(total + jitter * np.eye(dim))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "total noise covariance is not positive definite "
                f"even after jitter {jitter:.3e}"
            ) from exc
    factor = sla.solve_triangular(lower, np.eye(dim), lower=True)
    return Whitener(factor=factor, offset=offset, use_aem=use_aem)


def draw_consistent_data(
    error_model: ErrorModel,
    noise: NoiseModel,
    baseline: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw data from the fitted model: baseline + eps + e (for diagnostics)."""
    dim = error_model.dim
    eigvals, eigvecs = np.linalg.eigh(error_model.cov)
    eigvals = np.clip(eigvals, 0.0, None)
    eps = error_model.mean + eigvecs @ (
        np.sqrt(eigvals) * rng.standard_normal(dim)
    )
    e = rng.normal(0.0, noise.std, dim)
    return baseline + eps + e

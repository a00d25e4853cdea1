"""Principal-component model of layered head outlines.

A head anatomy is described by three nested star-shaped curves (scalp,
skull, brain) given by per-angle radii on a uniform grid over [0, 2*pi).
A synthetic library of such anatomies provides mean radii and a set of
perturbations; an eigendecomposition of their Gram matrix in the discrete
[H1]^3 inner product yields an orthonormal low-dimensional basis that is
optimal in the mean-square sense among subspaces of the same dimension.
Random anatomies are drawn by sampling the basis coefficients from a
zero-mean Gaussian whose variances derive from the Gram eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LayerNestingError, NumericalError, RetryCapError

N_LAYERS = 3
LAYER_NAMES = ("scalp", "skull", "brain")
LAYER_SCALP, LAYER_SKULL, LAYER_BRAIN = 0, 1, 2

#: relative eigenvalue threshold below which basis directions are rejected
RANK_RTOL = 1e-12


def angular_grid(grid_size: int) -> np.ndarray:
    """Uniform angles theta_i = 2*pi*i/G, i = 0..G-1."""
    return 2.0 * np.pi * np.arange(grid_size) / grid_size


#: minimal layer clearance (meters) accepted when sampling random anatomies
NESTING_MARGIN = 1e-3


def is_nested(values: np.ndarray, margin: float = 0.0) -> bool:
    """True if radii are positive and layers clear each other by ``margin``."""
    values = np.asarray(values)
    if np.any(values[LAYER_BRAIN] <= margin):
        return False
    return bool(np.all(np.diff(values, axis=0) < -margin))


@dataclass(frozen=True)
class RadiusProfile:
    """Per-angle radii (meters) of the three layer outlines, shape (3, G)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if values.ndim != 2 or values.shape[0] != N_LAYERS:
            raise ValueError(f"expected (3, G) radii, got {values.shape}")
        if not is_nested(values):
            raise LayerNestingError("layer outlines are not strictly nested")
        object.__setattr__(self, "values", values)

    @property
    def grid_size(self) -> int:
        return self.values.shape[1]

    @property
    def layer_count(self) -> int:
        return N_LAYERS


@dataclass(frozen=True)
class HeadLibrary:
    """Anatomy library with mean profile and zero-mean perturbations."""

    profiles: np.ndarray  # (n, 3, G)
    mean: np.ndarray  # (3, G)
    perturbations: np.ndarray  # (n, 3, G), rows sum to ~0

    @property
    def n(self) -> int:
        return self.profiles.shape[0]

    @property
    def grid_size(self) -> int:
        return self.profiles.shape[2]

    @classmethod
    def from_profiles(cls, profiles) -> "HeadLibrary":
        stack = np.stack([np.asarray(p.values if isinstance(p, RadiusProfile) else p, dtype=float) for p in profiles])
        if stack.ndim != 3 or stack.shape[1] != N_LAYERS:
            raise ValueError(f"expected (n, 3, G) profiles, got {stack.shape}")
        mean = stack.mean(axis=0)
        return cls(profiles=stack, mean=mean, perturbations=stack - mean)


@dataclass(frozen=True)
class ShapeBasis:
    """Orthonormal shape basis with coefficient covariance.

    ``basis[k]`` is the k-th (3, G) deviation direction, orthonormal in the
    discrete [H1]^3 inner product; ``coeff_var[k] = eigenvalues[k]/(n-1)``
    is the variance of the k-th shape coefficient.
    """

    mean: np.ndarray  # (3, G)
    basis: np.ndarray  # (modes, 3, G)
    eigenvalues: np.ndarray  # (modes,) descending, positive
    coeff_var: np.ndarray  # (modes,)
    library_size: int

    @property
    def n_modes(self) -> int:
        return self.basis.shape[0]

    @property
    def grid_size(self) -> int:
        return self.mean.shape[1]


def build_library(
    n: int,
    grid_size: int,
    seed: int,
    *,
    base_radii: tuple[float, float, float] = (0.09, 0.082, 0.075),
    fourier_order: int = 4,
    radial_std: float = 0.003,
    layer_corr: float = 0.7,
    max_tries: int = 100,
) -> HeadLibrary:
    """Generate ``n`` nested anatomies by random low-order Fourier perturbation.

    Each layer outline is the base circle plus a trigonometric polynomial of
    order <= ``fourier_order`` whose coefficients are zero-mean Gaussians,
    scaled so the pointwise radial std equals ``radial_std`` and correlated
    across layers with coefficient ``layer_corr``.  Samples with crossing
    layers are rejected and redrawn, up to ``max_tries`` rejections per head.
    """
    if n < 2:
        raise ValueError("library needs at least 2 heads")
    if grid_size < 16:
        raise ValueError("grid size must be at least 16")
    base = np.asarray(base_radii, dtype=float)
    if not (base[0] > base[1] > base[2] > 0):
        raise ValueError("base radii must be positive and strictly nested")

    rng = np.random.default_rng(seed)
    theta = angular_grid(grid_size)
    n_coeff = 2 * fourier_order + 1
    modes = [np.ones_like(theta)]
    for k in range(1, fourier_order + 1):
        modes.append(np.cos(k * theta))
        modes.append(np.sin(k * theta))
    fourier = np.stack(modes)  # (n_coeff, G)
    # cos^2 + sin^2 = 1 per order, so pointwise variance is (order+1) * s^2
    coeff_std = radial_std / np.sqrt(fourier_order + 1.0)
    corr = np.full((N_LAYERS, N_LAYERS), layer_corr)
    np.fill_diagonal(corr, 1.0)
    chol = np.linalg.cholesky(corr)

    profiles = []
    for _ in range(n):
        rejections = 0
        while True:
            draws = rng.standard_normal((n_coeff, N_LAYERS)) @ chol.T
            radii = base[:, None] + coeff_std * (draws.T @ fourier)
            if is_nested(radii, margin=NESTING_MARGIN):
                profiles.append(RadiusProfile(radii))
                break
            rejections += 1
            if rejections >= max_tries:
                raise RetryCapError(
                    f"rejected {rejections} non-nested draws for one head"
                )
    return HeadLibrary.from_profiles(profiles)


def inner_product(v: np.ndarray, w: np.ndarray) -> float:
    """Discrete [H1]^3 inner product of two (3, G) profile deviations.

    Sum over layers of the periodic trapezoid rule applied to v*w plus
    v'*w', with derivatives by periodic central differences.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape != w.shape or v.ndim != 2 or v.shape[0] != N_LAYERS:
        raise ValueError(f"mismatched profile shapes {v.shape} vs {w.shape}")
    grid_size = v.shape[1]
    dtheta = 2.0 * np.pi / grid_size
    dv = (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2.0 * dtheta)
    dw = (np.roll(w, -1, axis=1) - np.roll(w, 1, axis=1)) / (2.0 * dtheta)
    return float(((v * w).sum() + (dv * dw).sum()) * dtheta)


def gram_matrix(perturbations: np.ndarray) -> np.ndarray:
    """Gram matrix R_ij of library perturbations in the [H1]^3 inner product."""
    perturbations = np.asarray(perturbations, dtype=float)
    n, _, grid_size = perturbations.shape
    dtheta = 2.0 * np.pi / grid_size
    deriv = (
        np.roll(perturbations, -1, axis=2) - np.roll(perturbations, 1, axis=2)
    ) / (2.0 * dtheta)
    flat = perturbations.reshape(n, -1)
    dflat = deriv.reshape(n, -1)
    return (flat @ flat.T + dflat @ dflat.T) * dtheta


def compute_pca(library: HeadLibrary, n_modes: int) -> ShapeBasis:
    """Optimal ``n_modes``-dimensional shape basis from the library Gram matrix.

    Raises NumericalError when the requested dimension exceeds the numerical
    rank of the Gram matrix (relative eigenvalue below ``RANK_RTOL``).
    """
    n = library.n
    if not 1 <= n_modes <= n:
        raise ValueError(f"n_modes must lie in 1..{n}, got {n_modes}")
    gram = gram_matrix(library.perturbations)
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    if eigvals[n_modes - 1] <= RANK_RTOL * eigvals[0]:
        raise NumericalError(
            f"requested {n_modes} modes but numerical rank of the Gram "
            f"matrix is lower (eigenvalue ratio "
            f"{eigvals[n_modes - 1] / eigvals[0]:.2e})"
        )
    kept = eigvals[:n_modes]
    flat = library.perturbations.reshape(n, -1)
    basis = (eigvecs[:, :n_modes].T @ flat) / np.sqrt(kept)[:, None]
    return ShapeBasis(
        mean=library.mean.copy(),
        basis=basis.reshape(n_modes, N_LAYERS, library.grid_size),
        eigenvalues=kept,
        coeff_var=kept / (n - 1),
        library_size=n,
    )


def projection_coefficients(basis: ShapeBasis, deviation: np.ndarray) -> np.ndarray:
    """Coefficients (deviation, basis_k) of a (3, G) deviation."""
    return np.array([inner_product(deviation, b) for b in basis.basis])


def shape_radii(basis: ShapeBasis, alpha: np.ndarray) -> np.ndarray:
    """Layer radii on the angular grid for coefficients ``alpha``, shape (3, G)."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or alpha.size > basis.n_modes:
        raise ValueError(
            f"alpha must be a vector of at most {basis.n_modes} coefficients"
        )
    radii = basis.mean.copy()
    if alpha.size:
        radii += np.tensordot(alpha, basis.basis[: alpha.size], axes=1)
    return radii


def interpolate_profile(values: np.ndarray, theta) -> np.ndarray:
    """Linear periodic interpolation of (3, G) grid values at angles theta."""
    values = np.asarray(values, dtype=float)
    grid_size = values.shape[1]
    theta = np.mod(np.asarray(theta, dtype=float), 2.0 * np.pi)
    pos = theta * grid_size / (2.0 * np.pi)
    left = np.floor(pos).astype(int) % grid_size
    right = (left + 1) % grid_size
    frac = pos - np.floor(pos)
    return values[:, left] * (1.0 - frac) + values[:, right] * frac


def evaluate_shape(basis: ShapeBasis, alpha: np.ndarray, theta) -> np.ndarray:
    """Radii of the three layers at angle(s) ``theta`` for coefficients alpha.

    Linear interpolation between grid angles; raises LayerNestingError if
    any two layers cross at a requested angle.
    """
    scalar = np.isscalar(theta) or np.ndim(theta) == 0
    radii = interpolate_profile(shape_radii(basis, alpha), np.atleast_1d(theta))
    gaps = np.diff(radii, axis=0)
    if np.any(gaps >= 0.0) or np.any(radii[LAYER_BRAIN] <= 0.0):
        bad = np.atleast_1d(theta)[np.where((gaps >= 0.0).any(axis=0))[0][:1]]
        raise LayerNestingError(
            f"layers cross near theta={float(bad[0]) if bad.size else 'grid'}"
        )
    return radii[:, 0] if scalar else radii


def sample_shape_coeffs(
    basis: ShapeBasis,
    rng: np.random.Generator,
    *,
    scale: float = 1.0,
    max_tries: int = 100,
) -> np.ndarray:
    """Draw shape coefficients from N(0, scale^2 * diag(coeff_var)).

    Draws whose layers clear each other by less than NESTING_MARGIN anywhere
    on the grid are rejected and redrawn, up to ``max_tries`` attempts.
    """
    std = scale * np.sqrt(basis.coeff_var)
    for _ in range(max_tries):
        alpha = rng.standard_normal(basis.n_modes) * std
        if is_nested(shape_radii(basis, alpha), margin=NESTING_MARGIN):
            return alpha
    raise RetryCapError(f"no nested shape found in {max_tries} draws")

"""Edge-promoting absolute reconstruction of the conductivity perturbation.

The solver linearizes the surrogate forward map in an outer loop.  Each
outer step projects the contact-resistance directions out of the whitened
linearized system and runs a few lagged-diffusivity steps: every inner step
rebuilds a smoothed-TV regularization matrix from the current perturbation
estimate, priorconditions the projected system by a symmetric factorization
of that matrix and runs LSQR from zero with a discrepancy-based stopping
rule.  Contact resistances are recovered by least squares after every inner
step and all unknowns are clamped to their feasibility boxes.

With the approximation-error model the outer loop exits at the discrepancy
level sqrt(M(M-1)); without it the loop additionally exits the first time
the whitened residual increases, returning the pre-increase iterate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .aem import Whitener
from .config import ReconConfig
from .errors import EigenIterationError, SolverError
from .forward import CEMSystem, Measurements
from .mesh import Mesh, boundary_distance, tri_geometry
from .shape import LAYER_SCALP


@dataclass(frozen=True)
class WeightField:
    """Per-element spatial weight; large near the boundary, ~1 deep inside."""

    values: np.ndarray  # (T,)
    c: float
    d: float


@dataclass(frozen=True)
class Regularizer:
    """Smoothed-TV regularization matrix and its positive-definite shift."""

    h_tilde: sp.csc_matrix
    shift: float  # smallest nonzero eigenvalue of h_tilde

    @property
    def matrix(self) -> sp.csc_matrix:
        n = self.h_tilde.shape[0]
        return (self.h_tilde + self.shift * sp.identity(n, format="csc")).tocsc()


@dataclass
class InnerStep:
    outer: int
    inner: int
    lsqr_iters: int
    linear_residual: float
    kappa_min: float
    kappa_max: float


@dataclass
class Reconstruction:
    """Result of one run: perturbation, contacts, residual trace, log."""

    kappa: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    residuals: list  # whitened residual E per outer iterate (incl. initial)
    steps: list  # InnerStep rows
    stop_reason: str  # morozov | residual-increase | max-iter
    morozov_level: float
    outer_iterations: int
    lsqr_capped: int
    wall_time: float


def upsilon(dist, c: float, d: float):
    """Reciprocal smooth cut-off of the boundary distance; equals 2 at d."""
    return 2.0 / (1.0 + np.tanh(c * (np.asarray(dist, float) - d)))


def build_weight_field(mesh: Mesh, c: float, d: float) -> WeightField:
    """Evaluate the boundary weight at element centroids."""
    if c <= 0.0 or d <= 0.0:
        raise ValueError("weight parameters must be positive")
    geom = tri_geometry(mesh.nodes, mesh.triangles)
    dist = boundary_distance(mesh, geom.centroids)
    return WeightField(values=upsilon(dist, c, d), c=c, d=d)


def build_regularizer(
    mesh: Mesh,
    kappa: np.ndarray,
    weights: WeightField,
    smoothing: float,
    *,
    eig_tol: float = 1e-3,
    eig_cap: int = 500,
) -> Regularizer:
    """Weighted lagged-diffusivity stiffness matrix plus spectral shift.

    The per-element diffusivity is weight / sqrt(smoothing^2 + |grad kappa|^2)
    with the exact piecewise-linear gradient; the shift is the smallest
    nonzero eigenvalue of the singular matrix, found by inverse power
    iteration deflated against the constant kernel vector.
    """
    if smoothing <= 0.0:
        raise ValueError("TV smoothing parameter must be positive")
    geom = tri_geometry(mesh.nodes, mesh.triangles)
    tri = mesh.triangles
    grad_kappa = np.einsum("tid,ti->td", geom.grads, kappa[tri])
    slope = np.hypot(grad_kappa[:, 0], grad_kappa[:, 1])
    beta = weights.values / np.sqrt(smoothing**2 + slope**2)
    coeff = beta * geom.areas
    data = np.einsum("t,tid,tjd->tij", coeff, geom.grads, geom.grads)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    h_tilde = sp.coo_matrix((data.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    shift = smallest_nonzero_eigenvalue(h_tilde, tol=eig_tol, cap=eig_cap)
    return Regularizer(h_tilde=h_tilde, shift=shift)


def smallest_nonzero_eigenvalue(
    h_tilde: sp.csc_matrix, tol: float = 1e-3, cap: int = 500
) -> float:
    """Smallest nonzero eigenvalue of a singular SPD stiffness-type matrix.

    Inverse power iteration on a slightly shifted factorization with the
    constant vector deflated from every iterate; converges to relative
    tolerance ``tol`` in the eigenvalue.
    """
    n = h_tilde.shape[0]
    scale = h_tilde.diagonal().sum() / n
    shift = 1e-10 * scale
    lu = spla.splu((h_tilde + shift * sp.identity(n, format="csc")).tocsc())
    x = np.linspace(-1.0, 1.0, n)
    x -= x.mean()
    x /= np.linalg.norm(x)
    lam_old = np.inf
    for _ in range(cap):
        y = lu.solve(x)
        y -= y.mean()
        norm = np.linalg.norm(y)
        if norm == 0.0:
            raise EigenIterationError("inverse power iterate vanished")
        x = y / norm
        lam = float(x @ (h_tilde @ x))
        if abs(lam - lam_old) <= tol * abs(lam):
            return lam
        lam_old = lam
    raise EigenIterationError(
        f"eigenvalue iteration did not reach tol={tol:g} within {cap} steps"
    )


class SymmetricFactor:
    """Symmetric triangular factorization H = L^T L with triangular solves.

    Uses the no-pivot sparse LU of the SPD matrix (natural ordering) when it
    yields a verified symmetric factor; falls back to dense Cholesky.
    ``solve_upper`` applies L^{-1} (maps preconditioned variables back) and
    ``solve_lower`` applies L^{-T}.
    """

    def __init__(self, matrix):
        if sp.issparse(matrix):
            try:
                self._init_sparse(matrix.tocsc())
                return
            except (RuntimeError, ValueError):
                matrix = matrix.toarray()
        self._init_dense(np.asarray(matrix))

    def _init_sparse(self, matrix: sp.csc_matrix):
        lu = spla.splu(
            matrix,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        n = matrix.shape[0]
        if not (
            np.array_equal(lu.perm_r, np.arange(n))
            and np.array_equal(lu.perm_c, np.arange(n))
        ):
            raise ValueError("pivoting occurred; not a symmetric factorization")
        diag = lu.U.diagonal()
        if np.any(diag <= 0.0):
            raise ValueError("matrix is not positive definite")
        # H = L D L^T with unit lower L, so the symmetric factor is
        # (L sqrt(D))^T, an upper triangular matrix
        lower = (lu.L @ sp.diags(np.sqrt(diag))).tocsc()
        check = lower @ lower.T - matrix
        if abs(check).max() > 1e-8 * abs(matrix).max():
            raise ValueError("factor verification failed")
        self._lower = lower
        self._lower_lu = spla.splu(lower, permc_spec="NATURAL", diag_pivot_thresh=0.0)
        upper = lower.T.tocsc()
        self._upper_lu = spla.splu(upper, permc_spec="NATURAL", diag_pivot_thresh=0.0)
        self._dense = None

    def _init_dense(self, matrix: np.ndarray):
        self._dense = sla.cholesky(matrix, lower=True)
        self._lower = None

    def solve_upper(self, rhs: np.ndarray) -> np.ndarray:
        """x with L x = rhs for the upper-triangular factor L (H = L^T L)."""
        if self._dense is not None:
            return sla.solve_triangular(self._dense.T, rhs, lower=False)
        return self._upper_lu.solve(np.asarray(rhs, float))

    def solve_lower(self, rhs: np.ndarray) -> np.ndarray:
        """x with L^T x = rhs."""
        if self._dense is not None:
            return sla.solve_triangular(self._dense, rhs, lower=True)
        return self._lower_lu.solve(np.asarray(rhs, float))


@dataclass
class LSQRResult:
    kappa: np.ndarray
    iterations: int
    residual: float
    converged: bool  # True when the discrepancy target was met
    residual_history: list


def priorconditioned_lsqr(
    a_matrix: np.ndarray,
    b: np.ndarray,
    factor: SymmetricFactor,
    discrepancy: float,
    cap: int = 500,
    atol: float = 1e-14,
) -> LSQRResult:
    """LSQR on the priorconditioned system, stopped at the discrepancy level.

    Runs standard LSQR on A L^{-1} starting from zero and maps iterates back
    through L^{-1}; only triangular solves with the factor are required.
    Stops at the first iterate with ||A kappa - b|| <= discrepancy, at
    numerical convergence of the normal equations, or at the iteration cap
    (flagged via ``converged``) returning the best iterate.
    """

    def apply_a(v):
        return a_matrix @ factor.solve_upper(v)

    def apply_at(u):
        return factor.solve_lower(a_matrix.T @ u)

    history = []
    beta = float(np.linalg.norm(b))
    if beta <= discrepancy:
        return LSQRResult(
            kappa=np.zeros(a_matrix.shape[1]),
            iterations=0,
            residual=beta,
            converged=True,
            residual_history=[beta],
        )
    u = b / beta
    v = apply_at(u)
    alpha = float(np.linalg.norm(v))
    if alpha == 0.0:
        return LSQRResult(
            kappa=np.zeros(a_matrix.shape[1]),
            iterations=0,
            residual=beta,
            converged=False,
            residual_history=[beta],
        )
    v /= alpha
    w = v.copy()
    x = np.zeros_like(v)
    phibar = beta
    rhobar = alpha
    anorm2 = alpha**2
    converged = False
    iterations = 0
    for k in range(1, cap + 1):
        u_next = apply_a(v) - alpha * u
        beta_k = float(np.linalg.norm(u_next))
        if beta_k > 0.0:
            u = u_next / beta_k
            v_next = apply_at(u) - beta_k * v
            alpha_next = float(np.linalg.norm(v_next))
            if alpha_next > 0.0:
                v = v_next / alpha_next
        else:
            alpha_next = 0.0
        anorm2 += beta_k**2 + alpha_next**2

        rho = np.hypot(rhobar, beta_k)
        c = rhobar / rho
        s = beta_k / rho
        theta = s * alpha_next
        rhobar = -c * alpha_next
        phi = c * phibar
        phibar = s * phibar

        x += (phi / rho) * w
        w = v - (theta / rho) * w
        alpha = alpha_next
        iterations = k
        history.append(phibar)
        if phibar <= discrepancy:
            converged = True
            break
        # normal-equation stall: |A^T r| ~ phibar * alpha_next * |c|
        if phibar * alpha_next * abs(c) <= atol * np.sqrt(anorm2) * phibar:
            break
        if alpha_next == 0.0 or beta_k == 0.0:
            break
    kappa = factor.solve_upper(x)
    return LSQRResult(
        kappa=kappa,
        iterations=iterations,
        residual=float(phibar),
        converged=converged,
        residual_history=history,
    )


def whitened_residual(
    whitener: Whitener, data: np.ndarray, model: np.ndarray
) -> float:
    """E = |G (data - offset - model)|."""
    return float(np.linalg.norm(whitener.apply(data - whitener.offset - model)))


def init_contact_resistances(
    data: np.ndarray,
    whitener: Whitener,
    system: CEMSystem,
    sigma_star: np.ndarray,
    z_bounds: tuple[float, float],
    *,
    rel_tol: float = 2e-3,
) -> np.ndarray:
    """Homogeneous contact resistances minimizing the initial residual.

    Golden-section search over log z on the feasibility interval for the
    constant vector z = t * [1, ..., 1].
    """

    def objective(log_t):
        z = np.full(system.n_electrodes, np.exp(log_t))
        return whitened_residual(whitener, data, system.solve(sigma_star, z).values)

    lo, hi = np.log(z_bounds[0]), np.log(z_bounds[1])
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = objective(x1), objective(x2)
    while hi - lo > rel_tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = objective(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = objective(x2)
    best = x1 if f1 <= f2 else x2
    return np.full(system.n_electrodes, np.exp(best))


def reconstruct(
    record,
    surrogate: Mesh,
    sigma_star: np.ndarray,
    whitener: Whitener,
    options: ReconConfig = ReconConfig(),
    feed: int | None = None,
) -> Reconstruction:
    """Run the full nested reconstruction on the surrogate mesh.

    ``record`` may be a MeasurementRecord or a Measurements object.  The
    Morozov level is sqrt(M(M-1)); with AEM the loop exits when the
    whitened residual reaches it, without AEM also at the first residual
    increase, returning the pre-increase iterate.  The outer iteration cap
    returns the lowest-residual iterate seen.
    """
    t_start = time.perf_counter()
    meas: Measurements = getattr(record, "measurements", record)
    if feed is None:
        feed = meas.feed
    n_el = meas.n_electrodes
    data = meas.values
    if whitener.dim != data.size:
        raise SolverError(
            f"whitener dimension {whitener.dim} mismatches data {data.size}"
        )
    morozov = float(np.sqrt(n_el * (n_el - 1)))

    system = CEMSystem(surrogate, feed=feed)
    n_nodes = surrogate.n_nodes
    sigma_lo, sigma_hi = options.sigma_bounds
    kappa_lo = sigma_lo - sigma_star
    kappa_hi = sigma_hi - sigma_star
    z_lo, z_hi = options.z_bounds

    weights = build_weight_field(surrogate, options.c_upsilon, options.d_upsilon)

    kappa = np.zeros(n_nodes)
    z = init_contact_resistances(
        data, whitener, system, sigma_star, options.z_bounds
    )
    model = system.solve(sigma_star + kappa, z).values
    residuals = [whitened_residual(whitener, data, model)]
    steps: list[InnerStep] = []
    lsqr_capped = 0

    best = (residuals[0], kappa.copy(), z.copy())
    # residual-increase monitoring compares successive iterates produced by
    # the exterior loop; the pre-loop baseline is not part of that sequence
    prev = None
    stop_reason = "max-iter"
    outer_done = 0

    if residuals[0] <= morozov:
        stop_reason = "morozov"
    else:
        g = whitener.factor
        data_shifted = data - whitener.offset
        for outer in range(options.max_outer):
            j_sigma, j_z, meas_now = system.jacobians(sigma_star + kappa, z)
            y = g @ (data_shifted - meas_now.values + j_sigma @ kappa + j_z @ z)
            b1 = g @ j_sigma
            b2 = g @ j_z
            q_thin, r2 = np.linalg.qr(b2)
            a_proj = b1 - q_thin @ (q_thin.T @ b1)
            b_proj = y - q_thin @ (q_thin.T @ y)

            for inner in range(options.n_ld):
                reg = build_regularizer(
                    surrogate,
                    kappa,
                    weights,
                    options.tv_smoothing,
                    eig_tol=options.eig_tol,
                    eig_cap=options.eig_cap,
                )
                factor = SymmetricFactor(reg.matrix)
                result = priorconditioned_lsqr(
                    a_proj, b_proj, factor, morozov, cap=options.lsqr_cap
                )
                if not result.converged and result.iterations >= options.lsqr_cap:
                    lsqr_capped += 1
                kappa = np.clip(result.kappa, kappa_lo, kappa_hi)
                rhs = q_thin.T @ (y - b1 @ kappa)
                z_new = sla.solve_triangular(r2, rhs, lower=False)
                z = np.clip(z_new, z_lo, z_hi)
                steps.append(
                    InnerStep(
                        outer=outer,
                        inner=inner,
                        lsqr_iters=result.iterations,
                        linear_residual=result.residual,
                        kappa_min=float(kappa.min()),
                        kappa_max=float(kappa.max()),
                    )
                )

            model = system.solve(sigma_star + kappa, z).values
            e_new = whitened_residual(whitener, data, model)
            residuals.append(e_new)
            outer_done = outer + 1
            if e_new < best[0]:
                best = (e_new, kappa.copy(), z.copy())
            if e_new <= morozov:
                stop_reason = "morozov"
                break
            if not whitener.use_aem and prev is not None and e_new > prev[0]:
                stop_reason = "residual-increase"
                _, kappa, z = prev
                break
            prev = (e_new, kappa.copy(), z.copy())
        else:
            stop_reason = "max-iter"
            _, kappa, z = best

    return Reconstruction(
        kappa=kappa,
        sigma=sigma_star + kappa,
        z=z,
        residuals=residuals,
        steps=steps,
        stop_reason=stop_reason,
        morozov_level=morozov,
        outer_iterations=outer_done,
        lsqr_capped=lsqr_capped,
        wall_time=time.perf_counter() - t_start,
    )


def node_areas(mesh: Mesh) -> np.ndarray:
    """Lumped nodal areas (one third of each incident triangle)."""
    geom = tri_geometry(mesh.nodes, mesh.triangles)
    areas = np.zeros(mesh.n_nodes)
    np.add.at(areas, mesh.triangles.ravel(), np.repeat(geom.areas / 3.0, 3))
    return areas


def stroke_localization(mesh: Mesh, kappa: np.ndarray, threshold: float = 0.5):
    """Center of mass and sign of the thresholded perturbation.

    Nodes with |kappa| >= threshold * max|kappa| are kept; the center of
    mass is weighted by |kappa| times the lumped nodal area.  Returns
    (center (2,), sign, kept node count).
    """
    magnitude = np.abs(kappa)
    peak = magnitude.max()
    if peak == 0.0:
        return np.zeros(2), 0.0, 0
    keep = magnitude >= threshold * peak
    weights = magnitude[keep] * node_areas(mesh)[keep]
    center = (mesh.nodes[keep] * weights[:, None]).sum(axis=0) / weights.sum()
    sign = float(np.sign(kappa[keep].sum()))
    return center, sign, int(keep.sum())


def scalp_mass(mesh: Mesh, kappa: np.ndarray) -> float:
    """Area-weighted |kappa| mass restricted to scalp-layer nodes."""
    areas = node_areas(mesh)
    mask = mesh.node_layer == LAYER_SCALP
    return float((np.abs(kappa[mask]) * areas[mask]).sum())

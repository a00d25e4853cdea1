"""Complete-electrode-model finite element solver and its Jacobians.

The electrode potential vector U is expanded in the mean-free basis
{e_1 - e_m, m = 2..M}, which keeps the coupled (u, U) system symmetric
positive definite so one sparse factorization serves all current patterns
and the adjoint solves.  Current patterns are I(j) = e_p - e_j for j != p
with p the feeding electrode, and measurements are the M-1 potential
vectors stacked into a single vector of length M(M-1).

Conductivity is piecewise linear (one value per mesh node); contact
resistances are interpreted per unit arc length of the electrode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import SIGMA_MAX, SIGMA_MIN, Z_MAX, Z_MIN
from .errors import SolverError
from .mesh import Mesh, TriGeometry, tri_geometry


def validate_sigma(sigma: np.ndarray, n_nodes: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (n_nodes,):
        raise ValueError(f"conductivity must have shape ({n_nodes},)")
    if np.any(sigma < SIGMA_MIN) or np.any(sigma > SIGMA_MAX):
        raise ValueError(
            f"conductivity outside [{SIGMA_MIN:g}, {SIGMA_MAX:g}] S/m"
        )
    return sigma


def validate_z(z: np.ndarray, n_electrodes: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (n_electrodes,):
        raise ValueError(f"contact resistances must have shape ({n_electrodes},)")
    if np.any(z < Z_MIN) or np.any(z > Z_MAX):
        raise ValueError(f"contact resistances outside [{Z_MIN:g}, {Z_MAX:g}]")
    return z


@dataclass(frozen=True)
class Measurements:
    """Stacked electrode potentials for the M-1 patterns of feed electrode p."""

    values: np.ndarray  # (M*(M-1),)
    feed: int  # 1-based feeding electrode label
    n_electrodes: int

    def blocks(self) -> np.ndarray:
        """Per-pattern potentials, shape (M-1, M)."""
        m = self.n_electrodes
        return self.values.reshape(m - 1, m)

    def pattern_electrodes(self) -> np.ndarray:
        """1-based sink electrode label of each pattern, ascending, skips feed."""
        m = self.n_electrodes
        return np.array([j for j in range(1, m + 1) if j != self.feed])


def current_patterns(n_electrodes: int, feed: int) -> np.ndarray:
    """Columns e_p - e_j for j != p, shape (M, M-1)."""
    if not 1 <= feed <= n_electrodes:
        raise ValueError(f"feed electrode {feed} outside 1..{n_electrodes}")
    cols = []
    for j in range(1, n_electrodes + 1):
        if j == feed:
            continue
        col = np.zeros(n_electrodes)
        col[feed - 1] = 1.0
        col[j - 1] = -1.0
        cols.append(col)
    return np.stack(cols, axis=1)


@dataclass
class _ElectrodeData:
    pairs: np.ndarray  # (E, 2) edge node indices
    lengths: np.ndarray  # (E,) physical edge lengths
    total: float


class CEMSystem:
    """Assembled CEM solver bound to one mesh; reusable across (sigma, z).

    Caches triangle geometry and electrode edge data.  ``factorize`` builds
    the reduced symmetric system for given coefficients; the factorization
    is reused for the M-1 pattern solves and the M adjoint solves.
    """

    def __init__(self, mesh: Mesh, feed: int = 1):
        self.mesh = mesh
        self.feed = int(feed)
        self.n_electrodes = mesh.n_electrodes
        if not 1 <= self.feed <= self.n_electrodes:
            raise ValueError(f"feed electrode {feed} outside 1..{self.n_electrodes}")
        self.geom: TriGeometry = tri_geometry(mesh.nodes, mesh.triangles)
        self.n_nodes = mesh.n_nodes
        self.electrodes = []
        for pairs in mesh.electrode_edges:
            seg = mesh.nodes[pairs[:, 1]] - mesh.nodes[pairs[:, 0]]
            lengths = np.hypot(seg[:, 0], seg[:, 1])
            self.electrodes.append(
                _ElectrodeData(pairs=pairs, lengths=lengths, total=lengths.sum())
            )
        tri = mesh.triangles
        # stiffness scatter pattern: 9 entries per triangle
        self._rows = np.repeat(tri, 3, axis=1).ravel()
        self._cols = np.tile(tri, (1, 3)).ravel()
        self._lu = None
        self._lu_key = None

    # -- assembly -----------------------------------------------------------

    def stiffness(self, sigma: np.ndarray) -> sp.csc_matrix:
        """Stiffness matrix of div(sigma grad .) with nodal sigma."""
        tri = self.mesh.triangles
        sig_tri = sigma[tri].mean(axis=1)
        coeff = sig_tri * self.geom.areas
        data = np.einsum("t,tid,tjd->tij", coeff, self.geom.grads, self.geom.grads)
        mat = sp.coo_matrix(
            (data.ravel(), (self._rows, self._cols)),
            shape=(self.n_nodes, self.n_nodes),
        )
        return mat.tocsc()

    def electrode_blocks(self, z: np.ndarray):
        """Electrode coupling blocks (A_uu addition, N x M coupling, M diag)."""
        n = self.n_nodes
        n_el = self.n_electrodes
        rows, cols, data = [], [], []
        coupling = sp.lil_matrix((n, n_el))
        diag = np.empty(n_el)
        for m, el in enumerate(self.electrodes):
            zm = z[m]
            a, b = el.pairs[:, 0], el.pairs[:, 1]
            length = el.lengths
            rows.extend([a, b, a, b])
            cols.extend([a, b, b, a])
            data.extend(
                [length / (3.0 * zm), length / (3.0 * zm),
                 length / (6.0 * zm), length / (6.0 * zm)]
            )
            weights = np.zeros(n)
            np.add.at(weights, a, length / 2.0)
            np.add.at(weights, b, length / 2.0)
            nz = np.nonzero(weights)[0]
            coupling[nz, m] = -weights[nz] / zm
            diag[m] = el.total / zm
        mass = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        return mass.tocsc(), coupling.tocsc(), diag

    def assemble(self, sigma: np.ndarray, z: np.ndarray) -> sp.csc_matrix:
        """Reduced symmetric system for (u, beta) with U = C beta mean-free."""
        sigma = validate_sigma(sigma, self.n_nodes)
        z = validate_z(z, self.n_electrodes)
        n_el = self.n_electrodes
        mass, coupling, diag = self.electrode_blocks(z)
        a_uu = self.stiffness(sigma) + mass
        # C has columns e_1 - e_{k+1}: (A_uU C)_k = col_1 - col_{k+1}
        col1 = coupling[:, [0]]
        b_red = sp.hstack([col1 - coupling[:, [k]] for k in range(1, n_el)])
        d_red = np.full((n_el - 1, n_el - 1), diag[0]) + np.diag(diag[1:])
        system = sp.bmat(
            [[a_uu, b_red], [b_red.T, sp.coo_matrix(d_red)]], format="csc"
        )
        return system

    def factorize(self, sigma: np.ndarray, z: np.ndarray):
        key = (sigma.tobytes(), z.tobytes())
        if self._lu_key != key:
            system = self.assemble(sigma, z)
            try:
                self._lu = spla.splu(system)
            except RuntimeError as exc:
                raise SolverError(
                    f"CEM system factorization failed: {exc}; "
                    f"n={system.shape[0]}, nnz={system.nnz}"
                ) from exc
            self._lu_key = key
        return self._lu

    # -- solves --------------------------------------------------------------

    def _reduce_currents(self, currents: np.ndarray) -> np.ndarray:
        """C^T I for current columns I (mean parts are invisible)."""
        return currents[0, :][None, :] - currents[1:, :]

    def solve_currents(self, sigma, z, currents: np.ndarray):
        """Potentials for arbitrary current columns, returns (U, u) arrays.

        U has shape (M, K) with mean-free columns, u (N, K) interior traces.
        """
        currents = np.atleast_2d(np.asarray(currents, dtype=float))
        if currents.shape[0] != self.n_electrodes:
            currents = currents.T
        lu = self.factorize(sigma, z)
        rhs = np.zeros((self.n_nodes + self.n_electrodes - 1, currents.shape[1]))
        rhs[self.n_nodes :, :] = self._reduce_currents(currents)
        sol = lu.solve(rhs)
        u = sol[: self.n_nodes, :]
        beta = sol[self.n_nodes :, :]
        pot = np.empty((self.n_electrodes, currents.shape[1]))
        pot[0, :] = beta.sum(axis=0)
        pot[1:, :] = -beta
        return pot, u

    def solve(self, sigma, z) -> Measurements:
        pot, _ = self.solve_currents(
            sigma, z, current_patterns(self.n_electrodes, self.feed)
        )
        return Measurements(
            values=pot.T.ravel().copy(),
            feed=self.feed,
            n_electrodes=self.n_electrodes,
        )

    def jacobians(self, sigma, z):
        """(J_sigma, J_z, measurements) at (sigma, z), via adjoint solves."""
        n_el = self.n_electrodes
        n_pat = n_el - 1
        patterns = current_patterns(n_el, self.feed)
        pot, u = self.solve_currents(sigma, z, patterns)
        adj_currents = np.eye(n_el)
        w_pot, w = self.solve_currents(sigma, z, adj_currents)

        tri = self.mesh.triangles
        grads = self.geom.grads
        areas = self.geom.areas
        # per-triangle gradients of all forward and adjoint solutions
        gu = np.einsum("tid,tip->tdp", grads, u[tri, :])
        gw = np.einsum("tid,tip->tdp", grads, w[tri, :])
        cross = np.einsum("tdp,tdq->tpq", gu, gw)  # (T, n_pat, n_el)
        weighted = cross.reshape(len(tri), -1) * (areas / 3.0)[:, None]
        n = self.n_nodes
        incidence = sp.coo_matrix(
            (
                np.ones(3 * len(tri)),
                (tri.ravel(), np.repeat(np.arange(len(tri)), 3)),
            ),
            shape=(n, len(tri)),
        ).tocsr()
        j_sigma = -(incidence @ weighted).T  # (n_pat*n_el, N) row-major (d, m)

        j_z = np.empty((n_pat * n_el, n_el))
        for m, el in enumerate(self.electrodes):
            a, b = el.pairs[:, 0], el.pairs[:, 1]
            fa = u[a, :] - pot[m, :][None, :]
            fb = u[b, :] - pot[m, :][None, :]
            ga = w[a, :] - w_pot[m, :][None, :]
            gb = w[b, :] - w_pot[m, :][None, :]
            length = el.lengths[:, None, None]
            integral = (
                length
                / 6.0
                * (
                    2.0 * fa[:, :, None] * ga[:, None, :]
                    + fa[:, :, None] * gb[:, None, :]
                    + fb[:, :, None] * ga[:, None, :]
                    + 2.0 * fb[:, :, None] * gb[:, None, :]
                )
            ).sum(axis=0)
            j_z[:, m] = (integral / z[m] ** 2).ravel()

        meas = Measurements(
            values=pot.T.ravel().copy(), feed=self.feed, n_electrodes=n_el
        )
        return j_sigma, j_z, meas


# -- functional wrappers ------------------------------------------------------


def assemble_system(mesh: Mesh, sigma, z, feed: int = 1) -> sp.csc_matrix:
    return CEMSystem(mesh, feed).assemble(np.asarray(sigma, float), np.asarray(z, float))


def solve_forward(mesh: Mesh, sigma, z, feed: int = 1) -> Measurements:
    return CEMSystem(mesh, feed).solve(np.asarray(sigma, float), np.asarray(z, float))


def solve_patterns(mesh: Mesh, sigma, z, currents) -> np.ndarray:
    """Electrode potentials (M, K) for arbitrary mean-free current columns."""
    pot, _ = CEMSystem(mesh).solve_currents(
        np.asarray(sigma, float), np.asarray(z, float), currents
    )
    return pot


def resistance_matrix(mesh: Mesh, sigma, z) -> np.ndarray:
    """M x M map from mean-free currents to mean-free potentials.

    Built from the solves with patterns e_1 - e_j; symmetric up to solver
    accuracy by reciprocity of the underlying bilinear form.
    """
    n_el = mesh.n_electrodes
    pot = solve_patterns(
        mesh, sigma, z, current_patterns(n_el, 1)
    )  # (M, M-1), columns for e_1 - e_j
    basis = current_patterns(n_el, 1)
    # (B^T B)^{-1} = I - 11^T/M for this basis
    pinv = (np.eye(n_el - 1) - np.full((n_el - 1, n_el - 1), 1.0 / n_el)) @ basis.T
    return pot @ pinv


def jacobian_sigma(mesh: Mesh, sigma, z, feed: int = 1) -> np.ndarray:
    j_sigma, _, _ = CEMSystem(mesh, feed).jacobians(
        np.asarray(sigma, float), np.asarray(z, float)
    )
    return j_sigma


def jacobian_z(mesh: Mesh, sigma, z, feed: int = 1) -> np.ndarray:
    _, j_z, _ = CEMSystem(mesh, feed).jacobians(
        np.asarray(sigma, float), np.asarray(z, float)
    )
    return j_z

"""Fixed-topology triangulation of the layered disk and its deformation.

One reference mesh is generated per (refinement, electrode count) and then
deformed to every sampled anatomy and electrode configuration, so that all
nodal fields share a single index space.  The reference mesh is built from
concentric rings whose node patterns repeat per electrode sector, which
makes the connectivity exactly invariant under rotation by one sector.

Deformation remaps boundary angles by a monotone piecewise-linear map that
carries intended electrode endpoints to perturbed ones (blended linearly to
the identity at the center) and remaps radii piecewise-linearly so that the
two interface rings and the boundary land on the sampled layer outlines.
Electrode arc half-widths are re-solved per deformation so each electrode
keeps the physical arc length it has on the mean anatomy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DeformationError
from .shape import (
    LAYER_BRAIN,
    LAYER_SCALP,
    LAYER_SKULL,
    ShapeBasis,
    interpolate_profile,
    shape_radii,
)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ReferenceMesh:
    """Unit-disk triangulation with layer tags and electrode template."""

    nodes: np.ndarray  # (N, 2) unit-disk coordinates
    triangles: np.ndarray  # (T, 3) int
    tri_layer: np.ndarray  # (T,) int in {scalp, skull, brain}
    node_rho: np.ndarray  # (N,) reference radius (exact ring values)
    node_theta: np.ndarray  # (N,) reference angle
    node_layer: np.ndarray  # (N,) layer, interface nodes tied to inner layer
    interface_skull: np.ndarray  # node indices on the scalp/skull ring
    interface_brain: np.ndarray  # node indices on the skull/brain ring
    boundary_nodes: np.ndarray  # angle-ordered boundary node indices
    electrode_centers: np.ndarray  # (M,) intended center angles
    electrode_halfwidth: float  # template arc half-width (radians)
    electrode_edges: tuple  # per electrode: (E_m, 2) arrays of node pairs
    rho_skull: float
    rho_brain: float
    refinement: int

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_electrodes(self) -> int:
        return self.electrode_centers.size


@dataclass(frozen=True)
class Mesh:
    """Reference mesh deformed to a sampled anatomy, coordinates in meters."""

    ref: ReferenceMesh
    nodes: np.ndarray  # (N, 2) physical coordinates
    alpha: np.ndarray
    electrode_angles: np.ndarray  # (M,) perturbed center angles
    electrode_halfwidths: np.ndarray  # (M,) perturbed arc half-widths
    arc_targets: np.ndarray  # (M,) target physical arc length per electrode

    @property
    def triangles(self) -> np.ndarray:
        return self.ref.triangles

    @property
    def tri_layer(self) -> np.ndarray:
        return self.ref.tri_layer

    @property
    def node_layer(self) -> np.ndarray:
        return self.ref.node_layer

    @property
    def boundary_nodes(self) -> np.ndarray:
        return self.ref.boundary_nodes

    @property
    def electrode_edges(self) -> tuple:
        return self.ref.electrode_edges

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_electrodes(self) -> int:
        return self.ref.n_electrodes

    def electrode_arc_lengths(self) -> np.ndarray:
        """Polyline length of each electrode in physical coordinates."""
        out = np.empty(self.n_electrodes)
        for m, edges in enumerate(self.electrode_edges):
            seg = self.nodes[edges[:, 1]] - self.nodes[edges[:, 0]]
            out[m] = np.hypot(seg[:, 0], seg[:, 1]).sum()
        return out


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    return 0.5 * np.cross(b - a, c - a)


@dataclass(frozen=True)
class TriGeometry:
    """Per-triangle areas, centroids and P1 basis gradients."""

    areas: np.ndarray  # (T,)
    centroids: np.ndarray  # (T, 2)
    grads: np.ndarray  # (T, 3, 2) gradient of each vertex basis function


def tri_geometry(nodes: np.ndarray, triangles: np.ndarray) -> TriGeometry:
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    areas = 0.5 * np.cross(b - a, c - a)
    centroids = (a + b + c) / 3.0
    # grad of basis at vertex i is the rotated opposite edge over 2*area
    grads = np.empty((triangles.shape[0], 3, 2))
    for i, (p, q) in enumerate(((b, c), (c, a), (a, b))):
        edge = q - p
        grads[:, i, 0] = -edge[:, 1]
        grads[:, i, 1] = edge[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return TriGeometry(areas=areas, centroids=centroids, grads=grads)


def mesh_quality(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Per-triangle inradius/circumradius ratio (0.5 for equilateral)."""
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    la = np.linalg.norm(c - b, axis=1)
    lb = np.linalg.norm(a - c, axis=1)
    lc = np.linalg.norm(b - a, axis=1)
    area = np.abs(0.5 * np.cross(b - a, c - a))
    s = 0.5 * (la + lb + lc)
    return 4.0 * area**2 / (s * la * lb * lc)


def _ring_counts(radius, target_h, sectors, min_per_sector):
    """Nodes per sector for a ring: ceil of arc length over target spacing."""
    per_sector = int(np.ceil(TWO_PI * radius / (sectors * target_h)))
    return max(min_per_sector, per_sector)


def _boundary_pattern(sector_span, halfwidth, h_gap, h_elec):
    """Sector-local boundary angles; electrode centered in the sector."""
    lo = sector_span / 2.0 - halfwidth
    hi = sector_span / 2.0 + halfwidth
    n_gap = max(1, int(np.ceil(lo / h_gap)))
    n_el = max(2, int(np.ceil(2.0 * halfwidth / h_elec)))
    pattern = np.concatenate(
        [
            np.linspace(0.0, lo, n_gap, endpoint=False),
            np.linspace(lo, hi, n_el, endpoint=False),
            np.linspace(hi, sector_span, n_gap, endpoint=False),
        ]
    )
    return pattern, n_gap, n_el


def _stitch(inner_start, inner_pattern, outer_start, outer_pattern, sectors):
    """Triangles between two sector-patterned rings (anchor stitching).

    Anchors are computed per sector in index space, which makes the
    connectivity exactly invariant under rotation by one sector.
    """
    q_in = inner_pattern.size
    q_out = outer_pattern.size
    n_in = sectors * q_in
    n_out = sectors * q_out
    span = TWO_PI / sectors
    # local anchor: inner node nearest in angle (cyclic); index may be -1,
    # meaning the last node of the previous sector
    below = np.searchsorted(inner_pattern, outer_pattern, side="right") - 1
    angle_below = np.where(below >= 0, inner_pattern[below], inner_pattern[-1] - span)
    angle_above = np.where(
        below + 1 < q_in, inner_pattern[(below + 1) % q_in], inner_pattern[0] + span
    )
    take_above = (angle_above - outer_pattern) < (outer_pattern - angle_below)
    local = np.where(take_above, below + 1, below)

    anchors = np.empty(n_out + 1, dtype=np.int64)
    for m in range(sectors):
        anchors[m * q_out : (m + 1) * q_out] = m * q_in + local
    anchors[n_out] = anchors[0] + n_in
    if np.any(np.diff(anchors) < 0):
        raise AssertionError("ring stitch anchors are not monotone")

    tris = []
    for j in range(n_out):
        v0 = outer_start + j
        v1 = outer_start + (j + 1) % n_out
        u0 = inner_start + anchors[j] % n_in
        tris.append((v0, v1, u0))
        for t in range(anchors[j], anchors[j + 1]):
            ua = inner_start + t % n_in
            ub = inner_start + (t + 1) % n_in
            tris.append((v1, ub, ua))
    return tris


def build_reference_mesh(
    refinement: int,
    n_electrodes: int,
    electrode_halfwidth: float,
    *,
    h0: float = 0.2,
    electrode_refine: float = 2.0,
    boundary_refine: float = 1.5,
    rho_skull: float = 0.82 / 0.9,
    rho_brain: float = 0.75 / 0.9,
) -> ReferenceMesh:
    """Structured triangulation of the unit disk with electrode-aligned boundary.

    Node and triangle counts are a deterministic function of the arguments.
    Boundary nodes coincide with electrode arc endpoints and the boundary is
    angularly refined inside the electrode arcs by ``electrode_refine``.
    """
    if n_electrodes < 2:
        raise ValueError("at least 2 electrodes required")
    sector = TWO_PI / n_electrodes
    if not 0.0 < electrode_halfwidth < sector / 2.0:
        raise DeformationError(
            f"electrode halfwidth {electrode_halfwidth:.4f} rad does not fit "
            f"in a sector of {sector:.4f} rad without overlap"
        )
    if not 0.0 < rho_brain < rho_skull < 1.0:
        raise ValueError("interface radii must satisfy 0 < brain < skull < 1")

    h = h0 / 2.0**refinement
    h_scalp = h / boundary_refine
    h_elec = h_scalp / electrode_refine
    min_per_sector = max(1, int(np.ceil(6.0 / n_electrodes)))

    # rings: (radius, layer of the annulus below the ring)
    rings = []
    n_brain = max(2, round(rho_brain / h))
    for k in range(1, n_brain + 1):
        rings.append((rho_brain * k / n_brain, LAYER_BRAIN))
    n_skull = max(1, round((rho_skull - rho_brain) / h))
    for k in range(1, n_skull + 1):
        rings.append((rho_brain + (rho_skull - rho_brain) * k / n_skull, LAYER_SKULL))
    n_sc = max(2, round((1.0 - rho_skull) / h))
    for k in range(1, n_sc + 1):
        rings.append((rho_skull + (1.0 - rho_skull) * k / n_sc, LAYER_SCALP))

    boundary_pattern, n_gap, n_el = _boundary_pattern(
        sector, electrode_halfwidth, h_scalp, h_elec
    )
    # rings from the skull/brain interface outward all share the boundary
    # pattern: the thin outer annuli then stitch one-to-one and stay
    # well-shaped when a deformation flattens them; the coarse-to-fine
    # transition sits inside the brain, which only rescales uniformly
    patterns = []
    for k, (radius, _) in enumerate(rings):
        if k >= n_brain - 1:
            patterns.append(boundary_pattern)
        else:
            q = _ring_counts(radius, h, n_electrodes, min_per_sector)
            patterns.append(np.linspace(0.0, sector, q, endpoint=False))

    # nodes: center, then rings inward-out, sector by sector
    coords = [np.zeros((1, 2))]
    rhos = [np.zeros(1)]
    thetas = [np.zeros(1)]
    starts = []
    next_idx = 1
    for (radius, _), pattern in zip(rings, patterns):
        angles = (
            pattern[None, :] + sector * np.arange(n_electrodes)[:, None]
        ).ravel()
        coords.append(radius * np.stack([np.cos(angles), np.sin(angles)], axis=1))
        rhos.append(np.full(angles.size, radius))
        thetas.append(angles)
        starts.append(next_idx)
        next_idx += angles.size
    nodes = np.concatenate(coords)
    node_rho = np.concatenate(rhos)
    node_theta = np.concatenate(thetas)

    tris = []
    layers = []
    # center fan
    q0 = patterns[0].size * n_electrodes
    for t in range(q0):
        tris.append((0, starts[0] + t, starts[0] + (t + 1) % q0))
        layers.append(rings[0][1])
    for k in range(len(rings) - 1):
        new = _stitch(
            starts[k], patterns[k], starts[k + 1], patterns[k + 1], n_electrodes
        )
        tris.extend(new)
        layers.extend([rings[k + 1][1]] * len(new))
    triangles = np.asarray(tris, dtype=np.int64)
    tri_layer = np.asarray(layers, dtype=np.int8)

    areas = signed_areas(nodes, triangles)
    flip = areas < 0.0
    if np.any(flip):
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        areas = signed_areas(nodes, triangles)
    if np.any(areas <= 0.0):
        worst = int(np.argmin(areas))
        raise DeformationError(
            f"reference triangle {worst} has non-positive area {areas[worst]:.3e}"
        )

    node_layer = np.full(nodes.shape[0], LAYER_SCALP, dtype=np.int8)
    node_layer[node_rho <= rho_skull] = LAYER_SKULL
    node_layer[node_rho <= rho_brain] = LAYER_BRAIN

    ring_radii = [r for r, _ in rings]
    idx_brain = ring_radii.index(rho_brain)
    idx_skull = ring_radii.index(rho_skull)

    def ring_indices(k):
        count = patterns[k].size * n_electrodes
        return np.arange(starts[k], starts[k] + count)

    boundary = ring_indices(len(rings) - 1)
    q_b = boundary_pattern.size
    electrode_edges = []
    for m in range(n_electrodes):
        span = boundary[m * q_b + n_gap : m * q_b + n_gap + n_el + 1]
        electrode_edges.append(np.stack([span[:-1], span[1:]], axis=1))
    centers = sector * (np.arange(n_electrodes) + 0.5)

    return ReferenceMesh(
        nodes=nodes,
        triangles=triangles,
        tri_layer=tri_layer,
        node_rho=node_rho,
        node_theta=node_theta,
        node_layer=node_layer,
        interface_skull=ring_indices(idx_skull),
        interface_brain=ring_indices(idx_brain),
        boundary_nodes=boundary,
        electrode_centers=centers,
        electrode_halfwidth=float(electrode_halfwidth),
        electrode_edges=tuple(electrode_edges),
        rho_skull=float(rho_skull),
        rho_brain=float(rho_brain),
        refinement=int(refinement),
    )


class _ArcLength:
    """Cumulative arc length along a star-shaped curve r(theta)."""

    def __init__(self, radii_row: np.ndarray, samples_per_cell: int = 16):
        grid_size = radii_row.size
        n = samples_per_cell * grid_size
        theta = np.linspace(0.0, TWO_PI, n + 1)
        r = interpolate_profile(radii_row[None, :], theta)[0]
        dr = np.gradient(r, theta)
        speed = np.hypot(r, dr)
        self.theta = theta
        self.cumulative = np.concatenate(
            [[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(theta))]
        )
        self.total = self.cumulative[-1]

    def __call__(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        wrapped = np.mod(theta, TWO_PI)
        turns = np.floor_divide(theta - wrapped, TWO_PI)
        return np.interp(wrapped, self.theta, self.cumulative) + turns * self.total

    def halfwidth_for(self, center: float, target: float) -> float:
        """Solve for w with arclength(center-w, center+w) = 2*target."""
        lo, hi = 0.0, np.pi / 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self(center + mid) - self(center - mid) < 2.0 * target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def _endpoint_knots(centers, halfwidths):
    """Interleaved arc endpoints in electrode order; raises on overlap.

    Electrode centers are expected in ascending intended order; perturbed
    arcs must preserve that cyclic order and stay disjoint.
    """
    knots = np.empty(2 * centers.size)
    knots[0::2] = centers - halfwidths
    knots[1::2] = centers + halfwidths
    if np.any(np.diff(knots) <= 0.0) or knots[-1] - knots[0] >= TWO_PI:
        raise DeformationError("electrode arcs overlap")
    return knots


def deform_mesh(
    ref: ReferenceMesh,
    basis: ShapeBasis,
    alpha: np.ndarray,
    electrode_angles: np.ndarray | None = None,
) -> Mesh:
    """Deform the reference mesh to the anatomy (basis, alpha) and electrodes.

    Interface rings land exactly on the interpolated layer outlines and each
    electrode keeps the physical arc length it has on the mean anatomy at
    its intended position.  Raises DeformationError on inverted elements or
    overlapping electrode arcs.
    """
    alpha = np.asarray(alpha, dtype=float)
    n_el = ref.n_electrodes
    centers = ref.electrode_centers
    if electrode_angles is None:
        electrode_angles = centers.copy()
    electrode_angles = np.asarray(electrode_angles, dtype=float)
    if electrode_angles.shape != (n_el,):
        raise ValueError(f"expected {n_el} electrode angles")

    radii = shape_radii(basis, alpha)
    if np.any(np.diff(radii, axis=0) >= 0.0) or np.any(radii[LAYER_BRAIN] <= 0.0):
        raise DeformationError("layer outlines are not nested for this alpha")

    # per-electrode arc-length targets from the mean anatomy
    mean_arc = _ArcLength(basis.mean[LAYER_SCALP])
    w0 = ref.electrode_halfwidth
    targets = 0.5 * (mean_arc(centers + w0) - mean_arc(centers - w0))

    arc = _ArcLength(radii[LAYER_SCALP])
    halfwidths = np.array(
        [arc.halfwidth_for(c, t) for c, t in zip(electrode_angles, targets)]
    )

    knots_int = _endpoint_knots(centers, np.full(n_el, w0))
    knots_new = _endpoint_knots(electrode_angles, halfwidths)

    # periodic monotone piecewise-linear boundary angle map
    x = np.concatenate([knots_int - TWO_PI, knots_int, knots_int + TWO_PI])
    y = np.concatenate([knots_new - TWO_PI, knots_new, knots_new + TWO_PI])
    shift = np.interp(ref.node_theta, x, y) - ref.node_theta

    theta_new = ref.node_theta + ref.node_rho * shift
    s_scalp = interpolate_profile(radii, theta_new)
    breaks = np.array([0.0, ref.rho_brain, ref.rho_skull, 1.0])
    rho = ref.node_rho
    r_new = np.empty_like(rho)
    inner = rho <= ref.rho_brain
    r_new[inner] = (rho[inner] / ref.rho_brain) * s_scalp[LAYER_BRAIN, inner]
    mid = (rho > ref.rho_brain) & (rho <= ref.rho_skull)
    t = (rho[mid] - breaks[1]) / (breaks[2] - breaks[1])
    r_new[mid] = (1.0 - t) * s_scalp[LAYER_BRAIN, mid] + t * s_scalp[LAYER_SKULL, mid]
    outer = rho > ref.rho_skull
    t = (rho[outer] - breaks[2]) / (breaks[3] - breaks[2])
    r_new[outer] = (
        (1.0 - t) * s_scalp[LAYER_SKULL, outer] + t * s_scalp[LAYER_SCALP, outer]
    )

    nodes = np.stack([r_new * np.cos(theta_new), r_new * np.sin(theta_new)], axis=1)
    areas = signed_areas(nodes, ref.triangles)
    if np.any(areas <= 0.0):
        worst = int(np.argmin(areas))
        raise DeformationError(
            f"deformation inverted triangle {worst} "
            f"(signed area {areas[worst]:.3e})"
        )
    return Mesh(
        ref=ref,
        nodes=nodes,
        alpha=alpha.copy(),
        electrode_angles=electrode_angles.copy(),
        electrode_halfwidths=halfwidths,
        arc_targets=2.0 * targets,
    )


def boundary_distance(mesh: Mesh, points: np.ndarray | None = None) -> np.ndarray:
    """Euclidean distance from nodes (or given points) to the boundary polyline."""
    pts = mesh.nodes if points is None else np.asarray(points, dtype=float)
    ring = mesh.nodes[mesh.boundary_nodes]
    a = ring
    b = np.roll(ring, -1, axis=0)
    seg = b - a  # (B, 2)
    seg_len2 = np.einsum("bd,bd->b", seg, seg)
    diff = pts[:, None, :] - a[None, :, :]  # (P, B, 2)
    t = np.einsum("pbd,bd->pb", diff, seg) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * seg[None, :, :]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=2)
    return dist.min(axis=1)

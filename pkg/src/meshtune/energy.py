"""Regularization energies.

Volumetric strain (as-rigid-as-possible + anisotropic square-root StVK along
the thickness direction), control-field bending, and the surface regularizer
suite (normal consistency, uniform Laplacian, edge correspondence).  Every
energy returns (value, analytic gradient); gradients are validated against
central finite differences in the tests.

Per-cell and per-face terms are independent; reductions use numpy's fixed
summation order, so repeated evaluations are bitwise reproducible.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .field import ControlGrid
from .mesh import SurfaceMesh, VolumetricMesh

# d N_i / d (xi, eta, zeta) of the trilinear hex shape functions at the cell
# centroid; rows follow the node convention of mesh.HEX_FACES.
_HEX_NODE_SIGNS = np.array([
    (-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1),
    (-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1),
], dtype=float)
HEX_CENTROID_GRADS = _HEX_NODE_SIGNS / 8.0

_SINGULAR_F_TOL = 1e-10
_THICKNESS_COLLAPSE_TOL = 1e-8


@dataclass(frozen=True)
class EnergyWeights:
    """Regularizer weights; defaults follow the grid-searched values."""

    lambda0: float = 1.0          # strain weight in the training-style objective
    lambda1_aniso: float = 10.0   # anisotropic thickness-stretch weight
    lambda3_normal: float = 10.0
    lambda4_laplacian: float = 1.0
    lambda5_edge: float = 0.01

    def __post_init__(self):
        for name in ("lambda0", "lambda1_aniso", "lambda3_normal",
                     "lambda4_laplacian", "lambda5_edge"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")


@dataclass(frozen=True)
class CellKinematics:
    """Deformation gradient, its polar rotation, and the thickness direction
    for one cell."""

    F: np.ndarray
    R: np.ndarray
    d: np.ndarray | None = None

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise InputError("R must be a proper rotation (det = +1)")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-10:
            raise InputError("R must be orthonormal")


def rest_shape_gradients(mesh: VolumetricMesh) -> np.ndarray:
    """Rest-frame shape-function gradients g, (n_cells, nodes_per_cell, 3).

    Defined so the deformation gradient of any deformed vertex configuration x
    is F_c = sum_i x_ci g_ci^T.  For hexes the gradients are evaluated at the
    cell centroid; for tets they are the exact linear-element gradients.

    Raises
    ------
    InputError
        If a rest cell is degenerate (singular rest edge/Jacobian matrix).
    """
    X = mesh.vertices[mesh.cells]  # (m, nodes, 3)
    if mesh.is_hex:
        A = np.einsum("mia,ib->mab", X, HEX_CENTROID_GRADS)
        det = np.linalg.det(A)
        if (np.abs(det) < 1e-300).any():
            raise InputError("degenerate rest hexahedron (singular Jacobian)")
        invA = np.linalg.inv(A)
        return np.einsum("mba,ib->mia", invA, HEX_CENTROID_GRADS)
    Dm = np.stack([X[:, k + 1] - X[:, 0] for k in range(3)], axis=-1)  # cols
    det = np.linalg.det(Dm)
    if (np.abs(det) < 1e-300).any():
        raise InputError("degenerate rest tetrahedron (singular edge matrix)")
    inv = np.linalg.inv(Dm)
    g = np.empty((len(X), 4, 3))
    g[:, 1:, :] = inv  # g_{k+1} is row k of Dm^-1
    g[:, 0, :] = -inv.sum(axis=1)
    return g


def deformation_gradients(rest: VolumetricMesh, deformed_vertices: np.ndarray,
                          shape_grads: np.ndarray | None = None) -> np.ndarray:
    """Per-cell deformation gradients F, (n_cells, 3, 3)."""
    if shape_grads is None:
        shape_grads = rest_shape_gradients(rest)
    x = np.asarray(deformed_vertices, dtype=float)[rest.cells]
    return np.einsum("mia,mib->mab", x, shape_grads)


def deformation_gradient(rest: VolumetricMesh, deformed_vertices: np.ndarray,
                         cell: int) -> np.ndarray:
    """Deformation gradient of one cell (exact for affine deformations)."""
    if not (0 <= cell < rest.n_cells):
        raise InputError(f"cell id {cell} out of range")
    return deformation_gradients(rest, deformed_vertices)[cell]


def polar_rotations(F: np.ndarray) -> np.ndarray:
    """Batched rotation factors of the polar decomposition, det = +1.

    Numerically singular inputs (smallest singular value < 1e-10) are flagged
    with a warning; the sign-corrected SVD rotation is still returned.
    """
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    Fb = F[None] if single else F
    U, S, Vt = np.linalg.svd(Fb)
    if (S[:, -1] < _SINGULAR_F_TOL).any():
        warnings.warn("numerically singular deformation gradient in polar "
                      "decomposition")
    det = np.linalg.det(np.einsum("mab,mbc->mac", U, Vt))
    Uc = U.copy()
    Uc[:, :, -1] *= np.sign(det)[:, None]
    R = np.einsum("mab,mbc->mac", Uc, Vt)
    return R[0] if single else R


def polar_rotation(F: np.ndarray) -> np.ndarray:
    """Rotation factor of the polar decomposition of a single 3x3 matrix."""
    return polar_rotations(np.asarray(F, dtype=float))


def cell_kinematics(rest: VolumetricMesh, deformed_vertices: np.ndarray,
                    cell: int, dirs: np.ndarray | None = None
                    ) -> CellKinematics:
    """Deformation gradient, polar rotation, and thickness direction of one
    cell in a deformed configuration."""
    F = deformation_gradient(rest, deformed_vertices, cell)
    return CellKinematics(F, polar_rotations(F),
                          None if dirs is None else np.asarray(dirs)[cell])


def strain_energy(rest: VolumetricMesh, deformed_vertices: np.ndarray,
                  dirs: np.ndarray | None, weights: EnergyWeights,
                  shape_grads: np.ndarray | None = None) -> tuple:
    """Mean per-cell strain energy and its gradient w.r.t. deformed vertices.

    Psi = (1/|C|) sum_c [ ||F - R||_F^2
                          + lambda1 (sqrt(d^T F^T F d) - 1)^2 ]

    with R the polar rotation of F and d the fixed rest-state thickness
    direction.  The ARAP gradient uses d||F - R(F)||^2/dF = 2 (F - R); the
    anisotropic gradient is clamped when the thickness stretch collapses
    below 1e-8.

    Parameters
    ----------
    rest : VolumetricMesh
        Rest configuration (defines shape gradients and cell connectivity).
    deformed_vertices : (n, 3) array
    dirs : (n_cells, 3) array or None
        Unit thickness directions from the rest geometry; None disables the
        anisotropic term (tetrahedral meshes).
    weights : EnergyWeights
    shape_grads : array, optional
        Precomputed `rest_shape_gradients(rest)`.

    Returns
    -------
    (float, (n, 3) array)
    """
    if shape_grads is None:
        shape_grads = rest_shape_gradients(rest)
    m = rest.n_cells
    F = deformation_gradients(rest, deformed_vertices, shape_grads)
    R = polar_rotations(F)
    diff = F - R
    iso = np.einsum("mab,mab->m", diff, diff)
    # below the SVD noise floor the exact residual is zero; snapping keeps
    # rigid configurations true fixed points of the optimization
    noise = iso < 1e-24
    iso[noise] = 0.0
    diff[noise] = 0.0
    P = 2.0 * diff  # d energy / d F, per cell
    total = iso.sum()
    if dirs is not None and weights.lambda1_aniso > 0:
        d = np.asarray(dirs, dtype=float)
        Fd = np.einsum("mab,mb->ma", F, d)
        s = np.linalg.norm(Fd, axis=1)
        ds = s - 1.0
        ds[np.abs(ds) < 1e-12] = 0.0
        total += weights.lambda1_aniso * (ds * ds).sum()
        s_safe = np.maximum(s, _THICKNESS_COLLAPSE_TOL)
        coef = 2.0 * weights.lambda1_aniso * ds / s_safe
        P = P + coef[:, None, None] * np.einsum("ma,mb->mab", Fd, d)
    psi = total / m
    grad_cells = np.einsum("mab,mib->mia", P, shape_grads) / m
    grad = np.zeros_like(np.asarray(deformed_vertices, dtype=float))
    np.add.at(grad, rest.cells, grad_cells)
    return float(psi), grad


class StrainModel:
    """Strain energy with cached rest-state quantities for repeated calls."""

    def __init__(self, rest: VolumetricMesh, dirs: np.ndarray | None,
                 weights: EnergyWeights):
        self.rest = rest
        self.dirs = dirs
        self.weights = weights
        self.shape_grads = rest_shape_gradients(rest)

    def __call__(self, deformed_vertices: np.ndarray) -> tuple:
        return strain_energy(self.rest, deformed_vertices, self.dirs,
                             self.weights, shape_grads=self.shape_grads)


def bending_energy(grid: ControlGrid) -> tuple:
    """Thin-plate bending of the control velocity field.

    Sum over control nodes of squared second finite differences in lattice
    index units (all six second derivatives, mixed terms doubled), divided by
    the node count.  Exactly zero on affine control fields.

    Returns
    -------
    (float, gradient array shaped like grid.velocities)
    """
    v = np.asarray(grid.velocities, dtype=float)
    n_nodes = v.shape[0] * v.shape[1] * v.shape[2]
    grad = np.zeros_like(v)
    total = 0.0

    def pure(axis):
        sl = [slice(None)] * 3
        lo, mid, hi = list(sl), list(sl), list(sl)
        lo[axis] = slice(None, -2)
        mid[axis] = slice(1, -1)
        hi[axis] = slice(2, None)
        return tuple(lo), tuple(mid), tuple(hi)

    for axis in range(3):
        lo, mid, hi = pure(axis)
        d = v[hi] - 2.0 * v[mid] + v[lo]
        total += (d * d).sum()
        g = 2.0 * d / n_nodes
        grad[hi] += g
        grad[mid] -= 2.0 * g
        grad[lo] += g
    for a in range(3):
        for b in range(a + 1, 3):
            sl = [slice(None)] * 3
            pp, pm, mp, mm = list(sl), list(sl), list(sl), list(sl)
            pp[a], pp[b] = slice(2, None), slice(2, None)
            pm[a], pm[b] = slice(2, None), slice(None, -2)
            mp[a], mp[b] = slice(None, -2), slice(2, None)
            mm[a], mm[b] = slice(None, -2), slice(None, -2)
            d = (v[tuple(pp)] - v[tuple(pm)] - v[tuple(mp)] + v[tuple(mm)]) / 4.0
            total += 2.0 * (d * d).sum()
            g = 2.0 * 2.0 * d / 4.0 / n_nodes
            grad[tuple(pp)] += g
            grad[tuple(pm)] -= g
            grad[tuple(mp)] -= g
            grad[tuple(mm)] += g
    return float(total / n_nodes), grad


# ---------------------------------------------------------------------------
# surface regularizers


def _face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p = vertices[faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def _scatter_cross_vjp(grad: np.ndarray, faces: np.ndarray,
                       vertices: np.ndarray, bar_c: np.ndarray) -> None:
    """Accumulate d(loss)/d(vertices) given the adjoint of the per-face
    unnormalized cross vectors c = (b - a) x (c - a)."""
    p = vertices[faces]
    u = p[:, 1] - p[:, 0]
    w = p[:, 2] - p[:, 0]
    bar_u = np.cross(w, bar_c)
    bar_w = np.cross(bar_c, u)
    np.add.at(grad, faces[:, 1], bar_u)
    np.add.at(grad, faces[:, 2], bar_w)
    np.add.at(grad, faces[:, 0], -(bar_u + bar_w))


def _adjacent_face_pairs(faces: np.ndarray) -> np.ndarray:
    edge_faces: dict = {}
    for fi, tri in enumerate(faces):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
            edge_faces.setdefault(key, []).append(fi)
    pairs = [fs for fs in edge_faces.values() if len(fs) == 2]
    return np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def face_pair_cosines(surface: SurfaceMesh) -> np.ndarray:
    """cos of the dihedral normal angle for every adjacent face pair, in the
    deterministic pair order used by `normal_consistency_loss`."""
    v, faces = np.asarray(surface.vertices, float), surface.faces
    cvec = _face_cross(v, faces)
    norm = np.maximum(np.linalg.norm(cvec, axis=1), 1e-300)
    n = cvec / norm[:, None]
    pairs = _adjacent_face_pairs(faces)
    return np.einsum("pc,pc->p", n[pairs[:, 0]], n[pairs[:, 1]])


def normal_consistency_loss(surface: SurfaceMesh,
                            reference_cos: np.ndarray | None = None) -> tuple:
    """Normal consistency over adjacent-face pairs.

    Mean of (1 - cos angle(n1, n2)), or, given per-pair reference cosines,
    the template-relative form mean of (cos - cos_ref)^2 whose gradient
    vanishes on the reference shape.  Zero-area faces are excluded with a
    warning.

    Returns
    -------
    (float, (n_vertices, 3) gradient)
    """
    v, faces = np.asarray(surface.vertices, float), surface.faces
    cvec = _face_cross(v, faces)
    norm = np.linalg.norm(cvec, axis=1)
    good = norm > 0
    if not good.all():
        warnings.warn(f"{int((~good).sum())} zero-area faces excluded from "
                      "normal consistency")
    pairs = _adjacent_face_pairs(faces)
    if len(pairs):
        pair_ok = good[pairs[:, 0]] & good[pairs[:, 1]]
        if reference_cos is not None:
            reference_cos = np.asarray(reference_cos, dtype=float)[pair_ok]
        pairs = pairs[pair_ok]
    grad = np.zeros_like(v)
    if len(pairs) == 0:
        return 0.0, grad
    n = cvec / np.maximum(norm, 1e-300)[:, None]
    n1, n2 = n[pairs[:, 0]], n[pairs[:, 1]]
    cosang = np.einsum("pc,pc->p", n1, n2)
    if reference_cos is None:
        value = float(np.mean(1.0 - cosang))
        bar_cos = np.full(len(pairs), -1.0 / len(pairs))
    else:
        diff = cosang - reference_cos
        value = float(np.mean(diff * diff))
        bar_cos = 2.0 * diff / len(pairs)
    bar_n = np.zeros_like(cvec)
    np.add.at(bar_n, pairs[:, 0], bar_cos[:, None] * n2)
    np.add.at(bar_n, pairs[:, 1], bar_cos[:, None] * n1)
    # chain through normalization: d n / d c = (I - n n^T) / |c|
    proj = np.einsum("fc,fc->f", n, bar_n)
    bar_c = (bar_n - proj[:, None] * n) / np.maximum(norm, 1e-300)[:, None]
    bar_c[~good] = 0.0
    _scatter_cross_vjp(grad, faces, v, bar_c)
    return value, grad


def _vertex_adjacency(surface: SurfaceMesh) -> tuple:
    """Unique undirected 1-ring edges as directed pairs (u -> v), both ways."""
    f = surface.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.unique(np.sort(e, axis=1), axis=0)
    directed = np.concatenate([e, e[:, ::-1]], axis=0)
    deg = np.bincount(directed[:, 0], minlength=surface.n_vertices)
    return directed, deg


def laplacian_coordinates(surface: SurfaceMesh) -> np.ndarray:
    """Per-vertex uniform Laplacian coordinates v - mean(1-ring neighbors)
    (zero for vertices with no neighbors)."""
    v = np.asarray(surface.vertices, float)
    directed, deg = _vertex_adjacency(surface)
    neigh_sum = np.zeros_like(v)
    np.add.at(neigh_sum, directed[:, 0], v[directed[:, 1]])
    L = np.zeros_like(v)
    used = deg > 0
    L[used] = v[used] - neigh_sum[used] / deg[used, None]
    return L


def laplacian_loss(surface: SurfaceMesh,
                   reference: np.ndarray | None = None) -> tuple:
    """Uniform Laplacian loss.

    Mean over vertices of ||v - mean(1-ring neighbors)||^2, or, given
    per-vertex reference Laplacian coordinates, the template-relative form
    mean ||L - L_ref||^2.  Vertices with no neighbors are excluded.

    Returns
    -------
    (float, (n_vertices, 3) gradient)
    """
    v = np.asarray(surface.vertices, float)
    directed, deg = _vertex_adjacency(surface)
    used = deg > 0
    n_used = int(used.sum())
    if n_used == 0:
        raise InputError("surface has no edges")
    neigh_sum = np.zeros_like(v)
    np.add.at(neigh_sum, directed[:, 0], v[directed[:, 1]])
    L = np.zeros_like(v)
    L[used] = v[used] - neigh_sum[used] / deg[used, None]
    if reference is not None:
        L = L - np.asarray(reference, dtype=float)
        L[~used] = 0.0
    value = float((L * L).sum() / n_used)
    bar_L = 2.0 * L / n_used
    grad = bar_L.copy()
    contrib = bar_L[directed[:, 0]] / deg[directed[:, 0], None]
    np.add.at(grad, directed[:, 1], -contrib)
    return value, grad


def surface_edges(surface: SurfaceMesh) -> tuple:
    """Unique edges of a surface and their rest vectors.

    Returns
    -------
    (edges (E, 2) int array, rest_vectors (E, 3) array)
    """
    f = surface.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.unique(np.sort(e, axis=1), axis=0)
    rest = np.asarray(surface.vertices, float)
    return e, rest[e[:, 1]] - rest[e[:, 0]]


def edge_correspondence_loss(edges: np.ndarray, rest_vectors: np.ndarray,
                             displacements: np.ndarray) -> tuple:
    """Deviation of deformed relative edge lengths from the template's.

    With ratios taken against the longest edge of the set,

        (1/|E|) sum_i ( |e_i| / max|e'| - |e_i + du_i| / max|e' + du'| )^2

    where du is the displacement difference across each edge.  Invariant
    under composing the displacements with any global similarity transform.

    Parameters
    ----------
    edges : (E, 2) int array
        Vertex index pairs (tail, head).
    rest_vectors : (E, 3) array
        Rest edge vectors, all nonzero.
    displacements : (n, 3) array

    Returns
    -------
    (float, (n, 3) gradient w.r.t. displacements)
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rest_vectors = np.asarray(rest_vectors, dtype=float).reshape(-1, 3)
    U = np.asarray(displacements, dtype=float)
    if len(edges) == 0:
        raise InputError("edge set is empty")
    lr = np.linalg.norm(rest_vectors, axis=1)
    if (lr == 0).any():
        raise InputError("rest edges must be nonzero")
    dvec = rest_vectors + U[edges[:, 1]] - U[edges[:, 0]]
    ld = np.linalg.norm(dvec, axis=1)
    m_def = ld.max()
    if m_def == 0:
        raise InputError("all deformed edges collapsed")
    jstar = int(np.argmax(ld))
    r = lr / lr.max()
    rt = ld / m_def
    diff = rt - r
    n = len(edges)
    value = float((diff * diff).sum() / n)
    # d value / d rt_i = 2 diff_i / n; rt depends on ld directly and through
    # the max edge jstar
    bar_rt = 2.0 * diff / n
    bar_ld = bar_rt / m_def
    bar_ld[jstar] -= (bar_rt * ld).sum() / (m_def * m_def)
    unit = np.zeros_like(dvec)
    nz = ld > 1e-12
    unit[nz] = dvec[nz] / ld[nz, None]
    gvec = bar_ld[:, None] * unit
    grad = np.zeros_like(U)
    np.add.at(grad, edges[:, 1], gvec)
    np.add.at(grad, edges[:, 0], -gvec)
    return value, grad

"""Evaluation metrics: spatial accuracy (mm) and element quality.

Distances here are plain Euclidean millimetres, unlike the optimization
losses which use squared distances.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .loss import NearestNeighborIndex
from .mesh import LabeledPointCloud, VolumetricMesh, _face_stacks

# From each hex corner, the three neighbor nodes whose edges form a
# right-handed frame on the reference cube (determinant +1).
HEX_CORNER_EDGES = (
    (1, 3, 4), (2, 0, 5), (3, 1, 6), (0, 2, 7),
    (7, 5, 0), (4, 6, 1), (5, 7, 2), (6, 4, 3),
)

# Opposite-face quads used for the principal axes: +x/-x, +y/-y, +z/-z.
_AXIS_FACES = (
    ((1, 2, 6, 5), (0, 3, 7, 4)),
    ((2, 3, 7, 6), (0, 1, 5, 4)),
    ((4, 5, 6, 7), (0, 3, 2, 1)),
)


@dataclass
class MeshReport:
    """Table-style evaluation summary for one mesh."""

    cd_mm: float | None = None
    hd_mm: float | None = None
    thickness_err_mm: float | None = None
    jac_min: float | None = None
    jac_mean: float | None = None
    skew_mean: float | None = None
    skew_max: float | None = None
    runtime_sec: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("cd_mm", "hd_mm", "thickness_err_mm"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise InputError(f"{name} must be >= 0")
        for name in ("jac_min", "jac_mean"):
            v = getattr(self, name)
            if v is not None and not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise InputError("scaled Jacobian must lie in [-1, 1]")
        for name in ("skew_mean", "skew_max"):
            v = getattr(self, name)
            if v is not None and not -1e-9 <= v <= 1.0 + 1e-9:
                raise InputError("skew must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "cd_mm": self.cd_mm,
            "hd_mm": self.hd_mm,
            "thickness_err_mm": self.thickness_err_mm,
            "jac_min": self.jac_min,
            "jac_mean": self.jac_mean,
            "skew_mean": self.skew_mean,
            "skew_max": self.skew_max,
            "runtime_sec": dict(self.runtime_sec),
        }

    def table_row(self, label: str = "") -> str:
        def fmt(v):
            return "   --- " if v is None else f"{v:7.3f}"
        cols = [fmt(self.cd_mm), fmt(self.hd_mm), fmt(self.thickness_err_mm),
                fmt(self.jac_mean), fmt(self.skew_mean)]
        rt = sum(self.runtime_sec.values()) if self.runtime_sec else None
        cols.append("   --- " if rt is None else f"{rt:7.1f}")
        return f"{label:<24s} " + " ".join(cols)

    @staticmethod
    def table_header() -> str:
        return (f"{'method':<24s} {'CD(mm)':>7s} {'HD(mm)':>7s} "
                f"{'Thick(mm)':>7s} {'|Jac|':>7s} {'Skew':>7s} {'RT(s)':>7s}")


def _as_cloud(x) -> LabeledPointCloud:
    if isinstance(x, LabeledPointCloud):
        return x
    return LabeledPointCloud((np.asarray(x, dtype=float),))


def chamfer_metric(X, Y) -> float:
    """Class-averaged symmetric mean Euclidean nearest distance, mm."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    if X.n_classes != Y.n_classes:
        raise InputError("class count mismatch")
    vals = []
    for xi, yi in zip(X.classes, Y.classes):
        if len(xi) == 0 or len(yi) == 0:
            raise InputError("chamfer metric of an empty class")
        _, d2a, _ = NearestNeighborIndex(yi).query(xi)
        _, d2b, _ = NearestNeighborIndex(xi).query(yi)
        vals.append(0.5 * (np.sqrt(d2a).mean() + np.sqrt(d2b).mean()))
    return float(np.mean(vals))


def hausdorff_metric(X, Y) -> float:
    """Class-averaged symmetric Hausdorff distance, mm."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    if X.n_classes != Y.n_classes:
        raise InputError("class count mismatch")
    vals = []
    for xi, yi in zip(X.classes, Y.classes):
        if len(xi) == 0 or len(yi) == 0:
            raise InputError("Hausdorff metric of an empty class")
        _, d2a, _ = NearestNeighborIndex(yi).query(xi)
        _, d2b, _ = NearestNeighborIndex(xi).query(yi)
        vals.append(np.sqrt(max(d2a.max(), d2b.max())))
    return float(np.mean(vals))


def _stack_thicknesses(mesh: VolumetricMesh, stacks: list) -> np.ndarray:
    out = np.empty(len(stacks))
    for i, (chain, terminal_ids) in enumerate(stacks):
        cell0, lf0 = chain[0]
        base_ids = mesh.face_vertex_ids(cell0, lf0)
        c0 = mesh.vertices[base_ids].mean(axis=0)
        c1 = mesh.vertices[terminal_ids].mean(axis=0)
        out[i] = np.linalg.norm(c1 - c0)
    return out


def thickness_error(mesh: VolumetricMesh, reference: VolumetricMesh) -> float:
    """Mean absolute wall-thickness difference, mm.

    Thickness per base face is the distance between the base-face centroid
    and the centroid of the terminal opposite face reached by walking the
    element stack.  Requires identical connectivity.
    """
    if not mesh.same_connectivity(reference):
        raise InputError("thickness error requires identical connectivity")
    stacks = _face_stacks(reference)
    t_mesh = _stack_thicknesses(mesh, stacks)
    t_ref = _stack_thicknesses(reference, stacks)
    return float(np.abs(t_mesh - t_ref).mean())


def scaled_jacobian(mesh: VolumetricMesh) -> np.ndarray:
    """Per-cell scaled Jacobian in [-1, 1]; 1 is a perfect cube/regular tet.

    Hexes: minimum over the 8 corners of the determinant of the three
    normalized corner edge vectors.  Tets: determinant of the normalized edge
    matrix times sqrt(2) so the regular tetrahedron scores 1.  Cells with a
    zero-length edge score 0 (with a warning).
    """
    X = mesh.vertices[mesh.cells]
    if mesh.is_hex:
        dets = np.empty((mesh.n_cells, 8))
        degenerate = np.zeros(mesh.n_cells, dtype=bool)
        for k, (a, b, c) in enumerate(HEX_CORNER_EDGES):
            E = np.stack([X[:, a] - X[:, k], X[:, b] - X[:, k],
                          X[:, c] - X[:, k]], axis=1)
            norms = np.linalg.norm(E, axis=2)
            bad = (norms == 0).any(axis=1)
            degenerate |= bad
            norms = np.maximum(norms, 1e-300)
            dets[:, k] = np.linalg.det(E / norms[:, :, None])
        out = dets.min(axis=1)
    else:
        E = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0],
                      X[:, 3] - X[:, 0]], axis=1)
        norms = np.linalg.norm(E, axis=2)
        degenerate = (norms == 0).any(axis=1)
        norms = np.maximum(norms, 1e-300)
        out = np.sqrt(2.0) * np.linalg.det(E / norms[:, :, None])
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} cells with zero-length edges "
                      "scored 0")
        out[degenerate] = 0.0
    return np.clip(out, -1.0, 1.0)


def skew(mesh: VolumetricMesh) -> np.ndarray:
    """Per-cell skew in [0, 1]: 0 for orthogonal principal axes.

    The principal axes are the normalized differences of opposite-face
    centroids; skew is the maximum |cos| between the three axis pairs.
    Degenerate (zero) axes score 1 with a warning.
    """
    if not mesh.is_hex:
        raise InputError("skew is defined for hexahedral cells")
    X = mesh.vertices[mesh.cells]
    axes = []
    degenerate = np.zeros(mesh.n_cells, dtype=bool)
    for plus, minus in _AXIS_FACES:
        v = X[:, list(plus)].mean(axis=1) - X[:, list(minus)].mean(axis=1)
        n = np.linalg.norm(v, axis=1)
        degenerate |= n == 0
        axes.append(v / np.maximum(n, 1e-300)[:, None])
    x1, x2, x3 = axes
    c12 = np.abs(np.einsum("mc,mc->m", x1, x2))
    c13 = np.abs(np.einsum("mc,mc->m", x1, x3))
    c23 = np.abs(np.einsum("mc,mc->m", x2, x3))
    out = np.maximum(np.maximum(c12, c13), c23)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} cells with degenerate "
                      "principal axes scored 1")
        out[degenerate] = 1.0
    return np.clip(out, 0.0, 1.0)


def mesh_report(mesh: VolumetricMesh,
                reference_points: LabeledPointCloud | None = None,
                reference_mesh: VolumetricMesh | None = None,
                runtime_sec: dict | None = None) -> MeshReport:
    """Assemble the full Table-style report for one mesh.

    CD/HD compare the mesh base-surface points against `reference_points`;
    thickness error compares against `reference_mesh` (same connectivity).
    """
    from .mesh import base_surface_points

    report = MeshReport(runtime_sec=runtime_sec or {})
    jac = scaled_jacobian(mesh)
    report.jac_min = float(jac.min())
    report.jac_mean = float(jac.mean())
    if mesh.is_hex:
        sk = skew(mesh)
        report.skew_mean = float(sk.mean())
        report.skew_max = float(sk.max())
    if reference_points is not None:
        pts = base_surface_points(mesh)
        report.cd_mm = chamfer_metric(pts, reference_points)
        report.hd_mm = hausdorff_metric(pts, reference_points)
    if reference_mesh is not None and mesh.is_hex:
        report.thickness_err_mm = thickness_error(mesh, reference_mesh)
    return report

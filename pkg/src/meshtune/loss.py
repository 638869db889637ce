"""Distance losses: sided and class-wise symmetric chamfer, and the one-sided
attachment pull loss.

Losses use squared Euclidean distances (the evaluation metrics in
`meshtune.metrics` use plain mm).  Nearest neighbors are exact; ties break to
the lowest point index so runs are reproducible across platforms.
"""

import warnings

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError
from .mesh import LabeledPointCloud

_TIE_CANDIDATES = 8


class NearestNeighborIndex:
    """Exact nearest-neighbor queries over a fixed point set.

    Backed by a k-d tree; the top candidates are re-ranked with squared
    distances recomputed in double precision so that exact ties
    deterministically resolve to the lowest point index.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise InputError("cannot index an empty point set")
        self.points = points
        self._tree = cKDTree(points)
        self._k = min(_TIE_CANDIDATES, len(points))

    def query(self, q: np.ndarray) -> tuple:
        """Nearest points for a batch of queries.

        Returns
        -------
        (nearest (m, 3), squared distances (m,), indices (m,))
        """
        q = np.asarray(q, dtype=float).reshape(-1, 3)
        _, idx = self._tree.query(q, k=self._k)
        idx = idx.reshape(len(q), self._k)
        # the tree marks unreachable neighbors (overflowed/infinite
        # distances) with index == n; keep them as +inf candidates so the
        # caller sees a non-finite loss instead of a crash
        invalid = idx >= len(self.points)
        idx = np.where(invalid, 0, idx)
        cand = self.points[idx]  # (m, k, 3)
        d2 = ((cand - q[:, None, :]) ** 2).sum(axis=2)
        d2[invalid] = np.inf
        # lexicographic (distance, index): argmin picks the first of equal
        # minima, and candidates are reordered by index among themselves
        order = np.argsort(idx, axis=1)
        rows = np.arange(len(q))[:, None]
        d2s = d2[rows, order]
        idxs = idx[rows, order]
        best = np.argmin(d2s, axis=1)
        bi = idxs[np.arange(len(q)), best]
        bd = d2s[np.arange(len(q)), best]
        return self.points[bi], bd, bi


def _sided(A: np.ndarray, B: np.ndarray, index: NearestNeighborIndex | None = None
           ) -> tuple:
    """Mean squared nearest distance from A to B plus gradients for both sides.

    Returns (value, grad_A, grad_B, nearest indices).  The nearest-neighbor
    assignment is frozen within the evaluation (subgradient at ties).
    """
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise InputError("chamfer distance of an empty point set")
    if index is None:
        index = NearestNeighborIndex(B)
    nearest, d2, idx = index.query(A)
    value = float(d2.mean())
    diff = 2.0 * (A - nearest) / len(A)
    grad_B = np.zeros_like(B)
    for c in range(3):
        grad_B[:, c] = -np.bincount(idx, weights=diff[:, c], minlength=len(B))
    return value, diff, grad_B, idx


def sided_chamfer(A: np.ndarray, B: np.ndarray) -> tuple:
    """One-sided chamfer: (1/|A|) sum_a min_b ||a - b||^2.

    Returns
    -------
    (float, (|A|, 3) gradient w.r.t. A)
    """
    value, grad_A, _, _ = _sided(A, B)
    return value, grad_A


def classwise_chamfer(X: LabeledPointCloud, Y: LabeledPointCloud) -> tuple:
    """Symmetric class-wise chamfer distance.

    (1/2N) sum_i [ sided(X_i, Y_i) + sided(Y_i, X_i) ]

    Returns
    -------
    (float, list of per-class gradients w.r.t. the X points)
    """
    if X.n_classes != Y.n_classes:
        raise InputError(f"class count mismatch: {X.n_classes} != {Y.n_classes}")
    n = X.n_classes
    total = 0.0
    grads = []
    for xi, yi in zip(X.classes, Y.classes):
        v_xy, g_x, _, _ = _sided(xi, yi)
        v_yx, _, g_back, _ = _sided(yi, xi)
        total += v_xy + v_yx
        grads.append((g_x + g_back) / (2.0 * n))
    return total / (2.0 * n), grads


def attachment_pull_loss(pairs: list) -> tuple:
    """One-sided pull from filtered attachment points onto the mesh surface.

    (1/N^) sum_i sided(Y^_i, X^_i): distances run FROM the attachment points
    TO the mesh, so gradients flow only to the mesh points that are nearest
    neighbors of attachment points.

    Parameters
    ----------
    pairs : list of (X_i mesh surface points, Y_i attachment points)
        Pairs with empty attachment sets are skipped with a warning.

    Returns
    -------
    (float, list of per-pair gradients w.r.t. the mesh points)
    """
    if len(pairs) == 0:
        raise InputError("no attachment pairs")
    n_pairs = len(pairs)
    total = 0.0
    grads = []
    any_nonempty = False
    for Xi, Yi in pairs:
        Xi = np.asarray(Xi, dtype=float).reshape(-1, 3)
        Yi = np.asarray(Yi, dtype=float).reshape(-1, 3)
        if len(Yi) == 0:
            warnings.warn("attachment pair with no retained points skipped")
            grads.append(np.zeros_like(Xi))
            continue
        any_nonempty = True
        v, _, g_mesh, _ = _sided(Yi, Xi)
        total += v
        grads.append(g_mesh / n_pairs)
    if not any_nonempty:
        raise InputError("all attachment pairs are empty")
    return total / n_pairs, grads

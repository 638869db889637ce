"""Attachment-surface processing: segmentation-to-surface conversion,
component pairing, and direction/distance filtering.

The filtered attachment surfaces become the targets of the one-sided pull
loss; filtering keeps only attachment points that lie outward of their
nearest mesh point (cosine test against the mesh normal) and close enough to
the wall.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import InputError
from .loss import NearestNeighborIndex, classwise_chamfer
from .mesh import (LabeledPointCloud, SurfaceMesh, VolumetricMesh,
                   build_surface, connected_components,
                   extract_boundary_surface, vertex_normals)

DEFAULT_TAU_COS = 0.5
DEFAULT_TAU_DIST_MM = 2.5

_COINCIDENT_TOL = 1e-9


@dataclass(frozen=True)
class VoxelMask:
    """Binary occupancy volume; value (i, j, k) sits at origin + index*spacing."""

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values).astype(bool)
        if v.ndim != 3:
            raise InputError("mask values must be a 3D array")
        s = np.asarray(self.spacing, dtype=float).reshape(3)
        if (s <= 0).any():
            raise InputError("mask spacing must be positive")
        o = np.asarray(self.origin, dtype=float).reshape(3)
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", s)
        object.__setattr__(self, "origin", o)

    @property
    def dims(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True)
class AttachmentPair:
    """One mesh component paired with its filtered attachment surface."""

    component: int
    surface: SurfaceMesh
    nearest_vertex: np.ndarray  # volumetric vertex id per retained point

    @property
    def empty(self) -> bool:
        return self.surface.n_vertices == 0


@dataclass(frozen=True)
class AttachmentPairing:
    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)


def isosurface(mask: VoxelMask) -> SurfaceMesh:
    """Marching-cubes triangulation of a binary mask at level 0.5.

    The volume is zero-padded so surfaces close at the boundary; vertices are
    placed by linear interpolation on the cell lattice and mapped to world
    coordinates.

    Raises
    ------
    InputError
        If the mask is empty.
    """
    if not mask.values.any():
        raise InputError("cannot extract an isosurface from an empty mask")
    padded = np.pad(mask.values.astype(float), 1)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5,
                                                method="lorensen",
                                                allow_degenerate=False)
    world = mask.origin + (verts - 1.0) * mask.spacing
    return build_surface(world, faces)


def assign_pairs(mesh: VolumetricMesh, S: SurfaceMesh) -> list:
    """Pair each connected component of S with the closest mesh component.

    Closeness is the symmetric chamfer between the component's vertices and
    the mesh component's boundary vertices; ties break to the lower mesh
    component id.

    Returns
    -------
    list of (component id, SurfaceMesh)
    """
    parts = connected_components(S)
    if not parts:
        return []
    boundaries = [extract_boundary_surface(mesh, c).vertices
                  for c in range(mesh.n_components)]
    out = []
    for Si in parts:
        cloud_s = LabeledPointCloud((Si.vertices,))
        best, best_val = 0, np.inf
        for comp, bverts in enumerate(boundaries):
            val, _ = classwise_chamfer(cloud_s, LabeledPointCloud((bverts,)))
            if val < best_val:
                best, best_val = comp, val
        out.append((best, Si))
    return out


def nearest_point_direction(component_surface: SurfaceMesh,
                            Si: SurfaceMesh) -> tuple:
    """Per-point unit direction and distance from the mesh to each S point.

    For each vertex s of Si, find the nearest mesh surface vertex m; record
    the direction (s - m)/||s - m|| and the distance at s.  Coincident points
    (distance < 1e-9) take the mesh normal at m as direction.

    Returns
    -------
    (directions (k, 3), distances (k,), nearest mesh vertex indices (k,))
    """
    if component_surface.n_vertices == 0 or Si.n_vertices == 0:
        raise InputError("nearest_point_direction requires nonempty surfaces")
    index = NearestNeighborIndex(component_surface.vertices)
    nearest, d2, idx = index.query(Si.vertices)
    dist = np.sqrt(d2)
    dirs = np.zeros((Si.n_vertices, 3))
    ok = dist >= _COINCIDENT_TOL
    dirs[ok] = (Si.vertices[ok] - nearest[ok]) / dist[ok, None]
    if (~ok).any():
        normals = vertex_normals(component_surface)
        dirs[~ok] = normals[idx[~ok]]
    return dirs, dist, idx


def _subset_surface(surface: SurfaceMesh, keep: np.ndarray) -> SurfaceMesh:
    """Retain the marked vertices; faces touching a discarded vertex are
    discarded.  Retained vertices survive even if all their faces die."""
    keep = np.asarray(keep, dtype=bool)
    kept_ids = np.nonzero(keep)[0]
    remap = np.full(surface.n_vertices, -1, dtype=np.int64)
    remap[kept_ids] = np.arange(len(kept_ids))
    f = surface.faces
    face_ok = keep[f].all(axis=1) if len(f) else np.zeros(0, dtype=bool)
    src = (surface.source_vertices[kept_ids]
           if surface.source_vertices is not None else None)
    return SurfaceMesh(surface.vertices[kept_ids], remap[f[face_ok]],
                       source_vertices=src,
                       source_component=surface.source_component)


def filter_by_direction(Si: SurfaceMesh, directions: np.ndarray,
                        normals: np.ndarray, tau_cos: float) -> tuple:
    """Keep S points whose nearest-point direction agrees with the mesh
    normal: cos(direction, normal) >= tau_cos.

    Returns
    -------
    (filtered SurfaceMesh, boolean keep mask over the input vertices)
    """
    directions = np.asarray(directions, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(directions) != Si.n_vertices or len(normals) != Si.n_vertices:
        raise InputError("directions/normals must align with Si vertices")
    cos = np.einsum("kc,kc->k", directions, normals)
    keep = cos >= tau_cos
    return _subset_surface(Si, keep), keep


def filter_by_distance(Si: SurfaceMesh, distances: np.ndarray,
                       tau_dist: float) -> tuple:
    """Keep S points within tau_dist (mm) of the mesh.

    Returns
    -------
    (filtered SurfaceMesh, boolean keep mask over the input vertices)
    """
    distances = np.asarray(distances, dtype=float).reshape(-1)
    if len(distances) != Si.n_vertices:
        raise InputError("distances must align with Si vertices")
    keep = distances <= tau_dist
    return _subset_surface(Si, keep), keep


def group_and_filter(mesh: VolumetricMesh, S: SurfaceMesh,
                     tau_cos: float = DEFAULT_TAU_COS,
                     tau_dist: float = DEFAULT_TAU_DIST_MM) -> AttachmentPairing:
    """Full attachment pipeline: pair components, then filter by direction
    and distance.

    Pairs whose surfaces end up empty are kept (flagged via `.empty`) so the
    caller can warn and skip them.

    Returns
    -------
    AttachmentPairing
    """
    pairs = []
    for comp, Si in assign_pairs(mesh, S):
        surf_c = extract_boundary_surface(mesh, comp)
        dirs, dist, idx = nearest_point_direction(surf_c, Si)
        normals = vertex_normals(surf_c)[idx]
        s1, keep1 = filter_by_direction(Si, dirs, normals, tau_cos)
        s2, keep2 = filter_by_distance(s1, dist[keep1], tau_dist)
        nearest_global = surf_c.source_vertices[idx[keep1][keep2]]
        if s2.n_vertices == 0:
            warnings.warn(f"attachment component paired with mesh component "
                          f"{comp} was fully filtered out")
        pairs.append(AttachmentPair(comp, s2, nearest_global))
    return AttachmentPairing(tuple(pairs))

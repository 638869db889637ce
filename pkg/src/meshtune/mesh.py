"""Mesh data model: volumetric meshes, boundary surfaces, labeled pointclouds.

All types are immutable after construction (arrays are set read-only) and all
operations are pure functions, so instances can be shared freely across
threads.  Coordinates are in millimetres throughout.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError

# Local faces of a hexahedron, wound so the normal points out of the cell for
# a positively oriented element.  Node convention: 0-3 bottom quad, 4-7 top
# quad, node 4 above node 0.
HEX_FACES = (
    (0, 3, 2, 1),  # bottom
    (4, 5, 6, 7),  # top
    (0, 1, 5, 4),
    (1, 2, 6, 5),
    (2, 3, 7, 6),
    (3, 0, 4, 7),
)
# Opposite local face for each entry of HEX_FACES.
HEX_OPPOSITE_FACE = (1, 0, 4, 5, 2, 3)

TET_FACES = (
    (0, 2, 1),
    (0, 1, 3),
    (1, 2, 3),
    (0, 3, 2),
)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _as_points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != 3:
        raise InputError(f"{name} must have shape (n, 3), got {a.shape}")
    return a


@dataclass(frozen=True)
class SurfaceMesh:
    """A triangulated surface.

    Attributes
    ----------
    vertices : (n, 3) float array, mm
    faces : (m, 3) int array
        Triangles indexing `vertices`.
    source_vertices : (n,) int array, optional
        For surfaces extracted from a volumetric mesh: the volumetric vertex
        id behind each surface vertex.
    source_component : int, optional
        Component id of the volumetric mesh this surface came from.
    """

    vertices: np.ndarray
    faces: np.ndarray
    source_vertices: np.ndarray | None = None
    source_component: int | None = None

    def __post_init__(self):
        v = _as_points(self.vertices, "vertices")
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InputError("surface faces index out of range")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))
        if self.source_vertices is not None:
            sv = np.asarray(self.source_vertices, dtype=np.int64)
            if sv.shape != (len(v),):
                raise InputError("source_vertices must align with vertices")
            object.__setattr__(self, "source_vertices", _readonly(sv))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "SurfaceMesh":
        """Same connectivity, new vertex positions."""
        return SurfaceMesh(vertices, self.faces, self.source_vertices,
                           self.source_component)


def build_surface(vertices, faces, source_vertices=None, source_component=None,
                  drop_degenerate: bool = True) -> SurfaceMesh:
    """Construct a SurfaceMesh, dropping zero-area faces.

    Degenerate (zero-area) triangles violate the SurfaceMesh invariant; they
    can appear in marching-cubes output and are removed here.
    """
    vertices = _as_points(vertices, "vertices")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if drop_degenerate and len(faces):
        p = vertices[faces]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        area2 = np.linalg.norm(cross, axis=1)
        keep = area2 > 0.0
        faces = faces[keep]
    return SurfaceMesh(vertices, faces, source_vertices, source_component)


@dataclass(frozen=True)
class LabeledPointCloud:
    """Per-class 3D point sets.

    Attributes
    ----------
    classes : tuple of (k_i, 3) float arrays, mm
    normals : tuple of (k_i, 3) float arrays, optional
    source_vertices : tuple of (k_i,) int arrays, optional
        Volumetric vertex ids behind each point, when the cloud was sampled
        from a mesh (used to route gradients back to mesh vertices).
    """

    classes: tuple
    normals: tuple | None = None
    source_vertices: tuple | None = None

    def __post_init__(self):
        cls = tuple(_readonly(_as_points(c, "class points")) for c in self.classes)
        if len(cls) < 1:
            raise InputError("LabeledPointCloud needs at least one class")
        object.__setattr__(self, "classes", cls)
        if self.normals is not None:
            nrm = tuple(_readonly(_as_points(n, "normals")) for n in self.normals)
            object.__setattr__(self, "normals", nrm)
        if self.source_vertices is not None:
            sv = tuple(_readonly(np.asarray(s, dtype=np.int64))
                       for s in self.source_vertices)
            object.__setattr__(self, "source_vertices", sv)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def all_points(self) -> np.ndarray:
        return np.concatenate([c for c in self.classes], axis=0)


@dataclass(frozen=True)
class VolumetricMesh:
    """Hexahedral or tetrahedral mesh with named components and tagged
    base-surface faces.

    Attributes
    ----------
    vertices : (n, 3) float array, mm
    cells : (m, 8) or (m, 4) int array
        Hexahedra (node 0-3 bottom quad, 4-7 top quad) or tetrahedra.
    cell_components : (m,) int array
        Component id per cell, indexing `component_names`.
    base_faces : (k, 3) int array
        Rows (class_id, cell_id, local_face_id) tagging the base surface.
    component_names : tuple of str
    """

    vertices: np.ndarray
    cells: np.ndarray
    cell_components: np.ndarray
    base_faces: np.ndarray
    component_names: tuple = ("component0",)

    def __post_init__(self):
        v = _as_points(self.vertices, "vertices")
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.ndim != 2 or cells.shape[1] not in (4, 8):
            raise InputError("cells must be (m, 8) hexahedra or (m, 4) tetrahedra")
        if cells.size and (cells.min() < 0 or cells.max() >= len(v)):
            raise InputError("cell index out of vertex range")
        comp = np.asarray(self.cell_components, dtype=np.int64)
        if comp.shape != (len(cells),):
            raise InputError("cell_components must have one entry per cell")
        names = tuple(str(s) for s in self.component_names)
        if comp.size and (comp.min() < 0 or comp.max() >= len(names)):
            raise InputError("cell component id out of range of component_names")
        bf = np.asarray(self.base_faces, dtype=np.int64).reshape(-1, 3)
        n_local = len(HEX_FACES) if cells.shape[1] == 8 else len(TET_FACES)
        if bf.size:
            if bf[:, 1].min() < 0 or bf[:, 1].max() >= len(cells):
                raise InputError("base face cell id out of range")
            if bf[:, 2].min() < 0 or bf[:, 2].max() >= n_local:
                raise InputError("base face local face id out of range")
            if bf[:, 0].min() < 0:
                raise InputError("base face class id must be >= 0")
            pairs = bf[:, 1] * n_local + bf[:, 2]
            if len(np.unique(pairs)) != len(pairs):
                raise InputError("a base face may belong to exactly one class")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "cells", _readonly(cells))
        object.__setattr__(self, "cell_components", _readonly(comp))
        object.__setattr__(self, "base_faces", _readonly(bf))
        object.__setattr__(self, "component_names", names)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def is_hex(self) -> bool:
        return self.cells.shape[1] == 8

    @property
    def n_classes(self) -> int:
        return int(self.base_faces[:, 0].max()) + 1 if len(self.base_faces) else 0

    @property
    def n_components(self) -> int:
        return len(self.component_names)

    def local_faces(self) -> tuple:
        return HEX_FACES if self.is_hex else TET_FACES

    def with_vertices(self, vertices) -> "VolumetricMesh":
        """Same connectivity, new vertex positions."""
        return VolumetricMesh(vertices, self.cells, self.cell_components,
                              self.base_faces, self.component_names)

    def same_connectivity(self, other: "VolumetricMesh") -> bool:
        return (self.cells.shape == other.cells.shape
                and np.array_equal(self.cells, other.cells)
                and np.array_equal(self.cell_components, other.cell_components)
                and np.array_equal(self.base_faces, other.base_faces))

    def bounding_box(self) -> tuple:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_vertex_ids(self, cell_id: int, local_face: int) -> np.ndarray:
        return self.cells[cell_id][np.array(self.local_faces()[local_face])]

    def validate(self) -> None:
        """Full invariant check: per-component edge connectivity.

        Cheap invariants (index bounds, base-face uniqueness) are enforced at
        construction; this checks that each component's cell set is
        edge-connected, which is linear-ish in mesh size.

        Raises
        ------
        InputError
            If any component's cells are not edge-connected.
        """
        for comp in range(self.n_components):
            ids = np.nonzero(self.cell_components == comp)[0]
            if len(ids) == 0:
                continue
            if not _cells_edge_connected(self.cells[ids]):
                raise InputError(
                    f"component {comp} ({self.component_names[comp]}) cells "
                    "are not edge-connected")


_HEX_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
              (0, 4), (1, 5), (2, 6), (3, 7))
_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _cells_edge_connected(cells: np.ndarray) -> bool:
    edges = _HEX_EDGES if cells.shape[1] == 8 else _TET_EDGES
    uf = _UnionFind(len(cells))
    seen: dict = {}
    for ci, cell in enumerate(cells):
        for a, b in edges:
            key = (min(cell[a], cell[b]), max(cell[a], cell[b]))
            if key in seen:
                uf.union(seen[key], ci)
            else:
                seen[key] = ci
    root = uf.find(0)
    return all(uf.find(i) == root for i in range(len(cells)))


def _boundary_face_records(mesh: VolumetricMesh, cell_ids: np.ndarray) -> list:
    """(cell_id, local_face, vertex_ids) for faces used by exactly one cell
    of `cell_ids`, in deterministic (cell, local face) order."""
    faces = mesh.local_faces()
    count: dict = {}
    first: dict = {}
    for ci in cell_ids:
        cell = mesh.cells[ci]
        for lf, loc in enumerate(faces):
            ids = tuple(int(cell[j]) for j in loc)
            key = tuple(sorted(ids))
            count[key] = count.get(key, 0) + 1
            if key not in first:
                first[key] = (int(ci), lf, ids)
    records = [rec for key, rec in first.items() if count[key] == 1]
    records.sort(key=lambda r: (r[0], r[1]))
    return records


def _split_quad(ids, vertices) -> list:
    """Split an outward-wound quad into two triangles by its shorter
    diagonal.  Deterministic: ties go to the (v0, v2) diagonal."""
    a, b, c, d = ids
    dac = vertices[a] - vertices[c]
    dbd = vertices[b] - vertices[d]
    if dac @ dac <= dbd @ dbd:
        return [(a, b, c), (a, c, d)]
    return [(b, c, d), (b, d, a)]


def extract_boundary_surface(mesh: VolumetricMesh,
                             component: int | None = None) -> SurfaceMesh:
    """Extract the boundary surface of a mesh (or of one component).

    A face is on the boundary if it appears in exactly one cell of the
    considered cell set.  Quads are split into two triangles by the shorter
    diagonal; ordering is deterministic.

    Parameters
    ----------
    mesh : VolumetricMesh
    component : int, optional
        Restrict to the cells of one component; faces between components then
        count as boundary of that component.

    Returns
    -------
    SurfaceMesh
        With `source_vertices` mapping back to volumetric vertex ids.
    """
    if component is None:
        cell_ids = np.arange(mesh.n_cells)
    else:
        if not (0 <= component < mesh.n_components):
            raise InputError(f"unknown component id {component}")
        cell_ids = np.nonzero(mesh.cell_components == component)[0]
    records = _boundary_face_records(mesh, cell_ids)
    tris = []
    for _, _, ids in records:
        if len(ids) == 4:
            tris.extend(_split_quad(ids, mesh.vertices))
        else:
            tris.append(ids)
    tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    used = np.unique(tris) if len(tris) else np.empty(0, dtype=np.int64)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SurfaceMesh(mesh.vertices[used], remap[tris],
                       source_vertices=used, source_component=component)


def _triangle_sample_pattern(k: int) -> np.ndarray:
    """First k points of a deterministic uniform barycentric lattice."""
    coords = []
    level = 1
    while len(coords) < k:
        level += 1
        coords = [(i / level, j / level, (level - i - j) / level)
                  for i in range(1, level) for j in range(1, level - i)]
    return np.asarray(coords[:k])


def base_surface_points(mesh: VolumetricMesh,
                        displacements: np.ndarray | None = None,
                        samples_per_triangle: int = 0) -> LabeledPointCloud:
    """Per-class deduplicated base-face vertex positions.

    Points are the vertices of the tagged base faces (vertex mode, sorted by
    vertex id), optionally shifted by per-vertex displacements.  The mapping
    is an exact pass-through: gradients w.r.t. the returned points scatter
    back onto mesh vertices through `source_vertices`.

    Parameters
    ----------
    mesh : VolumetricMesh
    displacements : (n_vertices, 3) array, optional
    samples_per_triangle : int
        Optional densification: append this many deterministic uniform
        barycentric samples per base-surface triangle.  Densified clouds do
        not carry `source_vertices` (no exact per-point vertex pass-through).

    Returns
    -------
    LabeledPointCloud
        One class per base-face class, with `source_vertices` populated in
        vertex mode.
    """
    if len(mesh.base_faces) == 0:
        raise InputError("mesh has no base faces")
    n_classes = mesh.n_classes
    if displacements is not None:
        displacements = np.asarray(displacements, dtype=float)
        if displacements.shape != mesh.vertices.shape:
            raise InputError("displacements must be (n_vertices, 3)")
    positions = np.asarray(mesh.vertices)
    if displacements is not None:
        positions = positions + displacements
    classes, sources = [], []
    for cls in range(n_classes):
        rows = mesh.base_faces[mesh.base_faces[:, 0] == cls]
        if len(rows) == 0:
            raise InputError(f"base-face class {cls} has zero faces")
        ids = np.unique(np.concatenate(
            [mesh.face_vertex_ids(c, lf) for _, c, lf in rows]))
        pts = positions[ids]
        if samples_per_triangle > 0:
            bary = _triangle_sample_pattern(samples_per_triangle)
            tris = []
            for _, c, lf in rows:
                face = tuple(int(i) for i in mesh.face_vertex_ids(int(c),
                                                                  int(lf)))
                tris.extend(_split_quad(face, mesh.vertices)
                            if len(face) == 4 else [face])
            corners = positions[np.asarray(tris, dtype=np.int64)]
            extra = np.einsum("kb,tbc->tkc", bary, corners).reshape(-1, 3)
            pts = np.concatenate([pts, extra])
        classes.append(pts)
        sources.append(ids)
    if samples_per_triangle > 0:
        return LabeledPointCloud(tuple(classes))
    return LabeledPointCloud(tuple(classes), source_vertices=tuple(sources))


def base_surface_triangulation(mesh: VolumetricMesh) -> SurfaceMesh:
    """Triangulated base surface (all classes merged).

    Quads split by the shorter diagonal, same rule as boundary extraction.
    Used by the surface regularizers, which are evaluated on base-surface
    elements only.
    """
    if len(mesh.base_faces) == 0:
        raise InputError("mesh has no base faces")
    tris = []
    for _, ci, lf in mesh.base_faces:
        ids = tuple(int(i) for i in mesh.face_vertex_ids(int(ci), int(lf)))
        if len(ids) == 4:
            tris.extend(_split_quad(ids, mesh.vertices))
        else:
            tris.append(ids)
    tris = np.asarray(tris, dtype=np.int64)
    used = np.unique(tris)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SurfaceMesh(mesh.vertices[used], remap[tris], source_vertices=used)


def vertex_normals(surface: SurfaceMesh) -> np.ndarray:
    """Angle-weighted per-vertex unit normals.

    Each incident face contributes its unit normal weighted by the interior
    angle at the vertex; the sum is normalized.  For the boundary surface of
    positively oriented cells the normals point outward.

    Raises
    ------
    InputError
        If the surface has a vertex with no incident face.
    """
    v, f = surface.vertices, surface.faces
    if len(f) == 0:
        raise InputError("surface has no faces")
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    fn = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(fn, axis=1)
    ok = norm > 0
    unit = np.zeros_like(fn)
    unit[ok] = fn[ok] / norm[ok, None]

    def corner_angle(a, b, c):
        u = b - a
        w = c - a
        cu = np.linalg.norm(u, axis=1)
        cw = np.linalg.norm(w, axis=1)
        cosang = np.einsum("ij,ij->i", u, w) / np.maximum(cu * cw, 1e-300)
        return np.arccos(np.clip(cosang, -1.0, 1.0))

    angles = np.stack([corner_angle(p0, p1, p2),
                       corner_angle(p1, p2, p0),
                       corner_angle(p2, p0, p1)], axis=1)
    acc = np.zeros_like(v)
    for corner in range(3):
        w = angles[:, corner] * ok
        np.add.at(acc, f[:, corner], w[:, None] * unit)
    nrm = np.linalg.norm(acc, axis=1)
    incident = np.zeros(len(v), dtype=bool)
    incident[f.ravel()] = True
    if not incident.all():
        raise InputError(f"{int((~incident).sum())} isolated vertices have no "
                         "incident face")
    if (nrm == 0).any():
        raise InputError("degenerate vertex normal (all incident faces "
                         "zero-area or cancelling)")
    return acc / nrm[:, None]


def connected_components(surface: SurfaceMesh) -> list:
    """Split a surface into shared-vertex connected components.

    Components partition the face set; vertices used by no face are dropped.
    Output is ordered by each component's minimum original vertex index.

    Returns
    -------
    list of SurfaceMesh
    """
    f = surface.faces
    if len(f) == 0:
        return []
    uf = _UnionFind(surface.n_vertices)
    for tri in f:
        uf.union(int(tri[0]), int(tri[1]))
        uf.union(int(tri[0]), int(tri[2]))
    roots = np.fromiter((uf.find(int(tri[0])) for tri in f), dtype=np.int64,
                        count=len(f))
    out = []
    for root in sorted(set(int(r) for r in roots)):
        tris = f[roots == root]
        used = np.unique(tris)
        remap = np.full(surface.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        src = (surface.source_vertices[used]
               if surface.source_vertices is not None else None)
        out.append(SurfaceMesh(surface.vertices[used], remap[tris],
                               source_vertices=src,
                               source_component=surface.source_component))
    return out


def _face_stacks(mesh: VolumetricMesh) -> list:
    """Walk the element stack transverse to the base surface.

    For every base face, follow opposite faces through stacked cells until a
    boundary face is reached.  Returns, per base face, the list of
    (cell_id, base_local_face) along the stack and the terminal opposite
    face's vertex ids.
    """
    if not mesh.is_hex:
        raise InputError("element stacks require hexahedral cells")
    # face key -> list of (cell, local face)
    incidence: dict = {}
    for ci in range(mesh.n_cells):
        cell = mesh.cells[ci]
        for lf, loc in enumerate(HEX_FACES):
            key = tuple(sorted(int(cell[j]) for j in loc))
            incidence.setdefault(key, []).append((ci, lf))
    stacks = []
    for cls, ci, lf in mesh.base_faces:
        chain = []
        cell_id, local = int(ci), int(lf)
        while True:
            chain.append((cell_id, local))
            opp = HEX_OPPOSITE_FACE[local]
            ids = mesh.face_vertex_ids(cell_id, opp)
            key = tuple(sorted(int(i) for i in ids))
            users = [u for u in incidence[key] if u[0] != cell_id]
            if not users:
                stacks.append((chain, ids))
                break
            cell_id, local = users[0]
    return stacks


def thickness_directions(mesh: VolumetricMesh) -> np.ndarray | None:
    """Per-cell unit thickness directions of the rest geometry.

    For each cell reachable by walking the element stack from the base faces,
    the direction is the normalized vector from the centroid of the
    base-aligned face to the centroid of its opposite face.  Computed once on
    the template and held fixed during optimization.

    Returns
    -------
    (n_cells, 3) array, or None for tetrahedral meshes (anisotropic strain
    term disabled, with a warning).

    Raises
    ------
    InputError
        If some hex cell is not reachable from any base face.
    """
    if not mesh.is_hex:
        warnings.warn("tetrahedral mesh: thickness directions undefined, "
                      "anisotropic strain term disabled")
        return None
    dirs = np.full((mesh.n_cells, 3), np.nan)
    for chain, _ in _face_stacks(mesh):
        for cell_id, local in chain:
            if not np.isnan(dirs[cell_id, 0]):
                continue
            base_ids = mesh.face_vertex_ids(cell_id, local)
            opp_ids = mesh.face_vertex_ids(cell_id, HEX_OPPOSITE_FACE[local])
            d = (mesh.vertices[opp_ids].mean(axis=0)
                 - mesh.vertices[base_ids].mean(axis=0))
            n = np.linalg.norm(d)
            if n == 0:
                raise InputError(f"cell {cell_id}: zero thickness vector")
            dirs[cell_id] = d / n
    if np.isnan(dirs).any():
        missing = int(np.isnan(dirs[:, 0]).sum())
        raise InputError(f"{missing} cells not reachable from any base face")
    return dirs

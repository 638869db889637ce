"""Synthetic scene generators for tests and demos.

The private clinical data behind the original templates is not available, so
these build small hexahedral templates (tube walls, slabs, multi-part plates)
with known smooth ground-truth deformations, target pointclouds, and
calcification-style blob masks.  Everything is deterministic given a seed.
"""

from dataclasses import dataclass

import numpy as np

from .attach import VoxelMask
from .errors import InputError
from .field import Lattice
from .mesh import LabeledPointCloud, VolumetricMesh, base_surface_points, \
    extract_boundary_surface, vertex_normals

SCENE_KINDS = ("tube-bulge", "slab", "calcified-tube")


def slab_template(nx: int = 10, ny: int = 10, nz: int = 2,
                  size=(25.0, 25.0, 4.0), origin=(0.0, 0.0, 0.0)
                  ) -> VolumetricMesh:
    """Rectangular hex slab with the base surface on its bottom (z = min)."""
    sx, sy, sz = size
    ox, oy, oz = origin
    xs = ox + np.linspace(0.0, sx, nx + 1)
    ys = oy + np.linspace(0.0, sy, ny + 1)
    zs = oz + np.linspace(0.0, sz, nz + 1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    verts = np.array([(x, y, z) for x in xs for y in ys for z in zs])
    cells, base = [], []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                cells.append((vid(i, j, k), vid(i + 1, j, k),
                              vid(i + 1, j + 1, k), vid(i, j + 1, k),
                              vid(i, j, k + 1), vid(i + 1, j, k + 1),
                              vid(i + 1, j + 1, k + 1), vid(i, j + 1, k + 1)))
                if k == 0:
                    base.append((0, len(cells) - 1, 0))
    cells = np.asarray(cells, dtype=np.int64)
    return VolumetricMesh(verts, cells, np.zeros(len(cells), dtype=np.int64),
                          np.asarray(base, dtype=np.int64), ("plate",))


def tube_template(n_theta: int = 32, n_z: int = 16, n_layers: int = 2,
                  r_inner: float = 10.0, thickness: float = 2.0,
                  height: float = 40.0) -> VolumetricMesh:
    """Closed cylindrical hex wall around the z axis.

    The base surface (class 0) is the inner (lumen) wall, so the thickness
    direction points radially outward.
    """
    T, K, L = n_theta, n_z, n_layers
    thetas = 2.0 * np.pi * np.arange(T) / T
    zs = np.linspace(0.0, height, K + 1)
    radii = r_inner + thickness * np.arange(L + 1) / L

    def vid(l, j, k):
        return (l * T + j) * (K + 1) + k

    verts = np.empty(((L + 1) * T * (K + 1), 3))
    for l, r in enumerate(radii):
        for j, th in enumerate(thetas):
            for k, z in enumerate(zs):
                verts[vid(l, j, k)] = (r * np.cos(th), r * np.sin(th), z)
    cells, base = [], []
    for l in range(L):
        for j in range(T):
            j2 = (j + 1) % T
            for k in range(K):
                cells.append((vid(l, j, k), vid(l, j2, k), vid(l, j2, k + 1),
                              vid(l, j, k + 1), vid(l + 1, j, k),
                              vid(l + 1, j2, k), vid(l + 1, j2, k + 1),
                              vid(l + 1, j, k + 1)))
                if l == 0:
                    base.append((0, len(cells) - 1, 0))
    cells = np.asarray(cells, dtype=np.int64)
    return VolumetricMesh(verts, cells, np.zeros(len(cells), dtype=np.int64),
                          np.asarray(base, dtype=np.int64), ("wall",))


def three_plate_template(gap: float = 12.0) -> VolumetricMesh:
    """Three disjoint slabs as separate components, one base class each."""
    parts = [slab_template(4, 4, 1, size=(8.0, 8.0, 2.0),
                           origin=(i * (8.0 + gap), 0.0, 0.0))
             for i in range(3)]
    verts, cells, comps, base = [], [], [], []
    vert_off = cell_off = 0
    for ci, part in enumerate(parts):
        verts.append(part.vertices)
        cells.append(part.cells + vert_off)
        comps.append(np.full(part.n_cells, ci, dtype=np.int64))
        bf = part.base_faces.copy()
        bf[:, 0] = ci
        bf[:, 1] += cell_off
        base.append(bf)
        vert_off += part.n_vertices
        cell_off += part.n_cells
    return VolumetricMesh(np.concatenate(verts), np.concatenate(cells),
                          np.concatenate(comps), np.concatenate(base),
                          ("plate0", "plate1", "plate2"))


def bulge_displacement(points: np.ndarray, amplitude: float,
                       z_range: tuple, theta_center: float,
                       theta_power: int = 2) -> np.ndarray:
    """Smooth radial pouch: amplitude * sin^2 window in z, cos^(2p) lobe in
    theta, directed along the cylindrical radial direction."""
    p = np.asarray(points, dtype=float)
    z0, z1 = z_range
    r = np.linalg.norm(p[:, :2], axis=1)
    theta = np.arctan2(p[:, 1], p[:, 0])
    wz = np.zeros(len(p))
    inside = (p[:, 2] >= z0) & (p[:, 2] <= z1)
    wz[inside] = np.sin(np.pi * (p[inside, 2] - z0) / (z1 - z0)) ** 2
    wt = ((1.0 + np.cos(theta - theta_center)) / 2.0) ** theta_power
    mag = amplitude * wz * wt
    rad = np.zeros_like(p)
    ok = r > 0
    rad[ok, 0] = p[ok, 0] / r[ok]
    rad[ok, 1] = p[ok, 1] / r[ok]
    return mag[:, None] * rad


@dataclass(frozen=True)
class Scene:
    """A generated benchmark scene."""

    kind: str
    seed: int
    template: VolumetricMesh
    ground_truth: VolumetricMesh
    targets: LabeledPointCloud
    mask: VoxelMask | None
    manifest: dict


def tube_bulge_scene(seed: int = 0) -> Scene:
    """Tube template plus a smooth sinusoidal radial bulge as ground truth.

    Target pointclouds are the base-surface points of the deformed tube; the
    bulge parameters are jittered deterministically by the seed.
    """
    rng = np.random.default_rng(seed)
    template = tube_template()
    amplitude = 2.5 + 0.3 * rng.uniform(-1.0, 1.0)
    theta_center = rng.uniform(0.0, 2.0 * np.pi)
    z_range = (6.0, 34.0)
    disp = bulge_displacement(template.vertices, amplitude, z_range,
                              theta_center)
    gt = template.with_vertices(np.asarray(template.vertices) + disp)
    targets = base_surface_points(gt)
    manifest = {
        "kind": "tube-bulge",
        "seed": seed,
        "amplitude_mm": float(amplitude),
        "theta_center_rad": float(theta_center),
        "z_range_mm": list(z_range),
    }
    return Scene("tube-bulge", seed, template, gt, targets, None, manifest)


def slab_scene(seed: int = 0) -> Scene:
    """Slab template with a smooth vertical bump as ground truth."""
    rng = np.random.default_rng(seed)
    template = slab_template()
    amplitude = 1.5 + 0.3 * rng.uniform(-1.0, 1.0)
    cx, cy = rng.uniform(8.0, 17.0, size=2)
    p = np.asarray(template.vertices)
    w = np.exp(-(((p[:, 0] - cx) / 6.0) ** 2 + ((p[:, 1] - cy) / 6.0) ** 2))
    disp = np.zeros_like(p)
    disp[:, 2] = amplitude * w
    gt = template.with_vertices(p + disp)
    targets = base_surface_points(gt)
    manifest = {"kind": "slab", "seed": seed, "amplitude_mm": float(amplitude),
                "bump_center_mm": [float(cx), float(cy)]}
    return Scene("slab", seed, template, gt, targets, None, manifest)


def rasterize_spheres(centers: np.ndarray, radius: float,
                      lattice: Lattice) -> VoxelMask:
    coords = lattice.node_coords()
    values = np.zeros(lattice.dims, dtype=bool)
    for c in centers:
        d2 = ((coords - c) ** 2).sum(axis=-1)
        values |= d2 <= radius * radius
    return VoxelMask(values, lattice.spacing, lattice.origin)


def calcified_tube_scene(seed: int = 0, n_blobs: int = 3,
                         blob_gap: float = 0.4, blob_radius: float = 0.8,
                         voxel_mm: float = 0.5) -> Scene:
    """Tube-bulge scene plus calcification-style blobs outside the wall.

    Spherical blobs are centered `blob_gap + blob_radius` outward of the
    deformed outer wall along its normals and rasterized into a voxel mask.
    Defaults keep each blob's whole isosurface within the default filtering
    distance of the wall.
    """
    base_scene = tube_bulge_scene(seed)
    rng = np.random.default_rng(seed + 1000)
    gt = base_scene.ground_truth
    outer = extract_boundary_surface(gt)
    normals = vertex_normals(outer)
    # candidate sites: outer-wall vertices (radial normals), away from rim
    radial = np.linalg.norm(outer.vertices[:, :2], axis=1)
    zc = outer.vertices[:, 2]
    wall = (radial > 11.0) & (zc > 8.0) & (zc < 32.0)
    ids = np.nonzero(wall)[0]
    picked = rng.choice(ids, size=n_blobs, replace=False)
    # spread blobs apart in theta deterministically
    theta = np.arctan2(outer.vertices[picked, 1], outer.vertices[picked, 0])
    picked = picked[np.argsort(theta)]
    centers = outer.vertices[picked] \
        + (blob_gap + blob_radius) * normals[picked]
    lo = np.minimum(gt.vertices.min(axis=0), centers.min(axis=0) - blob_radius)
    hi = np.maximum(gt.vertices.max(axis=0), centers.max(axis=0) + blob_radius)
    lattice = Lattice.for_box(lo, hi, voxel_mm, margin=2)
    mask = rasterize_spheres(centers, blob_radius, lattice)
    manifest = dict(base_scene.manifest)
    manifest.update({
        "kind": "calcified-tube",
        "n_blobs": n_blobs,
        "blob_gap_mm": float(blob_gap),
        "blob_radius_mm": float(blob_radius),
        "blob_centers_mm": [[float(x) for x in c] for c in centers],
    })
    return Scene("calcified-tube", seed, base_scene.template, gt,
                 base_scene.targets, mask, manifest)


def make_scene(kind: str, seed: int = 0, **kwargs) -> Scene:
    """Build one of the named scenes ("tube-bulge", "slab", "calcified-tube")."""
    if kind == "tube-bulge":
        return tube_bulge_scene(seed)
    if kind == "slab":
        return slab_scene(seed)
    if kind == "calcified-tube":
        return calcified_tube_scene(seed, **kwargs)
    raise InputError(f"unknown scene kind {kind!r}; expected one of "
                     f"{SCENE_KINDS}")

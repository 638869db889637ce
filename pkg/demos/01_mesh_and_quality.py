"""Build a volumetric template and inspect its surfaces and element quality.

The library works on hexahedral (or tetrahedral) meshes whose boundary
carries tagged "base" faces: the surface subset used for distance losses.
"""

import numpy as np

from meshtune import (base_surface_points, extract_boundary_surface,
                      scaled_jacobian, skew, thickness_directions,
                      tube_template, vertex_normals)

# A cylindrical vessel-wall template: 32 angular segments, 16 axial rows,
# 2 radial layers.  The inner (lumen) surface is tagged as base class 0.
tube = tube_template()
print(f"template: {tube.n_vertices} vertices, {tube.n_cells} hexahedra, "
      f"{len(tube.base_faces)} base faces")

# Boundary extraction returns all faces used by exactly one cell, quads split
# into triangles by the shorter diagonal.
boundary = extract_boundary_surface(tube)
print(f"boundary surface: {boundary.n_vertices} vertices, "
      f"{boundary.n_faces} triangles")

normals = vertex_normals(boundary)
print("outward normals are unit vectors:",
      bool(np.allclose(np.linalg.norm(normals, axis=1), 1.0)))

# The base surface pointcloud drives the chamfer losses.
base = base_surface_points(tube)
print(f"base pointcloud: {len(base.classes[0])} points in "
      f"{base.n_classes} class(es)")

# Element quality: scaled Jacobian in [-1, 1] (1 = perfect cube) and skew in
# [0, 1] (0 = orthogonal principal axes).
jac = scaled_jacobian(tube)
sk = skew(tube)
print(f"scaled Jacobian: min {jac.min():.4f}, mean {jac.mean():.4f}")
print(f"skew: mean {sk.mean():.4f}, max {sk.max():.4f}")

# Thickness directions (radial for a tube wall) anchor the anisotropic
# strain term; they are computed once on the template and never updated.
dirs = thickness_directions(tube)
centers = tube.vertices[tube.cells].mean(axis=1)
radial = centers * [1.0, 1.0, 0.0]
radial /= np.linalg.norm(radial, axis=1, keepdims=True)
angles = np.degrees(np.arccos(np.clip((dirs * radial).sum(1), -1, 1)))
print(f"thickness direction vs radial: worst deviation {angles.max():.2f} deg")

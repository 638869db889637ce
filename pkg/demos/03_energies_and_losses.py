"""The regularization energies and distance losses, term by term."""

import numpy as np

from meshtune import (EnergyWeights, base_surface_triangulation,
                      classwise_chamfer, edge_correspondence_loss,
                      laplacian_loss, normal_consistency_loss, sided_chamfer,
                      slab_template, strain_energy, surface_edges,
                      thickness_directions)
from meshtune.mesh import base_surface_points

slab = slab_template(6, 6, 2, size=(15.0, 15.0, 3.0))
dirs = thickness_directions(slab)
weights = EnergyWeights()
rest = np.asarray(slab.vertices)

# Strain energy is zero for rigid motion, grows with non-rigid deformation,
# and the anisotropic term (weight 10) punishes thickness stretch hardest.
for name, deformed in [
        ("rigid translation", rest + [5.0, 0.0, 0.0]),
        ("5% in-plane stretch", rest * [1.05, 1.0, 1.0]),
        ("5% thickness stretch", rest * [1.0, 1.0, 1.05])]:
    psi, _ = strain_energy(slab, deformed, dirs, weights)
    print(f"strain energy, {name:22s}: {psi:.6f}")

# Chamfer losses use squared distances (the evaluation metrics use mm).
rng = np.random.default_rng(0)
A = rng.normal(size=(100, 3))
B = A + 0.1 * rng.normal(size=A.shape)
one_sided, _ = sided_chamfer(A, B)
base = base_surface_points(slab)
sym, _ = classwise_chamfer(base, base)
print(f"one-sided chamfer of jittered cloud: {one_sided:.5f} mm^2")
print(f"symmetric chamfer of identical clouds: {sym} (exactly zero)")

# Surface regularizers act on the triangulated base surface.
surf = base_surface_triangulation(slab)
moved = surf.with_vertices(np.asarray(surf.vertices)
                           + 0.2 * rng.normal(size=surf.vertices.shape))
nval, _ = normal_consistency_loss(moved)
lval, _ = laplacian_loss(moved)
print(f"normal consistency after jitter: {nval:.5f} (flat surface scores 0)")
print(f"uniform Laplacian after jitter: {lval:.5f}")

# The edge correspondence loss compares relative edge lengths against the
# template, so global similarity transforms cost nothing.
edges, rest_vecs = surface_edges(surf)
scale_only = np.asarray(surf.vertices) * 1.8 - np.asarray(surf.vertices)
val, _ = edge_correspondence_loss(edges, rest_vecs, scale_only)
print(f"edge correspondence under pure scaling: {val:.2e}")
one_stretch = np.zeros_like(scale_only)
one_stretch[0] = [2.0, 0.0, 0.0]
val, _ = edge_correspondence_loss(edges, rest_vecs, one_stretch)
print(f"edge correspondence with one stretched corner: {val:.5f}")

import numpy as np
import pytest

from meshtune.errors import InputError
from meshtune.mesh import (SurfaceMesh, base_surface_points,
                           base_surface_triangulation, connected_components,
                           extract_boundary_surface, thickness_directions,
                           vertex_normals)
from meshtune.synthetic import slab_template

from conftest import random_rotation, unit_cube
from oracles import bfs_face_components, face_incidence_counts, icosphere


class TestExtractBoundarySurface:
    def test_single_cube_is_twelve_triangles(self, cube):
        surf = extract_boundary_surface(cube)
        assert surf.n_faces == 12
        assert surf.n_vertices == 8

    def test_shared_interior_face_cancels(self):
        block = slab_template(2, 1, 1, size=(2.0, 1.0, 1.0))
        surf = extract_boundary_surface(block)
        assert surf.n_faces == 20  # 10 boundary quads

    def test_three_components_give_disjoint_surfaces(self, three_plates):
        surfaces = [extract_boundary_surface(three_plates, c) for c in range(3)]
        ids = [set(s.source_vertices.tolist()) for s in surfaces]
        assert ids[0] & ids[1] == set() and ids[1] & ids[2] == set()
        # oracle: per-component brute-force face incidence
        for comp, surf in enumerate(surfaces):
            cells = three_plates.cells[three_plates.cell_components == comp]
            counts = face_incidence_counts(cells, three_plates.local_faces())
            n_boundary_quads = sum(1 for v in counts.values() if v == 1)
            assert surf.n_faces == 2 * n_boundary_quads

    def test_unknown_component_rejected(self, cube):
        with pytest.raises(InputError):
            extract_boundary_surface(cube, component=5)

    def test_watertight(self, tube):
        surf = extract_boundary_surface(tube)
        edges = {}
        for tri in surf.faces:
            for a, b in ((0, 1), (1, 2), (2, 0)):
                key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
                edges[key] = edges.get(key, 0) + 1
        assert set(edges.values()) == {2}


class TestBaseSurfacePoints:
    def test_zero_displacement_identity(self, tube):
        cloud = base_surface_points(tube)
        ref = base_surface_points(tube, np.zeros_like(tube.vertices))
        for a, b in zip(cloud.classes, ref.classes):
            np.testing.assert_array_equal(a, b)

    def test_translation_equivariance(self, tube):
        t = np.array([1.5, -2.0, 0.25])
        disp = np.tile(t, (tube.n_vertices, 1))
        cloud = base_surface_points(tube)
        moved = base_surface_points(tube, disp)
        for a, b in zip(cloud.classes, moved.classes):
            np.testing.assert_allclose(b, a + t)

    def test_three_class_counts_match_brute_force(self, three_plates):
        cloud = base_surface_points(three_plates)
        assert cloud.n_classes == 3
        for cls in range(3):
            rows = three_plates.base_faces[three_plates.base_faces[:, 0] == cls]
            union = set()
            for _, ci, lf in rows:
                union |= set(int(v) for v in
                             three_plates.face_vertex_ids(int(ci), int(lf)))
            assert len(cloud.classes[cls]) == len(union)

    def test_linear_in_displacements(self, slab):
        rng = np.random.default_rng(4)
        u1 = rng.normal(size=(slab.n_vertices, 3))
        u2 = rng.normal(size=(slab.n_vertices, 3))
        a = base_surface_points(slab, u1 + u2)
        b = base_surface_points(slab, u1)
        ids = a.source_vertices[0]
        np.testing.assert_allclose(a.classes[0] - b.classes[0], u2[ids],
                                   atol=1e-12)

    def test_densify_option_appends_samples(self, slab):
        plain = base_surface_points(slab)
        dense = base_surface_points(slab, samples_per_triangle=3)
        n_tris = 2 * len(slab.base_faces)
        assert len(dense.classes[0]) == len(plain.classes[0]) + 3 * n_tris
        assert dense.source_vertices is None
        # densified samples still translate with the mesh
        t = np.array([1.0, 2.0, 3.0])
        moved = base_surface_points(
            slab, np.tile(t, (slab.n_vertices, 1)), samples_per_triangle=3)
        np.testing.assert_allclose(moved.classes[0], dense.classes[0] + t,
                                   atol=1e-12)

    def test_empty_class_rejected(self, cube):
        from meshtune.mesh import VolumetricMesh
        bad = VolumetricMesh(cube.vertices, cube.cells, cube.cell_components,
                             np.array([[1, 0, 0]]), ("cube",))
        with pytest.raises(InputError, match="zero faces"):
            base_surface_points(bad)


class TestVertexNormals:
    def test_cube_corner(self, cube):
        surf = extract_boundary_surface(cube)
        normals = vertex_normals(surf)
        corner = np.nonzero((surf.vertices == [1.0, 1.0, 1.0]).all(axis=1))[0][0]
        np.testing.assert_allclose(normals[corner], np.ones(3) / np.sqrt(3),
                                   atol=1e-12)

    def test_flat_plane_interior(self):
        surf = base_surface_triangulation(slab_template(4, 4, 1))
        normals = vertex_normals(surf)
        # interior vertex of the bottom plane: normal is exactly -z
        interior = np.nonzero(
            (np.abs(surf.vertices[:, 0] - 12.5) < 4.0)
            & (np.abs(surf.vertices[:, 1] - 12.5) < 4.0))[0]
        assert len(interior) > 0
        np.testing.assert_allclose(normals[interior],
                                   np.tile([0, 0, -1.0], (len(interior), 1)),
                                   atol=1e-12)

    def test_icosphere_radial(self):
        verts, faces = icosphere(2)
        normals = vertex_normals(SurfaceMesh(verts, faces))
        cos = np.einsum("ij,ij->i", normals, verts)
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 5.0

    def test_isolated_vertex_rejected(self):
        verts = np.array([(0., 0, 0), (1, 0, 0), (0, 1, 0), (5, 5, 5)])
        with pytest.raises(InputError):
            vertex_normals(SurfaceMesh(verts, np.array([[0, 1, 2]])))


class TestConnectedComponents:
    def test_single_sphere(self):
        verts, faces = icosphere(1)
        assert len(connected_components(SurfaceMesh(verts, faces))) == 1

    def test_two_disjoint_spheres(self):
        v1, f1 = icosphere(1)
        v2 = v1 + [5.0, 0.0, 0.0]
        verts = np.concatenate([v1, v2])
        faces = np.concatenate([f1, f1 + len(v1)])
        parts = connected_components(SurfaceMesh(verts, faces))
        assert len(parts) == 2
        assert {p.n_vertices for p in parts} == {len(v1)}

    def test_spheres_sharing_one_vertex(self):
        v1, f1 = icosphere(1)
        v2 = v1 + [5.0, 0.0, 0.0]
        verts = np.concatenate([v1, v2])
        faces2 = f1 + len(v1)
        # weld one vertex of sphere 2 onto sphere 1
        faces2 = np.where(faces2 == len(v1), 0, faces2)
        surf = SurfaceMesh(verts, np.concatenate([f1, faces2]))
        parts = connected_components(surf)
        assert len(parts) == 1
        # oracle: independent BFS over shared vertices
        assert len(bfs_face_components(surf.faces)) == 1

    def test_partition_of_faces(self):
        v1, f1 = icosphere(1)
        v2 = v1 * 0.5 + [4.0, 0, 0]
        surf = SurfaceMesh(np.concatenate([v1, v2]),
                           np.concatenate([f1, f1 + len(v1)]))
        parts = connected_components(surf)
        assert sum(p.n_faces for p in parts) == surf.n_faces
        oracle = bfs_face_components(surf.faces)
        assert sorted(len(c) for c in oracle) == sorted(p.n_faces for p in parts)

    def test_empty_input(self):
        surf = SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        assert connected_components(surf) == []


class TestThicknessDirections:
    def test_axis_aligned_slab(self, slab):
        dirs = thickness_directions(slab)
        np.testing.assert_allclose(dirs, np.tile([0, 0, 1.0],
                                                 (slab.n_cells, 1)), atol=1e-12)

    def test_rotation_equivariance(self, slab):
        rng = np.random.default_rng(7)
        Q = random_rotation(rng)
        rotated = slab.with_vertices(np.asarray(slab.vertices) @ Q.T)
        dirs = thickness_directions(rotated)
        np.testing.assert_allclose(dirs, np.tile(Q @ [0, 0, 1.0],
                                                 (slab.n_cells, 1)), atol=1e-12)

    def test_tube_wall_radial(self, tube):
        dirs = thickness_directions(tube)
        centers = tube.vertices[tube.cells].mean(axis=1)
        radial = centers.copy()
        radial[:, 2] = 0
        radial /= np.linalg.norm(radial, axis=1, keepdims=True)
        ang = np.degrees(np.arccos(np.clip((dirs * radial).sum(1), -1, 1)))
        assert ang.max() < 10.0

    def test_unit_norm(self, tube):
        dirs = thickness_directions(tube)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0,
                                   atol=1e-12)

    def test_unreachable_cell_rejected(self):
        # two cells side by side, base face only on the first: the second is
        # never reached by walking opposite faces
        block = slab_template(2, 1, 1, size=(2.0, 1.0, 1.0))
        from meshtune.mesh import VolumetricMesh
        bad = VolumetricMesh(block.vertices, block.cells,
                             block.cell_components,
                             np.array([[0, 0, 0]]), block.component_names)
        with pytest.raises(InputError, match="not reachable"):
            thickness_directions(bad)

    def test_tet_mesh_disables_with_warning(self, cube):
        tets = np.array([[0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6],
                         [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6]])
        mesh = unit_cube()
        tet_mesh = type(mesh)(mesh.vertices, tets,
                              np.zeros(6, dtype=np.int64),
                              np.array([[0, 0, 0]]), ("cube",))
        with pytest.warns(UserWarning, match="anisotropic"):
            assert thickness_directions(tet_mesh) is None


class TestValidation:
    def test_cell_index_out_of_range(self):
        import meshtune.mesh as m
        with pytest.raises(InputError):
            m.VolumetricMesh(np.zeros((4, 3)), np.array([[0, 1, 2, 9]]),
                             np.zeros(1, dtype=int), np.zeros((0, 3), int))

    def test_base_face_single_class(self):
        import meshtune.mesh as m
        mesh = unit_cube()
        with pytest.raises(InputError):
            m.VolumetricMesh(mesh.vertices, mesh.cells, mesh.cell_components,
                             np.array([[0, 0, 0], [1, 0, 0]]), ("cube",))

    def test_disconnected_component_rejected(self):
        import meshtune.mesh as m
        a = unit_cube()
        verts = np.concatenate([a.vertices, np.asarray(a.vertices) + 10.0])
        cells = np.concatenate([a.cells, a.cells + 8])
        mesh = m.VolumetricMesh(verts, cells, np.zeros(2, dtype=np.int64),
                                np.array([[0, 0, 0]]), ("both",))
        with pytest.raises(InputError, match="edge-connected"):
            mesh.validate()

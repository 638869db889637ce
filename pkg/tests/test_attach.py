import numpy as np
import pytest

from meshtune.attach import (VoxelMask, assign_pairs, filter_by_direction,
                             filter_by_distance, group_and_filter, isosurface,
                             nearest_point_direction)
from meshtune.errors import InputError
from meshtune.field import Lattice
from meshtune.mesh import SurfaceMesh, extract_boundary_surface
from meshtune.synthetic import (calcified_tube_scene, rasterize_spheres,
                                slab_template, three_plate_template,
                                tube_template)

from oracles import brute_nearest, reference_group_and_filter


def euler_characteristic(surface: SurfaceMesh) -> int:
    edges = set()
    for tri in surface.faces:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges.add((min(tri[a], tri[b]), max(tri[a], tri[b])))
    return surface.n_vertices - len(edges) + surface.n_faces


class TestIsosurface:
    def test_single_voxel_closed_genus_zero(self):
        values = np.zeros((3, 3, 3), dtype=bool)
        values[1, 1, 1] = True
        surf = isosurface(VoxelMask(values, [1.0] * 3, [0.0] * 3))
        assert euler_characteristic(surf) == 2

    def test_ball_area_close_to_analytic(self):
        # solid ball, 10 voxels across
        lattice = Lattice([0, 0, 0], [1.0] * 3, (16, 16, 16))
        r = 5.0
        center = np.array([7.5, 7.5, 7.5])
        mask = rasterize_spheres(center[None], r, lattice)
        surf = isosurface(mask)
        p = surf.vertices[surf.faces]
        area = 0.5 * np.linalg.norm(
            np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum()
        analytic = 4.0 * np.pi * r * r
        assert abs(area - analytic) / analytic < 0.15

    def test_empty_mask_rejected(self):
        mask = VoxelMask(np.zeros((4, 4, 4), dtype=bool), [1.0] * 3, [0.0] * 3)
        with pytest.raises(InputError, match="empty"):
            isosurface(mask)

    def test_world_coordinates(self):
        values = np.zeros((3, 3, 3), dtype=bool)
        values[1, 1, 1] = True
        origin, spacing = np.array([10.0, 20.0, 30.0]), np.array([2.0, 2.0, 2.0])
        surf = isosurface(VoxelMask(values, spacing, origin))
        center = origin + spacing  # voxel (1,1,1)
        np.testing.assert_allclose(surf.vertices.mean(axis=0), center,
                                   atol=1e-12)


def blob_surface(center, radius=0.8, voxel=0.4) -> SurfaceMesh:
    lattice = Lattice.for_box(np.asarray(center) - radius,
                              np.asarray(center) + radius, voxel, margin=2)
    return isosurface(rasterize_spheres(np.asarray(center)[None], radius,
                                        lattice))


class TestAssignPairs:
    def test_blob_near_one_component(self, three_plates):
        blob = blob_surface([4.0, 4.0, 4.0])  # just above plate 0
        pairs = assign_pairs(three_plates, blob)
        assert len(pairs) == 1 and pairs[0][0] == 0

    def test_two_blobs_two_components(self, three_plates):
        b0 = blob_surface([4.0, 4.0, 4.0])
        b2 = blob_surface([44.0, 4.0, 4.0])  # above plate 2
        merged = SurfaceMesh(
            np.concatenate([b0.vertices, b2.vertices]),
            np.concatenate([b0.faces, b2.faces + b0.n_vertices]))
        pairs = assign_pairs(three_plates, merged)
        assert sorted(p[0] for p in pairs) == [0, 2]

    def test_equidistant_tie_breaks_to_lower_id(self):
        # plates 0 and 1 are mirror images about the blob plane x = 14, and
        # every coordinate is dyadic, so the two chamfer values are bitwise
        # equal and the tie must break to the lower component id
        mesh = three_plate_template(gap=12.0)
        blob = blob_surface([14.0, 4.0, 1.0], radius=1.0, voxel=0.5)
        pairs = assign_pairs(mesh, blob)
        assert pairs[0][0] == 0

    def test_no_components_empty(self, three_plates):
        empty = SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        assert assign_pairs(three_plates, empty) == []


class TestNearestPointDirection:
    def test_point_above_flat_mesh(self):
        slab = slab_template(4, 4, 1, size=(10.0, 10.0, 2.0))
        surf = extract_boundary_surface(slab)
        Si = SurfaceMesh(np.array([[5.0, 5.0, 3.0]]), np.zeros((0, 3), int))
        dirs, dist, idx = nearest_point_direction(surf, Si)
        np.testing.assert_allclose(dirs[0], [0.0, 0.0, 1.0], atol=1e-12)
        assert np.isclose(dist[0], 1.0)

    def test_coincident_point_takes_mesh_normal(self):
        slab = slab_template(4, 4, 1, size=(10.0, 10.0, 2.0))
        surf = extract_boundary_surface(slab)
        target = np.asarray(surf.vertices[40])
        Si = SurfaceMesh(target[None], np.zeros((0, 3), int))
        from meshtune.mesh import vertex_normals
        dirs, dist, idx = nearest_point_direction(surf, Si)
        assert dist[0] == 0.0
        np.testing.assert_allclose(dirs[0], vertex_normals(surf)[idx[0]])

    def test_matches_brute_force(self, tube):
        rng = np.random.default_rng(0)
        surf = extract_boundary_surface(tube)
        pts = rng.uniform(-14, 14, size=(60, 3)) + [0, 0, 20]
        Si = SurfaceMesh(pts, np.zeros((0, 3), int))
        dirs, dist, idx = nearest_point_direction(surf, Si)
        d2_ref, idx_ref = brute_nearest(pts, np.asarray(surf.vertices))
        np.testing.assert_array_equal(idx, idx_ref)
        np.testing.assert_allclose(dist, np.sqrt(d2_ref), rtol=1e-12)


class TestFilters:
    def test_outward_blob_fully_retained(self):
        rng = np.random.default_rng(1)
        n = 50
        pts = rng.normal(size=(n, 3))
        Si = SurfaceMesh(pts, np.zeros((0, 3), int))
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        dirs = normals.copy()
        out, keep = filter_by_direction(Si, dirs, normals, 0.5)
        assert keep.all() and out.n_vertices == n

    def test_tangential_blob_discarded(self):
        n = 20
        Si = SurfaceMesh(np.random.default_rng(2).normal(size=(n, 3)),
                         np.zeros((0, 3), int))
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        dirs = np.tile([1.0, 0.0, 0.0], (n, 1))
        out, keep = filter_by_direction(Si, dirs, normals, 0.5)
        assert (~keep).all() and out.n_vertices == 0

    def test_hemisphere_half_retained(self):
        rng = np.random.default_rng(3)
        n = 400
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        Si = SurfaceMesh(rng.normal(size=(n, 3)), np.zeros((0, 3), int))
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        _, keep = filter_by_direction(Si, dirs, normals, 0.0)
        assert keep.sum() == (dirs[:, 2] >= 0.0).sum()

    def test_distance_filter_inclusive_threshold(self):
        n = 5
        Si = SurfaceMesh(np.zeros((n, 3)), np.zeros((0, 3), int))
        dist = np.array([1.0, 2.5, 2.5000001, 4.0, 0.0])
        out, keep = filter_by_distance(Si, dist, 2.5)
        np.testing.assert_array_equal(keep, [True, True, False, False, True])

    def test_all_beyond_gives_empty(self):
        Si = SurfaceMesh(np.zeros((3, 3)), np.zeros((0, 3), int))
        out, keep = filter_by_distance(Si, np.full(3, 10.0), 2.5)
        assert out.n_vertices == 0

    def test_mixed_blob_matches_threshold_set(self):
        rng = np.random.default_rng(4)
        n = 80
        Si = SurfaceMesh(rng.normal(size=(n, 3)), np.zeros((0, 3), int))
        dist = rng.uniform(0, 5, size=n)
        _, keep = filter_by_distance(Si, dist, 2.5)
        np.testing.assert_array_equal(keep, dist <= 2.5)

    def test_faces_touching_discarded_vertices_die(self):
        verts = np.array([(0., 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)])
        faces = np.array([[0, 1, 2], [1, 3, 2]])
        Si = SurfaceMesh(verts, faces)
        out, keep = filter_by_distance(Si, np.array([0., 0, 0, 9.0]), 2.5)
        assert out.n_vertices == 3 and out.n_faces == 1

    def test_monotone_in_thresholds(self, tube):
        scene = calcified_tube_scene(3)
        S = isosurface(scene.mask)
        counts = []
        for tau_cos in (0.0, 0.5, 0.9):
            pairing = group_and_filter(scene.ground_truth, S, tau_cos, 2.5)
            counts.append(sum(p.surface.n_vertices for p in pairing.pairs))
        assert counts[0] >= counts[1] >= counts[2]
        counts = []
        for tau_dist in (5.0, 2.5, 1.25):
            pairing = group_and_filter(scene.ground_truth, S, 0.5, tau_dist)
            counts.append(sum(p.surface.n_vertices for p in pairing.pairs))
        assert counts[0] >= counts[1] >= counts[2]


class TestGroupAndFilter:
    def test_paper_style_scene_retention(self):
        # fine wall so every blob point has a laterally close mesh vertex
        tube = tube_template(n_theta=96, n_z=48, n_layers=1)
        scene_mesh = tube
        outer = extract_boundary_surface(tube)
        from meshtune.mesh import vertex_normals
        normals = vertex_normals(outer)
        radial = np.linalg.norm(outer.vertices[:, :2], axis=1)
        sites = np.nonzero((radial > 11.5) & (outer.vertices[:, 2] > 10)
                           & (outer.vertices[:, 2] < 30))[0][::500][:3]
        centers = outer.vertices[sites] + 1.3 * normals[sites]
        lo = centers.min(axis=0) - 2.0
        hi = centers.max(axis=0) + 2.0
        mask = rasterize_spheres(centers, 1.0,
                                 Lattice.for_box(lo, hi, 0.4, margin=2))
        S = isosurface(mask)
        pairing = group_and_filter(scene_mesh, S, 0.5, 2.5)
        assert len(pairing) == 3
        from meshtune.mesh import connected_components
        parts = connected_components(S)
        for part, pair in zip(parts, pairing.pairs):
            assert not pair.empty
            assert pair.surface.n_vertices / part.n_vertices >= 0.9

    def test_far_blob_gives_empty_pair(self, tube):
        blob = blob_surface([25.0, 0.0, 20.0])  # ~13 mm off the wall
        with pytest.warns(UserWarning, match="filtered out"):
            pairing = group_and_filter(tube, blob, 0.5, 2.5)
        assert len(pairing) == 1 and pairing.pairs[0].empty

    def test_empty_attachment_surface(self, tube):
        empty = SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
        pairing = group_and_filter(tube, empty, 0.5, 2.5)
        assert len(pairing) == 0

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_brute_force_reference(self, seed):
        scene = calcified_tube_scene(seed)
        S = isosurface(scene.mask)
        for tau_cos, tau_dist in ((0.5, 2.5), (0.0, 5.0)):
            pairing = group_and_filter(scene.ground_truth, S, tau_cos, tau_dist)
            ref = reference_group_and_filter(scene.ground_truth, S, tau_cos,
                                             tau_dist)
            assert len(pairing) == len(ref)
            for pair, r in zip(pairing.pairs, ref):
                assert pair.component == r["component"]
                np.testing.assert_array_equal(pair.surface.vertices,
                                              r["vertices"])
                np.testing.assert_array_equal(pair.nearest_vertex,
                                              r["nearest_vertex"])
                assert pair.surface.n_faces == len(r["faces"])

    def test_retained_points_subset_of_input(self, tube):
        scene = calcified_tube_scene(2)
        S = isosurface(scene.mask)
        pairing = group_and_filter(scene.ground_truth, S, 0.5, 2.5)
        all_inputs = {tuple(v) for v in np.round(S.vertices, 12).tolist()}
        for p in pairing.pairs:
            for v in np.round(p.surface.vertices, 12).tolist():
                assert tuple(v) in all_inputs

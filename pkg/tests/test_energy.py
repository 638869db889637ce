import numpy as np
import pytest

from meshtune.energy import (EnergyWeights, bending_energy,
                             deformation_gradient, edge_correspondence_loss,
                             face_pair_cosines, laplacian_coordinates,
                             laplacian_loss, normal_consistency_loss,
                             polar_rotation, strain_energy, surface_edges)
from meshtune.errors import InputError
from meshtune.field import ControlGrid, Lattice
from meshtune.mesh import SurfaceMesh, base_surface_triangulation, \
    thickness_directions
from meshtune.synthetic import slab_template, tube_template

from conftest import gradcheck, random_rotation, unit_cube
from oracles import icosphere, midpoint_subdivide


@pytest.fixture
def small_mesh():
    return slab_template(3, 3, 2, size=(6.0, 6.0, 3.0))


class TestDeformationGradient:
    def test_identity(self, small_mesh):
        F = deformation_gradient(small_mesh, small_mesh.vertices, 0)
        np.testing.assert_allclose(F, np.eye(3), atol=1e-12)

    def test_rigid_motion_gives_rotation(self, small_mesh):
        rng = np.random.default_rng(0)
        Q = random_rotation(rng)
        moved = np.asarray(small_mesh.vertices) @ Q.T + [1.0, 2.0, 3.0]
        for cell in (0, 5, small_mesh.n_cells - 1):
            F = deformation_gradient(small_mesh, moved, cell)
            np.testing.assert_allclose(F, Q, atol=1e-12)

    def test_diagonal_scale(self, small_mesh):
        D = np.diag([2.0, 1.0, 1.0])
        moved = np.asarray(small_mesh.vertices) @ D.T
        F = deformation_gradient(small_mesh, moved, 3)
        np.testing.assert_allclose(F, D, atol=1e-12)

    def test_degenerate_rest_cell_rejected(self):
        from meshtune.mesh import VolumetricMesh
        verts = np.zeros((8, 3))  # fully collapsed rest hex
        mesh = VolumetricMesh(verts, np.arange(8).reshape(1, 8),
                              np.zeros(1, dtype=int), np.zeros((0, 3), int))
        with pytest.raises(InputError, match="degenerate rest"):
            deformation_gradient(mesh, verts, 0)

    def test_tet_exact(self):
        verts = np.array([(0., 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
                          (1, 1, 1)])
        from meshtune.mesh import VolumetricMesh
        mesh = VolumetricMesh(verts, np.array([[0, 1, 2, 3]]),
                              np.zeros(1, dtype=int), np.array([[0, 0, 0]]))
        A = np.array([[1.2, 0.3, 0.0], [0.0, 0.9, 0.1], [0.2, 0.0, 1.1]])
        F = deformation_gradient(mesh, verts @ A.T, 0)
        np.testing.assert_allclose(F, A, atol=1e-12)


class TestPolarRotation:
    def test_rotation_passthrough(self):
        Q = random_rotation(np.random.default_rng(1))
        np.testing.assert_allclose(polar_rotation(Q), Q, atol=1e-12)

    def test_spd_gives_identity(self):
        np.testing.assert_allclose(polar_rotation(np.diag([2.0, 3.0, 4.0])),
                                   np.eye(3), atol=1e-12)

    def test_rotation_times_stretch(self):
        Q = random_rotation(np.random.default_rng(2))
        F = Q @ np.diag([2.0, 1.0, 0.5])
        np.testing.assert_allclose(polar_rotation(F), Q, atol=1e-12)

    def test_det_plus_one_for_reflection_like_input(self):
        F = np.diag([-2.0, 1.0, 1.0])
        R = polar_rotation(F)
        assert np.isclose(np.linalg.det(R), 1.0)

    def test_singular_flagged(self):
        with pytest.warns(UserWarning, match="singular"):
            polar_rotation(np.diag([1.0, 1.0, 0.0]))


class TestStrainEnergy:
    def test_rigid_motion_zero(self, small_mesh):
        rng = np.random.default_rng(3)
        dirs = thickness_directions(small_mesh)
        Q = random_rotation(rng)
        moved = np.asarray(small_mesh.vertices) @ Q.T + rng.normal(size=3)
        psi, _ = strain_energy(small_mesh, moved, dirs, EnergyWeights())
        assert psi <= 1e-12

    def test_single_cell_stretch_value(self):
        cube = unit_cube()
        d = np.array([[1.0, 0.0, 0.0]])
        stretched = np.asarray(cube.vertices) * [2.0, 1.0, 1.0]
        psi, _ = strain_energy(cube, stretched, d, EnergyWeights())
        # isotropic (2-1)^2 = 1 plus anisotropic 10*(2-1)^2 = 10
        assert np.isclose(psi, 11.0, atol=1e-12)

    def test_gradient_matches_fd(self, small_mesh):
        rng = np.random.default_rng(4)
        dirs = thickness_directions(small_mesh)
        w = EnergyWeights()
        x0 = np.asarray(small_mesh.vertices) \
            + rng.normal(scale=0.05, size=small_mesh.vertices.shape)
        _, g = strain_energy(small_mesh, x0, dirs, w)
        gradcheck(lambda x: strain_energy(small_mesh, x, dirs, w)[0],
                  x0, g, rng, n=30)

    def test_rotation_invariance_of_deformed_state(self, small_mesh):
        rng = np.random.default_rng(5)
        dirs = thickness_directions(small_mesh)
        w = EnergyWeights()
        x = np.asarray(small_mesh.vertices) \
            + rng.normal(scale=0.1, size=small_mesh.vertices.shape)
        Q = random_rotation(rng)
        a, _ = strain_energy(small_mesh, x, dirs, w)
        b, _ = strain_energy(small_mesh, x @ Q.T, dirs, w)
        assert abs(a - b) <= 1e-10 * max(1.0, a)

    def test_collapsed_thickness_finite(self):
        cube = unit_cube()
        d = np.array([[1.0, 0.0, 0.0]])
        flat = np.asarray(cube.vertices) * [1e-12, 1.0, 1.0]
        with pytest.warns(UserWarning, match="singular"):
            psi, g = strain_energy(cube, flat, d, EnergyWeights())
        assert np.isfinite(psi) and np.isfinite(g).all()


class TestBendingEnergy:
    def make_grid(self, dims=(6, 5, 7), spacing=2.0):
        return ControlGrid([0, 0, 0], [spacing] * 3,
                           np.zeros(tuple(dims) + (3,)))

    def test_zero_grid(self):
        grid = self.make_grid()
        val, grad = bending_energy(grid)
        assert val == 0.0 and (grad == 0.0).all()

    def test_affine_null_space(self):
        grid = self.make_grid()
        rng = np.random.default_rng(6)
        coords = Lattice(grid.origin, grid.spacing, grid.dims).node_coords()
        v = coords @ (0.1 * rng.normal(size=(3, 3))).T + rng.normal(size=3)
        val, _ = bending_energy(grid.with_velocities(v))
        assert val <= 1e-12

    def test_quadratic_field_hand_computed(self):
        grid = self.make_grid(dims=(6, 4, 4), spacing=2.0)
        coords = Lattice(grid.origin, grid.spacing, grid.dims).node_coords()
        v = np.zeros(grid.dims + (3,))
        v[..., 0] = coords[..., 0] ** 2
        val, _ = bending_energy(grid.with_velocities(v))
        # second difference along x is 2 h^2 at 4 interior x-planes
        h = 2.0
        n_nodes = 6 * 4 * 4
        expected = (4 * 4 * 4) * (2 * h * h) ** 2 / n_nodes
        assert np.isclose(val, expected, rtol=1e-12)

    def test_gradient_matches_fd(self):
        grid = self.make_grid()
        rng = np.random.default_rng(7)
        v0 = rng.normal(size=grid.dims + (3,))
        _, g = bending_energy(grid.with_velocities(v0))
        gradcheck(lambda v: bending_energy(grid.with_velocities(v))[0],
                  v0, g, rng, n=30)


def right_angle_pair() -> SurfaceMesh:
    verts = np.array([(0., 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return SurfaceMesh(verts, faces)


class TestNormalConsistency:
    def test_flat_plane_zero(self):
        surf = base_surface_triangulation(slab_template(4, 4, 1))
        val, _ = normal_consistency_loss(surf)
        assert val <= 1e-14

    def test_right_angle_pair(self):
        val, _ = normal_consistency_loss(right_angle_pair())
        assert np.isclose(val, 1.0, atol=1e-12)

    def test_refinement_decreases_icosphere_value(self):
        v1, f1 = icosphere(1)
        coarse, _ = normal_consistency_loss(SurfaceMesh(v1, f1))
        v2, f2 = midpoint_subdivide(v1, f1)
        v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
        fine, _ = normal_consistency_loss(SurfaceMesh(v2, f2))
        assert fine < coarse

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(8)
        v, f = icosphere(1)
        surf = SurfaceMesh(v, f)
        x0 = v + rng.normal(scale=0.02, size=v.shape)
        _, g = normal_consistency_loss(surf.with_vertices(x0))
        gradcheck(lambda x: normal_consistency_loss(surf.with_vertices(x))[0],
                  x0, g, rng, n=30)

    def test_template_relative_zero_at_reference(self):
        v, f = icosphere(1)
        surf = SurfaceMesh(v, f)
        ref = face_pair_cosines(surf)
        val, g = normal_consistency_loss(surf, reference_cos=ref)
        assert val == 0.0 and (g == 0.0).all()

    def test_zero_area_face_warns(self):
        verts = np.array([(0., 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)])
        faces = np.array([[0, 1, 2], [0, 2, 3], [1, 1, 2]])
        with pytest.warns(UserWarning, match="zero-area"):
            normal_consistency_loss(SurfaceMesh(verts, faces))


class TestLaplacianLoss:
    def test_regular_grid_interior_zero(self):
        surf = base_surface_triangulation(slab_template(6, 6, 1))
        L = laplacian_coordinates(surf)
        v = surf.vertices
        interior = ((v[:, 0] > 4.5) & (v[:, 0] < 20.5)
                    & (v[:, 1] > 4.5) & (v[:, 1] < 20.5))
        assert interior.any()
        assert np.abs(L[interior]).max() <= 1e-12

    def test_pulled_vertex_contribution(self):
        # symmetric wheel: center contribution is exactly ||delta||^2
        k = 8
        ang = 2 * np.pi * np.arange(k) / k
        ring = np.stack([np.cos(ang), np.sin(ang), np.zeros(k)], axis=1)
        verts = np.concatenate([[[0.0, 0.0, 0.0]], ring])
        faces = np.array([[0, 1 + i, 1 + (i + 1) % k] for i in range(k)])
        delta = np.array([0.0, 0.0, 0.7])
        moved = verts.copy()
        moved[0] += delta
        L = laplacian_coordinates(SurfaceMesh(moved, faces))
        assert np.isclose(L[0] @ L[0], delta @ delta, atol=1e-14)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(9)
        v, f = icosphere(1)
        x = v + rng.normal(scale=0.05, size=v.shape)
        surf = SurfaceMesh(x, f)
        val, _ = laplacian_loss(surf)
        # direct per-vertex double loop
        neighbors = {i: set() for i in range(len(x))}
        for a, b, c in f:
            neighbors[a] |= {b, c}
            neighbors[b] |= {a, c}
            neighbors[c] |= {a, b}
        total = 0.0
        for i, nb in neighbors.items():
            diff = x[i] - np.mean([x[j] for j in sorted(nb)], axis=0)
            total += diff @ diff
        assert np.isclose(val, total / len(x), rtol=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(10)
        v, f = icosphere(1)
        surf = SurfaceMesh(v, f)
        x0 = v + rng.normal(scale=0.05, size=v.shape)
        _, g = laplacian_loss(surf.with_vertices(x0))
        gradcheck(lambda x: laplacian_loss(surf.with_vertices(x))[0],
                  x0, g, rng, n=30)

    def test_template_relative_zero_at_reference(self):
        v, f = icosphere(1)
        surf = SurfaceMesh(v, f)
        val, g = laplacian_loss(surf, reference=laplacian_coordinates(surf))
        assert val == 0.0 and (g == 0.0).all()


class TestEdgeCorrespondence:
    def four_edges(self):
        edges = np.array([[0, 1], [2, 3], [4, 5], [6, 7]])
        rest = np.tile([1.0, 0.0, 0.0], (4, 1))
        return edges, rest

    def test_identity_zero(self):
        edges, rest = self.four_edges()
        val, g = edge_correspondence_loss(edges, rest, np.zeros((8, 3)))
        assert val == 0.0 and (g == 0.0).all()

    def test_similarity_invariance(self):
        rng = np.random.default_rng(11)
        surf = base_surface_triangulation(tube_template(8, 4, 1))
        edges, rest = surface_edges(surf)
        Q = random_rotation(rng)
        s = 1.7
        U = (np.asarray(surf.vertices) @ Q.T) * s + [4.0, 5.0, 6.0] \
            - np.asarray(surf.vertices)
        val, _ = edge_correspondence_loss(edges, rest, U)
        assert val <= 1e-12

    def test_one_edge_doubled(self):
        edges, rest = self.four_edges()
        U = np.zeros((8, 3))
        U[7, 0] = 1.0  # doubles the last edge
        val, _ = edge_correspondence_loss(edges, rest, U)
        assert np.isclose(val, 0.1875, atol=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        surf = base_surface_triangulation(tube_template(8, 4, 1))
        edges, rest = surface_edges(surf)
        U0 = rng.normal(scale=0.1, size=(surf.n_vertices, 3))
        _, g = edge_correspondence_loss(edges, rest, U0)
        gradcheck(lambda u: edge_correspondence_loss(edges, rest, u)[0],
                  U0, g, rng, n=30)

    def test_collapsed_edges_rejected(self):
        edges, rest = self.four_edges()
        U = np.zeros((8, 3))
        U[[1, 3, 5, 7], 0] = -1.0  # every deformed edge collapses
        with pytest.raises(InputError, match="collapsed"):
            edge_correspondence_loss(edges, rest, U)


class TestCellKinematics:
    def test_bundle_from_deformed_state(self):
        from meshtune.energy import CellKinematics, cell_kinematics
        mesh = slab_template(2, 2, 1, size=(4.0, 4.0, 2.0))
        dirs = thickness_directions(mesh)
        rng = np.random.default_rng(13)
        Q = random_rotation(rng)
        kin = cell_kinematics(mesh, np.asarray(mesh.vertices) @ Q.T, 0, dirs)
        np.testing.assert_allclose(kin.F, Q, atol=1e-12)
        np.testing.assert_allclose(kin.R, Q, atol=1e-12)
        np.testing.assert_allclose(kin.d, [0, 0, 1.0], atol=1e-12)

    def test_rotation_invariants_enforced(self):
        from meshtune.energy import CellKinematics
        with pytest.raises(InputError):
            CellKinematics(np.eye(3), np.diag([1.0, 1.0, -1.0]))
        with pytest.raises(InputError):
            CellKinematics(np.eye(3), np.eye(3) + 1e-6)


class TestEnergyWeights:
    def test_defaults_follow_grid_search(self):
        w = EnergyWeights()
        assert (w.lambda0, w.lambda1_aniso, w.lambda3_normal,
                w.lambda4_laplacian, w.lambda5_edge) == (1.0, 10.0, 10.0, 1.0,
                                                         0.01)

    def test_negative_rejected(self):
        with pytest.raises(InputError):
            EnergyWeights(lambda1_aniso=-1.0)

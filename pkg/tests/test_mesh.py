"""Tests for mesh construction, mass lumping, deformation operators and snapshots."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.mesh.deformation import (
    build_deform_operator,
    deformation_gradient,
    deformation_gradients,
    gauss_points,
    shape_functions,
    shape_gradients,
)
from src.mesh.hex_mesh import (
    HexMesh,
    boundary_nodes,
    build_grid_mesh,
    build_voxel_mesh,
    fix_nodes,
    nodes_where,
    with_dirichlet,
)
from src.mesh.mass import lumped_mass
from src.mesh.snapshot import format_snapshot, read_snapshot, write_snapshot
from src.utils.errors import InvalidArgumentError


class TestHexMesh:
    def test_grid_counts(self):
        mesh = build_grid_mesh((32, 8, 8), 0.01)
        assert mesh.num_elements == 2048
        assert mesh.num_nodes == 33 * 9 * 9
        assert mesh.num_dofs == 3 * mesh.num_nodes

    def test_node_order_is_x_fastest(self):
        mesh = build_grid_mesh((2, 1, 1), 1.0)
        assert_allclose(mesh.rest_positions[:3], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        assert_allclose(mesh.rest_positions[3], [0, 1, 0])

    def test_voxel_mesh_drops_unused_nodes(self):
        occupancy = np.zeros((2, 2, 1), dtype=bool)
        occupancy[0, 0, 0] = occupancy[1, 0, 0] = occupancy[0, 1, 0] = True
        mesh = build_voxel_mesh(occupancy, 0.5)
        assert mesh.num_elements == 3
        # 3x3x2 lattice minus the two nodes only the missing corner voxel touches
        assert mesh.num_nodes == 16
        mesh.validate()

    def test_elements_have_distinct_nodes_and_unit_spacing(self):
        mesh = build_grid_mesh((2, 2, 2), 0.1)
        corners = mesh.rest_positions[mesh.elements]
        extent = corners.max(axis=1) - corners.min(axis=1)
        assert_allclose(extent, 0.1)

    @pytest.mark.parametrize("dx", [0.0, -1.0])
    def test_non_positive_spacing_rejected(self, dx):
        with pytest.raises(InvalidArgumentError):
            build_grid_mesh((1, 1, 1), dx)

    def test_empty_occupancy_rejected(self):
        with pytest.raises(InvalidArgumentError):
            build_voxel_mesh(np.zeros((2, 2, 2), dtype=bool), 0.1)

    def test_bad_counts_rejected(self):
        with pytest.raises(InvalidArgumentError):
            build_grid_mesh((0, 1, 1), 0.1)

    def test_validate_rejects_repeated_nodes(self):
        mesh = build_grid_mesh((1, 1, 1), 0.1)
        elements = mesh.elements.copy()
        elements[0, 1] = elements[0, 0]
        broken = HexMesh(mesh.rest_positions, elements, mesh.dx)
        with pytest.raises(InvalidArgumentError):
            broken.validate()

    def test_boundary_nodes_exclude_interior(self):
        mesh = build_grid_mesh((3, 3, 3), 1.0)
        nodes = boundary_nodes(mesh)
        assert nodes.size == 64 - 8
        interior = nodes_where(mesh, lambda p: np.all((p > 0.5) & (p < 2.5), axis=1))
        assert not np.isin(interior, nodes).any()


class TestDirichlet:
    def test_fix_nodes_pins_rest_positions(self, block_mesh):
        root = nodes_where(block_mesh, lambda p: p[:, 0] < 1e-9)
        mesh = fix_nodes(block_mesh, root)
        assert mesh.dirichlet_dofs.size == 3 * root.size
        assert_allclose(mesh.dirichlet_values, block_mesh.rest_positions[root].reshape(-1))
        assert not mesh.free_mask()[mesh.dirichlet_dofs].any()

    def test_new_values_win(self, block_mesh):
        mesh = with_dirichlet(block_mesh, [0, 1], [5.0, 6.0])
        mesh = with_dirichlet(mesh, [1, 2], [7.0, 8.0])
        assert mesh.dirichlet_dofs.tolist() == [0, 1, 2]
        assert_allclose(mesh.dirichlet_values, [5.0, 7.0, 8.0])

    def test_duplicate_dofs_rejected(self, block_mesh):
        with pytest.raises(InvalidArgumentError):
            with_dirichlet(block_mesh, [3, 3], [0.0, 0.0])

    def test_out_of_range_dof_rejected(self, block_mesh):
        with pytest.raises(InvalidArgumentError):
            with_dirichlet(block_mesh, [block_mesh.num_dofs], [0.0])


class TestMass:
    def test_unit_cube_splits_evenly(self):
        mass = lumped_mass(build_grid_mesh((1, 1, 1), 1.0), 1.0)
        assert_allclose(mass.node_masses, np.full(8, 0.125))

    def test_total_mass_is_density_times_volume(self):
        mesh = build_grid_mesh((3, 2, 2), 0.1)
        mass = lumped_mass(mesh, 1e3)
        assert mass.total == pytest.approx(1e3 * mesh.volume)
        assert mass.diagonal.shape == (mesh.num_dofs,)

    def test_shared_nodes_accumulate(self):
        mass = lumped_mass(build_grid_mesh((2, 1, 1), 1.0), 8.0)
        # Nodes on the middle face belong to two elements
        assert sorted(set(mass.node_masses.tolist())) == [1.0, 2.0]

    def test_non_positive_density_rejected(self, block_mesh):
        with pytest.raises(InvalidArgumentError):
            lumped_mass(block_mesh, 0.0)


class TestDeformation:
    def test_partition_of_unity(self):
        xi = gauss_points()
        assert_allclose(shape_functions(xi).sum(axis=-1), 1.0)
        assert_allclose(shape_gradients(xi, 0.1).sum(axis=-2), 0.0, atol=1e-12)

    def test_rest_state_is_identity(self, block_mesh):
        op = build_deform_operator(block_mesh)
        F = deformation_gradients(op, block_mesh.rest_vector)
        assert F.shape == (2, 8, 3, 3)
        assert_allclose(F, np.broadcast_to(np.eye(3), F.shape), atol=1e-12)

    def test_affine_motion_is_reproduced(self, block_mesh, rng):
        op = build_deform_operator(block_mesh)
        A = np.eye(3) + 0.2 * rng.standard_normal((3, 3))
        x = (block_mesh.rest_positions @ A.T + rng.standard_normal(3)).reshape(-1)
        F = deformation_gradients(op, x)
        assert_allclose(F, np.broadcast_to(A, F.shape), atol=1e-10)

    def test_sparse_operator_matches_batched_gradients(self, block_mesh, rng):
        op = build_deform_operator(block_mesh)
        x = block_mesh.rest_vector + 0.01 * rng.standard_normal(block_mesh.num_dofs)
        assert_allclose((op.matrix @ x).reshape(2, 8, 3, 3), deformation_gradients(op, x), atol=1e-12)

    def test_single_gradient_matches_batch(self, block_mesh, rng):
        op = build_deform_operator(block_mesh)
        x = block_mesh.rest_vector + 0.01 * rng.standard_normal(block_mesh.num_dofs)
        assert_allclose(deformation_gradient(op, x, 1, 5), deformation_gradients(op, x)[1, 5], atol=1e-12)

    def test_quadrature_weights_sum_to_element_volume(self, block_mesh):
        op = build_deform_operator(block_mesh)
        assert op.quad_weights.sum() == pytest.approx(block_mesh.element_volume)

    def test_indices_checked(self, block_mesh):
        op = build_deform_operator(block_mesh)
        with pytest.raises(InvalidArgumentError):
            deformation_gradient(op, block_mesh.rest_vector, 2, 0)
        with pytest.raises(InvalidArgumentError):
            deformation_gradient(op, block_mesh.rest_vector, 0, 8)
        with pytest.raises(InvalidArgumentError):
            deformation_gradients(op, np.zeros(5))


class TestSnapshot:
    def test_header_and_line_count(self, block_mesh):
        text = format_snapshot(block_mesh, block_mesh.rest_vector)
        lines = text.splitlines()
        assert lines[0] == f"nodes {block_mesh.num_nodes} elements {block_mesh.num_elements}"
        assert len(lines) == 1 + block_mesh.num_nodes + block_mesh.num_elements

    def test_written_frame_reads_back(self, block_mesh, tmp_path):
        path = write_snapshot(tmp_path / "frame_0001.txt", block_mesh, block_mesh.rest_vector)
        positions, elements = read_snapshot(path)
        assert_allclose(positions, block_mesh.rest_positions, rtol=1e-9)
        assert np.array_equal(elements, block_mesh.elements)

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("vertices 3\n", encoding="utf-8")
        with pytest.raises(InvalidArgumentError):
            read_snapshot(path)

    def test_size_mismatch_rejected(self, block_mesh):
        with pytest.raises(InvalidArgumentError):
            format_snapshot(block_mesh, np.zeros(3))

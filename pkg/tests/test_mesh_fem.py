import numpy as np
import pytest
from scipy.linalg import cholesky

from podparam.mesh_fem import (
    DIRICHLET,
    NEUMANN,
    InconsistentBCError,
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    evaluate_field,
    h1_semi_inner,
    h1_semi_norm,
    interpolate_nodal,
    l2_inner,
    l2_norm,
    make_bc,
    poincare_constant,
)

# reference element matrices from exact symbolic integration:
# mass (h/30)*[[4,2,-1],[2,16,2],[-1,2,4]], stiffness (1/(3h))*[[7,-8,1],[-8,16,-8],[1,-8,7]]
MASS_5X5_X60 = np.array([
    [4, 2, -1, 0, 0],
    [2, 16, 2, 0, 0],
    [-1, 2, 8, 2, -1],
    [0, 0, 2, 16, 2],
    [0, 0, -1, 2, 4],
], dtype=float)
STIFF_5X5_X6 = np.array([
    [28, -32, 4, 0, 0],
    [-32, 64, -32, 0, 0],
    [4, -32, 56, -32, 4],
    [0, 0, -32, 64, -32],
    [0, 0, 4, -32, 28],
], dtype=float)


class TestMesh:
    def test_node_counts(self):
        assert build_mesh(50).n_nodes == 101
        assert abs(build_mesh(50).h - 0.02) < 1e-15
        assert build_mesh(80).n_nodes == 161

    def test_two_element_nodes(self):
        mesh = build_mesh(2)
        assert np.allclose(mesh.node_coords, [0, 0.25, 0.5, 0.75, 1.0])

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            build_mesh(1)
        with pytest.raises(ValueError):
            build_mesh(4, (1.0, 1.0))

    def test_nodes_increasing_and_ends_exact(self):
        mesh = build_mesh(7, (-1.0, 2.0))
        assert np.all(np.diff(mesh.node_coords) > 0)
        assert mesh.node_coords[0] == -1.0 and mesh.node_coords[-1] == 2.0


class TestAssembly:
    def test_mass_against_hand_assembled(self):
        mesh = build_mesh(2)
        bc = make_bc(mesh, NEUMANN, NEUMANN)
        M = assemble_mass(mesh, bc)
        assert np.abs(M - MASS_5X5_X60 / 60).max() < 1e-14

    def test_stiffness_against_hand_assembled(self):
        mesh = build_mesh(2)
        bc = make_bc(mesh, NEUMANN, NEUMANN)
        A = assemble_stiffness(mesh, bc)
        assert np.abs(A - STIFF_5X5_X6 / 6).max() < 1e-13

    def test_constant_one_has_unit_mass(self):
        mesh = build_mesh(9)
        bc = make_bc(mesh, NEUMANN, NEUMANN)
        M = assemble_mass(mesh, bc)
        v = interpolate_nodal(lambda x: np.ones_like(x), mesh, bc)
        assert abs(l2_inner(M, v, v) - 1.0) < 1e-14

    def test_partition_of_unity(self):
        mesh = build_mesh(13, (0.0, 2.5))
        bc = make_bc(mesh, NEUMANN, NEUMANN)
        M = assemble_mass(mesh, bc)
        assert abs(M.sum() - 2.5) < 1e-13

    def test_mass_spd(self):
        mesh = build_mesh(8)
        for left, right in ((DIRICHLET, DIRICHLET), (NEUMANN, DIRICHLET),
                            (NEUMANN, NEUMANN)):
            bc = make_bc(mesh, left, right)
            M = assemble_mass(mesh, bc)
            assert np.array_equal(M, M.T)
            cholesky(M)  # raises if not SPD

    def test_stiffness_spd_with_dirichlet_end(self):
        mesh = build_mesh(8)
        A = assemble_stiffness(mesh, make_bc(mesh, NEUMANN, DIRICHLET))
        assert np.array_equal(A, A.T)
        cholesky(A)

    def test_stiffness_semidefinite_without_dirichlet(self):
        mesh = build_mesh(8)
        A = assemble_stiffness(mesh, make_bc(mesh, NEUMANN, NEUMANN))
        ones = np.ones(A.shape[0])
        assert abs(ones @ A @ ones) < 1e-12


class TestInnerProducts:
    def test_linear_profile_unit_gradient(self):
        mesh = build_mesh(6)
        bc = make_bc(mesh, DIRICHLET, NEUMANN)
        A = assemble_stiffness(mesh, bc)
        v = interpolate_nodal(lambda x: x, mesh, bc)
        assert abs(h1_semi_inner(A, v, v) - 1.0) < 1e-13

    def test_quadratic_profile_exact(self):
        mesh = build_mesh(2)
        bc = make_bc(mesh)
        A = assemble_stiffness(mesh, bc)
        v = interpolate_nodal(lambda x: x * (1 - x), mesh, bc)
        assert abs(h1_semi_inner(A, v, v) - 1.0 / 3.0) < 1e-14

    def test_quadrature_exact_for_quadratics(self):
        # gradient norm of any interpolated quadratic equals the exact integral
        mesh = build_mesh(5)
        bc = make_bc(mesh, NEUMANN, NEUMANN)
        A = assemble_stiffness(mesh, bc)
        for b, c in ((1.0, 0.5), (-2.0, 3.0), (0.3, -0.7)):
            v = interpolate_nodal(lambda x: b * x + c * x ** 2, mesh, bc)
            exact = b * b + 2 * b * c + 4 * c * c / 3.0
            assert abs(h1_semi_inner(A, v, v) - exact) < 1e-13 * max(1, exact)

    def test_zero_and_symmetry(self):
        mesh = build_mesh(6)
        bc = make_bc(mesh)
        A = assemble_stiffness(mesh, bc)
        rng = np.random.default_rng(7)
        u = rng.standard_normal(bc.n_free)
        v = rng.standard_normal(bc.n_free)
        assert h1_semi_inner(A, np.zeros_like(u), v) == 0.0
        assert abs(h1_semi_inner(A, u, v) - h1_semi_inner(A, v, u)) < 1e-14

    def test_two_component_sum(self):
        mesh = build_mesh(2)
        bc = make_bc(mesh)
        A = assemble_stiffness(mesh, bc)
        v = interpolate_nodal(lambda x: x * (1 - x), mesh, bc)
        pair = np.concatenate([v.coeffs, v.coeffs])
        assert abs(h1_semi_inner(A, pair, pair) - 2.0 / 3.0) < 1e-14

    def test_bilinearity(self):
        mesh = build_mesh(6)
        bc = make_bc(mesh)
        M = assemble_mass(mesh, bc)
        rng = np.random.default_rng(3)
        u = rng.standard_normal(bc.n_free)
        v = rng.standard_normal(bc.n_free)
        assert abs(l2_inner(M, 2.5 * u, v) - 2.5 * l2_inner(M, u, v)) < 1e-13

    def test_sine_l2_norm(self):
        # exact integral is 1/2; the interpolant's norm approaches it at O(h^4)
        errs = []
        for n in (25, 50, 100):
            mesh = build_mesh(n)
            bc = make_bc(mesh)
            M = assemble_mass(mesh, bc)
            u = interpolate_nodal(lambda x: np.sin(np.pi * x), mesh, bc)
            errs.append(abs(l2_inner(M, u, u) - 0.5))
        assert errs[1] < 2e-8
        ratios = np.array(errs[:-1]) / errs[1:]
        assert np.all((ratios > 10) & (ratios < 24))

    def test_dimension_mismatch(self):
        mesh = build_mesh(6)
        bc = make_bc(mesh)
        A = assemble_stiffness(mesh, bc)
        with pytest.raises(ValueError):
            h1_semi_inner(A, np.ones(bc.n_free), np.ones(bc.n_free + 1))


class TestInterpolation:
    def test_zero_function(self):
        mesh = build_mesh(4)
        bc = make_bc(mesh)
        f = interpolate_nodal(lambda x: 0.0 * x, mesh, bc)
        assert not f.coeffs.any()

    def test_quadratic_exact_at_midpoints(self):
        mesh = build_mesh(4)
        bc = make_bc(mesh)
        f = interpolate_nodal(lambda x: x * (1 - x), mesh, bc)
        mids = mesh.node_coords[1::2]
        vals = evaluate_field(f, mids)[0]
        assert np.abs(vals - mids * (1 - mids)).max() < 1e-15

    def test_sine_between_node_error_cubic(self):
        errs = []
        for n in (8, 16, 32):
            mesh = build_mesh(n)
            bc = make_bc(mesh)
            f = interpolate_nodal(lambda x: np.sin(np.pi * x), mesh, bc)
            xs = np.linspace(0, 1, 10 * mesh.n_nodes)
            errs.append(np.abs(evaluate_field(f, xs)[0] - np.sin(np.pi * xs)).max())
        orders = np.log2(np.array(errs[:-1]) / errs[1:])
        assert np.all(orders > 2.7)
        # nodal values are exact by construction
        mesh = build_mesh(8)
        bc = make_bc(mesh)
        f = interpolate_nodal(lambda x: np.sin(np.pi * x), mesh, bc)
        nodal = evaluate_field(f, mesh.node_coords)[0]
        assert np.abs(nodal - np.sin(np.pi * mesh.node_coords)).max() < 1e-13

    def test_dirichlet_violation(self):
        mesh = build_mesh(4)
        bc = make_bc(mesh)
        with pytest.raises(InconsistentBCError):
            interpolate_nodal(lambda x: x + 1.0, mesh, bc)


class TestPoincare:
    def test_full_dirichlet(self):
        mesh = build_mesh(50)
        bc = make_bc(mesh)
        cp = poincare_constant(assemble_mass(mesh, bc), assemble_stiffness(mesh, bc))
        assert abs(cp - 1 / np.pi) < 1e-4

    def test_mixed(self):
        mesh = build_mesh(50)
        bc = make_bc(mesh, NEUMANN, DIRICHLET)
        cp = poincare_constant(assemble_mass(mesh, bc), assemble_stiffness(mesh, bc))
        assert abs(cp - 2 / np.pi) < 1e-4

    def test_domain_scaling(self):
        cps = []
        for dom in ((0.0, 1.0), (0.0, 2.0)):
            mesh = build_mesh(40, dom)
            bc = make_bc(mesh)
            cps.append(poincare_constant(assemble_mass(mesh, bc),
                                         assemble_stiffness(mesh, bc)))
        assert abs(cps[1] / cps[0] - 2.0) < 1e-6

    def test_semidefinite_rejected(self):
        mesh = build_mesh(8)
        bc = make_bc(mesh, NEUMANN, NEUMANN)
        with pytest.raises(ValueError):
            poincare_constant(assemble_mass(mesh, bc), assemble_stiffness(mesh, bc))

    def test_converges_from_below_fourth_order(self):
        cps = []
        for n in (8, 16, 32):
            mesh = build_mesh(n)
            bc = make_bc(mesh)
            cps.append(poincare_constant(assemble_mass(mesh, bc),
                                         assemble_stiffness(mesh, bc)))
        cps = np.array(cps)
        assert np.all(np.diff(cps) > 0)           # monotone from below
        assert np.all(cps < 1 / np.pi + 1e-12)
        errs = 1 / np.pi - cps
        ratio = errs[:-1] / errs[1:]
        assert np.all((ratio > 8) & (ratio < 32))  # consistent with O(h^4)

import numpy as np
import pytest
import scipy.linalg
import sympy as sp

from podparam.mesh_fem import DIRICHLET, NEUMANN, build_mesh, interpolate_nodal, make_bc
from podparam.models import (
    ParamPoint,
    brusselator_shifted,
    build_system,
    fom_jacobian,
    fom_rhs,
    linear_heat,
    scalar_lipschitz,
)


class TestParamPoint:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ParamPoint(float("nan"))
        with pytest.raises(ValueError):
            ParamPoint(1.0, float("inf"))


class TestBrusselator:
    def test_invalid_args(self):
        with pytest.raises(ValueError):
            brusselator_shifted(0.0)
        with pytest.raises(ValueError):
            brusselator_shifted(1.0, nu=-1.0)

    @pytest.mark.parametrize("beta,nu", [(2.75, 0.01), (3.25, 0.01), (4.25, 0.1)])
    def test_equilibrium(self, beta, nu):
        sys = build_system(brusselator_shifted(1.0, nu=nu), 20)
        p = ParamPoint(beta)
        r = fom_rhs(sys, p, 0.0, np.zeros(sys.n))
        assert np.abs(r).max() < 1e-14

    def test_second_parameter_sets_diffusion(self):
        model = brusselator_shifted(1.0, nu=0.01)
        assert model.diffusion(ParamPoint(3.0)) == 0.01
        assert abs(model.diffusion(ParamPoint(3.0, 1.5)) - 10 ** -1.5) < 1e-18

    def test_unstable_complex_pair_at_equilibrium(self):
        # oracle: dense eigenvalues of the mass-solved Jacobian
        sys = build_system(brusselator_shifted(1.0, nu=0.01), 50)
        p = ParamPoint(3.25)
        J = sys.ode(p).jac(0.0, np.zeros(sys.n))
        lam = scipy.linalg.eigvals(J)
        lead = lam[np.argmax(lam.real)]
        assert lead.real > 0
        assert abs(lead.imag) > 1e-6

    def test_jacobian_at_zero_matches_linearization(self):
        # constant-coefficient reaction Jacobian assembles to mass-matrix blocks
        sys = build_system(brusselator_shifted(1.0, nu=0.01), 12)
        beta = 3.4
        p = ParamPoint(beta)
        J = fom_jacobian(sys, p, 0.0, np.zeros(sys.n))
        gjac = np.array([[-(beta - 1.0), -1.0], [beta, 1.0]])
        n = sys.n_free
        expect = np.zeros_like(J)
        for c in range(2):
            for d in range(2):
                expect[c * n:(c + 1) * n, d * n:(d + 1) * n] = -gjac[c, d] * sys.M
            expect[c * n:(c + 1) * n, c * n:(c + 1) * n] -= 0.01 * sys.A
        assert np.abs(J - expect).max() < 1e-12

    def test_parameter_continuity(self):
        sys = build_system(brusselator_shifted(1.0, nu=0.01), 16)
        rng = np.random.default_rng(5)
        u = 0.3 * rng.standard_normal(sys.n)
        base = fom_rhs(sys, ParamPoint(3.25), 0.0, u)
        dists = []
        for beta in (3.26, 3.35, 3.65):
            dists.append(np.linalg.norm(fom_rhs(sys, ParamPoint(beta), 0.0, u) - base))
        assert np.all(np.diff(dists) > 0)
        assert dists[0] < 0.2 * dists[-1]


class TestRhsJacobian:
    def test_linear_heat_rhs_is_stiffness_action(self):
        sys = build_system(linear_heat(nu=1.0), 10)
        rng = np.random.default_rng(0)
        u = rng.standard_normal(sys.n)
        r = fom_rhs(sys, ParamPoint(0.0), 0.0, u)
        assert np.abs(r + sys.A @ u).max() < 1e-13

    def test_linear_heat_jacobian_constant(self):
        sys = build_system(linear_heat(nu=2.5), 8)
        u = np.random.default_rng(1).standard_normal(sys.n)
        J = fom_jacobian(sys, ParamPoint(0.0), 0.0, u)
        assert np.abs(J + 2.5 * sys.A).max() < 1e-12

    def test_cubic_reaction_matches_symbolic_quadrature(self):
        # independent oracle: sympy evaluates the same 4-point Gauss sum exactly
        from podparam.mesh_fem import GAUSS_NODES, GAUSS_WEIGHTS
        from podparam.models import ParametricModel, _ConstantDiffusion

        class Cubic:
            def __call__(self, p, u):
                return u ** 3

        class CubicJac:
            def __call__(self, p, u):
                return (3.0 * u ** 2)[None]

        model = ParametricModel(
            name="cubic", n_components=1, diffusion=_ConstantDiffusion(1.0),
            reaction=Cubic(), reaction_jac=CubicJac(),
            initial=lambda p, x: np.zeros((1, np.size(x))),
            bc_left=DIRICHLET, bc_right=DIRICHLET)
        sys = build_system(model, 2)
        u = interpolate_nodal(lambda x: x * (1 - x), sys.mesh, sys.bc)
        G = sys.assemble_reaction(ParamPoint(1.0), u.coeffs)[0]

        xi = sp.symbols("xi")
        shapes = [(2 * xi - 1) * (xi - 1), 4 * xi * (1 - xi), xi * (2 * xi - 1)]
        h = sp.Rational(1, 2)
        expected = np.zeros(sys.mesh.n_nodes)
        for e in range(2):
            x_of_xi = e * h + xi * h
            uh = x_of_xi * (1 - x_of_xi)  # the interpolated quadratic itself
            for i in range(3):
                acc = sp.Float(0, 30)
                for q, w in zip(GAUSS_NODES, GAUSS_WEIGHTS):
                    acc += sp.Float(w, 30) * (uh ** 3 * shapes[i]).subs(xi, sp.Float(q, 30))
                expected[sys.mesh.elem_dofs[e, i]] += float(acc) * 0.5
        assert np.abs(G - expected[sys.bc.free_dofs]).max() < 1e-14

    def test_jacobian_against_central_differences(self):
        sys = build_system(brusselator_shifted(1.0, nu=0.01), 10)
        p = ParamPoint(3.5)
        rng = np.random.default_rng(42)
        eps = 1e-7
        for _ in range(10):
            u = 0.5 * rng.standard_normal(sys.n)
            J = fom_jacobian(sys, p, 0.0, u)
            scale = np.abs(J).max() + 1.0
            worst = 0.0
            for i in range(sys.n):
                e = np.zeros(sys.n)
                e[i] = eps
                fd = (fom_rhs(sys, p, 0.0, u + e) - fom_rhs(sys, p, 0.0, u - e)) / (2 * eps)
                worst = max(worst, np.abs(fd - J[:, i]).max() / scale)
            assert worst < 1e-5

    def test_nonfinite_state_rejected(self):
        sys = build_system(brusselator_shifted(1.0, nu=0.01), 8)
        u = np.zeros(sys.n)
        u[0] = np.nan
        with pytest.raises(FloatingPointError):
            fom_rhs(sys, ParamPoint(3.0), 0.0, u)


class TestScalarModel:
    def test_lipschitz_bound_exposed(self):
        assert scalar_lipschitz(c=0.5).lipschitz_bound == 0.5
        assert scalar_lipschitz(c=0.0).lipschitz_bound == 0.0

    def test_initial_and_forcing_scale_with_parameter(self):
        model = scalar_lipschitz(c=0.5)
        sys = build_system(model, 10)
        u1 = sys.initial_state(ParamPoint(1.0))
        u2 = sys.initial_state(ParamPoint(2.0))
        assert np.abs(2 * u1 - u2).max() < 1e-14
        f1 = sys.assemble_forcing(ParamPoint(1.0), 0.3)
        f2 = sys.assemble_forcing(ParamPoint(2.0), 0.3)
        assert np.abs(2 * f1 - f2).max() < 1e-14

    def test_reaction_is_sine(self):
        model = scalar_lipschitz(c=0.7)
        u = np.linspace(-2, 2, 9)[None, :]
        assert np.abs(model.reaction(ParamPoint(1.0), u) - 0.7 * np.sin(u)).max() < 1e-15

    def test_default_perturbation_respects_bc(self):
        sys = build_system(brusselator_shifted(1.0), 10)
        u = sys.default_perturbation(1e-2)
        f = sys.field(u)
        # Dirichlet end excluded from dofs; profile nonzero at Neumann end
        comps = f.components()
        assert comps.shape == (2, sys.n_free)
        assert abs(comps[0, 0] - 1e-2) < 1e-12

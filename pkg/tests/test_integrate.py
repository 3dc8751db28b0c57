import numpy as np
import pytest
import scipy.linalg

from podparam.integrate import (
    IntegrationError,
    IntegratorConfig,
    NoOscillationError,
    find_periodic_orbit,
    integrate,
    sample_orbit,
)
from podparam.models import ParamPoint, brusselator_shifted, build_system, linear_heat


def decay_rhs(t, y):
    return -y


def decay_jac(t, y):
    return -np.eye(y.size)


class AffineOscillator:
    """u'' = 1 - u around the shifted equilibrium (1, 0); period 2*pi."""

    n = 2

    def rhs(self, t, y):
        return np.array([y[1], 1.0 - y[0]])

    def jac(self, t, y):
        return np.array([[0.0, 1.0], [-1.0, 0.0]])

    def l2_pairing(self, u, v):
        return float(u @ v)

    def l2_norm(self, u):
        return float(np.sqrt(u @ u))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            IntegratorConfig(rtol=1e-3, atol=1e-2)
        with pytest.raises(ValueError):
            IntegratorConfig(max_order=6)
        with pytest.raises(ValueError):
            IntegratorConfig(rtol=2.0, atol=1.0)

    def test_newton_tol_default(self):
        cfg = IntegratorConfig(rtol=1e-8, atol=1e-11)
        assert 0 < cfg.effective_newton_tol() <= 0.03


class TestIntegrate:
    def test_scalar_decay(self):
        traj = integrate(decay_rhs, decay_jac, np.array([1.0]), (0, 1),
                         IntegratorConfig())
        assert abs(traj.states[-1, 0] - np.exp(-1)) < 1e-7

    def test_output_times_dense(self):
        ot = np.linspace(0.0, 1.0, 17)
        traj = integrate(decay_rhs, decay_jac, np.array([1.0]), (0, 1),
                         IntegratorConfig(), output_times=ot)
        assert traj.times.shape == (17,)
        assert np.abs(traj.states[:, 0] - np.exp(-ot)).max() < 1e-7

    def test_heat_equation_matches_eigen_solution(self):
        # oracle: exact semidiscrete solution via the generalized eigenproblem
        sys = build_system(linear_heat(nu=1.0), 20)
        p = ParamPoint(0.0)
        u0 = sys.initial_state(p)
        ode = sys.ode(p)
        traj = integrate(ode.rhs, ode.jac, u0, (0.0, 0.1),
                         IntegratorConfig(rtol=1e-8, atol=1e-11))
        w, V = scipy.linalg.eigh(sys.A, sys.M)
        c = V.T @ (sys.M @ u0)
        exact = V @ (np.exp(-w * 0.1) * c)
        rel = np.linalg.norm(traj.states[-1] - exact) / np.linalg.norm(exact)
        assert rel < 1e-6

    def test_dense_output_consistent_at_endpoints(self):
        traj = integrate(decay_rhs, decay_jac, np.array([1.0]), (0, 1),
                         IntegratorConfig(), keep_segments=True)
        for i, seg in enumerate(traj.segments):
            rel = abs(seg(seg.t_new)[0] - traj.states[i + 1, 0]) / abs(traj.states[i + 1, 0])
            assert rel < 1e-13

    def test_order_one_is_implicit_euler(self):
        errs = []
        for h in (0.01, 0.005, 0.0025):
            cfg = IntegratorConfig(rtol=0.99, atol=0.9, max_order=1,
                                   max_step=h, first_step=h)
            traj = integrate(decay_rhs, decay_jac, np.array([1.0]), (0, 1), cfg)
            errs.append(abs(traj.states[-1, 0] - np.exp(-1)))
        orders = np.log2(np.array(errs[:-1]) / errs[1:])
        assert np.all(np.abs(orders - 1.0) < 0.1)

    def test_max_steps_budget(self):
        cfg = IntegratorConfig(max_steps=3)
        with pytest.raises(IntegrationError):
            integrate(decay_rhs, decay_jac, np.array([1.0]), (0, 100.0), cfg)

    def test_brusselator_self_convergence(self):
        sys = build_system(brusselator_shifted(1.0, nu=0.01), 50)
        p = ParamPoint(3.25)
        ode = sys.ode(p)
        u0 = sys.default_perturbation()
        cfg = IntegratorConfig(rtol=1e-8, atol=1e-11)
        end = integrate(ode.rhs, ode.jac, u0, (0, 10.0), cfg,
                        output_times=np.array([10.0])).states[-1]
        end2 = integrate(ode.rhs, ode.jac, u0, (0, 10.0), cfg.tighter(2.0),
                         output_times=np.array([10.0])).states[-1]
        weighted = (end - end2) / (cfg.atol + cfg.rtol * np.abs(end))
        assert np.sqrt(np.mean(weighted ** 2)) < 10.0


class TestPeriodicOrbit:
    def test_oscillator_period(self):
        orb = find_periodic_orbit(AffineOscillator(), np.array([2.0, 0.0]),
                                  period_rtol=1e-10,
                                  config=IntegratorConfig(rtol=1e-10, atol=1e-12))
        assert orb.converged
        assert abs(orb.period - 2 * np.pi) < 1e-9
        # anchor sits at the norm maximum (2, 0)
        assert np.abs(orb.initial_state - np.array([2.0, 0.0])).max() < 1e-7

    def test_event_refinement_accuracy(self):
        osc = AffineOscillator()
        orb = find_periodic_orbit(osc, np.array([2.0, 0.0]), period_rtol=1e-10,
                                  config=IntegratorConfig(rtol=1e-10, atol=1e-12))
        # residual of the event function at the refined root
        phi = osc.l2_pairing(orb.initial_state, osc.rhs(0.0, orb.initial_state))
        assert abs(phi) < 1e-10 * 2.0  # max |phi| over the cycle is about 2

    def test_no_oscillation_raises(self):
        sys = build_system(linear_heat(nu=1.0), 10)
        p = ParamPoint(0.0)
        with pytest.raises(NoOscillationError):
            find_periodic_orbit(sys.ode(p), sys.initial_state(p),
                                config=IntegratorConfig(rtol=1e-6, atol=1e-9),
                                max_horizon=5.0)

    def test_brusselator_orbit_and_closure(self):
        sys = build_system(brusselator_shifted(1.0, nu=0.01), 16)
        p = ParamPoint(3.0)
        ode = sys.ode(p)
        cfg = IntegratorConfig(rtol=1e-8, atol=1e-11)
        orb = find_periodic_orbit(ode, sys.default_perturbation(), period_rtol=1e-7,
                                  config=cfg, param=p)
        assert orb.converged
        traj = sample_orbit(ode, orb, 64, cfg)
        assert traj.times.size == 65
        assert np.array_equal(traj.states[0], orb.initial_state)
        assert np.allclose(traj.times, orb.period * np.arange(65) / 64, rtol=1e-12)
        closure = ode.l2_norm(traj.states[-1] - traj.states[0])
        assert closure <= 10 * 1e-7 * ode.l2_norm(traj.states[0])

    def test_sample_requires_converged(self):
        orb = find_periodic_orbit(AffineOscillator(), np.array([2.0, 0.0]),
                                  period_rtol=1e-10)
        orb.converged = False
        with pytest.raises(ValueError):
            sample_orbit(AffineOscillator(), orb, 8)

    def test_derivatives_come_from_rhs(self):
        osc = AffineOscillator()
        orb = find_periodic_orbit(osc, np.array([2.0, 0.0]), period_rtol=1e-10)
        traj = sample_orbit(osc, orb, 16)
        for t, y, dy in zip(traj.times, traj.states, traj.derivs):
            assert np.array_equal(dy, osc.rhs(t, y))

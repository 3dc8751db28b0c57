"""Adaptive implicit multistep time integration and periodic-orbit location.

The stepper is a variable-step, variable-order backward differentiation
formula (orders 1 through 5) in backward-difference form with a modified
Newton corrector, per-step polynomial dense output, and weighted-RMS local
error control.  A small stateful class exposes single steps so that event
monitoring (used by the orbit finder) can interleave with the integration;
``integrate`` wraps it for plain trajectory output.

The same machinery serves both the full-order and the reduced systems: any
object with ``rhs(t, y)`` and ``jac(t, y)`` integrates, and orbit finding
additionally needs the L2 pairing that defines the solution norm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

logger = logging.getLogger(__name__)

EPS = np.finfo(float).eps
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


class IntegrationError(RuntimeError):
    """Newton divergence at the step-size floor, or step budget exceeded."""


class NoOscillationError(RuntimeError):
    """No norm maximum found within the allowed horizon."""


@dataclass
class IntegratorConfig:
    rtol: float = 1e-8
    atol: float = 1e-11
    max_order: int = 5
    max_steps: int = 2_000_000
    newton_tol: float | None = None
    newton_max_iters: int = 4
    max_step: float = np.inf
    first_step: float | None = None

    def __post_init__(self):
        if not (0.0 < self.atol <= self.rtol < 1.0):
            raise ValueError("tolerances must satisfy 0 < atol <= rtol < 1")
        if not 1 <= self.max_order <= 5:
            raise ValueError("max_order must be between 1 and 5")
        if self.newton_max_iters < 1:
            raise ValueError("newton_max_iters must be positive")

    def effective_newton_tol(self) -> float:
        if self.newton_tol is not None:
            return self.newton_tol
        return max(10 * EPS / self.rtol, min(0.03, self.rtol ** 0.5))

    def tighter(self, factor: float = 10.0) -> "IntegratorConfig":
        return IntegratorConfig(
            rtol=self.rtol / factor, atol=self.atol / factor,
            max_order=self.max_order, max_steps=self.max_steps,
            newton_tol=self.newton_tol, newton_max_iters=self.newton_max_iters,
            max_step=self.max_step, first_step=self.first_step)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), n)
    derivs: np.ndarray | None = None
    n_steps: int = 0
    n_rhs: int = 0
    n_jac: int = 0
    n_lu: int = 0
    segments: list | None = None

    def state(self, i: int) -> np.ndarray:
        return self.states[i]


@dataclass
class PeriodicOrbit:
    param: object
    period: float
    initial_state: np.ndarray
    t_anchor: float
    n_transient_periods: int
    converged: bool
    last_relative_period_change: float
    amplitude: float
    period_history: list[float] = field(default_factory=list)


def _rms_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _change_matrix(order: int, factor: float) -> np.ndarray:
    """Transform of backward differences under a step-size change."""
    idx = np.arange(1, order + 1)
    M = np.zeros((order + 1, order + 1))
    M[1:, 1:] = (idx[:, None] - 1 - factor * idx[None, :]) / idx[:, None]
    M[0] = 1.0
    return np.cumprod(M, axis=0)


class StepInterpolant:
    """Polynomial dense output over one accepted step [t_old, t_new]."""

    def __init__(self, t_old: float, t_new: float, h: float, order: int, D: np.ndarray):
        self.t_old = t_old
        self.t_new = t_new
        self._t_shift = t_new - h * np.arange(order)
        self._denom = h * (1 + np.arange(order))
        self._D = D  # (order + 1, n)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tv = np.atleast_1d(t)
        if self._D.shape[0] == 1:
            y = np.repeat(self._D[0][None, :], tv.size, axis=0)
        else:
            x = (tv[:, None] - self._t_shift[None, :]) / self._denom[None, :]
            p = np.cumprod(x, axis=1)  # (npts, order)
            y = self._D[0][None, :] + p @ self._D[1:]
        return y[0] if scalar else y


class BdfStepper:
    """One-step interface to the BDF integrator.

    ``step()`` advances to the next accepted step; the last step's dense
    interpolant is available afterwards.  ``t_bound`` may be infinite.
    """

    def __init__(self, rhs, jac, t0: float, y0: np.ndarray, t_bound: float,
                 config: IntegratorConfig | None = None):
        self.cfg = config or IntegratorConfig()
        self.rhs_fn = rhs
        self.jac_fn = jac
        self.t = float(t0)
        self.y = np.asarray(y0, dtype=float).copy()
        if not np.all(np.isfinite(self.y)):
            raise ValueError("initial state is not finite")
        self.n = self.y.size
        self.t_bound = float(t_bound)
        self.n_steps = 0
        self.n_rhs = 0
        self.n_jac = 0
        self.n_lu = 0
        self.order_counts = np.zeros(6, dtype=int)

        k = np.arange(1, 7)
        self.gamma = np.hstack(([0.0], np.cumsum(1.0 / k)))
        self.alpha = self.gamma.copy()  # plain BDF: no leading-coefficient tweak
        self.error_const = 1.0 / (k + 1)  # error_const[k-1] applies at order k

        f0 = self._rhs(t0, self.y)
        h0 = self.cfg.first_step or self._initial_step(t0, self.y, f0)
        h0 = min(h0, self.cfg.max_step)
        if np.isfinite(self.t_bound):
            h0 = min(h0, max(abs(self.t_bound - t0), 16 * EPS * max(abs(t0), 1.0)))
        self.h_abs = max(h0, 16 * EPS * max(abs(t0), 1.0))

        self.order = 1
        self.D = np.zeros((self.cfg.max_order + 3, self.n))
        self.D[0] = self.y
        self.D[1] = f0 * self.h_abs
        self.n_equal_steps = 0
        self.J = None
        self.LU = None
        self.current_jac = False
        self.interpolant: StepInterpolant | None = None
        self.newton_tol = self.cfg.effective_newton_tol()

    # -- internals ---------------------------------------------------------

    def _rhs(self, t, y):
        self.n_rhs += 1
        return np.asarray(self.rhs_fn(t, y), dtype=float)

    def _jac(self, t, y):
        self.n_jac += 1
        return np.asarray(self.jac_fn(t, y), dtype=float)

    def _initial_step(self, t0, y0, f0):
        scale = self.cfg.atol + np.abs(y0) * self.cfg.rtol
        d0 = _rms_norm(y0 / scale)
        d1 = _rms_norm(f0 / scale)
        h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        y1 = y0 + h0 * f0
        f1 = self._rhs(t0 + h0, y1)
        d2 = _rms_norm((f1 - f0) / scale) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.5  # aim at order-1 local error
        return min(100 * h0, h1)

    def _factor_iteration_matrix(self, c):
        self.LU = lu_factor(np.eye(self.n) - c * self.J)
        self.n_lu += 1

    def _solve_newton(self, t_new, y_predict, c, psi, scale):
        d = np.zeros(self.n)
        y = y_predict.copy()
        dy_norm_old = None
        converged = False
        rate = None
        for it in range(self.cfg.newton_max_iters):
            f = self._rhs(t_new, y)
            if not np.all(np.isfinite(f)):
                break
            dy = lu_solve(self.LU, c * f - psi - d)
            dy_norm = _rms_norm(dy / scale)
            if dy_norm_old is not None and dy_norm_old > 0:
                rate = dy_norm / dy_norm_old
                if rate >= 1 or (rate ** (self.cfg.newton_max_iters - it) /
                                 (1 - rate) * dy_norm > self.newton_tol):
                    break
            y += dy
            d += dy
            if dy_norm == 0 or (rate is not None and
                                rate / (1 - rate) * dy_norm < self.newton_tol):
                converged = True
                break
            dy_norm_old = dy_norm
        return converged, it + 1, y, d

    def _rescale_steps(self, factor):
        RU = _change_matrix(self.order, factor) @ _change_matrix(self.order, 1.0)
        self.D[:self.order + 1] = RU.T @ self.D[:self.order + 1]
        self.h_abs *= factor
        self.n_equal_steps = 0
        self.LU = None

    # -- public API ----------------------------------------------------------

    @property
    def finished(self) -> bool:
        return self.t >= self.t_bound - 16 * EPS * max(abs(self.t), 1.0)

    def step(self) -> None:
        if self.finished:
            raise RuntimeError("integration already reached t_bound")
        cfg = self.cfg
        t = self.t
        D = self.D
        min_step = 16 * EPS * max(abs(t), 1.0)
        if self.h_abs > cfg.max_step:
            self._rescale_steps(cfg.max_step / self.h_abs)
            self.h_abs = cfg.max_step
        elif self.h_abs < min_step:
            self._rescale_steps(min_step / self.h_abs)
            self.h_abs = min_step

        order = self.order
        step_accepted = False
        n_fail = 0
        while not step_accepted:
            if self.n_steps >= cfg.max_steps:
                raise IntegrationError(f"exceeded max_steps={cfg.max_steps} at t={t!r}")
            if self.h_abs < min_step:
                raise IntegrationError(f"step size underflow at t={t!r}")
            h = self.h_abs
            t_new = t + h
            if t_new > self.t_bound:
                t_new = self.t_bound
                factor = abs(t_new - t) / self.h_abs
                self._rescale_steps(factor)
                h = self.h_abs = abs(t_new - t)

            y_predict = D[:order + 1].sum(axis=0)
            scale = cfg.atol + cfg.rtol * np.abs(y_predict)
            psi = (self.gamma[1:order + 1] @ D[1:order + 1]) / self.alpha[order]
            c = h / self.alpha[order]

            converged = False
            while not converged:
                if self.LU is None:
                    if self.J is None:
                        self.J = self._jac(t_new, y_predict)
                        self.current_jac = True
                    self._factor_iteration_matrix(c)
                converged, n_iter, y_new, d = self._solve_newton(
                    t_new, y_predict, c, psi, scale)
                if not converged:
                    if self.current_jac:
                        break
                    self.J = self._jac(t_new, y_predict)
                    self.current_jac = True
                    self.LU = None
            if not converged:
                n_fail += 1
                self._rescale_steps(0.5)
                if self.h_abs < min_step:
                    raise IntegrationError(
                        f"Newton iteration failed to converge at t={t!r} "
                        f"with the minimum step size")
                continue

            safety = (0.9 * (2 * cfg.newton_max_iters + 1) /
                      (2 * cfg.newton_max_iters + n_iter))
            scale = cfg.atol + cfg.rtol * np.abs(y_new)
            error = self.error_const[order - 1] * d
            error_norm = _rms_norm(error / scale)
            if error_norm > 1:
                n_fail += 1
                factor = max(MIN_FACTOR,
                             safety * error_norm ** (-1.0 / (order + 1)))
                self._rescale_steps(factor)
                continue
            step_accepted = True

        self.n_steps += 1
        self.order_counts[order] += 1
        self.t = t_new
        self.y = y_new
        self.current_jac = False

        D[order + 2] = d - D[order + 1]
        D[order + 1] = d
        for i in reversed(range(order + 1)):
            D[i] += D[i + 1]
        # the updated differences describe the polynomial through the new point
        self.interpolant = StepInterpolant(t, t_new, h, order, D[:order + 1].copy())

        self.n_equal_steps += 1
        if self.n_equal_steps < order + 1:
            return

        # consider switching order after enough steps at a constant size
        if order > 1:
            error_m_norm = _rms_norm(self.error_const[order - 2] * D[order] / scale)
        else:
            error_m_norm = np.inf
        if order < cfg.max_order:
            error_p_norm = _rms_norm(self.error_const[order] * D[order + 2] / scale)
        else:
            error_p_norm = np.inf
        error_norms = np.array([error_m_norm, error_norm, error_p_norm])
        with np.errstate(divide="ignore"):
            factors = error_norms ** (-1.0 / np.arange(order, order + 3))
        delta_order = int(np.argmax(factors)) - 1
        self.order = order = order + delta_order
        factor = min(MAX_FACTOR, safety * np.max(factors))
        if np.isfinite(self.t_bound):
            # never grow far beyond what's left, keeps the final step tame
            factor = min(factor, max(abs(self.t_bound - self.t) / self.h_abs, 1.0))
        factor = min(factor, cfg.max_step / self.h_abs) if np.isfinite(cfg.max_step) else factor
        self._rescale_steps(max(factor, MIN_FACTOR))


def integrate(rhs, jac, y0: np.ndarray, t_span: tuple[float, float],
              config: IntegratorConfig | None = None,
              output_times: np.ndarray | None = None,
              keep_steps: bool = False,
              keep_segments: bool = False,
              derivs: bool = False) -> Trajectory:
    """Integrate y' = rhs(t, y) over t_span.

    With ``output_times`` the trajectory holds dense-output states at those
    times (step selection is unconstrained); otherwise it holds the accepted
    steps.  ``derivs`` additionally evaluates the right-hand side at every
    output time.
    """
    cfg = config or IntegratorConfig()
    t0, t_end = float(t_span[0]), float(t_span[-1])
    if not t_end > t0:
        raise ValueError("t_span must be increasing")
    y0 = np.asarray(y0, dtype=float)
    if output_times is not None:
        out_t = np.asarray(output_times, dtype=float)
        if out_t.size == 0 or np.any(np.diff(out_t) <= 0):
            raise ValueError("output_times must be strictly increasing")
        if out_t[0] < t0 - 1e-12 or out_t[-1] > t_end * (1 + 1e-14) + 1e-14:
            raise ValueError("output_times must lie inside t_span")
    else:
        out_t = None

    stepper = BdfStepper(rhs, jac, t0, y0, t_end, cfg)
    times = [t0]
    states = [y0.copy()]
    segments = [] if keep_segments else None
    next_out = 0
    out_states = []
    if out_t is not None:
        while next_out < out_t.size and out_t[next_out] <= t0 + 1e-14 * max(abs(t0), 1.0):
            out_states.append(y0.copy())
            next_out += 1

    while not stepper.finished:
        stepper.step()
        seg = stepper.interpolant
        if keep_segments:
            segments.append(seg)
        if out_t is None or keep_steps:
            times.append(stepper.t)
            states.append(stepper.y.copy())
        if out_t is not None:
            while next_out < out_t.size and out_t[next_out] <= stepper.t + 1e-14 * max(abs(stepper.t), 1.0):
                tq = min(out_t[next_out], stepper.t)
                out_states.append(seg(tq))
                next_out += 1

    if out_t is not None:
        if next_out < out_t.size:
            raise IntegrationError("integration ended before all output times")
        traj_t = out_t.copy()
        traj_y = np.asarray(out_states)
    else:
        traj_t = np.asarray(times)
        traj_y = np.asarray(states)
    traj = Trajectory(traj_t, traj_y, n_steps=stepper.n_steps, n_rhs=stepper.n_rhs,
                      n_jac=stepper.n_jac, n_lu=stepper.n_lu, segments=segments)
    if derivs:
        traj.derivs = np.asarray([rhs(t, y) for t, y in zip(traj.times, traj.states)])
    return traj


def _refine_root(fun, t_lo: float, t_hi: float, f_lo: float, f_hi: float,
                 xtol: float, max_iters: int = 200) -> float:
    """Bracketed root by bisection with secant acceleration."""
    for _ in range(max_iters):
        if t_hi - t_lo <= xtol:
            break
        if f_hi != f_lo:
            t_sec = t_hi - f_hi * (t_hi - t_lo) / (f_hi - f_lo)
        else:
            t_sec = 0.5 * (t_lo + t_hi)
        t_mid = 0.5 * (t_lo + t_hi)
        # take the secant point when it falls safely inside the bracket
        t_try = t_sec if (t_lo + 0.01 * (t_hi - t_lo) < t_sec < t_hi - 0.01 * (t_hi - t_lo)) else t_mid
        f_try = fun(t_try)
        if f_try == 0.0:
            return t_try
        if (f_lo > 0) != (f_try > 0):
            t_hi, f_hi = t_try, f_try
        else:
            t_lo, f_lo = t_try, f_try
    return 0.5 * (t_lo + t_hi)


def find_periodic_orbit(ode, y_init: np.ndarray, period_rtol: float = 1e-7,
                        config: IntegratorConfig | None = None,
                        max_transient_periods: int = 400,
                        max_horizon: float = 20000.0,
                        min_separation_frac: float = 0.2,
                        match_tol: float = 0.15,
                        param: object = None) -> PeriodicOrbit:
    """Locate an attracting periodic orbit by tracking norm maxima.

    Integrates from ``y_init`` watching the pairing (u, u') in the system's
    L2 product; a sign change from + to - marks a norm maximum, refined on
    the dense output.  A cycle can carry several local maxima, so a period
    estimate pairs each maximum with the most recent earlier one whose state
    is close (within ``match_tol`` in relative L2 distance) and separated by
    at least ``min_separation_frac`` of the running period estimate.  The
    run stops once two consecutive estimates agree to ``period_rtol``; the
    returned state sits on the largest norm maximum of the final cycle.
    """
    cfg = config or IntegratorConfig()
    t0 = 0.0
    stepper = BdfStepper(ode.rhs, ode.jac, t0, y_init, np.inf, cfg)

    def phi(t, y):
        return ode.l2_pairing(y, ode.rhs(t, y))

    def phi_interp(seg):
        return lambda t: phi(t, seg(t))

    phi_prev = phi(t0, stepper.y)
    t_prev = t0
    taus: list[float] = []
    states: list[np.ndarray] = []
    norms: list[float] = []
    periods: list[float] = []
    converged = False
    last_change = np.inf
    t_conv = None
    t_stop = np.inf

    while stepper.t < max_horizon and stepper.t < t_stop:
        stepper.step()
        t_new = stepper.t
        phi_new = phi(t_new, stepper.y)
        if phi_prev > 0.0 and phi_new <= 0.0:
            seg = stepper.interpolant
            t_est = periods[-1] if periods else max(t_new - t0, 1.0)
            tau = _refine_root(phi_interp(seg), t_prev, t_new, phi_prev, phi_new,
                               xtol=1e-12 * max(t_est, 1.0))
            y_tau = seg(tau)
            norm_tau = ode.l2_norm(y_tau)
            taus.append(tau)
            states.append(y_tau)
            norms.append(norm_tau)
            if not converged:
                min_gap = (min_separation_frac * periods[-1]) if periods \
                    else 1e-6 * max(tau, 1.0)
                for j in range(len(taus) - 2, -1, -1):
                    gap = tau - taus[j]
                    if gap < min_gap:
                        continue
                    scale = max(norm_tau, norms[j], 1e-300)
                    if ode.l2_norm(y_tau - states[j]) <= match_tol * scale:
                        periods.append(gap)
                        break
                if len(periods) >= 2:
                    last_change = abs(periods[-1] - periods[-2]) / periods[-1]
                    if last_change < period_rtol:
                        converged = True
                        t_conv = tau
                        # run one more cycle so the anchor can sit on the
                        # largest maximum of the settled orbit
                        t_stop = tau + 1.02 * periods[-1]
                if not converged and len(periods) > max_transient_periods:
                    break
        phi_prev = phi_new
        t_prev = t_new

    if not taus:
        raise NoOscillationError(
            f"no norm maximum detected within horizon t={max_horizon}")

    period = periods[-1] if periods else np.nan
    if converged:
        window = [i for i, tau in enumerate(taus) if t_conv < tau <= t_conv + 1.02 * period]
        if not window:
            window = [len(taus) - 1]
        anchor = max(window, key=lambda i: norms[i])
    else:
        anchor = int(np.argmax(norms[-3:])) + max(len(norms) - 3, 0)

    if len(periods) >= 4:
        changes = [abs(periods[i] - periods[i - 1]) for i in range(1, len(periods))]
        tail = changes[-4:]
        if any(tail[i + 1] > tail[i] * 1.5 for i in range(len(tail) - 1)):
            logger.warning("period convergence not monotone near the end: %s", tail)

    return PeriodicOrbit(
        param=param,
        period=float(period),
        initial_state=states[anchor],
        t_anchor=float(taus[anchor]),
        n_transient_periods=int(round(taus[anchor] / period)) if periods else 0,
        converged=converged,
        last_relative_period_change=float(last_change),
        amplitude=float(norms[anchor]),
        period_history=[float(p) for p in periods],
    )


def sample_orbit(ode, orbit: PeriodicOrbit, n_snapshots: int,
                 config: IntegratorConfig | None = None) -> Trajectory:
    """States (and right-hand-side derivatives) at j*T/M over one period.

    The system must be autonomous; time restarts at zero on the orbit's
    anchor state.  Returns M+1 snapshots for ``n_snapshots`` = M.
    """
    if not orbit.converged:
        raise ValueError("orbit is not converged")
    M = int(n_snapshots)
    T = orbit.period
    out_t = T * np.arange(M + 1) / M
    traj = integrate(ode.rhs, ode.jac, orbit.initial_state, (0.0, T),
                     config=config, output_times=out_t, derivs=True)
    traj.states[0] = orbit.initial_state
    return traj

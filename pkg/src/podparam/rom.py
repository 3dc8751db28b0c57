"""Galerkin reduced-order model on the POD modes.

The reduced state solves Mhat a' = -nu Ahat a - Phi^T G(Phi a) + Phi^T F(t)
with Mhat, Ahat the projected mass and stiffness operators; by the modes'
orthonormality in the gradient product, Ahat is the identity up to
round-off (checked at build time).  The nonlinearity is evaluated at full
order on the lifted state with the same quadrature as the full model, so
Phi^T R(Phi a) and the reduced right-hand side agree to round-off.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .integrate import (
    IntegrationError,
    IntegratorConfig,
    NoOscillationError,
    PeriodicOrbit,
    Trajectory,
    find_periodic_orbit,
    integrate,
)
from .models import ParamPoint, SemidiscreteSystem
from .pod_basis import PodBasis, project_coefficients

logger = logging.getLogger(__name__)


class RomOperators:
    """Reduced operators for a fixed mode count r."""

    def __init__(self, basis: PodBasis, r: int, sys: SemidiscreteSystem,
                 identity_tol: float = 1e-9):
        if not 1 <= r <= basis.d_r:
            raise ValueError(f"r={r} out of range 1..{basis.d_r}")
        if basis.modes.shape[0] != sys.n:
            raise ValueError("basis and system dof layouts differ")
        self.r = r
        self.basis = basis
        self.sys = sys
        Phi = basis.modes[:, :r]
        self.Phi = Phi
        ncomp = sys.model.n_components
        nfree = sys.n_free
        Phic = Phi.T.reshape(r, ncomp, nfree)
        self.Mhat = np.einsum("rci,ij,scj->rs", Phic, sys.M, Phic)
        self.Mhat = 0.5 * (self.Mhat + self.Mhat.T)
        self.Ahat = np.einsum("rci,ij,scj->rs", Phic, sys.A, Phic)
        self.identity_deviation = float(np.abs(self.Ahat - np.eye(r)).max())
        if self.identity_deviation > identity_tol:
            raise ValueError(
                f"reduced stiffness deviates from identity by {self.identity_deviation:.3e}")
        logger.debug("reduced stiffness identity deviation %.3e", self.identity_deviation)
        self._mhat_cho = cho_factor(self.Mhat)

    def lift(self, a: np.ndarray) -> np.ndarray:
        return self.Phi @ np.asarray(a, dtype=float)

    def restrict_initial(self, u: np.ndarray) -> np.ndarray:
        """Modal coordinates of the gradient-orthogonal projection of u."""
        return project_coefficients(self.basis, self.r, u)

    def mass_solve(self, rhat: np.ndarray) -> np.ndarray:
        return cho_solve(self._mhat_cho, rhat)

    def ode(self, p: ParamPoint) -> "RomOde":
        return RomOde(self, p)


def reduce(basis: PodBasis, r: int, sys: SemidiscreteSystem) -> RomOperators:
    return RomOperators(basis, r, sys)


def rom_rhs(ops: RomOperators, p: ParamPoint, t: float, a: np.ndarray) -> np.ndarray:
    """Reduced weak-form right-hand side: Mhat a' = Rhat."""
    u = ops.lift(a)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("nonfinite lifted state")
    return ops.Phi.T @ ops.sys.rhs_weak(p, t, u)


def rom_jacobian(ops: RomOperators, p: ParamPoint, t: float, a: np.ndarray) -> np.ndarray:
    u = ops.lift(a)
    return ops.Phi.T @ ops.sys.jac_weak(p, t, u) @ ops.Phi


class RomOde:
    """Standard-form ODE view of the reduced system at a parameter point."""

    def __init__(self, ops: RomOperators, p: ParamPoint):
        self.ops = ops
        self.p = p
        self.n = ops.r

    def rhs(self, t: float, a: np.ndarray) -> np.ndarray:
        return self.ops.mass_solve(rom_rhs(self.ops, self.p, t, a))

    def jac(self, t: float, a: np.ndarray) -> np.ndarray:
        return cho_solve(self.ops._mhat_cho, rom_jacobian(self.ops, self.p, t, a))

    def l2_pairing(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(a @ self.ops.Mhat @ b)

    def l2_norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.l2_pairing(a, a), 0.0)))


def integrate_rom(ops: RomOperators, p: ParamPoint, a0: np.ndarray,
                  t_span: tuple[float, float], config: IntegratorConfig | None = None,
                  output_times: np.ndarray | None = None,
                  derivs: bool = False) -> Trajectory:
    ode = ops.ode(p)
    return integrate(ode.rhs, ode.jac, a0, t_span, config=config,
                     output_times=output_times, derivs=derivs)


def rom_periodic_orbit(ops: RomOperators, p: ParamPoint, a_init: np.ndarray,
                       period_rtol: float = 1e-8,
                       config: IntegratorConfig | None = None,
                       **finder_kwargs) -> PeriodicOrbit:
    """Periodic orbit of the reduced system.

    A reduced model too small to sustain the oscillation decays to the
    steady state; that (and an integration breakdown) comes back as a
    non-converged orbit rather than an exception, so parameter sweeps can
    flag the entry and continue.
    """
    ode = ops.ode(p)
    try:
        return find_periodic_orbit(ode, a_init, period_rtol=period_rtol,
                                   config=config, param=p, **finder_kwargs)
    except (NoOscillationError, IntegrationError) as exc:
        logger.warning("reduced orbit at %s did not close: %s", p, exc)
        return PeriodicOrbit(param=p, period=float("nan"), initial_state=a_init,
                             t_anchor=float("nan"), n_transient_periods=0,
                             converged=False,
                             last_relative_period_change=float("inf"),
                             amplitude=float("nan"))

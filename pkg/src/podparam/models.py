"""Parametric semilinear reaction-diffusion models and their FEM semidiscretization.

Two concrete models ship here: the shifted two-component Brusselator
(homogeneous Neumann/Dirichlet ends, equilibrium at zero) and a scalar
model with a globally Lipschitz reaction, used for bound checking.  The
``SemidiscreteSystem`` assembles the weak-form right-hand side and its
Jacobian with the same 4-point Gauss rule used for the mass/stiffness
matrices, so the semidiscrete dynamics are quadrature-exact for
polynomial reactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .mesh_fem import (
    DIRICHLET,
    GAUSS_NODES,
    GAUSS_WEIGHTS,
    NEUMANN,
    BoundaryCondition,
    Field,
    Mesh,
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    make_bc,
    shape_values,
)


@dataclass(frozen=True)
class ParamPoint:
    """A point in parameter space: first parameter plus an optional second."""

    alpha: float
    beta2: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.beta2 is not None and not np.isfinite(self.beta2):
            raise ValueError("beta2 must be finite")


@dataclass(frozen=True)
class ParametricModel:
    """Reaction-diffusion problem data; all callables are vectorized.

    ``reaction(p, u)`` and ``reaction_jac(p, u)`` receive stacked component
    values, shape (n_components, ...); the Jacobian returns shape
    (n_components, n_components, ...).  ``forcing(p, t, x)`` may be None.
    The sign convention matches u_t - nu u_xx + g(u) = f.
    """

    name: str
    n_components: int
    diffusion: object
    reaction: object
    reaction_jac: object
    initial: object
    bc_left: str
    bc_right: str
    forcing: object = None
    lipschitz_bound: float | None = None


@dataclass(frozen=True)
class _BrusselatorReaction:
    alpha_const: float

    def __call__(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        a = self.alpha_const
        b = p.alpha
        y = a + u[0]
        z = b / a + u[1]
        yyz = y * y * z
        s_u = yyz - (b + 1.0) * y + a
        s_v = b * y - yyz
        return np.stack([-s_u, -s_v])


@dataclass(frozen=True)
class _BrusselatorReactionJac:
    alpha_const: float

    def __call__(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        a = self.alpha_const
        b = p.alpha
        y = a + u[0]
        z = b / a + u[1]
        d_su_du = 2.0 * y * z - (b + 1.0)
        d_su_dv = y * y
        d_sv_du = b - 2.0 * y * z
        d_sv_dv = -y * y
        row_u = np.stack([-d_su_du, -d_su_dv])
        row_v = np.stack([-d_sv_du, -d_sv_dv])
        return np.stack([row_u, row_v])


@dataclass(frozen=True)
class _PowerOfTenDiffusion:
    """nu = 10**(-beta2) when the second parameter is set, else the default."""

    nu_default: float

    def __call__(self, p: ParamPoint) -> float:
        if p.beta2 is not None:
            return 10.0 ** (-p.beta2)
        return self.nu_default


@dataclass(frozen=True)
class _ZeroInitial:
    n_components: int

    def __call__(self, p: ParamPoint, x: np.ndarray) -> np.ndarray:
        return np.zeros((self.n_components, np.size(x)))


def brusselator_shifted(alpha_const: float = 1.0, beta: float = 3.25,
                        nu: float = 0.01) -> ParametricModel:
    """Two-component Brusselator shifted to homogeneous boundary data.

    In the shifted variables the steady state is identically zero; the ends
    carry a homogeneous Neumann condition on the left and a homogeneous
    Dirichlet condition on the right.  The first parameter of a ParamPoint
    selects the reaction coefficient; an optional second parameter rho sets
    the diffusion to 10**(-rho).
    """
    if alpha_const <= 0:
        raise ValueError("alpha_const must be positive")
    if nu <= 0:
        raise ValueError("nu must be positive")
    del beta  # the reaction coefficient always comes from the ParamPoint
    return ParametricModel(
        name="brusselator",
        n_components=2,
        diffusion=_PowerOfTenDiffusion(nu),
        reaction=_BrusselatorReaction(alpha_const),
        reaction_jac=_BrusselatorReactionJac(alpha_const),
        initial=_ZeroInitial(2),
        bc_left=NEUMANN,
        bc_right=DIRICHLET,
    )


@dataclass(frozen=True)
class _SineReaction:
    c: float

    def __call__(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        return self.c * np.sin(u)


@dataclass(frozen=True)
class _SineReactionJac:
    c: float

    def __call__(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        # u has a leading single-component axis; add the matching column axis
        return (self.c * np.cos(u))[None]


@dataclass(frozen=True)
class _ConstantDiffusion:
    nu: float

    def __call__(self, p: ParamPoint) -> float:
        return self.nu


@dataclass(frozen=True)
class _ScaledSineInitial:
    def __call__(self, p: ParamPoint, x: np.ndarray) -> np.ndarray:
        return (p.alpha * np.sin(np.pi * np.asarray(x)))[None, :]


@dataclass(frozen=True)
class _ScaledSineForcing:
    def __call__(self, p: ParamPoint, t: float, x: np.ndarray) -> np.ndarray:
        return (p.alpha * np.cos(t) * np.sin(np.pi * np.asarray(x)))[None, :]


@dataclass(frozen=True)
class _ZeroReaction:
    n_components: int

    def __call__(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        return np.zeros_like(u)


@dataclass(frozen=True)
class _ZeroReactionJac:
    n_components: int

    def __call__(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        n = self.n_components
        return np.zeros((n, n) + np.shape(u)[1:])


@dataclass(frozen=True)
class _SineInitial:
    def __call__(self, p: ParamPoint, x: np.ndarray) -> np.ndarray:
        return np.sin(np.pi * np.asarray(x))[None, :]


def linear_heat(nu: float = 1.0) -> ParametricModel:
    """Pure diffusion with homogeneous Dirichlet ends (no reaction, no forcing)."""
    if nu <= 0:
        raise ValueError("nu must be positive")
    return ParametricModel(
        name="linear_heat",
        n_components=1,
        diffusion=_ConstantDiffusion(nu),
        reaction=_ZeroReaction(1),
        reaction_jac=_ZeroReactionJac(1),
        initial=_SineInitial(),
        bc_left=DIRICHLET,
        bc_right=DIRICHLET,
        lipschitz_bound=0.0,
    )


def scalar_lipschitz(c: float = 0.5, nu: float = 1.0) -> ParametricModel:
    """Scalar model with reaction c*sin(u), hence Lipschitz constant |c|.

    The parameter scales both the initial profile and the forcing, so
    trajectories at nearby parameters stay distinct without leaving the
    homogeneous Dirichlet setting.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    return ParametricModel(
        name="scalar_lipschitz",
        n_components=1,
        diffusion=_ConstantDiffusion(nu),
        reaction=_SineReaction(c),
        reaction_jac=_SineReactionJac(c),
        initial=_ScaledSineInitial(),
        bc_left=DIRICHLET,
        bc_right=DIRICHLET,
        forcing=_ScaledSineForcing(),
        lipschitz_bound=abs(c),
    )


class SemidiscreteSystem:
    """FEM semidiscretization of a ParametricModel on a fixed mesh.

    The state is the flat free-dof coefficient vector with components
    concatenated; M u' = R(t, u) with R = -nu A u - G(u) + F(t).
    """

    def __init__(self, mesh: Mesh, model: ParametricModel):
        self.mesh = mesh
        self.model = model
        self.bc = make_bc(mesh, model.bc_left, model.bc_right)
        self.M = assemble_mass(mesh, self.bc)
        self.A = assemble_stiffness(mesh, self.bc)
        self._mass_cho = cho_factor(self.M)
        self.n_free = self.bc.n_free
        self.n = model.n_components * self.n_free

        phi = shape_values(GAUSS_NODES)  # (3, 4)
        self._phi = phi
        self._wq = mesh.h * GAUSS_WEIGHTS  # (4,)
        self._elem_dofs = mesh.elem_dofs
        a, _ = mesh.domain
        self._x_q = (a + mesh.h * (np.arange(mesh.n_elems)[:, None] + GAUSS_NODES[None, :]))
        self._free = self.bc.free_dofs
        self._n_nodes = mesh.n_nodes
        # quadrature-point evaluation matrix on free dofs, used for forcing
        # and reaction assembly through gather/scatter on elements
        self._phiw = phi * self._wq[None, :]  # (3, 4) premultiplied by weights

    # -- helpers ---------------------------------------------------------

    def _to_full(self, comps: np.ndarray) -> np.ndarray:
        full = np.zeros((self.model.n_components, self._n_nodes))
        full[:, self._free] = comps
        return full

    def split(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float).reshape(self.model.n_components, self.n_free)

    def field(self, u: np.ndarray) -> Field:
        return Field(self.mesh, self.bc, self.model.n_components, np.asarray(u, float))

    def values_at_quadrature(self, comps: np.ndarray) -> np.ndarray:
        """Component values at all quadrature points, shape (ncomp, ne, 4)."""
        full = self._to_full(comps)
        return np.einsum("cei,iq->ceq", full[:, self._elem_dofs], self._phi)

    def _scatter(self, contrib: np.ndarray) -> np.ndarray:
        """Accumulate per-element nodal contributions (ncomp, ne, 3) to free dofs."""
        ncomp = contrib.shape[0]
        flat_idx = self._elem_dofs.ravel()
        out = np.empty((ncomp, self.n_free))
        for c in range(ncomp):
            full = np.bincount(flat_idx, weights=contrib[c].ravel(),
                               minlength=self._n_nodes)
            out[c] = full[self._free]
        return out

    def assemble_reaction(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        comps = self.split(u)
        uq = self.values_at_quadrature(comps)
        gq = np.asarray(self.model.reaction(p, uq))
        contrib = np.einsum("ceq,iq->cei", gq, self._phiw)
        return self._scatter(contrib)

    def assemble_forcing(self, p: ParamPoint, t: float) -> np.ndarray | None:
        if self.model.forcing is None:
            return None
        fq = np.asarray(self.model.forcing(p, t, self._x_q))
        if fq.ndim == 2:  # (ncomp, npts) flattened over elements
            fq = fq.reshape(self.model.n_components, *self._x_q.shape)
        contrib = np.einsum("ceq,iq->cei", fq, self._phiw)
        return self._scatter(contrib)

    def reaction_jacobian(self, p: ParamPoint, u: np.ndarray) -> np.ndarray:
        """Dense Jacobian of the assembled reaction G(u), shape (n, n)."""
        ncomp = self.model.n_components
        comps = self.split(u)
        uq = self.values_at_quadrature(comps)
        gj = np.asarray(self.model.reaction_jac(p, uq))  # (ncomp, ncomp, ne, 4)
        elem_blocks = np.einsum("cdeq,q,iq,jq->cdeij", gj, self._wq,
                                self._phi, self._phi)
        nn = self._n_nodes
        rows = self._elem_dofs[:, :, None]
        cols = self._elem_dofs[:, None, :]
        J = np.zeros((self.n, self.n))
        sel = np.ix_(self._free, self._free)
        for c in range(ncomp):
            for d in range(ncomp):
                block = np.zeros((nn, nn))
                np.add.at(block, (rows, cols), elem_blocks[c, d])
                J[c * self.n_free:(c + 1) * self.n_free,
                  d * self.n_free:(d + 1) * self.n_free] = block[sel]
        return J

    # -- weak-form right-hand side ---------------------------------------

    def rhs_weak(self, p: ParamPoint, t: float, u: np.ndarray) -> np.ndarray:
        """R(t, u) with M u' = R; same quadrature as the assembly."""
        comps = self.split(u)
        nu = self.model.diffusion(p)
        R = -nu * comps @ self.A - self.assemble_reaction(p, u)
        F = self.assemble_forcing(p, t)
        if F is not None:
            R = R + F
        if not np.all(np.isfinite(R)):
            raise FloatingPointError("nonfinite reaction evaluation")
        return R.ravel()

    def jac_weak(self, p: ParamPoint, t: float, u: np.ndarray) -> np.ndarray:
        """dR/du, assembled with the same quadrature."""
        nu = self.model.diffusion(p)
        J = -self.reaction_jacobian(p, u)
        for c in range(self.model.n_components):
            sl = slice(c * self.n_free, (c + 1) * self.n_free)
            J[sl, sl] -= nu * self.A
        return J

    def mass_solve(self, r: np.ndarray) -> np.ndarray:
        """Apply the inverse mass matrix componentwise to a flat vector."""
        comps = r.reshape(self.model.n_components, self.n_free)
        return cho_solve(self._mass_cho, comps.T).T.ravel()

    def initial_state(self, p: ParamPoint) -> np.ndarray:
        vals = np.asarray(self.model.initial(p, self.mesh.node_coords))
        return vals[:, self._free].ravel()

    def default_perturbation(self, amplitude: float = 1e-2) -> np.ndarray:
        """Small bc-compatible bump used to kick the system off equilibrium."""
        xs = self.mesh.node_coords
        a, b = self.mesh.domain
        s = (xs - a) / (b - a)
        if self.bc.left == NEUMANN and self.bc.right == DIRICHLET:
            profile = np.cos(0.5 * np.pi * s)
        elif self.bc.left == DIRICHLET and self.bc.right == NEUMANN:
            profile = np.sin(0.5 * np.pi * s)
        else:
            profile = np.sin(np.pi * s)
        comps = np.tile(profile[self._free], (self.model.n_components, 1))
        return amplitude * comps.ravel()

    def ode(self, p: ParamPoint) -> "FomOde":
        return FomOde(self, p)


class FomOde:
    """Standard-form ODE view of a SemidiscreteSystem at a parameter point."""

    def __init__(self, sys: SemidiscreteSystem, p: ParamPoint):
        self.sys = sys
        self.p = p
        self.n = sys.n

    def rhs(self, t: float, u: np.ndarray) -> np.ndarray:
        return self.sys.mass_solve(self.sys.rhs_weak(self.p, t, u))

    def jac(self, t: float, u: np.ndarray) -> np.ndarray:
        J = self.sys.jac_weak(self.p, t, u)
        ncomp = self.sys.model.n_components
        nf = self.sys.n_free
        out = np.empty_like(J)
        for c in range(ncomp):
            sl = slice(c * nf, (c + 1) * nf)
            out[sl] = cho_solve(self.sys._mass_cho, J[sl])
        return out

    def l2_pairing(self, u: np.ndarray, v: np.ndarray) -> float:
        uc = self.sys.split(u)
        vc = self.sys.split(v)
        return float(np.einsum("ci,ij,cj->", uc, self.sys.M, vc))

    def l2_norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(max(self.l2_pairing(u, u), 0.0)))


def fom_rhs(sys: SemidiscreteSystem, p: ParamPoint, t: float, u: np.ndarray) -> np.ndarray:
    return sys.rhs_weak(p, t, u)


def fom_jacobian(sys: SemidiscreteSystem, p: ParamPoint, t: float, u: np.ndarray) -> np.ndarray:
    return sys.jac_weak(p, t, u)


def build_system(model: ParametricModel, n_elems: int,
                 domain: tuple[float, float] = (0.0, 1.0)) -> SemidiscreteSystem:
    return SemidiscreteSystem(build_mesh(n_elems, domain), model)

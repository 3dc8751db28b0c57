"""1-D quadratic Lagrange finite elements on a uniform mesh.

Mesh construction, dense mass/stiffness assembly, nodal interpolation,
L2 and H1-seminorm inner products for multi-component coefficient
vectors, and the discrete Poincare constant.  Homogeneous Dirichlet ends
are imposed by eliminating the constrained node (free-dof indexing), so
the assembled matrices stay symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

DIRICHLET = "dirichlet0"
NEUMANN = "neumann0"

# 4-point Gauss-Legendre rule mapped to [0,1]; exact through degree 7,
# which covers cubic reactions of P2 functions against P2 test functions.
_GAUSS_A = 0.3399810435848563
_GAUSS_B = 0.8611363115940526
GAUSS_NODES = np.array([
    0.5 * (1.0 - _GAUSS_B),
    0.5 * (1.0 - _GAUSS_A),
    0.5 * (1.0 + _GAUSS_A),
    0.5 * (1.0 + _GAUSS_B),
])
GAUSS_WEIGHTS = np.array([
    0.5 * 0.3478548451374538,
    0.5 * 0.6521451548625461,
    0.5 * 0.6521451548625461,
    0.5 * 0.3478548451374538,
])


def shape_values(xi: np.ndarray) -> np.ndarray:
    """P2 shape functions on the reference element [0,1], shape (3, len(xi))."""
    xi = np.asarray(xi, dtype=float)
    return np.stack([
        (2.0 * xi - 1.0) * (xi - 1.0),
        4.0 * xi * (1.0 - xi),
        xi * (2.0 * xi - 1.0),
    ])


def shape_derivs(xi: np.ndarray) -> np.ndarray:
    """Reference derivatives of the P2 shape functions, shape (3, len(xi))."""
    xi = np.asarray(xi, dtype=float)
    return np.stack([
        4.0 * xi - 3.0,
        4.0 - 8.0 * xi,
        4.0 * xi - 1.0,
    ])


class InconsistentBCError(ValueError):
    """Raised when interpolation data violates a homogeneous Dirichlet end."""


@dataclass(frozen=True)
class Mesh:
    """Uniform P2 mesh on an interval: vertex and midpoint nodes."""

    n_elems: int
    domain: tuple[float, float]
    node_coords: np.ndarray
    elem_dofs: np.ndarray  # (n_elems, 3) global node indices per element

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_elems + 1

    @property
    def h(self) -> float:
        a, b = self.domain
        return (b - a) / self.n_elems


@dataclass(frozen=True)
class BoundaryCondition:
    left: str
    right: str
    free_dofs: np.ndarray

    @property
    def n_free(self) -> int:
        return self.free_dofs.size


@dataclass
class Field:
    """Coefficient vector of a (possibly multi-component) FEM function.

    ``coeffs`` concatenates the components: length n_components * n_free.
    """

    mesh: Mesh
    bc: BoundaryCondition
    n_components: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        expected = self.n_components * self.bc.n_free
        if self.coeffs.size != expected:
            raise ValueError(
                f"coefficient length {self.coeffs.size} != "
                f"{self.n_components} components x {self.bc.n_free} free dofs"
            )

    def components(self) -> np.ndarray:
        """View of the coefficients as a (n_components, n_free) array."""
        return self.coeffs.reshape(self.n_components, self.bc.n_free)


def build_mesh(n_elems: int, domain: tuple[float, float] = (0.0, 1.0)) -> Mesh:
    """Uniform P2 mesh with n_elems elements on the given interval."""
    if n_elems < 2:
        raise ValueError("n_elems must be at least 2")
    a, b = float(domain[0]), float(domain[1])
    if not b > a:
        raise ValueError("domain must be a nondegenerate interval")
    coords = np.linspace(a, b, 2 * n_elems + 1)
    coords[0], coords[-1] = a, b
    elem_dofs = 2 * np.arange(n_elems)[:, None] + np.arange(3)[None, :]
    return Mesh(n_elems, (a, b), coords, elem_dofs)


def make_bc(mesh: Mesh, left: str = DIRICHLET, right: str = DIRICHLET) -> BoundaryCondition:
    """Boundary condition bookkeeping: Dirichlet ends drop their node."""
    for name in (left, right):
        if name not in (DIRICHLET, NEUMANN):
            raise ValueError(f"unknown boundary condition {name!r}")
    free = np.arange(mesh.n_nodes)
    if left == DIRICHLET:
        free = free[1:]
    if right == DIRICHLET:
        free = free[:-1]
    return BoundaryCondition(left, right, free)


def _assemble(mesh: Mesh, bc: BoundaryCondition, elem_matrix: np.ndarray) -> np.ndarray:
    n = mesh.n_nodes
    full = np.zeros((n, n))
    rows = mesh.elem_dofs[:, :, None]
    cols = mesh.elem_dofs[:, None, :]
    np.add.at(full, (rows, cols), elem_matrix[None, :, :])
    sub = full[np.ix_(bc.free_dofs, bc.free_dofs)]
    return 0.5 * (sub + sub.T)


def assemble_mass(mesh: Mesh, bc: BoundaryCondition) -> np.ndarray:
    """Dense mass matrix on the free dofs (L2 inner product)."""
    phi = shape_values(GAUSS_NODES)
    elem = mesh.h * np.einsum("q,iq,jq->ij", GAUSS_WEIGHTS, phi, phi)
    return _assemble(mesh, bc, elem)


def assemble_stiffness(mesh: Mesh, bc: BoundaryCondition) -> np.ndarray:
    """Dense stiffness matrix on the free dofs (gradient inner product)."""
    dphi = shape_derivs(GAUSS_NODES)
    elem = np.einsum("q,iq,jq->ij", GAUSS_WEIGHTS, dphi, dphi) / mesh.h
    return _assemble(mesh, bc, elem)


def _as_components(u, n_free: int) -> np.ndarray:
    if isinstance(u, Field):
        return u.components()
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 1:
        if arr.size % n_free:
            raise ValueError(f"vector length {arr.size} is not a multiple of {n_free}")
        return arr.reshape(-1, n_free)
    if arr.ndim == 2 and arr.shape[1] == n_free:
        return arr
    raise ValueError(f"cannot interpret shape {arr.shape} as components of length {n_free}")


def h1_semi_inner(A: np.ndarray, u, v) -> float:
    """Gradient inner product, summed over components."""
    n = A.shape[0]
    uc = _as_components(u, n)
    vc = _as_components(v, n)
    if uc.shape != vc.shape:
        raise ValueError(f"component shapes differ: {uc.shape} vs {vc.shape}")
    return float(np.einsum("ci,ij,cj->", uc, A, vc))


def l2_inner(M: np.ndarray, u, v) -> float:
    """L2 inner product, summed over components."""
    return h1_semi_inner(M, u, v)


def h1_semi_norm(A: np.ndarray, u) -> float:
    return float(np.sqrt(max(h1_semi_inner(A, u, u), 0.0)))


def l2_norm(M: np.ndarray, u) -> float:
    return float(np.sqrt(max(l2_inner(M, u, u), 0.0)))


def interpolate_nodal(f, mesh: Mesh, bc: BoundaryCondition, n_components: int = 1) -> Field:
    """Nodal (Lagrange) interpolant of f.

    ``f`` is a vectorized function of x, or a sequence of them (one per
    component).  Nonzero values at a Dirichlet node are rejected.
    """
    funcs = list(f) if isinstance(f, (list, tuple)) else [f] * n_components
    if len(funcs) != n_components:
        raise ValueError("need one function per component")
    xs = mesh.node_coords
    comps = np.empty((n_components, bc.n_free))
    for c, fc in enumerate(funcs):
        vals = np.asarray(fc(xs), dtype=float)
        if vals.shape != xs.shape:
            vals = np.broadcast_to(vals, xs.shape).astype(float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("function is not finite at all nodes")
        if bc.left == DIRICHLET and abs(vals[0]) > 1e-12:
            raise InconsistentBCError(f"component {c}: value {vals[0]!r} at Dirichlet end x={xs[0]}")
        if bc.right == DIRICHLET and abs(vals[-1]) > 1e-12:
            raise InconsistentBCError(f"component {c}: value {vals[-1]!r} at Dirichlet end x={xs[-1]}")
        comps[c] = vals[bc.free_dofs]
    return Field(mesh, bc, n_components, comps.ravel())


def evaluate_field(field: Field, xs: np.ndarray) -> np.ndarray:
    """Evaluate a Field at arbitrary points, shape (n_components, len(xs))."""
    mesh, bc = field.mesh, field.bc
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    a, _ = mesh.domain
    h = mesh.h
    elem = np.clip(((xs - a) / h).astype(int), 0, mesh.n_elems - 1)
    xi = (xs - (a + elem * h)) / h
    phi = shape_values(xi)  # (3, npts)
    full = np.zeros((field.n_components, mesh.n_nodes))
    full[:, bc.free_dofs] = field.components()
    nodes = mesh.elem_dofs[elem]  # (npts, 3)
    vals = np.einsum("cpi,ip->cp", full[:, nodes], phi)
    return vals


def poincare_constant(M: np.ndarray, A: np.ndarray, tol: float = 1e-10,
                      max_iters: int = 500) -> float:
    """Discrete Poincare constant: inverse square root of the smallest
    generalized eigenvalue of (A, M), by inverse power iteration."""
    try:
        A_cho = cho_factor(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError("stiffness matrix is not positive definite "
                         "(needs at least one Dirichlet end)") from exc
    n = A.shape[0]
    x = np.ones(n)
    lam_prev = np.inf
    for _ in range(max_iters):
        y = cho_solve(A_cho, M @ x)
        y /= np.sqrt(y @ (M @ y))
        lam = (y @ (A @ y)) / (y @ (M @ y))
        x = y
        if abs(lam - lam_prev) <= tol * abs(lam):
            break
        lam_prev = lam
    else:
        raise RuntimeError("inverse power iteration did not converge")
    # a semidefinite matrix can slip through Cholesky on a round-off pivot
    if lam <= 1e-12 * np.abs(A).max():
        raise ValueError("stiffness matrix is numerically singular "
                         "(needs at least one Dirichlet end)")
    return float(1.0 / np.sqrt(lam))

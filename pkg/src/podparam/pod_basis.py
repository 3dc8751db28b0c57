"""POD in the gradient inner product: correlation matrix, eigensolve, modes.

The correlation matrix of a weighted snapshot set is eigendecomposed with a
cyclic Jacobi iteration (high relative accuracy for the small eigenvalues
of a positive semidefinite matrix); modes come out as snapshot
recombinations and are orthonormal in the gradient product.  Alongside the
basis itself, this module carries the executable forms of the exact POD
algebra: the eigenvalue-tail identity of the projection errors over the
set, its tier-resolved regrouping, and the pointwise projection-error
bounds that hold for the difference-quotient sets.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .mesh_fem import build_mesh, make_bc, assemble_stiffness, assemble_mass
from .snapshots import (
    TIER_DT,
    TIER_DTDA,
    TIER_DTDADB,
    TIER_INITIAL,
    SnapshotSet,
    SnapshotBlock,
)
from .store import (
    StoreError,
    check_digest,
    fmt_float,
    read_array_bin,
    read_kv_file,
    sha256_file,
    write_array_bin,
    write_kv_file,
)

logger = logging.getLogger(__name__)

MODES_MAGIC = b"PODBASE1\n"

try:
    from numba import njit as _njit
    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not (args and callable(args[0])) else args[0]


class UnsupportedVariantError(ValueError):
    """Pointwise bounds only hold for the difference-quotient sets."""


@dataclass
class PodEigen:
    """Descending spectrum of the correlation matrix.

    ``lambdas`` keeps the whole computed spectrum (negatives within the
    round-off band clamped to zero); ``d_r`` counts the eigenvalues above
    ``drop_threshold``.
    """

    lambdas: np.ndarray
    eigvecs: np.ndarray  # columns
    d_r: int
    drop_threshold: float


@dataclass
class PodBasis:
    modes: np.ndarray  # (ndof, d_r), orthonormal in the gradient product
    eigen: PodEigen
    A: np.ndarray
    n_components: int
    meta: dict
    gram: np.ndarray
    gram_correction: float = 0.0

    @property
    def d_r(self) -> int:
        return self.modes.shape[1]


@dataclass
class TailReport:
    r: int
    sigma_sq: float
    sigma: float
    member_errors: np.ndarray | None = None


def _gram_h1(A: np.ndarray, X: np.ndarray, Y: np.ndarray, n_components: int) -> np.ndarray:
    """Pairwise gradient inner products of the rows of X and Y."""
    nfree = A.shape[0]
    Xc = X.reshape(X.shape[0], n_components, nfree)
    Yc = Y.reshape(Y.shape[0], n_components, nfree)
    out = np.zeros((X.shape[0], Y.shape[0]))
    for c in range(n_components):
        out += Xc[:, c] @ A @ Yc[:, c].T
    return out


def correlation_matrix(sset: SnapshotSet, A: np.ndarray) -> np.ndarray:
    """(1/N) pairwise gradient inner products of the weighted members."""
    ncomp = int(sset.meta.get("n_components", sset.fields.shape[1] // A.shape[0]))
    if sset.fields.shape[1] != ncomp * A.shape[0]:
        raise ValueError("snapshot dof length does not match the stiffness matrix")
    S = _gram_h1(A, sset.fields, sset.fields, ncomp) / sset.n
    return 0.5 * (S + S.T)


@_njit(cache=True)
def _jacobi_kernel(a, v, tol_off):  # pragma: no cover - exercised via wrapper
    n = a.shape[0]
    n_rot = 0
    for sweep in range(60):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        off = np.sqrt(2.0 * off)
        if off <= tol_off:
            break
        thresh = 0.2 * off / (n * n) if sweep < 3 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                if sweep > 3 and abs(a[p, p]) + g == abs(a[p, p]) \
                        and abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                if abs(apq) <= thresh:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                diff = aqq - app
                if abs(apq) < 1e-300:
                    continue
                theta = 0.5 * diff / apq
                t = 1.0 / (abs(theta) + np.sqrt(1.0 + theta * theta))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                tau = s / (1.0 + c)
                h = t * apq
                a[p, p] = app - h
                a[q, q] = aqq + h
                a[p, q] = 0.0
                a[q, p] = 0.0
                for i in range(n):
                    if i != p and i != q:
                        aip = a[i, p]
                        aiq = a[i, q]
                        a[i, p] = aip - s * (aiq + tau * aip)
                        a[p, i] = a[i, p]
                        a[i, q] = aiq + s * (aip - tau * aiq)
                        a[q, i] = a[i, q]
                for i in range(n):
                    vip = v[i, p]
                    viq = v[i, q]
                    v[i, p] = vip - s * (viq + tau * vip)
                    v[i, q] = viq + s * (vip - tau * viq)
                n_rot += 1
    return n_rot


def jacobi_eigh(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full spectrum of a symmetric matrix by cyclic Jacobi rotations."""
    if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(np.abs(S).max(), 1e-300)):
        raise ValueError("matrix is not symmetric")
    a = np.array(S, dtype=float, order="C")
    n = a.shape[0]
    v = np.eye(n)
    fro = np.linalg.norm(a, "fro")
    tol_off = max(1e-15 * fro, 1e-300)
    _jacobi_kernel(a, v, tol_off)
    lam = np.diag(a).copy()
    order = np.argsort(lam)[::-1]
    return lam[order], v[:, order]


def eigendecompose(S: np.ndarray, drop_threshold: float | None = None) -> PodEigen:
    """Jacobi eigendecomposition with descending eigenvalues.

    Eigenvalues within the round-off band below zero are clamped to zero;
    ``d_r`` counts those above the drop threshold.  The default threshold
    sits a fraction of machine epsilon below the largest eigenvalue: the
    deep snapshot spectra of smooth orbit families stay meaningful down to
    that floor, and the mode constructor re-orthonormalizes whatever drift
    remains there.
    """
    lam, vec = jacobi_eigh(S)
    lam1 = lam[0] if lam.size else 0.0
    lam = np.where(lam < 0, np.where(lam > -1e-12 * max(lam1, 0.0), 0.0, lam), lam)
    if np.any(lam < 0):
        raise ValueError("matrix has significantly negative eigenvalues")
    if drop_threshold is None:
        drop_threshold = max(0.25 * np.finfo(float).eps * lam1, 1e-300)
    d_r = int(np.sum(lam > drop_threshold))
    return PodEigen(lam, vec, d_r, drop_threshold)


def whitened_svd_spectrum(sset: SnapshotSet, A: np.ndarray) -> np.ndarray:
    """Correlation eigenvalues via Cholesky whitening and a dense SVD.

    Independent route used to cross-check the Jacobi spectrum: square the
    singular values of Z R^T where Z holds the scaled members and A = R^T R.
    """
    ncomp = int(sset.meta.get("n_components", sset.fields.shape[1] // A.shape[0]))
    nfree = A.shape[0]
    R = scipy.linalg.cholesky(A, lower=False)
    Z = sset.fields.reshape(sset.n, ncomp, nfree) / np.sqrt(sset.n)
    W = np.concatenate([Z[:, c] @ R.T for c in range(ncomp)], axis=1)
    svals = scipy.linalg.svd(W, compute_uv=False)
    lam = np.zeros(sset.n)
    lam[:svals.size] = svals ** 2
    return np.sort(lam)[::-1]


def pod_modes(sset: SnapshotSet, eigen: PodEigen, A: np.ndarray,
              gram_tol: float = 1e-10) -> PodBasis:
    """Modes as snapshot recombinations, orthonormal in the gradient product.

    If floating-point drift pushes the mode Gram matrix off the identity by
    more than ``gram_tol``, one triangular orthonormalization pass is
    applied.  The triangular form keeps every leading-r mode span unchanged,
    so projections onto the first r modes are unaffected by the correction.
    Trailing modes whose Gram has degenerated beyond repair are dropped and
    the retained count shrinks accordingly.
    """
    if eigen.d_r < 1:
        raise ValueError("correlation matrix is numerically zero")
    ncomp = int(sset.meta.get("n_components", 1))
    d_r = eigen.d_r
    lam = eigen.lambdas[:d_r]
    V = eigen.eigvecs[:, :d_r]
    Phi = (sset.fields.T @ V) / np.sqrt(sset.n * lam)[None, :]
    gram = _gram_h1(A, Phi.T, Phi.T, ncomp)
    off = np.abs(gram - np.eye(d_r)).max()
    correction = 0.0
    if off > gram_tol:
        correction = float(off)
        while d_r > 0:
            try:
                L = scipy.linalg.cholesky(gram[:d_r, :d_r], lower=True)
                break
            except scipy.linalg.LinAlgError:
                d_r -= 1
        if d_r == 0:
            raise ValueError("mode Gram matrix lost positive definiteness")
        if d_r < eigen.d_r:
            logger.warning("dropping %d degenerate trailing modes", eigen.d_r - d_r)
            eigen = PodEigen(eigen.lambdas, eigen.eigvecs, d_r, eigen.drop_threshold)
        Phi = scipy.linalg.solve_triangular(L, Phi[:, :d_r].T, lower=True).T
        gram = _gram_h1(A, Phi.T, Phi.T, ncomp)
        logger.info("applied Gram correction of magnitude %.3e", correction)
    return PodBasis(Phi, eigen, A, ncomp, dict(sset.meta), gram, correction)


def project_coefficients(basis: PodBasis, r: int, v: np.ndarray) -> np.ndarray:
    """Gradient-product coefficients of v against the first r modes."""
    if not 1 <= r <= basis.d_r:
        raise ValueError(f"r={r} out of range 1..{basis.d_r}")
    nfree = basis.A.shape[0]
    vc = np.asarray(v, dtype=float).reshape(basis.n_components, nfree)
    Phic = basis.modes[:, :r].T.reshape(r, basis.n_components, nfree)
    return np.einsum("rci,ij,cj->r", Phic, basis.A, vc)


def project_h01(basis: PodBasis, r: int, v: np.ndarray) -> np.ndarray:
    """Orthogonal projection (in the gradient product) onto the first r modes."""
    c = project_coefficients(basis, r, v)
    return basis.modes[:, :r] @ c


def tail(eigen: PodEigen, r: int) -> TailReport:
    """Eigenvalue tail beyond index r (the whole computed spectrum counts)."""
    if not 0 <= r <= eigen.lambdas.size:
        raise ValueError(f"r={r} out of range 0..{eigen.lambdas.size}")
    sigma_sq = float(np.sum(eigen.lambdas[r:]))
    return TailReport(r, sigma_sq, float(np.sqrt(max(sigma_sq, 0.0))))


def member_projection_errors(sset: SnapshotSet, basis: PodBasis, r: int) -> np.ndarray:
    """Squared gradient-norm projection errors of every weighted member."""
    Y = sset.fields
    nfree = basis.A.shape[0]
    Yc = Y.reshape(sset.n, basis.n_components, nfree)
    norms = np.zeros(sset.n)
    for c in range(basis.n_components):
        norms += np.einsum("ni,ij,nj->n", Yc[:, c], basis.A, Yc[:, c])
    C = _gram_h1(basis.A, Y, basis.modes[:, :r].T, basis.n_components)  # (N, r)
    # ||y - Py||_A^2 = ||y||_A^2 - 2 c.c + c.G.c with c the mode coefficients
    G = basis.gram[:r, :r]
    errs = norms - 2 * np.einsum("nr,nr->n", C, C) + np.einsum("nr,rs,ns->n", C, G, C)
    return np.maximum(errs, 0.0)


def verify_tail_identity(sset: SnapshotSet, basis: PodBasis, r: int) -> float:
    """Relative residual of (1/N) sum of member projection errors vs the tail."""
    errs = member_projection_errors(sset, basis, r)
    lhs = float(errs.sum() / sset.n)
    rhs = tail(basis.eigen, r).sigma_sq
    return abs(lhs - rhs) / max(rhs, 1e-300)


_TIER_PREFACTORS_1P = {TIER_INITIAL: lambda M, L, S: 1.0,
                       TIER_DT: lambda M, L, S: 1.0 / (M + 1),
                       TIER_DTDA: lambda M, L, S: 1.0 / ((M + 1) * (L + 1))}
_TIER_PREFACTORS_2P = {TIER_INITIAL: lambda M, L, S: 1.0,
                       TIER_DT: lambda M, L, S: 1.0 / (M + 1),
                       TIER_DTDA: lambda M, L, S: 1.0 / ((M + 1) * (L + 1)),
                       TIER_DTDADB: lambda M, L, S: 1.0 / ((M + 1) * (L + 1) * (S + 1))}


def verify_tier_identity(sset: SnapshotSet, basis: PodBasis, r: int) -> float:
    """Tail identity regrouped by tier with the per-tier prefactors."""
    method = sset.meta.get("method")
    if method == "new_1p":
        prefs = _TIER_PREFACTORS_1P
    elif method == "new_2p":
        prefs = _TIER_PREFACTORS_2P
    else:
        raise UnsupportedVariantError(f"tier identity needs a difference-quotient set, got {method!r}")
    M, L, S = sset.meta["M"], sset.meta["L"], sset.meta.get("S")
    errs = member_projection_errors(sset, basis, r)
    lhs = 0.0
    for i, m in enumerate(sset.members):
        unweighted_sq = errs[i] / m.weight ** 2
        lhs += prefs[m.tier](M, L, S) * unweighted_sq
    rhs = tail(basis.eigen, r).sigma_sq
    return abs(lhs - rhs) / max(rhs, 1e-300)


def pointwise_constant(space: str, variant: str, T: float, width_alpha: float,
                       width_beta: float = 0.0, poincare_c: float | None = None) -> float:
    if variant == "one_param":
        c = 3.0 * max(1.0, 2.0 * T ** 2, 4.0 * T ** 2 * width_alpha ** 2)
    elif variant == "two_param":
        c = 4.0 * max(1.0, 2.0 * T ** 2, 4.0 * T ** 2 * width_alpha ** 2,
                      8.0 * T ** 2 * width_alpha ** 2 * width_beta ** 2)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if space == "L2":
        if poincare_c is None:
            raise ValueError("L2 bound needs the Poincare constant")
        c *= poincare_c ** 2
    elif space != "H01":
        raise ValueError(f"unknown space {space!r}")
    return c


def verify_pointwise_bound(blocks, basis: PodBasis, r: int, space: str = "H01",
                           variant: str = "one_param", mass: np.ndarray | None = None,
                           poincare_c: float | None = None) -> dict:
    """Max projection error over the snapshot grid against its tail bound.

    Returns a report with the maximal squared projection error over all
    (time, parameter) grid points, the bound constant times the tail, and
    their ratio (defined as 0 once the tail sits at the numerical noise
    floor).  Only valid for bases built from the difference-quotient sets.
    """
    method = basis.meta.get("method")
    if (variant == "one_param" and method != "new_1p") or \
            (variant == "two_param" and method != "new_2p"):
        raise UnsupportedVariantError(
            f"pointwise bound does not apply to a {method!r} basis")
    flat = [b for row in blocks for b in row] if isinstance(blocks[0], list) else list(blocks)
    T = max(b.period for b in flat)
    alphas = sorted({b.param.alpha for b in flat})
    width_alpha = alphas[-1] - alphas[0]
    width_beta = 0.0
    if variant == "two_param":
        betas = sorted({b.param.beta2 for b in flat})
        width_beta = betas[-1] - betas[0]
    if space == "L2" and mass is None:
        raise ValueError("L2 bound needs the mass matrix")
    C = pointwise_constant(space, variant, T, width_alpha, width_beta, poincare_c)

    X = mass if space == "L2" else basis.A
    nfree = basis.A.shape[0]
    max_err = 0.0
    argmax = None
    for bi, b in enumerate(flat):
        for j in range(b.m + 1):
            u = b.states[j]
            e = u - project_h01(basis, r, u)
            ec = e.reshape(basis.n_components, nfree)
            err = float(np.einsum("ci,ij,cj->", ec, X, ec))
            if err > max_err:
                max_err = err
                argmax = (bi, j)
    t = tail(basis.eigen, r)
    bound = C * t.sigma_sq
    noise_floor = basis.eigen.drop_threshold * len(basis.eigen.lambdas)
    if t.sigma_sq <= noise_floor:
        ratio = 0.0
    else:
        ratio = max_err / bound
    return {"space": space, "variant": variant, "r": r, "max_err_sq": max_err,
            "bound": bound, "ratio": ratio, "constant": C, "tail_sq": t.sigma_sq,
            "argmax": argmax}


def standard_exponents(m: int) -> tuple[float, float]:
    """Quasi-optimality exponents of the plain-snapshot error bounds."""
    if m < 2:
        raise ValueError("m must be at least 2")
    gamma_m = 1.0 / m - 1.0 / (4.0 * m * m)
    beta_m = gamma_m + 1.0 / m - gamma_m / m
    return gamma_m, beta_m


def standard_diagnostics(blocks, basis_std: PodBasis, r: int,
                         m_values=(2, 3, 4, 5)) -> list[dict]:
    """Observed max/tail ratios for the plain-snapshot quasi-optimal bound.

    Purely diagnostic: the bound's constant is not computable, so ratios are
    reported, never asserted.
    """
    flat = [b for row in blocks for b in row] if isinstance(blocks[0], list) else list(blocks)
    nfree = basis_std.A.shape[0]
    errs = []
    for b in flat:
        for j in range(b.m + 1):
            u = b.states[j]
            e = u - project_h01(basis_std, r, u)
            ec = e.reshape(basis_std.n_components, nfree)
            errs.append(float(np.einsum("ci,ij,cj->", ec, basis_std.A, ec)))
    errs = np.asarray(errs)
    t = tail(basis_std.eigen, r)
    rows = []
    for m in m_values:
        gamma_m, beta_m = standard_exponents(m)
        denom = t.sigma_sq ** (1.0 - gamma_m) if t.sigma_sq > 0 else np.inf
        rows.append({
            "m": m, "gamma_m": gamma_m, "beta_m": beta_m,
            "max_err_sq": float(errs.max()), "mean_err_sq": float(errs.mean()),
            "max_over_mean": float(errs.max() / max(errs.mean(), 1e-300)),
            "tail_sq": t.sigma_sq,
            "ratio": float(errs.max() / denom) if np.isfinite(denom) else np.inf,
        })
    return rows


def save_basis(basis: PodBasis, path: Path | str) -> None:
    """Persist modes, spectrum (binary and CSV) and enough meta to reload."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_array_bin(path / "modes.bin", MODES_MAGIC, basis.modes.T)
    write_array_bin(path / "spectrum.bin", MODES_MAGIC,
                    basis.eigen.lambdas[None, :])
    with open(path / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "lambda_k", "tail_sq_after_k", "tail_after_k"])
        lam = basis.eigen.lambdas
        for k in range(1, lam.size + 1):
            t = float(np.sum(lam[k:]))
            w.writerow([k, f"{lam[k - 1]:.9g}", f"{t:.9g}", f"{np.sqrt(max(t, 0.0)):.9g}"])
    manifest = {
        "format_version": "1",
        "kind": "pod_basis",
        "method": str(basis.meta.get("method", "")),
        "d_r": str(basis.d_r),
        "dof_len": str(basis.modes.shape[0]),
        "n_components": str(basis.n_components),
        "drop_threshold": fmt_float(basis.eigen.drop_threshold),
        "gram_correction": fmt_float(basis.gram_correction),
    }
    for key in ("mesh_n_elems", "domain_a", "domain_b", "bc_left", "bc_right",
                "M", "L", "S", "model", "config_hash"):
        if basis.meta.get(key) is not None:
            manifest[key] = str(basis.meta[key])
    for i, (alpha, beta2) in enumerate(basis.meta.get("params", [])):
        manifest[f"param_alpha_{i}"] = fmt_float(alpha)
        if beta2 is not None:
            manifest[f"param_beta2_{i}"] = fmt_float(beta2)
    for i, T in enumerate(basis.meta.get("periods", [])):
        manifest[f"period_{i}"] = fmt_float(T)
    manifest["modes_sha256"] = sha256_file(path / "modes.bin")
    manifest["spectrum_sha256"] = sha256_file(path / "spectrum.bin")
    write_kv_file(path / "manifest.txt", manifest)


def load_basis(path: Path | str) -> PodBasis:
    path = Path(path)
    manifest = read_kv_file(path / "manifest.txt")
    if manifest.get("kind") != "pod_basis":
        raise StoreError(f"{path}: not a basis store")
    check_digest(path / "modes.bin", manifest["modes_sha256"])
    check_digest(path / "spectrum.bin", manifest["spectrum_sha256"])
    modes = read_array_bin(path / "modes.bin", MODES_MAGIC).T
    lambdas = read_array_bin(path / "spectrum.bin", MODES_MAGIC)[0]
    d_r = int(manifest["d_r"])
    n_components = int(manifest["n_components"])
    mesh = build_mesh(int(manifest["mesh_n_elems"]),
                      (float(manifest["domain_a"]), float(manifest["domain_b"])))
    bc = make_bc(mesh, manifest["bc_left"], manifest["bc_right"])
    A = assemble_stiffness(mesh, bc)
    eigen = PodEigen(lambdas, np.empty((0, 0)), d_r,
                     float(manifest["drop_threshold"]))
    meta = {k: manifest[k] for k in ("method", "model", "config_hash") if k in manifest}
    for k in ("M", "L", "S", "mesh_n_elems", "n_components"):
        if k in manifest:
            meta[k] = int(manifest[k])
    for k in ("domain_a", "domain_b"):
        if k in manifest:
            meta[k] = float(manifest[k])
    for k in ("bc_left", "bc_right"):
        if k in manifest:
            meta[k] = manifest[k]
    n_blocks = (1 + meta.get("L", 0))
    if meta.get("S") is not None:
        n_blocks *= 1 + meta["S"]
    params, periods = [], []
    for i in range(n_blocks):
        key = f"param_alpha_{i}"
        if key not in manifest:
            break
        beta2 = manifest.get(f"param_beta2_{i}")
        params.append((float(manifest[key]), float(beta2) if beta2 is not None else None))
        periods.append(float(manifest[f"period_{i}"]))
    meta["params"] = params
    meta["periods"] = periods
    gram = _gram_h1(A, modes.T, modes.T, n_components)
    return PodBasis(modes, eigen, A, n_components, meta, gram,
                    float(manifest.get("gram_correction", 0.0)))

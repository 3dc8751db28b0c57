"""Experiment drivers: error metrics, table/sweep reproduction, bound checks.

Everything here works on top of the lower modules: full-order orbits are
computed (optionally warm-started along a parameter sweep and parallel
across sweep rows), snapshot sets and bases are assembled, reduced orbits
are run for in- and out-of-sample parameters, and the error quantities are
measured on a fine partition of each period with both orbits anchored at
their norm maxima and the reduced time axis rescaled by the period ratio.

All CSV emission is deterministic: fixed row order, floats at 9
significant digits, no timestamps.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .integrate import (
    IntegrationError,
    IntegratorConfig,
    NoOscillationError,
    PeriodicOrbit,
    find_periodic_orbit,
    integrate,
    sample_orbit,
)
from .mesh_fem import (
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    evaluate_field,
    make_bc,
    poincare_constant,
)
from .models import (
    ParamPoint,
    ParametricModel,
    SemidiscreteSystem,
    brusselator_shifted,
    build_system,
    scalar_lipschitz,
)
from .pod_basis import (
    PodBasis,
    correlation_matrix,
    eigendecompose,
    pod_modes,
    project_h01,
    standard_diagnostics,
    tail,
    verify_pointwise_bound,
)
from .rom import RomOperators, integrate_rom, reduce, rom_periodic_orbit
from .snapshots import (
    SnapshotBlock,
    build_set_new_1p,
    build_set_new_2p,
    build_set_standard,
)

logger = logging.getLogger(__name__)


@dataclass
class DiagnosticsConfig:
    fine_partition_points: int = 2049
    q: int = 2
    m: int = 2
    norms: tuple[str, ...] = ("L2", "H1semi")

    def __post_init__(self):
        if self.fine_partition_points < 2:
            raise ValueError("need at least two fine partition points")
        if self.q < 2 or self.m < 2:
            raise ValueError("analysis exponents require q >= 2 and m >= 2")


@dataclass
class ErrorReport:
    """Projection and reduced-model errors over one period on a fine grid."""

    param: ParamPoint
    r: int
    times: np.ndarray
    eps_h1: np.ndarray
    eps_l2: np.ndarray
    e_h1: np.ndarray
    e_l2: np.ndarray
    snap_idx: np.ndarray

    @property
    def max_eps_h1(self) -> float:
        return float(self.eps_h1.max())

    @property
    def max_e_h1(self) -> float:
        return float(self.e_h1.max())

    @property
    def max_eps_l2(self) -> float:
        return float(self.eps_l2.max())

    @property
    def max_e_l2(self) -> float:
        return float(self.e_l2.max())

    @property
    def max_eps_h1_snap(self) -> float:
        return float(self.eps_h1[self.snap_idx].max())

    @property
    def max_e_h1_snap(self) -> float:
        return float(self.e_h1[self.snap_idx].max())


def fmt9(x) -> str:
    return f"{float(x):.9g}"


def write_csv(path: Path | str, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt9(c) for c in row])
    return path


# ---------------------------------------------------------------------------
# orbit computation (parallel over sweep rows, warm-started inside a row)


def _norms_sq(mat: np.ndarray, states: np.ndarray, n_components: int) -> np.ndarray:
    nfree = mat.shape[0]
    sc = states.reshape(states.shape[0], n_components, nfree)
    out = np.zeros(states.shape[0])
    for c in range(n_components):
        out += np.einsum("ni,ij,nj->n", sc[:, c], mat, sc[:, c])
    return np.maximum(out, 0.0)


def compute_fom_orbit(sys: SemidiscreteSystem, p: ParamPoint,
                      icfg: IntegratorConfig, period_rtol: float,
                      perturbation_amplitude: float = 1e-2,
                      warm_state: np.ndarray | None = None,
                      **finder_kwargs) -> PeriodicOrbit:
    y0 = warm_state if warm_state is not None else \
        sys.default_perturbation(perturbation_amplitude)
    return find_periodic_orbit(sys.ode(p), y0, period_rtol=period_rtol,
                               config=icfg, param=p, **finder_kwargs)


def sample_block(sys: SemidiscreteSystem, orbit: PeriodicOrbit, M: int,
                 icfg: IntegratorConfig) -> SnapshotBlock:
    traj = sample_orbit(sys.ode(orbit.param), orbit, M, icfg)
    return SnapshotBlock(orbit.param, orbit.period, traj.times, traj.states,
                         traj.derivs)


def _orbit_chain_task(args):
    (model, n_elems, domain, params, M, icfg, period_rtol, ampl,
     finder_kwargs, fine_points) = args
    sys = build_system(model, n_elems, domain)
    out = []
    warm = None
    for p in params:
        try:
            orbit = compute_fom_orbit(sys, p, icfg, period_rtol, ampl,
                                      warm_state=warm, **finder_kwargs)
        except (NoOscillationError, IntegrationError) as exc:
            logger.warning("full-order orbit at %s failed: %s", p, exc)
            out.append((_unconverged_orbit(p, np.zeros(sys.n)), None, None))
            continue
        block = None
        fine = None
        if orbit.converged:
            warm = orbit.initial_state
            block = sample_block(sys, orbit, M, icfg)
            if fine_points is not None:
                fine = fom_fine_states(sys, orbit, fine_points, icfg)
        out.append((orbit, block, fine))
    return out


def compute_block_rows(model: ParametricModel, n_elems: int, domain,
                       param_rows: list[list[ParamPoint]], M: int,
                       icfg: IntegratorConfig, period_rtol: float,
                       perturbation_amplitude: float = 1e-2, threads: int = 1,
                       fine_points: int | None = None, **finder_kwargs):
    """Orbits and snapshot blocks for a grid of parameter points.

    Each row is computed as a warm-started chain; rows run in parallel
    processes when ``threads`` > 1.  Returns nested lists of PeriodicOrbit,
    SnapshotBlock and (when ``fine_points`` is set) fine-partition state
    arrays, with None entries where the orbit did not converge.
    """
    tasks = [(model, n_elems, domain, row, M, icfg, period_rtol,
              perturbation_amplitude, finder_kwargs, fine_points)
             for row in param_rows]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as ex:
            results = list(ex.map(_orbit_chain_task, tasks))
    else:
        results = [_orbit_chain_task(t) for t in tasks]
    orbits = [[orb for orb, _, _ in row] for row in results]
    blocks = [[blk for _, blk, _ in row] for row in results]
    fines = [[fs for _, _, fs in row] for row in results]
    return orbits, blocks, fines


# ---------------------------------------------------------------------------
# fine-partition error measurement


def fom_fine_states(sys: SemidiscreteSystem, orbit: PeriodicOrbit,
                    n_points: int, icfg: IntegratorConfig) -> np.ndarray:
    ode = sys.ode(orbit.param)
    out_t = orbit.period * np.arange(n_points) / (n_points - 1)
    traj = integrate(ode.rhs, ode.jac, orbit.initial_state, (0.0, orbit.period),
                     config=icfg, output_times=out_t)
    return traj.states


def rom_fine_lifted(ops: RomOperators, rom_orbit: PeriodicOrbit,
                    n_points: int, icfg: IntegratorConfig) -> np.ndarray:
    out_t = rom_orbit.period * np.arange(n_points) / (n_points - 1)
    traj = integrate_rom(ops, rom_orbit.param, rom_orbit.initial_state,
                         (0.0, rom_orbit.period), config=icfg, output_times=out_t)
    return traj.states @ ops.Phi.T


def error_report(sys: SemidiscreteSystem, basis: PodBasis, r: int,
                 fom_orbit: PeriodicOrbit, fom_states: np.ndarray,
                 rom_lifted: np.ndarray | None, M: int) -> ErrorReport:
    """Errors over the fine partition of the full-order period.

    ``fom_states`` and ``rom_lifted`` must be sampled on matching fine
    partitions of the respective periods (index-aligned; the reduced time
    axis is the rescaled one).  ``rom_lifted`` may be None to measure the
    projection error only.
    """
    n_points = fom_states.shape[0]
    if (n_points - 1) % M:
        raise ValueError("fine partition must contain the snapshot times")
    times = fom_orbit.period * np.arange(n_points) / (n_points - 1)
    proj = np.empty_like(fom_states)
    for i in range(n_points):
        proj[i] = project_h01(basis, r, fom_states[i])
    eps = fom_states - proj
    ncomp = sys.model.n_components
    eps_h1 = np.sqrt(_norms_sq(sys.A, eps, ncomp))
    eps_l2 = np.sqrt(_norms_sq(sys.M, eps, ncomp))
    if rom_lifted is not None:
        if rom_lifted.shape != fom_states.shape:
            raise ValueError("reduced trajectory shape mismatch")
        err = fom_states - rom_lifted
        e_h1 = np.sqrt(_norms_sq(sys.A, err, ncomp))
        e_l2 = np.sqrt(_norms_sq(sys.M, err, ncomp))
    else:
        e_h1 = np.full(n_points, np.nan)
        e_l2 = np.full(n_points, np.nan)
    snap_idx = np.arange(M + 1) * ((n_points - 1) // M)
    return ErrorReport(fom_orbit.param, r, times, eps_h1, eps_l2, e_h1, e_l2, snap_idx)


def _unconverged_orbit(p: ParamPoint, a_init: np.ndarray) -> PeriodicOrbit:
    return PeriodicOrbit(param=p, period=float("nan"), initial_state=a_init,
                         t_anchor=float("nan"), n_transient_periods=0,
                         converged=False, last_relative_period_change=float("inf"),
                         amplitude=float("nan"))


def compute_rom_orbit(ops: RomOperators, p: ParamPoint,
                      icfg: IntegratorConfig, period_rtol: float,
                      perturbation_amplitude: float = 1e-2,
                      warm_state: np.ndarray | None = None,
                      **finder_kwargs) -> PeriodicOrbit:
    """Reduced orbit started from the projected equilibrium perturbation."""
    if warm_state is not None:
        a0 = warm_state
    else:
        a0 = ops.restrict_initial(
            ops.sys.default_perturbation(perturbation_amplitude))
    return rom_periodic_orbit(ops, p, a0, period_rtol=period_rtol,
                              config=icfg, **finder_kwargs)


def _rom_cell_task(args):
    (ops, params, icfg, period_rtol, ampl, n_fine, finder_kwargs) = args
    out = []
    warm = None
    for p in params:
        orbit = compute_rom_orbit(ops, p, icfg, period_rtol, ampl,
                                  warm_state=warm, **finder_kwargs)
        lifted = None
        if orbit.converged:
            warm = orbit.initial_state
            lifted = rom_fine_lifted(ops, orbit, n_fine, icfg)
        out.append((orbit, lifted))
    return out


def compute_rom_rows(ops: RomOperators, param_rows: list[list[ParamPoint]],
                     icfg: IntegratorConfig, period_rtol: float,
                     perturbation_amplitude: float, n_fine: int,
                     threads: int = 1, **finder_kwargs):
    tasks = [(ops, row, icfg, period_rtol, perturbation_amplitude, n_fine,
              finder_kwargs) for row in param_rows]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as ex:
            results = list(ex.map(_rom_cell_task, tasks))
    else:
        results = [_rom_cell_task(t) for t in tasks]
    return results


# ---------------------------------------------------------------------------
# Table 1 / Table 2 pipeline


@dataclass
class TablePipeline:
    """Everything the one-parameter table runs share."""

    sys: SemidiscreteSystem
    orbits: list[PeriodicOrbit]
    blocks: list[SnapshotBlock]
    basis_new: PodBasis
    basis_std: PodBasis | None
    fine_states: list[np.ndarray]
    M: int
    icfg: IntegratorConfig
    dcfg: DiagnosticsConfig


def build_table_pipeline(model: ParametricModel, alphas, n_elems: int, M: int,
                         icfg: IntegratorConfig, dcfg: DiagnosticsConfig,
                         period_rtol: float = 1e-7,
                         perturbation_amplitude: float = 1e-2,
                         with_standard: bool = True, threads: int = 1,
                         domain=(0.0, 1.0), beta2: float | None = None) -> TablePipeline:
    params = [ParamPoint(float(a), beta2) for a in alphas]
    orbits_rows, blocks_rows, fine_rows = compute_block_rows(
        model, n_elems, domain, [[p] for p in params], M, icfg, period_rtol,
        perturbation_amplitude, threads=threads,
        fine_points=dcfg.fine_partition_points)
    orbits = [row[0] for row in orbits_rows]
    blocks = [row[0] for row in blocks_rows]
    fine = [row[0] for row in fine_rows]
    bad = [o.param for o in orbits if not o.converged]
    if bad:
        raise IntegrationError(f"unconverged full-order orbits at {bad}")
    sys = build_system(model, n_elems, domain)
    extra = {"n_components": model.n_components, "mesh_n_elems": n_elems,
             "domain_a": domain[0], "domain_b": domain[1],
             "bc_left": model.bc_left, "bc_right": model.bc_right,
             "model": model.name}
    sset = build_set_new_1p(blocks, extra)
    basis_new = pod_modes(sset, eigendecompose(correlation_matrix(sset, sys.A)), sys.A)
    basis_std = None
    if with_standard:
        sset_std = build_set_standard(blocks, extra)
        basis_std = pod_modes(sset_std, eigendecompose(correlation_matrix(sset_std, sys.A)), sys.A)
    return TablePipeline(sys, orbits, blocks, basis_new, basis_std, fine, M,
                         icfg, dcfg)


def table_error_rows(pipe: TablePipeline, r_values, period_rtol_rom: float = 1e-8,
                     perturbation_amplitude: float = 1e-2, threads: int = 1,
                     basis: PodBasis | None = None, with_rom: bool = True):
    """Aggregated maxima over the parameter grid for each mode count."""
    basis = basis or pipe.basis_new
    n_fine = pipe.dcfg.fine_partition_points
    rows = []
    reports_by_r = {}
    for r in r_values:
        if with_rom:
            ops = reduce(basis, r, pipe.sys)
            rom_rows = compute_rom_rows(ops, [[o.param] for o in pipe.orbits],
                                        pipe.icfg, period_rtol_rom,
                                        perturbation_amplitude, n_fine,
                                        threads=threads)
        reports = []
        for i, orbit in enumerate(pipe.orbits):
            lifted = None
            if with_rom:
                rom_orbit, lifted = rom_rows[i][0]
            reports.append(error_report(pipe.sys, basis, r, orbit,
                                        pipe.fine_states[i], lifted, pipe.M))
        reports_by_r[r] = reports
        sig = tail(basis.eigen, r).sigma
        rows.append({
            "r": r,
            "sigma_r": sig,
            "max_eps_h1": max(rep.max_eps_h1 for rep in reports),
            "max_e_h1": max(rep.max_e_h1 for rep in reports),
            "max_eps_h1_snap": max(rep.max_eps_h1_snap for rep in reports),
            "max_e_h1_snap": max(rep.max_e_h1_snap for rep in reports),
        })
    return rows, reports_by_r


def run_table1(model: ParametricModel, out_dir: Path | str, alphas=(2.75, 3.25, 3.75, 4.25),
               n_elems: int = 50, M: int = 64, r_values=(18, 24, 30, 36),
               m_variants=(32, 128), icfg: IntegratorConfig | None = None,
               dcfg: DiagnosticsConfig | None = None, period_rtol: float = 1e-7,
               period_rtol_rom: float = 1e-8, perturbation_amplitude: float = 1e-2,
               threads: int = 1, with_standard: bool = True,
               variants_with_rom: bool = False,
               pipeline: TablePipeline | None = None) -> dict:
    """One-parameter table reproduction: error maxima per mode count,
    plus snapshot-count variants (projection errors only by default)."""
    icfg = icfg or IntegratorConfig(rtol=1e-9, atol=1e-12)
    dcfg = dcfg or DiagnosticsConfig()
    out_dir = Path(out_dir)
    pipe = pipeline or build_table_pipeline(
        model, alphas, n_elems, M, icfg, dcfg, period_rtol,
        perturbation_amplitude, with_standard, threads)
    rows, reports = table_error_rows(pipe, r_values, period_rtol_rom,
                                     perturbation_amplitude, threads)
    table1 = write_csv(out_dir / "table1.csv",
                       ["r", "sigma_r", "max_eps_h1", "max_e_h1",
                        "max_eps_h1_snap", "max_e_h1_snap"],
                       [[row[k] for k in ("r", "sigma_r", "max_eps_h1", "max_e_h1",
                                          "max_eps_h1_snap", "max_e_h1_snap")]
                        for row in rows])
    outputs = {"table1": table1, "rows": rows, "pipeline": pipe}

    if m_variants:
        variant_rows = []
        for M2 in m_variants:
            blocks2 = [sample_block(pipe.sys, orb, M2, icfg) for orb in pipe.orbits]
            extra = {"n_components": model.n_components}
            sset2 = build_set_new_1p(blocks2, extra)
            basis2 = pod_modes(sset2, eigendecompose(correlation_matrix(sset2, pipe.sys.A)),
                               pipe.sys.A)
            pipe2 = replace_pipeline_m(pipe, M2, basis2)
            rows2, _ = table_error_rows(pipe2, r_values, period_rtol_rom,
                                        perturbation_amplitude, threads,
                                        basis=basis2, with_rom=variants_with_rom)
            for row in rows2:
                variant_rows.append([M2, row["r"], row["sigma_r"],
                                     row["max_eps_h1_snap"],
                                     row["max_e_h1_snap"] if variants_with_rom else float("nan")])
        table2 = write_csv(out_dir / "table2.csv",
                           ["M", "r", "sigma_r", "max_eps_h1_snap", "max_e_h1_snap"],
                           variant_rows)
        outputs["table2"] = table2
        outputs["table2_rows"] = variant_rows
    return outputs


def replace_pipeline_m(pipe: TablePipeline, M2: int, basis2: PodBasis) -> TablePipeline:
    """Pipeline view with a different snapshot count per period.

    The fine partition is shared, so the snapshot-time indices stay exact
    as long as (points - 1) is divisible by every M used.
    """
    if (pipe.dcfg.fine_partition_points - 1) % M2:
        raise ValueError("fine partition does not contain the variant snapshot times")
    return TablePipeline(pipe.sys, pipe.orbits, pipe.blocks, basis2, None,
                         pipe.fine_states, M2, pipe.icfg, pipe.dcfg)


# ---------------------------------------------------------------------------
# out-of-sample sweep over the first parameter


def run_beta_sweep(pipe: TablePipeline, out_dir: Path | str, r: int = 42,
                   n_values: int = 31, period_rtol: float = 1e-7,
                   period_rtol_rom: float = 1e-8,
                   perturbation_amplitude: float = 1e-2, threads: int = 1,
                   with_standard: bool = True) -> dict:
    """Reduced-vs-full periods and errors over a dense first-parameter range."""
    out_dir = Path(out_dir)
    lo = pipe.orbits[0].param.alpha
    hi = pipe.orbits[-1].param.alpha
    beta2 = pipe.orbits[0].param.beta2
    betas = np.linspace(lo, hi, n_values)
    params = [ParamPoint(float(b), beta2) for b in betas]
    n_fine = pipe.dcfg.fine_partition_points

    # full-order references, warm-started in contiguous chunks
    n_chunks = max(1, min(threads, len(params)))
    bounds = np.linspace(0, len(params), n_chunks + 1).astype(int)
    rows_of_params = [params[bounds[i]:bounds[i + 1]] for i in range(n_chunks)]
    model = pipe.sys.model
    orbit_rows, _, fine_rows = compute_block_rows(
        model, pipe.sys.mesh.n_elems, pipe.sys.mesh.domain, rows_of_params,
        pipe.M, pipe.icfg, period_rtol, perturbation_amplitude,
        threads=threads, fine_points=n_fine)
    fom_orbits = [o for row in orbit_rows for o in row]
    fom_fine = [fs for row in fine_rows for fs in row]

    ops = reduce(pipe.basis_new, r, pipe.sys)
    rom_rows = compute_rom_rows(ops, rows_of_params, pipe.icfg, period_rtol_rom,
                                perturbation_amplitude, n_fine, threads=threads)
    rom_results = [cell for row in rom_rows for cell in row]
    if with_standard and pipe.basis_std is not None:
        ops_std = reduce(pipe.basis_std, r, pipe.sys)
        rom_std_rows = compute_rom_rows(ops_std, rows_of_params, pipe.icfg,
                                        period_rtol_rom, perturbation_amplitude,
                                        n_fine, threads=threads)
        rom_std_results = [cell for row in rom_std_rows for cell in row]
    else:
        rom_std_results = [(None, None)] * len(params)

    in_sample = {o.param.alpha for o in pipe.orbits}
    rows = []
    for i, p in enumerate(params):
        fom_orbit = fom_orbits[i]
        rom_orbit, lifted = rom_results[i]
        std_orbit, std_lifted = rom_std_results[i]
        row = {"beta": p.alpha, "in_sample": int(p.alpha in in_sample),
               "fom_converged": int(fom_orbit.converged),
               "rom_converged": int(rom_orbit.converged if rom_orbit else 0),
               "T_fom": fom_orbit.period,
               "T_rom": rom_orbit.period if rom_orbit else float("nan")}
        row["period_rel_err"] = (abs(row["T_rom"] - row["T_fom"]) / row["T_fom"]
                                 if fom_orbit.converged and rom_orbit and rom_orbit.converged
                                 else float("nan"))
        if fom_orbit.converged:
            fine = fom_fine[i]
            rep = error_report(pipe.sys, pipe.basis_new, r, fom_orbit, fine,
                               lifted, pipe.M)
            row.update(max_eps_h1=rep.max_eps_h1, max_e_h1=rep.max_e_h1,
                       max_eps_l2=rep.max_eps_l2, max_e_l2=rep.max_e_l2,
                       e_over_eps_h1=rep.max_e_h1 / max(rep.max_eps_h1, 1e-300))
            if std_lifted is not None and pipe.basis_std is not None:
                rep_std = error_report(pipe.sys, pipe.basis_std, r, fom_orbit,
                                       fine, std_lifted, pipe.M)
                row.update(max_e_h1_std=rep_std.max_e_h1, max_e_l2_std=rep_std.max_e_l2,
                           period_rel_err_std=(abs(std_orbit.period - row["T_fom"]) / row["T_fom"]
                                               if std_orbit and std_orbit.converged else float("nan")))
        rows.append(row)

    header = ["beta", "in_sample", "fom_converged", "rom_converged", "T_fom",
              "T_rom", "period_rel_err", "max_eps_h1", "max_e_h1", "max_eps_l2",
              "max_e_l2", "e_over_eps_h1", "max_e_h1_std", "max_e_l2_std",
              "period_rel_err_std"]
    csv_rows = [[row.get(k, float("nan")) for k in header] for row in rows]
    path = write_csv(out_dir / "beta_sweep.csv", header, csv_rows)
    return {"csv": path, "rows": rows, "r": r}


# ---------------------------------------------------------------------------
# two-parameter pipeline


def run_two_param(out_dir: Path | str, alphas=(2.75, 3.25, 3.75, 4.25),
                  rhos=(1.0, 1.5, 2.0, 2.5), n_elems: int = 80, M: int = 64,
                  r: int | None = None, target_e_h1: float = 4e-2,
                  out_grid: int = 10, icfg: IntegratorConfig | None = None,
                  dcfg: DiagnosticsConfig | None = None,
                  period_rtol: float = 1e-7, period_rtol_rom: float = 1e-8,
                  perturbation_amplitude: float = 1e-2, threads: int = 1) -> dict:
    """Two-parameter pipeline: in-sample grid, bound check, out-of-sample sweep.

    When ``r`` is None the mode count is chosen as the smallest one whose
    in-sample reduced error stays below ``target_e_h1`` in the gradient norm.
    """
    icfg = icfg or IntegratorConfig(rtol=1e-9, atol=1e-12)
    dcfg = dcfg or DiagnosticsConfig()
    out_dir = Path(out_dir)
    model = brusselator_shifted(1.0)
    domain = (0.0, 1.0)

    grid_params = [[ParamPoint(float(a), float(rh)) for rh in rhos] for a in alphas]
    # warm chains run along the first parameter at fixed second parameter
    chains = [[grid_params[l][k] for l in range(len(alphas))] for k in range(len(rhos))]
    n_fine = dcfg.fine_partition_points
    orbit_chains, block_chains, fine_chains = compute_block_rows(
        model, n_elems, domain, chains, M, icfg, period_rtol,
        perturbation_amplitude, threads=threads, fine_points=n_fine)
    orbits = [[orbit_chains[k][l] for k in range(len(rhos))] for l in range(len(alphas))]
    blocks = [[block_chains[k][l] for k in range(len(rhos))] for l in range(len(alphas))]
    fine = [[fine_chains[k][l] for k in range(len(rhos))] for l in range(len(alphas))]
    bad = [o.param for row in orbits for o in row if not o.converged]
    if bad:
        raise IntegrationError(f"unconverged full-order orbits at {bad}")

    sys = build_system(model, n_elems, domain)
    extra = {"n_components": model.n_components, "mesh_n_elems": n_elems,
             "domain_a": domain[0], "domain_b": domain[1],
             "bc_left": model.bc_left, "bc_right": model.bc_right,
             "model": model.name}
    sset = build_set_new_2p(blocks, extra)
    basis = pod_modes(sset, eigendecompose(correlation_matrix(sset, sys.A)), sys.A)

    def max_eps_h1(r_try: int) -> float:
        worst = 0.0
        for l in range(len(alphas)):
            for k in range(len(rhos)):
                rep = error_report(sys, basis, r_try, orbits[l][k], fine[l][k], None, M)
                worst = max(worst, rep.max_eps_h1)
        return worst

    if r is None:
        candidates = [rr for rr in range(8, basis.d_r + 1, 2)]
        r = next((rr for rr in candidates if max_eps_h1(rr) <= target_e_h1 / 2.5),
                 basis.d_r)
        logger.info("two-parameter run selected r=%d", r)

    # in-sample reduced errors
    flat_params = [orbits[l][k].param for l in range(len(alphas)) for k in range(len(rhos))]
    ops = reduce(basis, r, sys)
    rom_rows = compute_rom_rows(ops, [[p] for p in flat_params], icfg,
                                period_rtol_rom, perturbation_amplitude, n_fine,
                                threads=threads)
    in_rows = []
    worst_e = 0.0
    for idx, p in enumerate(flat_params):
        l, k = divmod(idx, len(rhos))
        rom_orbit, lifted = rom_rows[idx][0]
        rep = error_report(sys, basis, r, orbits[l][k], fine[l][k], lifted, M)
        ratio = rep.max_e_h1 / max(rep.max_eps_h1, 1e-300)
        worst_e = max(worst_e, rep.max_e_h1)
        in_rows.append([p.alpha, p.beta2, orbits[l][k].period,
                        rom_orbit.period if rom_orbit.converged else float("nan"),
                        abs(rom_orbit.period - orbits[l][k].period) / orbits[l][k].period
                        if rom_orbit.converged else float("nan"),
                        rep.max_eps_h1, rep.max_e_h1, ratio])
    in_csv = write_csv(out_dir / "two_param_in_sample.csv",
                       ["beta", "rho", "T_fom", "T_rom", "period_rel_err",
                        "max_eps_h1", "max_e_h1", "e_over_eps_h1"], in_rows)

    bound_h1 = verify_pointwise_bound(blocks, basis, r, "H01", "two_param")
    cp = poincare_constant(sys.M, sys.A)
    bound_l2 = verify_pointwise_bound(blocks, basis, r, "L2", "two_param",
                                      mass=sys.M, poincare_c=cp)

    # out-of-sample sweep on a uniform grid, warm rows at fixed second parameter
    betas_out = np.linspace(min(alphas), max(alphas), out_grid)
    rhos_out = np.linspace(min(rhos), max(rhos), out_grid)
    sweep_chains = [[ParamPoint(float(b), float(rh)) for b in betas_out]
                    for rh in rhos_out]
    orbit_rows_out, _, fine_rows_out = compute_block_rows(
        model, n_elems, domain, sweep_chains, M, icfg, period_rtol,
        perturbation_amplitude, threads=threads, fine_points=n_fine)
    rom_rows_out = compute_rom_rows(ops, sweep_chains, icfg, period_rtol_rom,
                                    perturbation_amplitude, n_fine, threads=threads)
    out_rows = []
    e_grid = np.full((out_grid, out_grid), np.nan)
    for ki, rh in enumerate(rhos_out):
        for bi, b in enumerate(betas_out):
            fom_orbit = orbit_rows_out[ki][bi]
            rom_orbit, lifted = rom_rows_out[ki][bi]
            row = [b, rh, int(fom_orbit.converged),
                   int(rom_orbit.converged if rom_orbit else 0),
                   fom_orbit.period,
                   rom_orbit.period if rom_orbit and rom_orbit.converged else float("nan")]
            if fom_orbit.converged and rom_orbit and rom_orbit.converged:
                row.append(abs(rom_orbit.period - fom_orbit.period) / fom_orbit.period)
                fstates = fine_rows_out[ki][bi]
                rep = error_report(sys, basis, r, fom_orbit, fstates, lifted, M)
                row.extend([rep.max_e_h1, rep.max_e_l2])
                e_grid[ki, bi] = rep.max_e_h1
            else:
                row.extend([float("nan")] * 3)
            out_rows.append(row)
    out_csv = write_csv(out_dir / "two_param_out_of_sample.csv",
                        ["beta", "rho", "fom_converged", "rom_converged",
                         "T_fom", "T_rom", "period_rel_err", "max_e_h1",
                         "max_e_l2"], out_rows)

    continuity_ok = True
    for ki in range(out_grid):
        for bi in range(out_grid):
            here = e_grid[ki, bi]
            if not np.isfinite(here):
                continuity_ok = False
                continue
            for dk, db in ((0, 1), (1, 0)):
                k2, b2 = ki + dk, bi + db
                if k2 < out_grid and b2 < out_grid and np.isfinite(e_grid[k2, b2]):
                    hi = max(here, e_grid[k2, b2])
                    lo = max(min(here, e_grid[k2, b2]), 1e-300)
                    if hi / lo >= 10.0:
                        continuity_ok = False

    return {"in_csv": in_csv, "out_csv": out_csv, "in_rows": in_rows,
            "out_rows": out_rows, "r": r, "basis": basis, "bound_h1": bound_h1,
            "bound_l2": bound_l2, "max_in_sample_e_h1": worst_e,
            "continuity_ok": continuity_ok, "e_grid": e_grid,
            "blocks": blocks, "sys": sys}


# ---------------------------------------------------------------------------
# Lipschitz-model bound check


def _simpson_cumulative(values: np.ndarray, dt: float, stride: int) -> np.ndarray:
    """Composite Simpson integrals over [0, i*stride*dt] for each checkpoint."""
    n = values.size - 1
    if n % 2 or stride % 2:
        raise ValueError("Simpson needs an even panel count")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    out = []
    for i in range(0, n + 1, stride):
        if i == 0:
            out.append(0.0)
            continue
        wi = np.ones(i + 1)
        wi[1:-1:2] = 4.0
        wi[2:-1:2] = 2.0
        out.append(float((wi * values[:i + 1]).sum() * dt / 3.0))
    return np.asarray(out)


def lipschitz_blocks(model: ParametricModel, alphas, n_elems: int, M: int,
                     T: float, icfg: IntegratorConfig) -> tuple[SemidiscreteSystem, list[SnapshotBlock]]:
    """Snapshot blocks of the scalar model on a fixed interval (no orbits)."""
    sys = build_system(model, n_elems)
    blocks = []
    for a in alphas:
        p = ParamPoint(float(a))
        ode = sys.ode(p)
        out_t = T * np.arange(M + 1) / M
        traj = integrate(ode.rhs, ode.jac, sys.initial_state(p), (0.0, T),
                         config=icfg, output_times=out_t, derivs=True)
        blocks.append(SnapshotBlock(p, T, out_t, traj.states, traj.derivs))
    return sys, blocks


def verify_theorem_bound(out_dir: Path | str, c_values=(0.0, 0.5),
                         alphas=(0.8, 1.0, 1.2), n_elems: int = 32, M: int = 8,
                         T: float = 1.0, r: int | None = None, nu: float = 1.0,
                         n_checkpoints: int = 32, n_panels: int = 2048,
                         icfg: IntegratorConfig | None = None) -> dict:
    """Empirical check of the reduced-vs-projected trajectory bound.

    For each reaction coefficient the reduced run starts on the projected
    initial state; the bound's two integral terms are evaluated by composite
    Simpson on a shared fine grid and the inequality is checked at equally
    spaced checkpoints.  The initial-gap term enters through the larger of
    its plain and squared forms.
    """
    icfg = icfg or IntegratorConfig(rtol=1e-9, atol=1e-12)
    out_dir = Path(out_dir)
    if n_panels % n_checkpoints:
        raise ValueError("checkpoints must divide the panel count")
    stride = n_panels // n_checkpoints
    rows = []
    results = []
    for c in c_values:
        model = scalar_lipschitz(c=c, nu=nu)
        sys, blocks = lipschitz_blocks(model, alphas, n_elems, M, T, icfg)
        extra = {"n_components": 1}
        sset = build_set_new_1p(blocks, extra)
        basis = pod_modes(sset, eigendecompose(correlation_matrix(sset, sys.A)), sys.A)
        r_eff = r if r is not None else max(1, basis.d_r - 4)
        ops = reduce(basis, r_eff, sys)

        L = model.lipschitz_bound
        K = 2.0 / T + 2.0 * L
        tgrid = T * np.arange(n_panels + 1) / n_panels
        dt = T / n_panels
        for a in alphas:
            p = ParamPoint(float(a))
            ode = sys.ode(p)
            fom = integrate(ode.rhs, ode.jac, sys.initial_state(p), (0.0, T),
                            config=icfg, output_times=tgrid, derivs=True)
            a0 = ops.restrict_initial(fom.states[0])
            rom = integrate_rom(ops, p, a0, (0.0, T), config=icfg,
                                output_times=tgrid)
            lifted = rom.states @ ops.Phi.T

            proj = np.empty_like(fom.states)
            proj_dt = np.empty_like(fom.states)
            for i in range(tgrid.size):
                proj[i] = project_h01(basis, r_eff, fom.states[i])
                udot = sys.mass_solve(fom.derivs[i])
                proj_dt[i] = udot - project_h01(basis, r_eff, udot)
            diff = lifted - proj
            diff_l2_sq = _norms_sq(sys.M, diff, 1)
            diff_h1_sq = _norms_sq(sys.A, diff, 1)
            eps_l2_sq = _norms_sq(sys.M, fom.states - proj, 1)
            epsdot_l2_sq = _norms_sq(sys.M, proj_dt, 1)

            int_h1 = _simpson_cumulative(diff_h1_sq, dt, stride)
            int_epsdot = _simpson_cumulative(epsdot_l2_sq, dt, stride)
            int_eps = _simpson_cumulative(eps_l2_sq, dt, stride)
            checkpoints = tgrid[::stride]
            delta0 = np.sqrt(diff_l2_sq[0])
            nu_p = model.diffusion(p)
            lhs = diff_l2_sq[::stride] + 2.0 * nu_p * int_h1
            init_term = max(delta0, delta0 ** 2)
            rhs = np.exp(K * checkpoints) * (
                init_term + T * (int_epsdot + L ** 2 * int_eps))
            ok = bool(np.all(lhs[1:] <= rhs[1:]))
            worst = float(np.max(lhs[1:] / np.maximum(rhs[1:], 1e-300)))
            results.append({"c": c, "alpha": a, "r": r_eff, "ok": ok,
                            "worst_ratio": worst})
            for i, t in enumerate(checkpoints):
                rows.append([c, a, r_eff, t, lhs[i], rhs[i],
                             lhs[i] / max(rhs[i], 1e-300)])
    path = write_csv(out_dir / "lipschitz_bound.csv",
                     ["c", "alpha", "r", "t", "lhs", "rhs", "ratio"], rows)
    return {"csv": path, "results": results}


# ---------------------------------------------------------------------------
# mesh self-comparison


def prolong_states(states: np.ndarray, sys_from: SemidiscreteSystem,
                   sys_to: SemidiscreteSystem) -> np.ndarray:
    """Evaluate coarse-mesh states at the fine mesh's free nodes (exact for
    nested uniform refinements of quadratic elements)."""
    xs = sys_to.mesh.node_coords[sys_to.bc.free_dofs]
    out = np.empty((states.shape[0], sys_to.n))
    for i in range(states.shape[0]):
        f = sys_from.field(states[i])
        out[i] = evaluate_field(f, xs).ravel()
    return out


def fem_self_convergence(out_dir: Path | str, model: ParametricModel,
                         alphas=(2.75, 3.25, 3.75, 4.25), n_elems: int = 50,
                         beta2: float | None = None,
                         icfg: IntegratorConfig | None = None,
                         n_fine: int = 2049, period_rtol: float = 1e-7,
                         perturbation_amplitude: float = 1e-2,
                         threads: int = 1, extra_level: bool = False) -> dict:
    """Orbit differences between a mesh and its uniform refinement."""
    icfg = icfg or IntegratorConfig(rtol=1e-9, atol=1e-12)
    out_dir = Path(out_dir)
    levels = [n_elems, 2 * n_elems] + ([4 * n_elems] if extra_level else [])
    params = [ParamPoint(float(a), beta2) for a in alphas]
    systems = {ne: build_system(model, ne) for ne in levels}
    orbits = {}
    states = {}
    for ne in levels:
        orows, _, frows = compute_block_rows(
            model, ne, (0.0, 1.0), [[p] for p in params], 1, icfg, period_rtol,
            perturbation_amplitude, threads=threads, fine_points=n_fine)
        orbits[ne] = [row[0] for row in orows]
        states[ne] = [row[0] for row in frows]
    rows = []
    for pair in zip(levels[:-1], levels[1:]):
        coarse, fined = pair
        for i, p in enumerate(params):
            cs = prolong_states(states[coarse][i], systems[coarse], systems[fined])
            diff = cs - states[fined][i]
            ncomp = model.n_components
            dl2 = np.sqrt(_norms_sq(systems[fined].M, diff, ncomp)).max()
            dh1 = np.sqrt(_norms_sq(systems[fined].A, diff, ncomp)).max()
            rows.append([coarse, fined, p.alpha, orbits[coarse][i].period,
                         orbits[fined][i].period, dl2, dh1])
    path = write_csv(out_dir / "fem_self_convergence.csv",
                     ["n_elems_coarse", "n_elems_fine", "beta", "T_coarse",
                      "T_fine", "max_diff_l2", "max_diff_h1"], rows)
    return {"csv": path, "rows": rows}

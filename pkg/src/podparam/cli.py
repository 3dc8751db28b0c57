"""Command-line pipeline: orbits -> basis -> reduced runs -> verify/report.

Stages exchange artifacts on disk so the expensive full-order solves are
cached across experiments.  Configuration files are line-oriented
key=value text (with ``include=`` support); every stage revalidates the
grid against the declared parameter boxes.

Exit codes: 0 success, 1 validation failure or failed verification,
2 unconverged orbit without --allow-partial, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys as _sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .integrate import IntegratorConfig, PeriodicOrbit
from .mesh_fem import assemble_mass, poincare_constant
from .models import ParamPoint, ParametricModel, brusselator_shifted, build_system, scalar_lipschitz
from .pod_basis import (
    PodBasis,
    correlation_matrix,
    eigendecompose,
    load_basis,
    pod_modes,
    save_basis,
    tail,
    verify_pointwise_bound,
    verify_tail_identity,
    verify_tier_identity,
    whitened_svd_spectrum,
)
from .rom import reduce
from .snapshots import (
    SnapshotSet,
    blocks_as_plain_set,
    blocks_from_plain_set,
    build_set_new_1p,
    build_set_new_2p,
    build_set_standard,
    load_set,
    save_set,
)
from .store import StoreError, read_kv_file, write_kv_file, fmt_float

logger = logging.getLogger(__name__)


class ValidationError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


def _parse_grid(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    if text.startswith("linspace:"):
        _, lo, hi, n = text.split(":")
        return [float(x) for x in np.linspace(float(lo), float(hi), int(n))]
    return [float(x) for x in text.split(",") if x.strip()]


@dataclass
class RunConfig:
    model: str = "brusselator"
    n_elems: int = 50
    alphas: list[float] = field(default_factory=lambda: [2.75, 3.25, 3.75, 4.25])
    rhos: list[float] = field(default_factory=list)
    M: int = 64
    r_values: list[int] = field(default_factory=lambda: [18, 24, 30, 36])
    method: str = "new"
    nu: float = 0.01
    alpha_const: float = 1.0
    reaction_c: float = 0.5
    fom_rtol: float = 1e-9
    fom_atol: float = 1e-12
    period_rtol: float = 1e-7
    period_rtol_rom: float = 1e-8
    perturbation_amplitude: float = 1e-2
    fine_points: int = 2049
    threads: int = 0
    desk_scale: bool = False
    out: Path = Path("runs/default")
    box_alpha: tuple[float, float] = (2.75, 4.25)
    box_beta2: tuple[float, float] = (1.0, 2.5)
    beta_sweep_n: int = 31
    sweep_r: int = 42
    out_grid: int = 30
    two_param_r: int | None = None
    final_time: float = 1.0

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        kv = read_kv_file(path, allow_include=True)
        cfg = cls()
        for key, value in kv.items():
            if key in ("alphas", "rhos"):
                setattr(cfg, key, _parse_grid(value))
            elif key == "r":
                cfg.r_values = [int(x) for x in value.split(",")]
            elif key in ("box_alpha", "box_beta2"):
                lo, hi = (float(x) for x in value.split(","))
                setattr(cfg, key, (lo, hi))
            elif key == "out":
                cfg.out = Path(value)
            elif key in ("n_elems", "M", "threads", "fine_points", "beta_sweep_n",
                         "sweep_r", "out_grid", "two_param_r"):
                setattr(cfg, key, int(value))
            elif key == "desk_scale":
                cfg.desk_scale = value.strip() in ("1", "true", "yes")
            elif key in ("model", "method"):
                setattr(cfg, key, value)
            elif key in ("nu", "alpha_const", "reaction_c", "fom_rtol", "fom_atol",
                         "period_rtol", "period_rtol_rom", "perturbation_amplitude",
                         "final_time"):
                setattr(cfg, key, float(value))
            else:
                raise ValidationError(f"unknown configuration key {key!r}")
        return cfg

    def validate(self) -> None:
        if self.model not in ("brusselator", "scalar_lipschitz"):
            raise ValidationError(f"unknown model {self.model!r}")
        if self.method not in ("new", "standard", "new2p"):
            raise ValidationError(f"unknown method {self.method!r}")
        if self.model == "brusselator":
            lo, hi = self.box_alpha
            for a in self.alphas:
                if not lo <= a <= hi:
                    raise ValidationError(
                        f"first parameter {a} outside the declared box [{lo},{hi}]")
            lo2, hi2 = self.box_beta2
            for rh in self.rhos:
                if not lo2 <= rh <= hi2:
                    raise ValidationError(
                        f"second parameter {rh} outside the declared box [{lo2},{hi2}]")
        if self.method == "new2p" and not self.rhos:
            raise ValidationError("two-parameter method needs a second-parameter grid")
        n_blocks = max(len(self.alphas), 1) * max(len(self.rhos), 1)
        if any(r > (self.M + 1) * n_blocks for r in self.r_values):
            raise ValidationError("requested r exceeds the snapshot count")

    def integrator_config(self) -> IntegratorConfig:
        return IntegratorConfig(rtol=self.fom_rtol, atol=self.fom_atol)

    def effective_threads(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)

    def build_model(self) -> ParametricModel:
        if self.model == "brusselator":
            return brusselator_shifted(self.alpha_const, nu=self.nu)
        return scalar_lipschitz(c=self.reaction_c, nu=self.nu)

    def config_hash(self) -> str:
        keys = (self.model, self.n_elems, tuple(self.alphas), tuple(self.rhos),
                self.M, self.nu, self.alpha_const, self.reaction_c,
                self.fom_rtol, self.fom_atol, self.period_rtol,
                self.perturbation_amplitude, self.final_time)
        return hashlib.sha256(repr(keys).encode()).hexdigest()[:16]

    def model_meta(self) -> dict:
        return {
            "model": self.model,
            "n_components": 2 if self.model == "brusselator" else 1,
            "mesh_n_elems": self.n_elems,
            "domain_a": 0.0, "domain_b": 1.0,
            "fom_rtol": self.fom_rtol, "fom_atol": self.fom_atol,
            "period_rtol": self.period_rtol,
            "weights_policy": "tiered-sqrt",
            "perturbation": f"{self.perturbation_amplitude}*interpolated bc-compatible bump",
            "config_hash": self.config_hash(),
        }


def _out_dir(cfg: RunConfig, args) -> Path:
    env = os.environ.get("POD_PARAM_OUT")
    if args.out:
        return Path(args.out)
    if env:
        return Path(env)
    return cfg.out


def _param_grid(cfg: RunConfig) -> list[list[ParamPoint]]:
    """Warm-start chains: one per second-parameter value (or singletons)."""
    if cfg.rhos:
        return [[ParamPoint(a, rh) for a in cfg.alphas] for rh in cfg.rhos]
    return [[ParamPoint(a)] for a in cfg.alphas]


def cmd_fom_orbits(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    store = out / "blocks"
    if store.exists() and not args.force:
        try:
            existing = load_set(store)
            if existing.meta.get("config_hash") == cfg.config_hash():
                print(f"fom-orbits: up-to-date store at {store}, skipping "
                      "(use --force to recompute)")
                return 0
        except (StoreError, FileNotFoundError):
            pass

    model = cfg.build_model()
    icfg = cfg.integrator_config()
    if cfg.model == "scalar_lipschitz":
        _, blocks = analysis.lipschitz_blocks(model, cfg.alphas, cfg.n_elems,
                                              cfg.M, cfg.final_time, icfg)
        orbits = []
        nested = blocks
    else:
        chains = _param_grid(cfg)
        orbit_rows, block_rows, _ = analysis.compute_block_rows(
            model, cfg.n_elems, (0.0, 1.0), chains, cfg.M, icfg,
            cfg.period_rtol, cfg.perturbation_amplitude,
            threads=cfg.effective_threads())
        orbits = [o for row in orbit_rows for o in row]
        bad = [o.param for o in orbits if not o.converged]
        for o in orbits:
            flag = "ok" if o.converged else "NOT CONVERGED"
            print(f"orbit {o.param}: T={o.period:.8g} [{flag}]")
        if bad and not args.allow_partial:
            print(f"fom-orbits: {len(bad)} unconverged orbit(s); "
                  "rerun with --allow-partial to store the rest")
            return 2
        if bad:
            raise ValidationError("cannot persist a grid with missing blocks")
        if cfg.rhos:
            nested = [[block_rows[k][l] for k in range(len(cfg.rhos))]
                      for l in range(len(cfg.alphas))]
        else:
            nested = [row[0] for row in block_rows]
    sset = blocks_as_plain_set(nested, cfg.model_meta())
    save_set(sset, store)
    print(f"fom-orbits: wrote {sset.n} snapshots to {store}")
    return 0


def _load_blocks(out: Path):
    store = out / "blocks"
    if not (store / "manifest.txt").exists():
        raise MissingArtifactError(str(store / "manifest.txt"))
    return blocks_from_plain_set(load_set(store)), load_set(store).meta


def _basis_dir(out: Path, method: str) -> Path:
    return out / f"basis_{method}"


def cmd_build_basis(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    method = args.method or cfg.method
    blocks, meta = _load_blocks(out)
    model = cfg.build_model()
    system = build_system(model, cfg.n_elems)
    extra = cfg.model_meta()
    extra.update(bc_left=model.bc_left, bc_right=model.bc_right)
    if method == "new":
        if isinstance(blocks[0], list):
            raise ValidationError("one-parameter method on a two-parameter store")
        sset = build_set_new_1p(blocks, extra)
    elif method == "standard":
        if isinstance(blocks[0], list):
            raise ValidationError("standard method on a two-parameter store")
        sset = build_set_standard(blocks, extra)
    else:
        if not isinstance(blocks[0], list):
            raise ValidationError("two-parameter method on a one-parameter store")
        sset = build_set_new_2p(blocks, extra)
    save_set(sset, out / f"set_{method}")
    basis = pod_modes(sset, eigendecompose(correlation_matrix(sset, system.A)),
                      system.A)
    save_basis(basis, _basis_dir(out, method))
    print(f"build-basis: method={method} N={sset.n} d_r={basis.d_r} "
          f"-> {_basis_dir(out, method)}")
    return 0


def _load_basis_checked(out: Path, method: str) -> PodBasis:
    bdir = _basis_dir(out, method)
    if not (bdir / "manifest.txt").exists():
        raise MissingArtifactError(str(bdir / "manifest.txt"))
    return load_basis(bdir)


def cmd_run_rom(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    method = args.method or cfg.method
    basis = _load_basis_checked(out, method)
    model = cfg.build_model()
    system = build_system(model, cfg.n_elems)
    icfg = cfg.integrator_config()
    r = args.r or max(rv for rv in cfg.r_values)
    ops = reduce(basis, r, system)
    if args.beta is not None:
        points = [ParamPoint(args.beta, args.rho)]
    else:
        points = [p for row in _param_grid(cfg) for p in row]
    rows = []
    for p in points:
        orbit = analysis.compute_rom_orbit(ops, p, icfg, cfg.period_rtol_rom,
                                           cfg.perturbation_amplitude)
        rows.append([p.alpha, p.beta2 if p.beta2 is not None else "",
                     r, orbit.period, int(orbit.converged),
                     orbit.last_relative_period_change])
        print(f"run-rom {p}: r={r} T={orbit.period:.8g} converged={orbit.converged}")
    csv_path = out / "rom_orbits.csv"
    header_needed = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        if header_needed:
            fh.write("alpha,beta2,r,period,converged,last_rel_change\n")
        for row in rows:
            fh.write(",".join(str(c) if isinstance(c, (str, int)) else f"{c:.9g}"
                              for c in row) + "\n")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    method = args.method or cfg.method
    set_dir = out / f"set_{method}"
    if not (set_dir / "manifest.txt").exists():
        raise MissingArtifactError(str(set_dir / "manifest.txt"))
    sset = load_set(set_dir)
    model = cfg.build_model()
    system = build_system(model, cfg.n_elems)
    basis = pod_modes(sset, eigendecompose(correlation_matrix(sset, system.A)),
                      system.A)
    blocks, _ = _load_blocks(out)
    failures = 0

    def check(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
        failures += 0 if ok else 1

    lam1 = basis.eigen.lambdas[0]
    noise = 1e-11 * lam1 * max(sset.n, 1)
    for r in sorted({1, max(basis.d_r // 2, 1), max(basis.d_r - 1, 1)}):
        res = verify_tail_identity(sset, basis, r)
        abs_res = res * max(tail(basis.eigen, r).sigma_sq, 1e-300)
        ok = res <= 1e-8 or abs_res <= noise
        check(f"tail identity r={r}", ok, f"rel={res:.2e}")
        if basis.meta.get("method") in ("new_1p", "new_2p"):
            res2 = verify_tier_identity(sset, basis, r)
            abs2 = res2 * max(tail(basis.eigen, r).sigma_sq, 1e-300)
            check(f"tier identity r={r}", res2 <= 1e-8 or abs2 <= noise,
                  f"rel={res2:.2e}")

    lam_svd = whitened_svd_spectrum(sset, system.A)
    mask = basis.eigen.lambdas > 1e-8 * lam1
    rel = np.abs(basis.eigen.lambdas[mask] - lam_svd[:mask.sum()]) / lam_svd[:mask.sum()]
    check("eigen oracle", bool(rel.max() <= 1e-10), f"max rel={rel.max():.2e}")

    gram_off = np.abs(basis.gram - np.eye(basis.d_r)).max()
    check("mode orthonormality", bool(gram_off <= 1e-10), f"off={gram_off:.2e}")

    if basis.meta.get("method") in ("new_1p", "new_2p"):
        variant = "one_param" if basis.meta["method"] == "new_1p" else "two_param"
        r_mid = max(basis.d_r // 2, 1)
        rep = verify_pointwise_bound(blocks, basis, r_mid, "H01", variant)
        check(f"pointwise bound H01 r={r_mid}", rep["ratio"] <= 1.0,
              f"ratio={rep['ratio']:.3e}")
        cp = poincare_constant(system.M, system.A)
        repl = verify_pointwise_bound(blocks, basis, r_mid, "L2", variant,
                                      mass=system.M, poincare_c=cp)
        check(f"pointwise bound L2 r={r_mid}", repl["ratio"] <= 1.0,
              f"ratio={repl['ratio']:.3e}")

    if model.lipschitz_bound is not None:
        res = analysis.verify_theorem_bound(out / "reports",
                                            c_values=(0.0, cfg.reaction_c),
                                            alphas=cfg.alphas, n_elems=cfg.n_elems,
                                            M=cfg.M, T=cfg.final_time,
                                            icfg=cfg.integrator_config())
        ok = all(item["ok"] for item in res["results"])
        worst = max(item["worst_ratio"] for item in res["results"])
        check("trajectory error bound", ok, f"worst lhs/rhs={worst:.3e}")
    else:
        print("[SKIP] trajectory error bound: model has no Lipschitz constant")

    print(f"verify: {failures} failure(s)")
    return 0 if failures == 0 else 1


def cmd_report(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    reports = out / "reports"
    model = cfg.build_model()
    icfg = cfg.integrator_config()
    dcfg = analysis.DiagnosticsConfig(fine_partition_points=cfg.fine_points)
    threads = cfg.effective_threads()
    did_something = False

    if args.table1 or args.table2:
        res = analysis.run_table1(
            model, reports, alphas=cfg.alphas, n_elems=cfg.n_elems, M=cfg.M,
            r_values=cfg.r_values, m_variants=(32, 128) if args.table2 else (),
            icfg=icfg, dcfg=dcfg, period_rtol=cfg.period_rtol,
            period_rtol_rom=cfg.period_rtol_rom,
            perturbation_amplitude=cfg.perturbation_amplitude, threads=threads)
        print(f"report: wrote {res['table1']}")
        if "table2" in res:
            print(f"report: wrote {res['table2']}")
        did_something = True

    if args.beta_sweep:
        pipe = analysis.build_table_pipeline(
            model, cfg.alphas, cfg.n_elems, cfg.M, icfg, dcfg,
            cfg.period_rtol, cfg.perturbation_amplitude, True, threads)
        n_values = 7 if cfg.desk_scale else cfg.beta_sweep_n
        res = analysis.run_beta_sweep(pipe, reports, r=cfg.sweep_r,
                                      n_values=n_values,
                                      period_rtol=cfg.period_rtol,
                                      period_rtol_rom=cfg.period_rtol_rom,
                                      perturbation_amplitude=cfg.perturbation_amplitude,
                                      threads=threads)
        print(f"report: wrote {res['csv']}")
        did_something = True

    if args.two_param:
        out_grid = 10 if cfg.desk_scale else cfg.out_grid
        res = analysis.run_two_param(
            reports, alphas=cfg.alphas, rhos=cfg.rhos or (1.0, 1.5, 2.0, 2.5),
            n_elems=cfg.n_elems, M=cfg.M, r=cfg.two_param_r,
            out_grid=out_grid, icfg=icfg, dcfg=dcfg,
            period_rtol=cfg.period_rtol, period_rtol_rom=cfg.period_rtol_rom,
            perturbation_amplitude=cfg.perturbation_amplitude, threads=threads)
        print(f"report: wrote {res['in_csv']} and {res['out_csv']} (r={res['r']})")
        did_something = True

    if args.self_convergence:
        res = analysis.fem_self_convergence(
            reports, model, alphas=cfg.alphas, n_elems=cfg.n_elems, icfg=icfg,
            n_fine=cfg.fine_points, period_rtol=cfg.period_rtol,
            perturbation_amplitude=cfg.perturbation_amplitude, threads=threads)
        print(f"report: wrote {res['csv']}")
        did_something = True

    if not did_something:
        raise ValidationError("report: select at least one of --table1 --table2 "
                              "--beta-sweep --two-param --self-convergence")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="podparam",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--desk-scale", action="store_true")
        p.add_argument("--method", choices=("new", "standard", "new2p"), default=None)

    p = sub.add_parser("fom-orbits", help="compute and persist full-order orbits")
    common(p)
    p.add_argument("--force", action="store_true")
    p.add_argument("--allow-partial", action="store_true")

    p = sub.add_parser("build-basis", help="build snapshot set and basis stores")
    common(p)

    p = sub.add_parser("run-rom", help="compute reduced orbits")
    common(p)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)

    p = sub.add_parser("verify", help="run the invariant suite on the stores")
    common(p)

    p = sub.add_parser("report", help="emit table/figure CSV data")
    common(p)
    p.add_argument("--table1", action="store_true")
    p.add_argument("--table2", action="store_true")
    p.add_argument("--beta-sweep", action="store_true")
    p.add_argument("--two-param", action="store_true")
    p.add_argument("--self-convergence", action="store_true")
    return ap


_HANDLERS = {
    "fom-orbits": cmd_fom_orbits,
    "build-basis": cmd_build_basis,
    "run-rom": cmd_run_rom,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        if args.threads is not None:
            cfg.threads = args.threads
        if args.desk_scale:
            cfg.desk_scale = True
        cfg.validate()
        return _HANDLERS[args.verb](cfg, args)
    except MissingArtifactError as exc:
        print(f"error: missing upstream artifact: {exc}", file=_sys.stderr)
        return 3
    except (ValidationError, StoreError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Shared fixtures: synthetic rank-cliff snapshot data and the expensive
session-scoped pipelines the acceptance tests reuse.

Setting POD_PARAM_CACHE to a directory caches the heavy pipeline fixtures
on disk between sessions (the pipelines are deterministic); leave it unset
for a clean recomputation.
"""

from __future__ import annotations

import os
import pickle
from pathlib import Path

import numpy as np
import pytest

from podparam.analysis import DiagnosticsConfig, build_table_pipeline
from podparam.integrate import IntegratorConfig
from podparam.mesh_fem import (
    DIRICHLET,
    NEUMANN,
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    make_bc,
)
from podparam.models import ParamPoint, brusselator_shifted
from podparam.snapshots import SnapshotBlock


def _cached(name: str, builder):
    cache_root = os.environ.get("POD_PARAM_CACHE")
    if not cache_root:
        return builder()
    path = Path(cache_root) / f"{name}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    obj = builder()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(obj, fh)
    return obj


def _threads() -> int:
    return min(os.cpu_count() or 1, 8)


# ---------------------------------------------------------------------------
# synthetic rank-cliff snapshot families


class FemSpace:
    def __init__(self, n_elems=16, left=DIRICHLET, right=DIRICHLET, domain=(0.0, 1.0)):
        self.mesh = build_mesh(n_elems, domain)
        self.bc = make_bc(self.mesh, left, right)
        self.A = assemble_stiffness(self.mesh, self.bc)
        self.M = assemble_mass(self.mesh, self.bc)
        self.xs = self.mesh.node_coords


@pytest.fixture(scope="session")
def space16() -> FemSpace:
    return FemSpace(16)


def _profile_bank(space: FemSpace, rank: int) -> list[np.ndarray]:
    """bc-compatible spatial profiles spanning an exactly rank-dimensional space."""
    xs = space.xs
    out = []
    for p in range(rank):
        if space.bc.left == NEUMANN:
            prof = np.cos((p + 0.5) * np.pi * xs)
        else:
            prof = np.sin((p + 1) * np.pi * xs)
        out.append(prof[space.bc.free_dofs])
    return out


def make_block(space: FemSpace, alpha: float, period: float, M: int,
               rank: int = 6, beta2: float | None = None) -> SnapshotBlock:
    """Synthetic block whose states live in an exactly rank-dimensional space."""
    bank = _profile_bank(space, rank)
    ts = period * np.arange(M + 1) / M
    b2 = 0.0 if beta2 is None else beta2
    states = []
    for t in ts:
        coef = [np.exp(-0.3 * (p + 1) * t * alpha)
                * (1 + 0.2 * np.sin(3 * t + p + 2 * alpha + 0.7 * b2))
                * 0.5 ** p for p in range(rank)]
        states.append(sum(c * v for c, v in zip(coef, bank)))
    return SnapshotBlock(ParamPoint(alpha, beta2), period, ts, np.array(states))


def make_blocks_1p(space: FemSpace, L: int, M: int, rank: int = 6,
                   equal_periods: bool = False) -> list[SnapshotBlock]:
    return [make_block(space, 1.0 + 0.1 * l, 1.0 if equal_periods else 1.0 + 0.05 * l,
                       M, rank) for l in range(L + 1)]


def make_blocks_2p(space: FemSpace, L: int, S: int, M: int, rank: int = 6,
                   equal_periods: bool = True) -> list[list[SnapshotBlock]]:
    return [[make_block(space, 1.0 + 0.1 * l,
                        1.0 if equal_periods else 1.0 + 0.05 * l + 0.03 * k,
                        M, rank, beta2=2.0 + 0.25 * k)
             for k in range(S + 1)] for l in range(L + 1)]


@pytest.fixture(scope="session")
def blocks_1p(space16):
    return make_blocks_1p(space16, L=3, M=8)


@pytest.fixture(scope="session")
def blocks_2p(space16):
    return make_blocks_2p(space16, L=1, S=1, M=8)


# ---------------------------------------------------------------------------
# heavy Brusselator pipelines (session-scoped, shared across acceptance tests)


TABLE1_ALPHAS = (2.75, 3.25, 3.75, 4.25)


@pytest.fixture(scope="session")
def table1_pipeline():
    """Full one-parameter reproduction pipeline: h=1/50, M=64, four values."""

    def build():
        model = brusselator_shifted(1.0, nu=0.01)
        icfg = IntegratorConfig(rtol=1e-9, atol=1e-12)
        dcfg = DiagnosticsConfig(fine_partition_points=2049)
        return build_table_pipeline(model, TABLE1_ALPHAS, n_elems=50, M=64,
                                    icfg=icfg, dcfg=dcfg, period_rtol=1e-7,
                                    threads=_threads())

    return _cached("table1_pipeline_v1", build)


@pytest.fixture(scope="session")
def coarse_pipeline():
    """Small, fast pipeline for wiring-level tests (not paper values)."""

    def build():
        model = brusselator_shifted(1.0, nu=0.01)
        icfg = IntegratorConfig(rtol=1e-8, atol=1e-11)
        dcfg = DiagnosticsConfig(fine_partition_points=257)
        return build_table_pipeline(model, (3.0, 3.5, 4.0), n_elems=16, M=16,
                                    icfg=icfg, dcfg=dcfg, period_rtol=1e-7,
                                    threads=_threads())

    return _cached("coarse_pipeline_v1", build)

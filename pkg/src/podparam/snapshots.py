"""Snapshot blocks, difference quotients, and weighted snapshot sets.

Three set layouts are built from per-parameter snapshot blocks (states at
M+1 equispaced times over each block's own interval):

* the 1-parameter difference-quotient set: initial states for every
  parameter value, time quotients along the first parameter value, and
  mixed time/parameter quotients elsewhere, with tier weights sqrt(N),
  sqrt(L+1), 1;
* the plain set of raw states with unit weights;
* the 2-parameter set with first, second and third order quotients and
  tier weights sqrt(N), sqrt((L+1)(S+1)), sqrt(S+1), 1.

Blocks with unequal intervals are differenced index-against-index; a time
quotient always uses the time spacing of the block its states come from,
and parameter quotients difference those per-block quotients, so the
composition order of the quotient operators commutes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ParamPoint
from .store import (
    StoreError,
    check_digest,
    fmt_float,
    read_kv_file,
    sha256_file,
    write_array_bin,
    read_array_bin,
    write_kv_file,
)

STATES_MAGIC = b"PODSNAP1\n"

TIER_INITIAL = "initial"
TIER_DT = "dt"
TIER_DTDA = "dtdalpha"
TIER_DTDADB = "dtdalphadbeta"
TIER_PLAIN = "plain"


@dataclass
class SnapshotBlock:
    """States of one trajectory at times j*T/M, j = 0..M."""

    param: ParamPoint
    period: float
    times: np.ndarray
    states: np.ndarray  # (M + 1, ndof)
    derivs: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.times.size:
            raise ValueError("one state per time required")
        m = self.m
        expected = self.period * np.arange(m + 1) / m
        if not np.allclose(self.times, expected, rtol=1e-12, atol=1e-12 * max(self.period, 1.0)):
            raise ValueError("times must equal j*T/M")

    @property
    def m(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return self.period / self.m


def dt_quotient(block: SnapshotBlock, j: int) -> np.ndarray:
    """First-order backward time quotient at index j, 1 <= j <= M."""
    if not 1 <= j <= block.m:
        raise ValueError(f"time index {j} out of range 1..{block.m}")
    return (block.states[j] - block.states[j - 1]) / block.dt


def _param_delta(block: SnapshotBlock, other: SnapshotBlock, axis: str) -> float:
    if axis == "alpha":
        d = block.param.alpha - other.param.alpha
    else:
        if block.param.beta2 is None or other.param.beta2 is None:
            raise ValueError("blocks carry no second parameter")
        d = block.param.beta2 - other.param.beta2
    if d == 0:
        raise ValueError("parameter spacing is zero")
    return d


def dalpha_quotient(block_l: SnapshotBlock, block_lm1: SnapshotBlock, j: int,
                    axis: str = "alpha") -> np.ndarray:
    """Index-matched quotient across neighbouring parameter values."""
    if block_l.m != block_lm1.m:
        raise ValueError("blocks disagree on the number of snapshots")
    if not 0 <= j <= block_l.m:
        raise ValueError(f"time index {j} out of range 0..{block_l.m}")
    d = _param_delta(block_l, block_lm1, axis)
    return (block_l.states[j] - block_lm1.states[j]) / d


def dt_dalpha_quotient(block_l: SnapshotBlock, block_lm1: SnapshotBlock, j: int,
                       axis: str = "alpha") -> np.ndarray:
    """Mixed quotient: per-block time quotients differenced across the parameter."""
    if block_l.m != block_lm1.m:
        raise ValueError("blocks disagree on the number of snapshots")
    d = _param_delta(block_l, block_lm1, axis)
    return (dt_quotient(block_l, j) - dt_quotient(block_lm1, j)) / d


def dt_dalpha_dbeta_quotient(b_lk: SnapshotBlock, b_lm1k: SnapshotBlock,
                             b_lkm1: SnapshotBlock, b_lm1km1: SnapshotBlock,
                             j: int) -> np.ndarray:
    """Third-order quotient over time and both parameters."""
    d = _param_delta(b_lk, b_lkm1, "beta2")
    return (dt_dalpha_quotient(b_lk, b_lm1k, j)
            - dt_dalpha_quotient(b_lkm1, b_lm1km1, j)) / d


@dataclass(frozen=True)
class SnapshotMember:
    tier: str
    j: int
    l: int
    k: int | None
    weight: float


@dataclass
class SnapshotSet:
    """Ordered weighted members (rows already scaled by their tier weight)."""

    fields: np.ndarray  # (N, ndof)
    members: list[SnapshotMember]
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.fields.shape[0]

    def unweighted(self, i: int) -> np.ndarray:
        return self.fields[i] / self.members[i].weight

    def tier_indices(self, tier: str) -> list[int]:
        return [i for i, m in enumerate(self.members) if m.tier == tier]


def _grid_meta(blocks_flat: list[SnapshotBlock], M: int, L: int, S: int | None,
               method: str, extra: dict | None = None) -> dict:
    meta = {
        "method": method,
        "M": M,
        "L": L,
        "S": S,
        "params": [(b.param.alpha, b.param.beta2) for b in blocks_flat],
        "periods": [b.period for b in blocks_flat],
    }
    if extra:
        meta.update(extra)
    return meta


def _check_1p_grid(blocks: list[SnapshotBlock], min_blocks: int = 2) -> tuple[int, int]:
    if len(blocks) < min_blocks:
        raise ValueError(f"need at least {min_blocks} parameter value(s)")
    M = blocks[0].m
    if M < 1:
        raise ValueError("need at least M >= 1 time intervals")
    for b in blocks:
        if b.m != M:
            raise ValueError("all blocks must share M")
        if b.states.shape[1] != blocks[0].states.shape[1]:
            raise ValueError("all blocks must share the dof layout")
    alphas = [b.param.alpha for b in blocks]
    if np.any(np.diff(alphas) <= 0):
        raise ValueError("parameter values must increase")
    steps = np.diff(alphas)
    if steps.size and not np.allclose(steps, steps[0], rtol=1e-10, atol=0):
        raise ValueError("parameter grid must be uniform")
    return M, len(blocks) - 1


def build_set_new_1p(blocks: list[SnapshotBlock], extra_meta: dict | None = None) -> SnapshotSet:
    """Difference-quotient set over a uniform 1-parameter grid."""
    M, L = _check_1p_grid(blocks)
    N = (M + 1) * (L + 1)
    w_init = np.sqrt(N)
    w_dt = np.sqrt(L + 1)
    rows = []
    members = []
    for l in range(L + 1):
        rows.append(w_init * blocks[l].states[0])
        members.append(SnapshotMember(TIER_INITIAL, 0, l, None, w_init))
    for j in range(1, M + 1):
        rows.append(w_dt * dt_quotient(blocks[0], j))
        members.append(SnapshotMember(TIER_DT, j, 0, None, w_dt))
    for l in range(1, L + 1):
        for j in range(1, M + 1):
            rows.append(dt_dalpha_quotient(blocks[l], blocks[l - 1], j))
            members.append(SnapshotMember(TIER_DTDA, j, l, None, 1.0))
    return SnapshotSet(np.asarray(rows), members,
                       _grid_meta(blocks, M, L, None, "new_1p", extra_meta))


def build_set_standard(blocks: list[SnapshotBlock], extra_meta: dict | None = None) -> SnapshotSet:
    """Plain snapshot set: raw states, unit weights."""
    M, L = _check_1p_grid(blocks, min_blocks=1)
    rows = []
    members = []
    for l in range(L + 1):
        for j in range(M + 1):
            rows.append(blocks[l].states[j].copy())
            members.append(SnapshotMember(TIER_PLAIN, j, l, None, 1.0))
    return SnapshotSet(np.asarray(rows), members,
                       _grid_meta(blocks, M, L, None, "standard", extra_meta))


def build_set_new_2p(blocks: list[list[SnapshotBlock]],
                     extra_meta: dict | None = None) -> SnapshotSet:
    """Difference-quotient set over a uniform 2-parameter grid.

    ``blocks[l][k]`` holds the block at the l-th first-parameter value and
    k-th second-parameter value.
    """
    L = len(blocks) - 1
    if L < 1:
        raise ValueError("need L >= 1")
    S = len(blocks[0]) - 1
    if S < 1:
        raise ValueError("need S >= 1")
    if any(len(row) != S + 1 for row in blocks):
        raise ValueError("ragged block grid")
    M = blocks[0][0].m
    if M < 1:
        raise ValueError("need M >= 1")
    for row in blocks:
        for b in row:
            if b.m != M:
                raise ValueError("all blocks must share M")
    N = (M + 1) * (L + 1) * (S + 1)
    w_init = np.sqrt(N)
    w_dt = np.sqrt((L + 1) * (S + 1))
    w_da = np.sqrt(S + 1)
    rows = []
    members = []
    for l in range(L + 1):
        for k in range(S + 1):
            rows.append(w_init * blocks[l][k].states[0])
            members.append(SnapshotMember(TIER_INITIAL, 0, l, k, w_init))
    for k in range(S + 1):
        for j in range(1, M + 1):
            rows.append(w_dt * dt_quotient(blocks[0][k], j))
            members.append(SnapshotMember(TIER_DT, j, 0, k, w_dt))
    for l in range(1, L + 1):
        for j in range(1, M + 1):
            rows.append(w_da * dt_dalpha_quotient(blocks[l][0], blocks[l - 1][0], j))
            members.append(SnapshotMember(TIER_DTDA, j, l, 0, w_da))
    for l in range(1, L + 1):
        for k in range(1, S + 1):
            for j in range(1, M + 1):
                rows.append(dt_dalpha_dbeta_quotient(
                    blocks[l][k], blocks[l - 1][k], blocks[l][k - 1], blocks[l - 1][k - 1], j))
                members.append(SnapshotMember(TIER_DTDADB, j, l, k, 1.0))
    flat = [b for row in blocks for b in row]
    return SnapshotSet(np.asarray(rows), members,
                       _grid_meta(flat, M, L, S, "new_2p", extra_meta))


def blocks_as_plain_set(blocks, extra_meta: dict | None = None) -> SnapshotSet:
    """Raw block states as a plain set (used to persist FOM trajectories)."""
    if blocks and isinstance(blocks[0], list):
        M = blocks[0][0].m
        rows, members = [], []
        for l, row in enumerate(blocks):
            for k, b in enumerate(row):
                for j in range(M + 1):
                    rows.append(b.states[j].copy())
                    members.append(SnapshotMember(TIER_PLAIN, j, l, k, 1.0))
        flat = [b for row in blocks for b in row]
        meta = _grid_meta(flat, M, len(blocks) - 1, len(blocks[0]) - 1, "blocks", extra_meta)
    else:
        M = blocks[0].m
        rows, members = [], []
        for l, b in enumerate(blocks):
            for j in range(M + 1):
                rows.append(b.states[j].copy())
                members.append(SnapshotMember(TIER_PLAIN, j, l, None, 1.0))
        meta = _grid_meta(list(blocks), M, len(blocks) - 1, None, "blocks", extra_meta)
    return SnapshotSet(np.asarray(rows), members, meta)


def blocks_from_plain_set(sset: SnapshotSet):
    """Invert blocks_as_plain_set; returns a list or grid of SnapshotBlocks."""
    M = int(sset.meta["M"])
    L = int(sset.meta["L"])
    S = sset.meta.get("S")
    params = sset.meta["params"]
    periods = sset.meta["periods"]
    rows = sset.fields.reshape(-1, M + 1, sset.fields.shape[1])

    def mk(i):
        alpha, beta2 = params[i]
        T = periods[i]
        return SnapshotBlock(ParamPoint(alpha, beta2), T,
                             T * np.arange(M + 1) / M, rows[i].copy())

    if S is None:
        return [mk(l) for l in range(L + 1)]
    S = int(S)
    return [[mk(l * (S + 1) + k) for k in range(S + 1)] for l in range(L + 1)]


def save_set(sset: SnapshotSet, path: Path | str) -> None:
    """Persist a snapshot set: manifest.txt, states.bin, provenance.csv."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_array_bin(path / "states.bin", STATES_MAGIC, sset.fields)

    lines = ["index,tier,j,l,k,weight"]
    for i, m in enumerate(sset.members):
        k = "" if m.k is None else str(m.k)
        lines.append(f"{i},{m.tier},{m.j},{m.l},{k},{fmt_float(m.weight)}")
    (path / "provenance.csv").write_text("\n".join(lines) + "\n")

    meta = sset.meta
    manifest: dict[str, str] = {
        "format_version": "1",
        "kind": "snapshot_set",
        "method": str(meta.get("method", "")),
        "n_members": str(sset.n),
        "dof_len": str(sset.fields.shape[1]),
        "M": str(meta.get("M")),
        "L": str(meta.get("L")),
    }
    if meta.get("S") is not None:
        manifest["S"] = str(meta["S"])
    for key in ("n_components", "mesh_n_elems", "domain_a", "domain_b",
                "bc_left", "bc_right", "weights_policy", "fom_rtol", "fom_atol",
                "period_rtol", "perturbation", "model", "config_hash"):
        if key in meta and meta[key] is not None:
            manifest[key] = str(meta[key])
    for i, (alpha, beta2) in enumerate(meta.get("params", [])):
        manifest[f"param_alpha_{i}"] = fmt_float(alpha)
        if beta2 is not None:
            manifest[f"param_beta2_{i}"] = fmt_float(beta2)
    for i, T in enumerate(meta.get("periods", [])):
        manifest[f"period_{i}"] = fmt_float(T)
    manifest["states_sha256"] = sha256_file(path / "states.bin")
    write_kv_file(path / "manifest.txt", manifest)


def load_set(path: Path | str) -> SnapshotSet:
    path = Path(path)
    manifest = read_kv_file(path / "manifest.txt")
    if manifest.get("format_version") != "1":
        raise StoreError(f"{path}: unsupported format_version "
                         f"{manifest.get('format_version')!r}")
    if manifest.get("kind") != "snapshot_set":
        raise StoreError(f"{path}: not a snapshot set store")
    check_digest(path / "states.bin", manifest["states_sha256"])
    fields = read_array_bin(path / "states.bin", STATES_MAGIC)
    if fields.shape != (int(manifest["n_members"]), int(manifest["dof_len"])):
        raise StoreError(f"{path}: states.bin shape disagrees with manifest")

    members = []
    prov_lines = (path / "provenance.csv").read_text().splitlines()
    for line in prov_lines[1:]:
        if not line.strip():
            continue
        idx, tier, j, l, k, w = line.split(",")
        members.append(SnapshotMember(tier, int(j), int(l),
                                      int(k) if k else None, float(w)))
    if len(members) != fields.shape[0]:
        raise StoreError(f"{path}: provenance.csv disagrees with states.bin")

    n_blocks = 1 + int(manifest["L"])
    if "S" in manifest:
        n_blocks *= 1 + int(manifest["S"])
    params = []
    periods = []
    for i in range(n_blocks):
        alpha = float(manifest[f"param_alpha_{i}"])
        beta2 = manifest.get(f"param_beta2_{i}")
        params.append((alpha, float(beta2) if beta2 is not None else None))
        periods.append(float(manifest[f"period_{i}"]))
    meta = {
        "method": manifest["method"],
        "M": int(manifest["M"]),
        "L": int(manifest["L"]),
        "S": int(manifest["S"]) if "S" in manifest else None,
        "params": params,
        "periods": periods,
    }
    for key in ("n_components", "mesh_n_elems"):
        if key in manifest:
            meta[key] = int(manifest[key])
    for key in ("domain_a", "domain_b", "fom_rtol", "fom_atol", "period_rtol"):
        if key in manifest:
            meta[key] = float(manifest[key])
    for key in ("bc_left", "bc_right", "weights_policy", "perturbation",
                "model", "config_hash"):
        if key in manifest:
            meta[key] = manifest[key]
    return SnapshotSet(fields, members, meta)

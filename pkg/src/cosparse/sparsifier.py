"""Row/column scoring, aligned removal and the gradual sparsification schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .importance import estimate_importance, rank_pairs
from .model import CoupledPair, Model, coupled_pairs, param_count

log = logging.getLogger(__name__)

KINDS = ("QK", "VO", "IO")


class DegeneratePairError(ValueError):
    """All score products of a pair are zero, so the normalized scores are undefined."""


class BudgetInfeasible(RuntimeError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class ScoreVector:
    pair_id: str
    scores: np.ndarray
    block: int = 1  # inner dims per score entry (2 for RoPE query/key pairs)

    def __len__(self):
        return len(self.scores)


@dataclass
class SparsifySchedule:
    target_params: int
    top_k_fraction: float = 0.30
    theta: float = 0.90
    min_inner_dim: int = 2
    cadence: int | None = None  # optimizer steps between visits; None = once per epoch
    scoring: str = "coupled"
    kinds: tuple[str, ...] = KINDS

    def __post_init__(self):
        if self.target_params <= 0:
            raise ValueError("target_params must be positive")
        if not 0.0 < self.top_k_fraction <= 1.0:
            raise ValueError(f"top_k_fraction must lie in (0, 1], got {self.top_k_fraction}")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.min_inner_dim < 1:
            raise ValueError("min_inner_dim must be at least 1")
        if self.cadence is not None and self.cadence < 1:
            raise ValueError("cadence must be a positive step count")
        if self.scoring not in ("coupled", "uncoupled"):
            raise ValueError(f"unknown scoring {self.scoring!r}")
        self.kinds = tuple(self.kinds)
        bad = set(self.kinds) - set(KINDS)
        if bad or not self.kinds:
            raise ValueError(f"kinds must be a nonempty subset of {KINDS}, got {self.kinds}")


@dataclass
class RemovalRow:
    step: int
    pair_id: str
    kind: str
    dims_removed: int
    params_before: int
    params_after: int


@dataclass
class RemovalReport:
    step: int
    params_before: int
    params_after: int
    rows: list[RemovalRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def dims_removed(self) -> int:
        return sum(r.dims_removed for r in self.rows)


def _unit_norms(w: np.ndarray, axis: int, block: int) -> np.ndarray:
    norms = nx.column_norms(w) if axis == 1 else nx.row_norms(w)
    if block == 1:
        return norms
    # a rotation block's Frobenius norm is unchanged by any P_t
    sq = norms * norms
    return np.sqrt(sq.reshape(-1, block).sum(axis=1))


def score_pair(pair: CoupledPair) -> ScoreVector:
    """Normalized products of aligned W1-column and W2-row (QK: W2-column) norms."""
    if pair.inner_dim < 1:
        raise ValueError(f"{pair.pair_id} has no inner dimension")
    block = 2 if pair.rope else 1
    prod = _unit_norms(pair.w1, 1, block) * _unit_norms(pair.w2, pair.w2_inner_axis, block)
    total = np.linalg.norm(prod)
    if total == 0.0 or not np.isfinite(total):
        raise DegeneratePairError(f"{pair.pair_id}: all coupled norm products are zero")
    return ScoreVector(pair.pair_id, prod / total, block)


def select_removals(sv: ScoreVector, theta: float, max_removals: int | None = None) -> list[int]:
    """Smallest-first entries whose cumulative score mass stays within 1 - theta."""
    s = np.asarray(sv.scores, dtype=np.float64)
    mass = s / s.sum()
    order = np.argsort(mass, kind="stable")
    cum = np.cumsum(mass[order])
    # absorb rounding so uniform scores at theta=0.9 drop exactly 10% of the entries
    n = int(np.searchsorted(cum, (1.0 - theta) + 1e-12, side="right"))
    if max_removals is not None:
        n = min(n, max(0, max_removals))
    return [int(i) for i in order[:n]]


def _expand(units, block: int) -> np.ndarray:
    units = np.atleast_1d(np.asarray(units, dtype=np.int64))
    if block == 1:
        return units
    return (units[:, None] * block + np.arange(block)[None, :]).ravel()


def coupled_remove(pair: CoupledPair, j, optimizer=None, min_inner_dim: int = 2) -> CoupledPair:
    """Remove inner index ``j`` (or a list) from both matrices of ``pair``.

    For RoPE query/key pairs ``j`` counts 2-dim rotation blocks. Registered
    optimizer moments are sliced identically.
    """
    block = 2 if pair.rope else 1
    units = np.atleast_1d(np.asarray(j, dtype=np.int64))
    n_units = pair.inner_dim // block
    if units.size == 0:
        return pair
    if units.min() < 0 or units.max() >= n_units:
        raise IndexError(f"{pair.pair_id}: index {units.tolist()} out of range for {n_units} entries")
    dims = _expand(units, block)
    if pair.inner_dim - dims.size < min_inner_dim:
        raise ValueError(f"{pair.pair_id}: removing {dims.size} dims would go below min_inner_dim={min_inner_dim}")
    for name, axis in pair.shared_names():
        pair.model.slice_tensor(name, axis, dims, optimizer)
    return pair


def uncoupled_remove(pair: CoupledPair, count: int, optimizer=None, min_inner_dim: int = 2) -> tuple[list[int], list[int]]:
    """Ablation: drop the ``count`` smallest W1 columns and W2 rows chosen independently."""
    if len(pair.group_members) > 1:
        raise ValueError("uncoupled removal is only defined for ungrouped attention")
    block = 2 if pair.rope else 1
    if pair.inner_dim - count * block < min_inner_dim:
        raise ValueError(f"{pair.pair_id}: removal would go below min_inner_dim={min_inner_dim}")
    n1 = _unit_norms(pair.w1, 1, block)
    n2 = _unit_norms(pair.w2, pair.w2_inner_axis, block)
    u1 = np.sort(np.argsort(n1, kind="stable")[:count])
    u2 = np.sort(np.argsort(n2, kind="stable")[:count])
    d1, d2 = _expand(u1, block), _expand(u2, block)
    for name, axis in pair.shared_names():
        pair.model.slice_tensor(name, axis, d2 if name == pair.w2_name else d1, optimizer)
    return u1.tolist(), u2.tolist()


def tsvd_reference(w1: np.ndarray, w2: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-r factors (U S^1/2, S^1/2 V^T) of w1 @ w2; comparison baseline only."""
    m = nx.matmul(w1, w2)
    if not 1 <= r <= w1.shape[1]:
        raise ValueError(f"rank {r} must lie in [1, {w1.shape[1]}]")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD failed to converge: {exc}") from exc
    root = np.sqrt(s[:r])
    return u[:, :r] * root, root[:, None] * vt[:r]


def _removable_units(pair: CoupledPair, min_inner_dim: int) -> int:
    block = 2 if pair.rope else 1
    return max(0, (pair.inner_dim - min_inner_dim) // block)


def min_reachable_params(model: Model, schedule: SparsifySchedule) -> int:
    """Parameter count with every in-scope pair shrunk to the floor."""
    trial = model.copy()
    for pair in coupled_pairs(trial):
        if pair.kind not in schedule.kinds:
            continue
        n = _removable_units(pair, schedule.min_inner_dim)
        if n:
            coupled_remove(pair, list(range(n)), min_inner_dim=schedule.min_inner_dim)
    return param_count(trial)


def run_schedule_step(model: Model, optimizer, batch, schedule: SparsifySchedule, step: int = 0,
                      top_k_fraction: float | None = None) -> RemovalReport:
    """One visit of the schedule: rank pairs by importance, shrink the top-K least important.

    Pair selection never looks at theta, so for a fixed state a smaller
    theta removes a superset of what a larger one removes. A visited pair
    whose scores are too concentrated simply loses nothing this visit.
    """
    before = param_count(model)
    report = RemovalReport(step, before, before)
    if before <= schedule.target_params:
        return report
    candidates = []
    for pair in coupled_pairs(model):
        if pair.kind not in schedule.kinds or _removable_units(pair, schedule.min_inner_dim) == 0:
            continue
        try:
            score_pair(pair)
        except DegeneratePairError as exc:
            log.warning("skipping degenerate pair: %s", exc)
            report.skipped.append(pair.pair_id)
            continue
        candidates.append(pair)
    if not candidates:
        raise BudgetInfeasible(
            f"{before} params > target {schedule.target_params} but every pair is at "
            f"min_inner_dim={schedule.min_inner_dim} or degenerate")
    by_id = {p.pair_id: p for p in candidates}
    records = estimate_importance(model, batch, candidates)
    for pid in rank_pairs(records, top_k_fraction or schedule.top_k_fraction):
        current = param_count(model)
        if current <= schedule.target_params:
            break
        pair = by_id[pid]
        # scored at visit time: a GQA sibling may already have shrunk this pair
        sv = score_pair(pair)
        units = select_removals(sv, schedule.theta, _removable_units(pair, schedule.min_inner_dim))
        if not units:
            continue
        if schedule.scoring == "uncoupled":
            uncoupled_remove(pair, len(units), optimizer, schedule.min_inner_dim)
        else:
            coupled_remove(pair, units, optimizer, schedule.min_inner_dim)
        report.rows.append(RemovalRow(step, pid, pair.kind, len(units) * sv.block, current, param_count(model)))
    report.params_after = param_count(model)
    return report


REMOVAL_HEADER = ["step", "pair_id", "kind", "dims_removed", "params_before", "params_after"]


def write_removal_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REMOVAL_HEADER)
        for rep in reports:
            for r in rep.rows:
                w.writerow([r.step, r.pair_id, r.kind, r.dims_removed, r.params_before, r.params_after])

"""Coupled vs. individual single-pair removal error, and FFN removal bounds.

``run_comparison`` and ``ffn_bound_check`` derive one seed per trial from
the master seed, so results do not depend on how many worker threads the
trials are spread over (``ECOSPA_THREADS`` caps the pool).
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import numerics as nx
from .model import Model, coupled_pairs, evaluate_loss
from .sparsifier import coupled_remove, score_pair, uncoupled_remove


@dataclass(frozen=True)
class TrialResult:
    n: int
    err_coupled: float
    err_individual: float

    @property
    def coupled_wins(self) -> bool:
        return self.err_coupled < self.err_individual


@dataclass(frozen=True)
class ExperimentSummary:
    n: int
    trials: int
    avg_err_coupled: float
    avg_err_individual: float
    win_probability: float
    seed: int = 0
    se_coupled: float = 0.0


def worker_count() -> int:
    env = os.environ.get("ECOSPA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[0]:
        raise nx.ShapeError(f"inner dimensions differ: {a.shape} vs {b.shape}")


def coupled_removal_error(a, b) -> tuple[int, float]:
    """Index minimizing |a_j| |b_j| and the resulting error norm."""
    a, b = nx.as_matrix(a), nx.as_matrix(b)
    _check(a, b)
    prod = nx.column_norms(a) * nx.row_norms(b)
    j = int(np.argmin(prod))
    return j, float(prod[j])


def individual_removal_error(a, b) -> tuple[int, int, float]:
    """Drop the smallest column of ``a`` and smallest row of ``b`` independently."""
    a, b = nx.as_matrix(a), nx.as_matrix(b)
    _check(a, b)
    a_norms, b_norms = nx.column_norms(a), nx.row_norms(b)
    k, l = int(np.argmin(a_norms)), int(np.argmin(b_norms))
    if k == l:
        # same arithmetic as coupled_removal_error so the two compare exactly
        return k, l, float(a_norms[k] * b_norms[l])
    delta = a @ b - nx.remove_column(a, k) @ nx.remove_row(b, l)
    return k, l, nx.frobenius_norm(delta)


def _trial(n: int, seed: int) -> TrialResult:
    rng = nx.Rng(seed)
    a = rng.normal(n, n)
    b = rng.normal(n, n)
    return TrialResult(n, coupled_removal_error(a, b)[1], individual_removal_error(a, b)[2])


def trial_seeds(seed: int, trials: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(trials)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def run_trials(n: int, trials: int, seed: int, workers: int | None = None) -> list[TrialResult]:
    if n < 2 or trials < 1:
        raise ValueError("need n >= 2 and trials >= 1")
    seeds = trial_seeds(seed, trials)
    workers = workers or worker_count()
    if workers == 1:
        return [_trial(n, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: _trial(n, s), seeds))


def summarize(results: list[TrialResult], seed: int = 0) -> ExperimentSummary:
    c = np.array([r.err_coupled for r in results])
    i = np.array([r.err_individual for r in results])
    se = float(c.std(ddof=1) / np.sqrt(len(c))) if len(c) > 1 else 0.0
    return ExperimentSummary(results[0].n, len(results), float(c.mean()), float(i.mean()),
                             float(np.mean(c < i)), seed, se)


def run_comparison(n: int, trials: int, seed: int = 0, workers: int | None = None) -> ExperimentSummary:
    return summarize(run_trials(n, trials, seed, workers), seed)


SUMMARY_HEADER = ["size", "avg_coupled", "avg_individual", "win_probability", "trials", "seed"]


def write_summary_csv(path, summaries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            w.writerow([s.n, repr(s.avg_err_coupled), repr(s.avg_err_individual), repr(s.win_probability),
                        s.trials, s.seed])


# -- FFN first-order bound ------------------------------------------------------


@dataclass
class BoundReport:
    d_model: int
    d_ffn: int
    length: int
    trials: int
    cases: int
    violations: int
    mean_spearman: float
    spearman: list[float]
    trial_violations: list[int]


def ffn_removal_terms(x, w_in, w_out):
    """Per hidden unit j: linearized error, its bound, the coupled metric and the exact GELU error."""
    x, w_in, w_out = nx.as_matrix(x), nx.as_matrix(w_in), nx.as_matrix(w_out)
    c = float(nx.gelu_prime(0.0))
    in_norms = nx.column_norms(w_in)
    out_norms = nx.row_norms(w_out)
    metric = in_norms * out_norms
    # ||X w_in_j w_out_j^T||_F = ||X w_in_j|| ||w_out_j|| for a rank-one product
    linear = c * nx.column_norms(x @ w_in) * out_norms
    bound = c * nx.frobenius_norm(x) * metric
    true = nx.column_norms(nx.gelu(x @ w_in)) * out_norms
    return linear, bound, metric, true


def ffn_bound_check(d_model: int = 32, d_ffn: int = 128, length: int = 16, trials: int = 100,
                    seed: int = 0) -> BoundReport:
    if min(d_model, d_ffn, length) < 2 or trials < 1:
        raise ValueError("dimensions must be >= 2 and trials >= 1")
    per_trial = []
    rhos = []
    for s in trial_seeds(seed, trials):
        rng = nx.Rng(s)
        x = rng.normal(length, d_model)
        w_in = rng.normal(d_model, d_ffn)
        w_out = rng.normal(d_ffn, d_model)
        linear, bound, metric, true = ffn_removal_terms(x, w_in, w_out)
        per_trial.append(int(np.sum(linear > bound * (1.0 + 1e-12))))
        rhos.append(float(spearmanr(metric, true)[0]))
    return BoundReport(d_model, d_ffn, length, trials, trials * d_ffn, sum(per_trial), float(np.mean(rhos)),
                       rhos, per_trial)


BOUND_HEADER = ["trial", "d_model", "d_ffn", "length", "violations", "spearman"]


def write_bound_csv(path, report: BoundReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUND_HEADER)
        for t, (v, rho) in enumerate(zip(report.trial_violations, report.spearman)):
            w.writerow([t, report.d_model, report.d_ffn, report.length, v, repr(rho)])
        w.writerow(["all", report.d_model, report.d_ffn, report.length, report.violations, repr(report.mean_spearman)])


# -- coupled vs. uncoupled FFN sparsification on a model --------------------------


def _ffn_removed(model: Model, sparsity: float, coupled: bool, min_inner_dim: int = 2) -> Model:
    pruned = model.copy()
    for pair in coupled_pairs(pruned):
        if pair.kind != "IO":
            continue
        d = pair.inner_dim
        keep = int(np.ceil((1.0 - sparsity) * d - 1e-9))
        n_remove = d - keep
        if keep < min_inner_dim:
            raise ValueError(f"sparsity {sparsity} leaves {keep} < min_inner_dim={min_inner_dim} units in {pair.pair_id}")
        if n_remove == 0:
            continue
        if coupled:
            order = np.argsort(score_pair(pair).scores, kind="stable")
            coupled_remove(pair, np.sort(order[:n_remove]), min_inner_dim=min_inner_dim)
        else:
            uncoupled_remove(pair, n_remove, min_inner_dim=min_inner_dim)
    return pruned


@dataclass
class CompareRow:
    sparsity: float
    coupled_loss: float
    uncoupled_loss: float
    coupled_ffn_dims: tuple[int, ...]


def ffn_coupled_vs_uncoupled(model: Model, sparsity_levels, eval_batch, min_inner_dim: int = 2) -> list[CompareRow]:
    """One-shot FFN sparsification at each level, scored coupled vs. independently."""
    batches = eval_batch if isinstance(eval_batch, list) else [eval_batch]
    rows = []
    for s in sparsity_levels:
        if not 0.0 <= s < 1.0:
            raise ValueError(f"sparsity {s} must lie in [0, 1)")
        c = _ffn_removed(model, s, True, min_inner_dim)
        u = _ffn_removed(model, s, False, min_inner_dim)
        rows.append(CompareRow(
            float(s),
            float(np.mean([evaluate_loss(c, b) for b in batches])),
            float(np.mean([evaluate_loss(u, b) for b in batches])),
            tuple(p.inner_dim for p in coupled_pairs(c) if p.kind == "IO"),
        ))
    return rows


COMPARE_HEADER = ["sparsity", "coupled_loss", "uncoupled_loss"]


def write_compare_csv(path, rows: list[CompareRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([repr(r.sparsity), repr(r.coupled_loss), repr(r.uncoupled_loss)])

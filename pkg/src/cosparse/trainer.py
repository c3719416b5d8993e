"""Adam with sliceable moments, a bundled character corpus, and the training
and pruning loops that drive the sparsification schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterator

import numpy as np

from .autograd import Tape
from .importance import CalibrationBatch
from .model import Model, evaluate_loss, lm_loss, param_count
from .numerics import Rng, ShapeError
from .sparsifier import (
    BudgetInfeasible,
    RemovalReport,
    SparsifySchedule,
    min_reachable_params,
    run_schedule_step,
)

log = logging.getLogger(__name__)


class AdamState:
    """Adam moments per parameter name; moments follow every weight removal."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, weight has {params[name].shape}")
            if name in self.m and self.m[name].shape != g.shape:
                raise ShapeError(f"moments for {name} have shape {self.m[name].shape}, gradient has {g.shape}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * params[name]
            params[name] -= lr * update

    def remove_index(self, name: str, axis: int, idx) -> None:
        """Drop the same coordinates from the moments that were dropped from the weight."""
        for store in (self.m, self.v):
            if name in store:
                store[name] = np.delete(store[name], idx, axis=axis)

    def moment_shapes_match(self, params: dict[str, np.ndarray]) -> bool:
        return all(self.m[k].shape == params[k].shape and self.v[k].shape == params[k].shape
                   for k in self.m)


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    state.step(weights, grads)
    return weights


class CharCorpus:
    """Character-level corpus with a contiguous train/eval split."""

    def __init__(self, text: str, eval_fraction: float = 0.1, alphabet: str | None = None):
        if not text:
            raise ValueError("corpus is empty")
        if not 0.0 <= eval_fraction < 1.0:
            raise ValueError("eval_fraction must lie in [0, 1)")
        self.text = text
        self.chars = sorted(set(alphabet if alphabet is not None else text))
        self.stoi = {ch: i for i, ch in enumerate(self.chars)}
        self.ids = self.encode(text)
        cut = len(self.ids) - int(round(len(self.ids) * eval_fraction))
        self.train_ids = self.ids[:cut]
        self.eval_ids = self.ids[cut:]

    @classmethod
    def bundled(cls, eval_fraction: float = 0.1) -> "CharCorpus":
        text = resources.files("cosparse").joinpath("data/corpus.txt").read_text(encoding="utf-8")
        return cls(text, eval_fraction)

    @property
    def vocab(self) -> int:
        return len(self.chars)

    def encode(self, s: str) -> np.ndarray:
        return np.array([self.stoi[c] for c in s], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.chars[i] for i in ids)

    def _windows(self, ids: np.ndarray, seq_len: int) -> np.ndarray:
        starts = np.arange(0, len(ids) - seq_len - 1 + 1, seq_len)
        if starts.size == 0:
            raise ValueError(f"split of {len(ids)} tokens is too short for seq_len={seq_len}")
        return np.stack([ids[s:s + seq_len + 1] for s in starts])

    def train_batches(self, seq_len: int, batch_size: int, rng: Rng, steps: int | None = None) -> Iterator[np.ndarray]:
        """One epoch of (batch, seq_len + 1) windows in shuffled order."""
        windows = self._windows(self.train_ids, seq_len)
        order = rng.generator.permutation(len(windows))
        n_batches = len(windows) // batch_size
        if steps is not None:
            n_batches = steps
        for b in range(n_batches):
            idx = np.take(order, np.arange(b * batch_size, (b + 1) * batch_size), mode="wrap")
            yield windows[idx]

    def sample(self, count: int, seq_len: int, rng: Rng, split: str = "train") -> np.ndarray:
        ids = self.train_ids if split == "train" else self.eval_ids
        starts = rng.integers(0, len(ids) - seq_len, size=count)
        return np.stack([ids[s:s + seq_len + 1] for s in starts])

    def eval_batches(self, seq_len: int, batch_size: int, limit: int | None = None) -> list[np.ndarray]:
        windows = self._windows(self.eval_ids, seq_len)
        batches = [windows[i:i + batch_size] for i in range(0, len(windows), batch_size)]
        return batches[:limit] if limit else batches


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    seq_len: int = 32
    lr: float = 3e-3
    seed: int = 0
    schedule: SparsifySchedule | None = None
    eval_fraction: float = 0.1
    steps_per_epoch: int | None = None
    eval_batches: int = 8
    calib_size: int = 8
    clip_norm: float | None = None
    weight_decay: float = 0.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("need epochs >= 0 with positive batch_size and seq_len")


@dataclass
class LogRow:
    epoch: int
    step: int
    train_loss: float
    eval_loss: float
    param_count: int


@dataclass
class TrainResult:
    model: Model
    optimizer: AdamState
    log: list[LogRow] = field(default_factory=list)
    reports: list[RemovalReport] = field(default_factory=list)
    param_trajectory: list[int] = field(default_factory=list)
    budget_met: bool = True


def loss_and_grads(model: Model, batch) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    loss, P = lm_loss(tape, model, batch)
    tape.backward(loss)
    return float(loss.value[0, 0]), {k: n.grad for k, n in P.items()}


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> None:
    if not max_norm:
        return
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def mean_eval_loss(model: Model, batches) -> float:
    return float(np.mean([evaluate_loss(model, b) for b in batches]))


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "cosine" and total > 0:
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * min(step, total) / total))
    return config.lr


def _steps_per_epoch(corpus: CharCorpus, config: TrainConfig) -> int:
    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    return len(corpus._windows(corpus.train_ids, config.seq_len)) // config.batch_size


def train(model: Model, corpus: CharCorpus, config: TrainConfig,
          on_step: Callable[[int, Model, AdamState], None] | None = None,
          optimizer: AdamState | None = None) -> TrainResult:
    """Next-token training with the sparsification schedule applied per cadence."""
    if config.seq_len > model.config.max_seq_len:
        raise ValueError(f"seq_len {config.seq_len} exceeds model max_seq_len {model.config.max_seq_len}")
    if corpus.vocab > model.config.vocab:
        raise ValueError(f"corpus has {corpus.vocab} symbols, model vocab is {model.config.vocab}")
    schedule = config.schedule
    if schedule is not None:
        floor = min_reachable_params(model, schedule)
        if floor > schedule.target_params:
            raise BudgetInfeasible(f"target {schedule.target_params} is below the reachable minimum {floor}")
    rng = Rng(config.seed)
    opt = optimizer or AdamState(lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult(model, opt)
    eval_set = corpus.eval_batches(config.seq_len, config.batch_size, config.eval_batches)
    start_loss = mean_eval_loss(model, eval_set)
    result.log.append(LogRow(0, 0, start_loss, start_loss, param_count(model)))
    result.param_trajectory.append(param_count(model))
    total = config.epochs * _steps_per_epoch(corpus, config)
    step = 0

    def sparsify():
        if param_count(model) <= schedule.target_params:
            return
        calib = CalibrationBatch(corpus.sample(config.calib_size, config.seq_len, rng))
        try:
            report = run_schedule_step(model, opt, calib, schedule, step)
        except BudgetInfeasible as exc:
            # weights keep moving, so a later visit may find shrinkable pairs again
            log.warning("step %d: %s", step, exc)
            return
        result.reports.append(report)
        log.info("step %d: removed %d dims, params %d -> %d", step, report.dims_removed,
                 report.params_before, report.params_after)

    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in corpus.train_batches(config.seq_len, config.batch_size, rng, config.steps_per_epoch):
            loss, grads = loss_and_grads(model, batch)
            _clip(grads, config.clip_norm)
            opt.step(model.params, grads, lr=_lr_at(config, step, total))
            step += 1
            losses.append(loss)
            if schedule is not None and schedule.cadence and step % schedule.cadence == 0:
                sparsify()
            result.param_trajectory.append(param_count(model))
            if on_step is not None:
                on_step(step, model, opt)
        if schedule is not None and schedule.cadence is None:
            sparsify()
            result.param_trajectory.append(param_count(model))
        row = LogRow(epoch, step, float(np.mean(losses)) if losses else float("nan"),
                     mean_eval_loss(model, eval_set), param_count(model))
        result.log.append(row)
        log.info("epoch %d: train %.4f eval %.4f params %d", epoch, row.train_loss, row.eval_loss, row.param_count)
    result.budget_met = schedule is None or param_count(model) <= schedule.target_params
    return result


def prune_pretrained(model: Model, corpus: CharCorpus, schedule: SparsifySchedule, recovery_steps: int = 50,
                     batch_size: int = 4, seq_len: int = 32, lr: float = 1e-3, seed: int = 0,
                     calib_size: int = 8, eval_batches: int = 8, optimizer: AdamState | None = None,
                     max_stalled_rounds: int = 50) -> TrainResult:
    """Repeat schedule steps, each followed by brief recovery fine-tuning, until the budget is met."""
    floor = min_reachable_params(model, schedule)
    if floor > schedule.target_params:
        raise BudgetInfeasible(f"target {schedule.target_params} is below the reachable minimum {floor}")
    rng = Rng(seed)
    opt = optimizer or AdamState(lr=lr)
    result = TrainResult(model, opt)
    eval_set = corpus.eval_batches(seq_len, batch_size, eval_batches)
    start = mean_eval_loss(model, eval_set)
    result.log.append(LogRow(0, 0, start, start, param_count(model)))
    result.param_trajectory.append(param_count(model))
    step = 0
    rnd = 0
    k = schedule.top_k_fraction
    stalled = 0
    while param_count(model) > schedule.target_params:
        calib = CalibrationBatch(corpus.sample(calib_size, seq_len, rng))
        report = run_schedule_step(model, opt, calib, schedule, step, top_k_fraction=k)
        if not report.rows and recovery_steps == 0:
            # frozen weights would repeat the same empty visit, so widen it
            if k >= 1.0:
                raise BudgetInfeasible(f"no pair can shrink under theta={schedule.theta} at {param_count(model)} params")
            k = min(1.0, 2.0 * k)
            continue
        k = schedule.top_k_fraction
        stalled = 0 if report.rows else stalled + 1
        if stalled > max_stalled_rounds:
            raise BudgetInfeasible(f"no removal in {max_stalled_rounds} rounds at {param_count(model)} params")
        rnd += 1
        result.reports.append(report)
        result.param_trajectory.append(param_count(model))
        losses = []
        for batch in corpus.train_batches(seq_len, batch_size, rng, recovery_steps):
            loss, grads = loss_and_grads(model, batch)
            opt.step(model.params, grads, lr=lr)
            step += 1
            losses.append(loss)
        result.param_trajectory.append(param_count(model))
        result.log.append(LogRow(rnd, step, float(np.mean(losses)) if losses else float("nan"),
                                 mean_eval_loss(model, eval_set), param_count(model)))
    result.budget_met = param_count(model) <= schedule.target_params
    return result


LOG_HEADER = ["epoch", "step", "train_loss", "eval_loss", "param_count"]


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.train_loss), repr(r.eval_loss), r.param_count])

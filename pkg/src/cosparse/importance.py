"""Empirical-Fisher importance of coupled weight pairs.

For a pair {W1, W2} the importance is

    I = 1/2 * sum_k  1/|W_k| * 1/|D| * sum_{samples} sum_ij (dL/dW_k)_ij^2

with the gradient squared per calibration sample before averaging over the
batch. Each sample gets its own forward/backward pass.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tape
from .model import CoupledPair, Model, coupled_pairs, lm_loss


@dataclass(frozen=True)
class ImportanceRecord:
    pair_id: str
    layer: int
    kind: str
    index: int
    value: float


@dataclass
class CalibrationBatch:
    """Token sequences of shape (|D|, length + 1) drawn from training data."""

    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        if self.tokens.shape[0] == 0:
            raise ValueError("calibration batch is empty")

    def __len__(self):
        return self.tokens.shape[0]

    def check_vocab(self, vocab: int) -> None:
        if self.tokens.min() < 0 or self.tokens.max() >= vocab:
            raise ValueError(f"calibration tokens fall outside vocabulary of size {vocab}")


def pair_importance(grads_w1: Sequence[np.ndarray], grads_w2: Sequence[np.ndarray]) -> float:
    """Fisher-style pair score from per-sample gradients of both matrices."""
    if len(grads_w1) == 0 or len(grads_w1) != len(grads_w2):
        raise ValueError("need the same, nonzero number of per-sample gradients for W1 and W2")
    total = 0.0
    for grads in (grads_w1, grads_w2):
        size = np.asarray(grads[0]).size
        sq = sum(float(np.sum(np.square(g))) for g in grads)
        total += sq / size / len(grads)
    return 0.5 * total


def _w1_grad(pair: CoupledPair, grads: dict[str, np.ndarray]) -> np.ndarray:
    if len(pair.w1_names) == 1:
        return grads[pair.w1_names[0]]
    # SwiGLU: W1 = W_gate * W_up, so a gradient step moves W1 by dG*U + G*dU
    gate_name, up_name = pair.w1_names
    params = pair.model.params
    return grads[gate_name] * params[up_name] + params[gate_name] * grads[up_name]


def sample_gradients(model: Model, sequence) -> dict[str, np.ndarray]:
    tape = Tape()
    loss, P = lm_loss(tape, model, np.atleast_2d(sequence))
    tape.backward(loss)
    return {name: node.grad for name, node in P.items()}


def estimate_importance(model: Model, batch, pairs: Iterable[CoupledPair] | None = None) -> list[ImportanceRecord]:
    if not isinstance(batch, CalibrationBatch):
        batch = CalibrationBatch(batch)
    batch.check_vocab(model.config.vocab)
    pairs = list(coupled_pairs(model) if pairs is None else pairs)
    sq1 = np.zeros(len(pairs))
    sq2 = np.zeros(len(pairs))
    for seq in batch.tokens:
        grads = sample_gradients(model, seq)
        for n, pair in enumerate(pairs):
            g1 = _w1_grad(pair, grads)
            g2 = grads[pair.w2_name]
            sq1[n] += np.sum(g1 * g1) / g1.size
            sq2[n] += np.sum(g2 * g2) / g2.size
    count = len(batch)
    return [
        ImportanceRecord(p.pair_id, p.layer, p.kind, p.index, float(0.5 * (a + b) / count))
        for p, a, b in zip(pairs, sq1, sq2)
    ]


def rank_pairs(records: Sequence[ImportanceRecord], top_k_fraction: float) -> list[str]:
    """Pair ids of the ceil(K * n) least important records, ties in record order."""
    if not records:
        raise ValueError("no importance records to rank")
    if not 0.0 < top_k_fraction <= 1.0:
        raise ValueError(f"top_k_fraction must lie in (0, 1], got {top_k_fraction}")
    k = max(1, math.ceil(top_k_fraction * len(records) - 1e-9))
    order = sorted(range(len(records)), key=lambda i: (records[i].value, i))
    return [records[i].pair_id for i in order[:k]]


def write_importance_csv(path, records: Iterable[ImportanceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "layer", "kind", "index", "value"])
        for r in records:
            w.writerow([r.pair_id, r.layer, r.kind, r.index, repr(float(r.value))])

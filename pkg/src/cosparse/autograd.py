"""Tape-based reverse-mode differentiation over a closed set of matrix ops.

Every primitive computes its forward value with the kernels in
:mod:`cosparse.numerics`, appends a backward closure to the tape, and
returns a new :class:`Node`. ``Tape.backward`` replays the closures in
reverse recording order, which is a valid topological order because a
node can only be created after its inputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import ShapeError


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "_grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = nx.as_matrix(value)
        self.requires_grad = requires_grad
        self._grad = None
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        # zeros until something flows back; allocated on first touch
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or ''} shape={self.value.shape})"


class Tape:
    """Records primitive applications for a single forward/backward pass."""

    def __init__(self):
        self._ops: list[tuple[Node, Callable[[np.ndarray], None]]] = []
        self._nodes: set[int] = set()
        self._done = False

    def leaf(self, value, requires_grad: bool = False, name: str | None = None) -> Node:
        node = Node(value, requires_grad=requires_grad, name=name)
        self._nodes.add(id(node))
        return node

    def param(self, value, name: str | None = None) -> Node:
        return self.leaf(value, requires_grad=True, name=name)

    def _record(self, value, inputs, backward) -> Node:
        for n in inputs:
            if id(n) not in self._nodes:
                raise TapeError(f"input {n!r} was not created on this tape")
        out = Node(value, requires_grad=any(n.requires_grad for n in inputs))
        self._nodes.add(id(out))
        if out.requires_grad:
            self._ops.append((out, backward))
        return out

    def __len__(self):
        return len(self._ops)

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        def backward(g):
            if a.requires_grad:
                a.grad += g @ b.value.T
            if b.requires_grad:
                b.grad += a.value.T @ g

        return self._record(nx.matmul(a.value, b.value), (a, b), backward)

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may be a 1 x n row broadcast over ``a``'s rows."""
        if b.shape != a.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
            raise ShapeError(f"cannot add {a.shape} and {b.shape}")

        def backward(g):
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g if b.shape == g.shape else g.sum(axis=0, keepdims=True)

        return self._record(a.value + b.value, (a, b), backward)

    def scale(self, a: Node, s: float) -> Node:
        def backward(g):
            a.grad += s * g

        return self._record(a.value * s, (a,), backward)

    def hadamard(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"hadamard of {a.shape} and {b.shape}")

        def backward(g):
            if a.requires_grad:
                a.grad += g * b.value
            if b.requires_grad:
                b.grad += g * a.value

        return self._record(a.value * b.value, (a, b), backward)

    def transpose(self, a: Node) -> Node:
        def backward(g):
            a.grad += g.T

        return self._record(a.value.T.copy(), (a,), backward)

    def softmax_rows(self, a: Node) -> Node:
        y = nx.softmax_rows(a.value)

        def backward(g):
            a.grad += y * (g - np.sum(g * y, axis=1, keepdims=True))

        return self._record(y, (a,), backward)

    def gelu(self, a: Node) -> Node:
        def backward(g):
            a.grad += g * nx.gelu_prime(a.value)

        return self._record(nx.gelu(a.value), (a,), backward)

    def silu(self, a: Node) -> Node:
        def backward(g):
            a.grad += g * nx.silu_prime(a.value)

        return self._record(nx.silu(a.value), (a,), backward)

    def concat_cols(self, parts: list[Node]) -> Node:
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols row counts differ: {[p.shape for p in parts]}")
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    p.grad += g[:, lo:hi]

        return self._record(np.concatenate([p.value for p in parts], axis=1), tuple(parts), backward)

    def concat_rows(self, parts: list[Node]) -> Node:
        cols = {p.shape[1] for p in parts}
        if len(cols) != 1:
            raise ShapeError(f"concat_rows column counts differ: {[p.shape for p in parts]}")
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])

        def backward(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    p.grad += g[lo:hi]

        return self._record(np.concatenate([p.value for p in parts], axis=0), tuple(parts), backward)

    def row_gather(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"ids out of range for table with {table.shape[0]} rows")

        def backward(g):
            np.add.at(table.grad, ids, g)

        return self._record(table.value[ids], (table,), backward)

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
        mu = x.value.mean(axis=1, keepdims=True)
        xc = x.value - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
        xhat = xc * inv
        n = x.shape[1]

        def backward(g):
            if gain.requires_grad:
                gain.grad += np.sum(g * xhat, axis=0, keepdims=True)
            if bias.requires_grad:
                bias.grad += g.sum(axis=0, keepdims=True)
            if x.requires_grad:
                gx = g * gain.value
                x.grad += inv / n * (n * gx - gx.sum(axis=1, keepdims=True)
                                     - xhat * np.sum(gx * xhat, axis=1, keepdims=True))

        return self._record(xhat * gain.value + bias.value, (x, gain, bias), backward)

    def sum_all(self, a: Node) -> Node:
        def backward(g):
            a.grad += g[0, 0]

        return self._record(np.array([[a.value.sum()]]), (a,), backward)

    def sum_squares(self, a: Node) -> Node:
        def backward(g):
            a.grad += 2.0 * g[0, 0] * a.value

        return self._record(np.array([[np.sum(a.value * a.value)]]), (a,), backward)

    def cross_entropy(self, logits: Node, targets) -> Node:
        """Mean next-token negative log-likelihood over the rows of ``logits``."""
        targets = np.asarray(targets, dtype=np.int64).ravel()
        n, v = logits.shape
        if targets.size != n:
            raise ShapeError(f"{targets.size} targets for {n} logit rows")
        if targets.size and (targets.min() < 0 or targets.max() >= v):
            raise IndexError(f"target outside vocabulary of size {v}")
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(n), targets].mean()

        def backward(g):
            p = np.exp(logp)
            p[np.arange(n), targets] -= 1.0
            logits.grad += g[0, 0] * p / n

        return self._record(np.array([[loss]]), (logits,), backward)

    # -- reverse pass -------------------------------------------------------

    def backward(self, loss: Node) -> None:
        if self._done:
            raise TapeError("backward already ran on this tape")
        if id(loss) not in self._nodes:
            raise TapeError("loss node was not produced by this tape's forward pass")
        if loss.shape != (1, 1):
            raise TapeError(f"loss must be scalar (1x1), got {loss.shape}")
        self._done = True
        loss.grad = np.ones((1, 1))
        for out, fn in reversed(self._ops):
            if out._grad is not None:
                fn(out._grad)

"""Toy pre-norm transformer whose weights are exposed as coupled pairs.

Attention weights are stored per head (``L{l}.q{i}``, ``L{l}.o{i}``) and per
KV group (``L{l}.k{g}``, ``L{l}.v{g}``) so each coupled pair can shrink its
inner dimension independently of the others. With ``groups == heads`` the
grouping is the identity and the model is plain multi-head attention.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import numerics as nx
from .autograd import Node, Tape
from .numerics import ShapeError

_NEG = -1e30


@dataclass
class ModelConfig:
    vocab: int
    d_model: int
    layers: int
    heads: int
    groups: int | None = None
    d_head: int | None = None
    d_ffn: int | None = None
    activation: str = "gelu"
    rope: bool = True
    max_seq_len: int = 128
    init_std: float = 0.02

    def __post_init__(self):
        if self.groups is None:
            self.groups = self.heads
        if self.d_head is None:
            self.d_head = self.d_model // self.heads if self.heads else 0
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_model
        if self.heads and self.heads % self.groups:
            raise ValueError(f"heads={self.heads} is not divisible by groups={self.groups}")
        if self.activation not in ("gelu", "swiglu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.rope and self.heads and self.d_head % 2:
            raise ValueError(f"RoPE needs an even head dim, got {self.d_head}")

    def to_dict(self) -> dict:
        return asdict(self)


def rope_frequencies(d: int) -> np.ndarray:
    """Block frequencies 1 / 10000^(2j/d) for j = 1..d/2."""
    j = np.arange(1, d // 2 + 1, dtype=np.float64)
    return 1.0 / 10000.0 ** (2.0 * j / d)


def rotation_matrix(freqs: np.ndarray, t: float) -> np.ndarray:
    """Block-diagonal position matrix P_t with blocks [[cos, sin], [-sin, cos]]."""
    d = 2 * len(freqs)
    p = np.zeros((d, d))
    for j, f in enumerate(freqs):
        c, s = np.cos(t * f), np.sin(t * f)
        p[2 * j:2 * j + 2, 2 * j:2 * j + 2] = [[c, s], [-s, c]]
    return p


def _rope_tables(freqs: np.ndarray, positions: np.ndarray):
    ang = np.outer(positions, freqs)
    cos = np.repeat(np.cos(ang), 2, axis=1)
    sin = np.repeat(np.sin(ang), 2, axis=1)
    d = 2 * len(freqs)
    swap = np.zeros((d, d))
    for j in range(len(freqs)):
        swap[2 * j, 2 * j + 1] = 1.0
        swap[2 * j + 1, 2 * j] = -1.0
    return cos, sin, swap


def apply_rope(tape: Tape, x: Node, freqs: np.ndarray, positions: np.ndarray) -> Node:
    # row t of the result is x[t] @ P_t, written as x*cos + (x @ swap)*sin
    cos, sin, swap = _rope_tables(freqs, positions)
    rotated = tape.matmul(x, tape.leaf(swap))
    return tape.add(tape.hadamard(x, tape.leaf(cos)), tape.hadamard(rotated, tape.leaf(sin)))


@dataclass(frozen=True)
class CoupledPair:
    """A (W1, W2) pair sharing one inner dimension, viewed on a live model.

    QK: w1 = W_i^Q, w2 = W_g^K, product w1 @ w2.T.
    VO: w1 = W_g^V, w2 = W_i^O, product w1 @ w2.
    IO: w1 = W_in (or W_gate * W_up for SwiGLU), w2 = W_out.
    """

    model: "Model" = field(repr=False, compare=False)
    layer: int
    kind: str
    index: int
    w1_names: tuple[str, ...]
    w2_name: str
    group: int | None = None
    group_members: tuple[int, ...] = ()

    @property
    def pair_id(self) -> str:
        return f"L{self.layer}.{self.kind}{self.index}"

    @property
    def w1(self) -> np.ndarray:
        mats = [self.model.params[n] for n in self.w1_names]
        return mats[0] * mats[1] if len(mats) == 2 else mats[0]

    @property
    def w2(self) -> np.ndarray:
        return self.model.params[self.w2_name]

    @property
    def inner_dim(self) -> int:
        return self.model.params[self.w1_names[0]].shape[1]

    @property
    def w2_inner_axis(self) -> int:
        """Axis of w2 aligned with the inner dimension (1 for QK, 0 otherwise)."""
        return 1 if self.kind == "QK" else 0

    @property
    def rope(self) -> bool:
        return self.kind == "QK" and self.model.config.rope

    @property
    def rope_context(self) -> np.ndarray | None:
        if not self.rope:
            return None
        return self.model.buffers[self.w1_names[0] + ".rope"]

    def product(self) -> np.ndarray:
        w2 = self.w2.T if self.kind == "QK" else self.w2
        return nx.matmul(self.w1, w2)

    def shared_names(self) -> list[tuple[str, int]]:
        """Every (tensor, axis) that must lose the same inner index as this pair."""
        l = self.layer
        if self.kind == "QK":
            out = [(f"L{l}.q{m}", 1) for m in self.group_members] + [(self.w2_name, 1)]
        elif self.kind == "VO":
            out = [(self.w1_names[0], 1)] + [(f"L{l}.o{m}", 0) for m in self.group_members]
        elif self.model.config.activation == "swiglu":
            out = [(f"L{l}.ffn.gate", 1), (f"L{l}.ffn.up", 1), (f"L{l}.ffn.down", 0)]
        else:
            out = [(f"L{l}.ffn.in", 1), (f"L{l}.ffn.b_in", 1), (f"L{l}.ffn.out", 0)]
        return out


class Model:
    """Parameters, non-trainable buffers and structure of the toy transformer."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: Mapping[str, np.ndarray] | None = None,
                 buffers: Mapping[str, np.ndarray] | None = None, original_dims: Mapping[str, int] | None = None):
        self.config = config
        if params is None:
            params, buffers = self._init_params(nx.Rng(seed))
        self.params: dict[str, np.ndarray] = {k: nx.as_matrix(v).copy() for k, v in params.items()}
        self.buffers: dict[str, np.ndarray] = {k: nx.as_matrix(v).copy() for k, v in (buffers or {}).items()}
        self.original_dims = dict(original_dims) if original_dims else {p.pair_id: p.inner_dim for p in coupled_pairs(self)}

    def _init_params(self, rng: nx.Rng):
        c = self.config
        std = c.init_std
        p: dict[str, np.ndarray] = {"embed": rng.normal(c.vocab, c.d_model, std)}
        b: dict[str, np.ndarray] = {}
        if not c.rope:
            p["pos"] = rng.normal(c.max_seq_len, c.d_model, std)
        for l in range(c.layers):
            p[f"L{l}.ln1.g"] = np.ones((1, c.d_model))
            p[f"L{l}.ln1.b"] = np.zeros((1, c.d_model))
            for i in range(c.heads):
                p[f"L{l}.q{i}"] = rng.normal(c.d_model, c.d_head, std)
            for g in range(c.groups):
                p[f"L{l}.k{g}"] = rng.normal(c.d_model, c.d_head, std)
                p[f"L{l}.v{g}"] = rng.normal(c.d_model, c.d_head, std)
            for i in range(c.heads):
                p[f"L{l}.o{i}"] = rng.normal(c.d_head, c.d_model, std)
            if c.rope:
                freqs = rope_frequencies(c.d_head).reshape(1, -1)
                for i in range(c.heads):
                    b[f"L{l}.q{i}.rope"] = freqs.copy()
                for g in range(c.groups):
                    b[f"L{l}.k{g}.rope"] = freqs.copy()
            p[f"L{l}.ln2.g"] = np.ones((1, c.d_model))
            p[f"L{l}.ln2.b"] = np.zeros((1, c.d_model))
            if c.activation == "swiglu":
                p[f"L{l}.ffn.gate"] = rng.normal(c.d_model, c.d_ffn, std)
                p[f"L{l}.ffn.up"] = rng.normal(c.d_model, c.d_ffn, std)
                p[f"L{l}.ffn.down"] = rng.normal(c.d_ffn, c.d_model, std)
            else:
                p[f"L{l}.ffn.in"] = rng.normal(c.d_model, c.d_ffn, std)
                p[f"L{l}.ffn.b_in"] = np.zeros((1, c.d_ffn))
                p[f"L{l}.ffn.out"] = rng.normal(c.d_ffn, c.d_model, std)
                p[f"L{l}.ffn.b_out"] = np.zeros((1, c.d_model))
        p["ln_f.g"] = np.ones((1, c.d_model))
        p["ln_f.b"] = np.zeros((1, c.d_model))
        return p, b

    def group_of(self, head: int) -> int:
        return head // (self.config.heads // self.config.groups)

    def group_heads(self, group: int) -> tuple[int, ...]:
        per = self.config.heads // self.config.groups
        return tuple(range(group * per, (group + 1) * per))

    def copy(self) -> "Model":
        return Model(ModelConfig(**self.config.to_dict()), params=self.params, buffers=self.buffers,
                     original_dims=self.original_dims)

    def slice_tensor(self, name: str, axis: int, idx, optimizer=None) -> None:
        """Delete indices along ``axis`` of a parameter, keeping any RoPE table and optimizer moments aligned."""
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        w = self.params[name]
        self.params[name] = nx.remove_column(w, idx) if axis == 1 else nx.remove_row(w, idx)
        rope_key = name + ".rope"
        if rope_key in self.buffers:
            blocks = np.unique(idx // 2)
            self.buffers[rope_key] = np.delete(self.buffers[rope_key], blocks, axis=1)
        if optimizer is not None:
            optimizer.remove_index(name, axis, idx)

    def param_count(self) -> int:
        return param_count(self)


def param_count(model) -> int:
    params = model.params if isinstance(model, Model) else model
    return int(sum(np.asarray(v).size for v in params.values()))


def coupled_pairs(model: Model) -> Iterator[CoupledPair]:
    """Yield every QK and VO pair per head and the IO pair, layer by layer."""
    c = model.config
    for l in range(c.layers):
        for i in range(c.heads):
            g = model.group_of(i)
            yield CoupledPair(model, l, "QK", i, (f"L{l}.q{i}",), f"L{l}.k{g}", g, model.group_heads(g))
        for i in range(c.heads):
            g = model.group_of(i)
            yield CoupledPair(model, l, "VO", i, (f"L{l}.v{g}",), f"L{l}.o{i}", g, model.group_heads(g))
        if c.activation == "swiglu":
            yield CoupledPair(model, l, "IO", 0, (f"L{l}.ffn.gate", f"L{l}.ffn.up"), f"L{l}.ffn.down")
        else:
            yield CoupledPair(model, l, "IO", 0, (f"L{l}.ffn.in",), f"L{l}.ffn.out")


# -- forward passes ------------------------------------------------------------


def _bind(tape: Tape, model: Model, grad: bool) -> dict[str, Node]:
    return {k: (tape.param(v, name=k) if grad else tape.leaf(v, name=k)) for k, v in model.params.items()}


def _check_input(model: Model, x) -> np.ndarray:
    x = nx.as_matrix(x)
    if x.shape[1] != model.config.d_model:
        raise ShapeError(f"input has {x.shape[1]} columns, model d_m is {model.config.d_model}")
    return x


def causal_mask(batch: int, length: int) -> np.ndarray:
    """Additive mask for ``batch`` sequences of ``length`` stacked row-wise."""
    n = batch * length
    r = np.arange(n)
    same = (r[:, None] // length) == (r[None, :] // length)
    allowed = same & (r[None, :] <= r[:, None])
    return np.where(allowed, 0.0, _NEG)


def attention(tape: Tape, model: Model, P: Mapping[str, Node], layer: int, xq: Node, xk: Node, xv: Node,
              positions: np.ndarray, mask: np.ndarray | None = None) -> Node:
    """Concat-then-project multi-head (or grouped) attention."""
    c = model.config
    l = layer
    keys, values = {}, {}
    heads = []
    mask_node = tape.leaf(mask) if mask is not None else None
    for i in range(c.heads):
        g = model.group_of(i)
        q = tape.matmul(xq, P[f"L{l}.q{i}"])
        if g not in keys:
            k = tape.matmul(xk, P[f"L{l}.k{g}"])
            if c.rope:
                k = apply_rope(tape, k, model.buffers[f"L{l}.k{g}.rope"].ravel(), positions)
            keys[g] = k
            values[g] = tape.matmul(xv, P[f"L{l}.v{g}"])
        if c.rope:
            q = apply_rope(tape, q, model.buffers[f"L{l}.q{i}.rope"].ravel(), positions)
        s = tape.scale(tape.matmul(q, tape.transpose(keys[g])), 1.0 / np.sqrt(q.shape[1]))
        if mask_node is not None:
            s = tape.add(s, mask_node)
        heads.append(tape.matmul(tape.softmax_rows(s), values[g]))
    w_o = tape.concat_rows([P[f"L{l}.o{i}"] for i in range(c.heads)])
    return tape.matmul(tape.concat_cols(heads), w_o)


def ffn(tape: Tape, model: Model, P: Mapping[str, Node], layer: int, x: Node) -> Node:
    l = layer
    if model.config.activation == "swiglu":
        gate = tape.silu(tape.matmul(x, P[f"L{l}.ffn.gate"]))
        up = tape.matmul(x, P[f"L{l}.ffn.up"])
        return tape.matmul(tape.hadamard(gate, up), P[f"L{l}.ffn.down"])
    h = tape.gelu(tape.add(tape.matmul(x, P[f"L{l}.ffn.in"]), P[f"L{l}.ffn.b_in"]))
    return tape.add(tape.matmul(h, P[f"L{l}.ffn.out"]), P[f"L{l}.ffn.b_out"])


def lm_forward(tape: Tape, model: Model, tokens, grad: bool = True):
    """Logits for a (batch, length) token array; returns (logits, bound params)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, n = tokens.shape
    c = model.config
    if n > c.max_seq_len:
        raise ShapeError(f"sequence length {n} exceeds max_seq_len {c.max_seq_len}")
    P = _bind(tape, model, grad)
    positions = np.tile(np.arange(n), b)
    x = tape.row_gather(P["embed"], tokens.ravel())
    if not c.rope:
        x = tape.add(x, tape.row_gather(P["pos"], positions))
    mask = causal_mask(b, n)
    for l in range(c.layers):
        h = tape.layer_norm(x, P[f"L{l}.ln1.g"], P[f"L{l}.ln1.b"])
        x = tape.add(x, attention(tape, model, P, l, h, h, h, positions, mask))
        h = tape.layer_norm(x, P[f"L{l}.ln2.g"], P[f"L{l}.ln2.b"])
        x = tape.add(x, ffn(tape, model, P, l, h))
    x = tape.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    return tape.matmul(x, tape.transpose(P["embed"])), P


def lm_loss(tape: Tape, model: Model, batch, grad: bool = True):
    """Next-token cross-entropy for a (batch, length + 1) token array."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    logits, P = lm_forward(tape, model, batch[:, :-1], grad=grad)
    return tape.cross_entropy(logits, batch[:, 1:].ravel()), P


def evaluate_loss(model: Model, batch) -> float:
    loss, _ = lm_loss(Tape(), model, batch, grad=False)
    return float(loss.value[0, 0])


def forward_mha_standard(model: Model, x_q, x_k, x_v, layer: int, causal: bool = False) -> np.ndarray:
    """Concat(head_1..head_h) W^O on a single length-l sequence."""
    x_q, x_k, x_v = (_check_input(model, x) for x in (x_q, x_k, x_v))
    tape = Tape()
    P = _bind(tape, model, grad=False)
    n = x_q.shape[0]
    mask = causal_mask(1, n) if causal else None
    out = attention(tape, model, P, layer, tape.leaf(x_q), tape.leaf(x_k), tape.leaf(x_v), np.arange(n), mask)
    return out.value


def _coupled_scores(model: Model, layer: int, head: int, x_q, x_k) -> np.ndarray:
    l = layer
    g = model.group_of(head)
    wq, wk = model.params[f"L{l}.q{head}"], model.params[f"L{l}.k{g}"]
    if not model.config.rope:
        return x_q @ (wq @ wk.T) @ x_k.T
    fq = model.buffers[f"L{l}.q{head}.rope"].ravel()
    fk = model.buffers[f"L{l}.k{g}.rope"].ravel()
    scores = np.empty((x_q.shape[0], x_k.shape[0]))
    for t in range(x_q.shape[0]):
        for s in range(x_k.shape[0]):
            w_qk = wq @ rotation_matrix(fq, t) @ rotation_matrix(fk, s).T @ wk.T
            scores[t, s] = x_q[t] @ w_qk @ x_k[s]
    return scores


def forward_gqa(model: Model, x_q, x_k, x_v, layer: int, causal: bool = False) -> np.ndarray:
    """Sum over heads of softmax(X_Q W^QK_{i,g(i)} X_K^T / sqrt(d)) X_V W^VO_{g(i),i}."""
    x_q, x_k, x_v = (_check_input(model, x) for x in (x_q, x_k, x_v))
    l = layer
    out = np.zeros((x_q.shape[0], model.config.d_model))
    mask = causal_mask(1, x_q.shape[0]) if causal else 0.0
    for i in range(model.config.heads):
        g = model.group_of(i)
        d = model.params[f"L{l}.q{i}"].shape[1]
        s = _coupled_scores(model, l, i, x_q, x_k) / np.sqrt(d) + mask
        w_vo = model.params[f"L{l}.v{g}"] @ model.params[f"L{l}.o{i}"]
        out += nx.softmax_rows(s) @ x_v @ w_vo
    return out


def forward_mha_coupled(model: Model, x_q, x_k, x_v, layer: int, causal: bool = False) -> np.ndarray:
    if model.config.groups != model.config.heads:
        raise ValueError("forward_mha_coupled needs groups == heads; use forward_gqa")
    return forward_gqa(model, x_q, x_k, x_v, layer, causal)


def forward_rope_attention(model: Model, x_q, x_k, layer: int, head: int = 0, explicit: bool = False) -> np.ndarray:
    """Scaled attention scores of one head with rotary positions 0..l-1.

    ``explicit=False`` rotates the projections, RoPE(X_Q W^Q) RoPE(X_K W^K)^T;
    ``explicit=True`` evaluates X_Q W^Q P_t P_s^T W^K^T X_K^T entry by entry.
    """
    if not model.config.rope:
        raise ValueError("model was built without RoPE")
    x_q, x_k = _check_input(model, x_q), _check_input(model, x_k)
    l, g = layer, model.group_of(head)
    d = model.params[f"L{l}.q{head}"].shape[1]
    if d % 2:
        raise ShapeError(f"RoPE needs an even inner dim, got {d}")
    if explicit:
        return _coupled_scores(model, l, head, x_q, x_k) / np.sqrt(d)
    tape = Tape()
    q = tape.matmul(tape.leaf(x_q), tape.leaf(model.params[f"L{l}.q{head}"]))
    k = tape.matmul(tape.leaf(x_k), tape.leaf(model.params[f"L{l}.k{g}"]))
    q = apply_rope(tape, q, model.buffers[f"L{l}.q{head}.rope"].ravel(), np.arange(x_q.shape[0]))
    k = apply_rope(tape, k, model.buffers[f"L{l}.k{g}.rope"].ravel(), np.arange(x_k.shape[0]))
    return (q.value @ k.value.T) / np.sqrt(d)


def forward_ffn(model: Model, x, layer: int) -> np.ndarray:
    x = _check_input(model, x)
    tape = Tape()
    P = _bind(tape, model, grad=False)
    return ffn(tape, model, P, layer, tape.leaf(x)).value

"""Small reverse-mode tape over float ndarrays (float64 by default).

Every forward op appends one node holding the activations its backward
closure needs. Nodes only ever depend on earlier nodes, so walking the
record in reverse is an exact reverse-topological sweep; a tape is
single-use and refuses a second backward. Parameters are plain ``Param``
objects with persistent ``.grad`` accumulators fed at the leaves.

Only the ops this model family needs are provided: embedding gather,
(head-scaled) linear maps, rms normalization, silu, sigmoid, residual add,
position gather, masked mean cross-entropy. The sequence mixers live in
``slotmem.seq_ops``. ``grad_check`` verifies any of it against central
finite differences, skipping coordinates whose perturbation flips a
discrete selection (detected by a caller-supplied fingerprint).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

CBRT_EPS = float(np.cbrt(np.finfo(np.float64).eps))


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


class Param:
    """Named trainable array with a persistent gradient accumulator.

    Stored as float64 unless the caller already picked a float dtype.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str):
        value = np.array(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float64)
        self.value = value
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class Node:
    __slots__ = ("value", "grad", "backward_fn", "param", "name")

    def __init__(self, value, backward_fn=None, param=None, name=""):
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.param = param
        self.name = name


def accum(node: Node, g: np.ndarray) -> None:
    """Add an upstream contribution to a node's gradient."""
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


class Tape:
    """Creation-ordered op record; one forward, one backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._spent = False

    def node(self, value, backward_fn=None, name="") -> Node:
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float64)
        n = Node(value, backward_fn, name=name)
        self.nodes.append(n)
        return n

    def leaf(self, param: Param) -> Node:
        n = Node(param.value, param=param, name=param.name)
        self.nodes.append(n)
        return n

    def constant(self, value, name="const") -> Node:
        return self.node(value, name=name)

    def backward(self, root: Node, seed: np.ndarray | None = None) -> None:
        if self._spent:
            raise RuntimeError("backward already ran on this tape; build a new one")
        self._spent = True
        root.grad = (
            np.ones_like(root.value)
            if seed is None
            else np.asarray(seed, dtype=root.value.dtype)
        )
        for n in reversed(self.nodes):
            if n.grad is None:
                continue
            if n.backward_fn is not None:
                n.backward_fn(n.grad)
            if n.param is not None:
                n.param.grad += n.grad


# ---------------------------------------------------------------- dense ops


def embedding(tape: Tape, table: Node, ids: np.ndarray) -> Node:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and not (0 <= ids.min() and ids.max() < table.value.shape[0]):
        raise ConfigError("token id outside embedding table")
    out = table.value[ids]

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        accum(table, gt)

    return tape.node(out, bw, name="embedding")


def linear(tape: Tape, x: Node, w: Node, b: Node | None = None) -> Node:
    out = x.value @ w.value
    if b is not None:
        out = out + b.value

    def bw(g):
        accum(x, g @ w.value.T)
        din, dout = w.value.shape
        accum(w, x.value.reshape(-1, din).T @ g.reshape(-1, dout))
        if b is not None:
            accum(b, g.reshape(-1, dout).sum(axis=0))

    return tape.node(out, bw, name="linear")


def linear_transposed(tape: Tape, x: Node, w: Node) -> Node:
    """``x @ w.T`` so an embedding table can double as the output head."""
    out = x.value @ w.value.T

    def bw(g):
        accum(x, g @ w.value)
        nout, din = w.value.shape
        accum(w, g.reshape(-1, nout).T @ x.value.reshape(-1, din))

    return tape.node(out, bw, name="linear_transposed")


def head_scaled_linear(
    tape: Tape, x: Node, w: Node, alpha: Node, n_heads: int, b: Node | None = None
) -> Node:
    """``(x @ w + b)`` with output columns scaled by exp(alpha) per head group.

    Equivalent to using the effective matrix exp(alpha_h) * w_columns(h);
    the exponential keeps the scale positive and makes alpha act as a
    learned inverse temperature on the decoded logits. The optional bias
    sits inside the scaling so alpha tempers the full projection.
    """
    din, dout = w.value.shape
    if alpha.value.shape != (n_heads,) or dout % n_heads:
        raise ConfigError("alpha must be one scalar per head of the output")
    per = dout // n_heads
    scale = np.repeat(np.exp(alpha.value), per)
    raw = x.value @ w.value
    if b is not None:
        raw = raw + b.value
    out = raw * scale

    def bw(g):
        accum(alpha, (g * out).reshape(-1, n_heads, per).sum(axis=(0, 2)))
        gs = g * scale
        accum(x, gs @ w.value.T)
        accum(w, x.value.reshape(-1, din).T @ gs.reshape(-1, dout))
        if b is not None:
            accum(b, gs.reshape(-1, dout).sum(axis=0))

    return tape.node(out, bw, name="head_scaled_linear")


def add(tape: Tape, a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ConfigError(f"add shape mismatch {a.value.shape} vs {b.value.shape}")

    def bw(g):
        accum(a, g)
        accum(b, g)

    return tape.node(a.value + b.value, bw, name="add")


def rmsnorm(tape: Tape, x: Node, gain: Node, eps: float = 1e-6) -> Node:
    inv = 1.0 / np.sqrt(np.mean(x.value**2, axis=-1, keepdims=True) + eps)
    xn = x.value * inv
    out = xn * gain.value

    def bw(g):
        accum(gain, (g * xn).reshape(-1, gain.value.size).sum(axis=0))
        gxn = g * gain.value
        accum(x, inv * (gxn - xn * np.mean(gxn * xn, axis=-1, keepdims=True)))

    return tape.node(out, bw, name="rmsnorm")


def silu(tape: Tape, x: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-x.value))
    out = x.value * s

    def bw(g):
        accum(x, g * (s * (1.0 + x.value * (1.0 - s))))

    return tape.node(out, bw, name="silu")


def sigmoid(tape: Tape, x: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-x.value))

    def bw(g):
        accum(x, g * s * (1.0 - s))

    return tape.node(s, bw, name="sigmoid")


def reshape(tape: Tape, x: Node, shape) -> Node:
    orig = x.value.shape

    def bw(g):
        accum(x, g.reshape(orig))

    return tape.node(x.value.reshape(shape), bw, name="reshape")


def take_positions(tape: Tape, x: Node, positions: np.ndarray) -> Node:
    """Gather (B, Q, ...) rows of a (B, T, ...) tensor at per-lane positions."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim != 2 or positions.shape[0] != x.value.shape[0]:
        raise ConfigError("positions must be (batch, n_query)")
    bidx = np.arange(x.value.shape[0])[:, None]
    out = x.value[bidx, positions]

    def bw(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (bidx, positions), g)
        accum(x, gx)

    return tape.node(out, bw, name="take_positions")


def cross_entropy_mean(tape: Tape, logits: Node, targets: np.ndarray) -> Node:
    """Mean negative log-likelihood over flat (N, vocab) rows."""
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.value.shape
    if targets.shape != (n,):
        raise ConfigError(f"targets must be shape ({n},), got {targets.shape}")
    if targets.size and not (0 <= targets.min() and targets.max() < vocab):
        raise ConfigError("target token outside vocab")
    m = logits.value.max(axis=-1, keepdims=True)
    z = np.exp(logits.value - m)
    lse = m[:, 0] + np.log(z.sum(axis=-1))
    ll = logits.value[np.arange(n), targets] - lse
    out = np.asarray(-ll.mean())

    def bw(g):
        p = z / z.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        accum(logits, float(g) * p / n)

    return tape.node(out, bw, name="cross_entropy")


# ------------------------------------------------------------ proxy config


@dataclass(frozen=True)
class ProxyGradSpec:
    """Surrogate-decay constants for the write-weight gradient."""

    eps_proxy: float = 0.01
    gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.eps_proxy < 1.0:
            raise ConfigError(f"eps_proxy must be strictly inside (0,1), got {self.eps_proxy}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")


# ------------------------------------------------------------- grad check


@dataclass
class CoordReport:
    param: str
    index: int
    analytic: float
    fd: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    failures: list = field(default_factory=list)
    worst: CoordReport | None = None

    @property
    def ok(self) -> bool:
        return not self.failures and self.n_checked > 0


def grad_check(
    loss_fn,
    grad_fn,
    params,
    n_coords: int = 4,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` evaluates the forward at the current parameter values and
    returns ``(loss, fingerprint)``; the fingerprint must capture every
    discrete choice the forward made (selected top-K index sets). A
    coordinate whose +h or -h evaluation changes the fingerprint sits on a
    selection boundary where the masked objective is not differentiable,
    and is skipped rather than graded. ``grad_fn()`` runs forward+backward
    once and returns {param name: gradient array}.

    Step size is cbrt(machine eps) scaled by coordinate magnitude; relative
    error uses max(|analytic|, |fd|, abs_floor) as denominator so rounding
    noise on near-zero gradients cannot fabricate failures.
    """
    rng = np.random.default_rng(seed)
    base_loss, base_fp = loss_fn()
    if not np.isfinite(base_loss):
        raise NumericError("loss is non-finite at the check point")
    grads = grad_fn()
    report = GradCheckReport(max_rel_err=0.0, n_checked=0, n_skipped=0)
    for p in params:
        if p.name not in grads:
            raise ConfigError(f"grad_fn returned no gradient for {p.name}")
        ga = np.asarray(grads[p.name]).reshape(-1)
        flat = p.value.reshape(-1)
        k = min(n_coords, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            h = CBRT_EPS * max(1.0, abs(orig))
            flat[i] = orig + h
            lp, fp_p = loss_fn()
            flat[i] = orig - h
            lm, fp_m = loss_fn()
            flat[i] = orig
            if fp_p != base_fp or fp_m != base_fp:
                report.n_skipped += 1
                continue
            fd = (lp - lm) / (2.0 * h)
            a = float(ga[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), abs_floor)
            entry = CoordReport(p.name, int(i), a, float(fd), float(rel))
            report.n_checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = entry
            if rel > rel_tol:
                report.failures.append(entry)
    return report

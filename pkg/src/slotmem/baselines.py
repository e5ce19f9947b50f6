"""Reference sequence mixers used as oracles and comparison points.

Three single-head, numpy-only forwards (no gradients):

* ``full_attention_forward``: causal softmax attention, state is the whole
  (K, V) history. Scores are the raw inner products, no 1/sqrt(d_k) factor.
* ``linear_attention_forward``: fixed d_k x d_v state with a scalar decay
  gate, ``S_t = g_t * S_{t-1} + phi(k_t)^T v_t``, output ``phi(q_t) S_t``
  (unnormalized, so the g == 1 case equals the plain summation form).
* ``dense_slot_reference``: the slot memory computed with full M-vectors
  and an M x d_v state, no beam search. Ground truth for the sparse engine.

``state_size`` pins the per-head state accounting used on the
accuracy-vs-state-size axis: full attention grows with sequence length,
the other two are fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import (
    DENSE_CAP_DEFAULT,
    DecoderConfig,
    dense_product_softmax,
    dense_topk,
)
from .errors import ConfigError
from .memory import DEFAULT_EPS, decay_factors
from .positional import ADDRESS_MODES, dense_cyclic_shift

MODEL_KINDS = ("slot", "full_attention", "linear_attention")

PHI_KINDS = ("relu", "identity")


def phi_map(x: np.ndarray, kind: str = "relu") -> np.ndarray:
    """Feature map for linear attention; must keep features finite."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "identity":
        return x
    raise ConfigError(f"phi kind must be one of {PHI_KINDS}, got {kind!r}")


def _check_streams(q, k, v):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ConfigError("q, k, v must each be (T, dim) arrays")
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ConfigError(
            f"stream shapes disagree: q{q.shape} k{k.shape} v{v.shape}"
        )
    return q, k, v


def full_attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal attention over the growing (K, V) cache, one step at a time.

    Scores use the standard 1/sqrt(d_k) scaling.
    """
    q, k, v = _check_streams(q, k, v)
    out = np.zeros((q.shape[0], v.shape[1]))
    scale = 1.0 / math.sqrt(q.shape[1])
    for t in range(q.shape[0]):
        scores = (k[: t + 1] @ q[t]) * scale
        scores -= scores.max()
        w = np.exp(scores)
        w /= w.sum()
        out[t] = w @ v[: t + 1]
    return out


def linear_attention_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    gates: np.ndarray | None = None,
    phi: str = "relu",
) -> np.ndarray:
    """Gated outer-product recurrence with a fixed d_k x d_v state."""
    q, k, v = _check_streams(q, k, v)
    T, d_k = q.shape
    d_v = v.shape[1]
    if gates is None:
        gates = np.ones(T)
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (T,):
        raise ConfigError(f"gates must be shape ({T},), got {gates.shape}")
    w = phi_map(k, phi)
    r = phi_map(q, phi)
    S = np.zeros((d_k, d_v))
    out = np.zeros((T, d_v))
    for t in range(T):
        S = gates[t] * S + np.outer(w[t], v[t])
        out[t] = r[t] @ S
    return out


def dense_slot_reference(
    keys: np.ndarray,
    queries: np.ndarray,
    values: np.ndarray,
    cfg: DecoderConfig,
    mode: str = "absolute",
    gamma: float = 1.0,
    eps: float = DEFAULT_EPS,
    apply_topk: bool = True,
    materialize_cap: int = DENSE_CAP_DEFAULT,
) -> np.ndarray:
    """Slot memory computed on full M-vectors; oracle for the sparse engine.

    Decode each key/query to a dense product-softmax distribution, zero all
    but the top ``cfg.top_k`` entries when ``apply_topk`` (same tie rule as
    the sparse path), roll by the token position in relative mode, then run
    the decay/accumulate recurrence across all M slots at once.
    """
    keys, queries, values = _check_streams(keys, queries, values)
    if mode not in ADDRESS_MODES:
        raise ConfigError(f"addressing mode must be one of {ADDRESS_MODES}, got {mode!r}")
    M = cfg.capacity
    if M > materialize_cap:
        raise ConfigError(
            f"dense reference would materialize {M} slots (cap {materialize_cap})"
        )
    T = keys.shape[0]
    S = np.zeros((M, values.shape[1]))
    z = np.full(M, 1.0 / M)
    out = np.zeros((T, values.shape[1]))
    for t in range(T):
        w = dense_product_softmax(keys[t], cfg, materialize_cap)
        r = dense_product_softmax(queries[t], cfg, materialize_cap)
        if apply_topk:
            w_mask = np.zeros(M)
            w_mask[dense_topk(w, cfg.top_k)[0]] = 1.0
            r_mask = np.zeros(M)
            r_mask[dense_topk(r, cfg.top_k)[0]] = 1.0
            w, r = w * w_mask, r * r_mask
        if mode == "relative":
            w = dense_cyclic_shift(w, t)
            r = dense_cyclic_shift(r, t)
        d = decay_factors(w, gamma)
        S = d[:, None] * S + w[:, None] * values[t]
        z = d * z + w
        out[t] = r @ (S / (z + eps)[:, None])
    return out


def state_size(
    kind: str,
    seq_len: int | None = None,
    d_k: int | None = None,
    d_v: int | None = None,
    capacity: int | None = None,
) -> int:
    """Per-head memory-state element count.

    full_attention: seq_len * (d_k + d_v), grows with the sequence.
    linear_attention: d_k * d_v, fixed.
    slot: capacity * (d_v + 1), fixed; the +1 is the mass normalizer.
    """
    if kind == "full_attention":
        if seq_len is None or d_k is None or d_v is None:
            raise ConfigError("full_attention state size needs seq_len, d_k, d_v")
        return seq_len * (d_k + d_v)
    if kind == "linear_attention":
        if d_k is None or d_v is None:
            raise ConfigError("linear_attention state size needs d_k, d_v")
        return d_k * d_v
    if kind == "slot":
        if capacity is None or d_v is None:
            raise ConfigError("slot state size needs capacity, d_v")
        return capacity * (d_v + 1)
    raise ConfigError(f"kind must be one of {MODEL_KINDS}, got {kind!r}")


def active_state_size(top_k: int, d_v: int) -> int:
    """Slot elements touched per step per head: 2K slots (write + read)."""
    return 2 * top_k * (d_v + 1)


@dataclass(frozen=True)
class BaselineSpec:
    """Dimensions plus accounting for one comparison model."""

    kind: str
    d_k: int
    d_v: int
    capacity: int | None = None
    gate: str = "sigmoid_proj"
    phi: str = "relu"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.kind == "slot" and self.capacity is None:
            raise ConfigError("slot baseline needs a capacity")
        if self.phi not in PHI_KINDS:
            raise ConfigError(f"phi must be one of {PHI_KINDS}, got {self.phi!r}")

    def state_size(self, seq_len: int | None = None) -> int:
        return state_size(
            self.kind,
            seq_len=seq_len,
            d_k=self.d_k,
            d_v=self.d_v,
            capacity=self.capacity,
        )

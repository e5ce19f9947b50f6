"""Sparse address decoding over a factorized slot distribution.

A dense key of dimension ``order * part_dim`` is split into ``order``
contiguous sub-vectors. Each sub-vector goes through a temperature softmax,
and the outer (Kronecker) product of the per-part distributions defines a
probability vector over ``capacity = part_dim ** order`` memory slots.
Keeping only the ``top_k`` largest entries of that product distribution
yields a K-hot sparse address.

The product structure lets us find the exact top-K without ever
materializing the full slot vector: per-part candidates are merged in the
log domain, beam-search style, pruning to the K best partial products at
each stage. Pruning is exact because appending a part adds the same set of
log-terms to every prefix, so a prefix dominated by K others stays dominated.

Conventions fixed here and relied on everywhere else:

* part ``u = 0`` is the MOST significant base-``part_dim`` digit of the flat
  slot index;
* ties are broken toward the smaller flat index (sort key: value descending,
  index ascending);
* kept weights are the raw truncated softmax values. ``renormalize=True``
  rescales them to sum to one, but the memory normalizer already performs
  dynamic normalization, so the default leaves them untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

# Refuse to materialize dense slot vectors above this size; the dense path
# exists for tests and oracles only.
DENSE_CAP_DEFAULT = 1 << 20

_INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class DecoderConfig:
    """Shape and sharpness of the address decoder.

    ``capacity`` is always ``part_dim ** order``; configs whose capacity
    would overflow the int64 slot index are rejected at construction.
    """

    order: int
    part_dim: int
    top_k: int
    tau: float = 1.0
    renormalize: bool = False

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ConfigError(f"order must be >= 1, got {self.order}")
        if self.part_dim < 1:
            raise ConfigError(f"part_dim must be >= 1, got {self.part_dim}")
        cap = 1
        for _ in range(self.order):
            cap *= self.part_dim
            if cap > _INT64_MAX:
                raise ConfigError(
                    f"capacity {self.part_dim}**{self.order} overflows the "
                    f"int64 slot index"
                )
        if not 1 <= self.top_k <= cap:
            raise ConfigError(
                f"top_k must lie in [1, capacity={cap}], got {self.top_k}"
            )
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError(f"tau must be a positive real, got {self.tau}")

    @property
    def capacity(self) -> int:
        return self.part_dim**self.order

    @property
    def key_dim(self) -> int:
        return self.order * self.part_dim


@dataclass(frozen=True)
class SparseAddress:
    """K-hot address: strictly ascending slot indices with positive weights.

    The weight vector is a truncated softmax, so its entries lie in (0, 1]
    and sum to at most one (up to rounding).
    """

    indices: np.ndarray
    weights: np.ndarray
    capacity: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)
        if idx.ndim != 1 or w.shape != idx.shape:
            raise ConfigError("indices and weights must be 1-D and same length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.capacity:
                raise ConfigError("slot indices out of range")
            if np.any(np.diff(idx) <= 0):
                raise ConfigError("slot indices must be strictly ascending")
            if np.any(w <= 0.0):
                raise ConfigError("weights must be strictly positive")
        if float(w.sum()) > 1.0 + 1e-12:
            raise ConfigError(f"weight mass {w.sum()} exceeds 1")

    def __len__(self) -> int:
        return int(self.indices.size)

    def dense(self) -> np.ndarray:
        """Expand to a dense length-``capacity`` vector (test/oracle use)."""
        if self.capacity > DENSE_CAP_DEFAULT:
            raise ConfigError(f"refusing to densify capacity {self.capacity}")
        out = np.zeros(self.capacity, dtype=np.float64)
        out[self.indices] = self.weights
        return out


@dataclass
class BeamCounters:
    """Instrumented work counter for the beam search.

    ``candidates`` counts partial products materialized during merges (plus
    the initial per-part selection); ``sort_ops`` charges
    ``part_dim * ceil(log2 part_dim)`` per per-part sort. Both are totals
    across all addresses decoded through this counter.
    """

    candidates: int = 0
    sort_ops: int = 0
    addresses: int = 0

    @property
    def per_address(self) -> float:
        n = max(self.addresses, 1)
        return (self.candidates + self.sort_ops) / n


def complexity_budget(cfg: DecoderConfig, constant: float = 4.0) -> float:
    """Per-address work budget ``c * (U*K^2 + U*d_p*log2 d_p)``."""
    u, dp, k = cfg.order, cfg.part_dim, cfg.top_k
    return constant * (u * k * k + u * dp * max(1.0, math.log2(dp)))


def split_parts(k: np.ndarray, cfg: DecoderConfig) -> np.ndarray:
    """View a dense key as ``(..., order, part_dim)`` sub-vector blocks.

    Fails if the trailing dimension is not exactly ``order * part_dim``.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.shape[-1] != cfg.key_dim:
        raise ConfigError(
            f"key dim {k.shape[-1]} != order*part_dim = {cfg.key_dim}"
        )
    return k.reshape(*k.shape[:-1], cfg.order, cfg.part_dim)


def log_softmax(x: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Stable log softmax of ``x / tau`` along the last axis."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input to log_softmax (corrupted activations?)")
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def dense_product_softmax(
    k: np.ndarray, cfg: DecoderConfig, cap: int = DENSE_CAP_DEFAULT
) -> np.ndarray:
    """Materialize the full product-softmax distribution over all slots.

    Oracle/test path only: entry ``i`` is the product over parts of the
    per-part softmax probability of the base-``part_dim`` digit of ``i``
    (most significant digit first). Refuses capacities above ``cap``.
    """
    if cfg.capacity > cap:
        raise ConfigError(
            f"capacity {cfg.capacity} above materialization cap {cap}; "
            f"the dense path is for oracles only"
        )
    parts = split_parts(k, cfg)
    if parts.ndim != 2:
        raise ConfigError("dense_product_softmax expects a single key vector")
    probs = np.exp(log_softmax(parts, cfg.tau))
    out = probs[0]
    for u in range(1, cfg.order):
        out = (out[:, None] * probs[u][None, :]).reshape(-1)
    return out


def dense_topk(p: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k of a dense vector under the shared tie rule.

    Returns (ascending indices, matching values), zero-valued entries
    dropped. Used as the brute-force oracle against the beam search.
    """
    p = np.asarray(p, dtype=np.float64)
    order = np.lexsort((np.arange(p.size), -p))[:k]
    order = np.sort(order)
    vals = p[order]
    keep = vals > 0.0
    return order[keep], vals[keep]


def _beam_topk_batch(
    logp: np.ndarray, top_k: int, counters: BeamCounters | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact batched top-k over factorized log-distributions.

    ``logp`` has shape (N, order, part_dim) holding per-part log
    probabilities. Returns ``(indices, logvals, min_gap)`` where indices and
    logvals have shape (N, B) with ``B = min(top_k, capacity)`` ordered by
    (value desc, index asc), and ``min_gap`` is the smallest log-gap between
    a kept and a pruned candidate at any stage (+inf when nothing was
    pruned). The gap feeds tie detection in gradient checking.
    """
    n, order, dp = logp.shape
    keep = min(top_k, dp)
    sort_charge = dp * max(1, math.ceil(math.log2(dp))) if dp > 1 else 1

    # Stable argsort of -logp: value descending, digit ascending on ties.
    digit_order = np.argsort(-logp, axis=-1, kind="stable")
    sorted_lp = np.take_along_axis(logp, digit_order, axis=-1)

    min_gap = np.full(n, np.inf)
    if dp > keep:
        np.minimum(min_gap, (sorted_lp[:, :, keep - 1] - sorted_lp[:, :, keep]).min(axis=1), out=min_gap)

    beam_val = sorted_lp[:, 0, :keep].copy()
    beam_idx = digit_order[:, 0, :keep].astype(np.int64)
    if counters is not None:
        counters.addresses += n
        counters.candidates += n * keep
        counters.sort_ops += n * order * sort_charge

    for u in range(1, order):
        b = beam_val.shape[1]
        cand_val = (beam_val[:, :, None] + sorted_lp[:, u, None, :keep]).reshape(n, -1)
        cand_idx = (beam_idx[:, :, None] * dp + digit_order[:, u, None, :keep]).reshape(n, -1)
        if counters is not None:
            counters.candidates += cand_val.size
        if cand_val.shape[1] > top_k:
            sel = np.lexsort((cand_idx, -cand_val), axis=-1)
            cand_val = np.take_along_axis(cand_val, sel, axis=-1)
            cand_idx = np.take_along_axis(cand_idx, sel, axis=-1)
            np.minimum(min_gap, cand_val[:, top_k - 1] - cand_val[:, top_k], out=min_gap)
            beam_val = cand_val[:, :top_k].copy()
            beam_idx = cand_idx[:, :top_k].copy()
        else:
            beam_val, beam_idx = cand_val, cand_idx

    return beam_idx, beam_val, min_gap


def decode_batch(
    keys: np.ndarray,
    cfg: DecoderConfig,
    counters: BeamCounters | None = None,
    with_gap: bool = False,
    renormalize: bool | None = None,
):
    """Decode a batch of dense keys to padded sparse-address arrays.

    Returns ``(indices, weights)`` of shape (N, B) with B = min(top_k,
    capacity). Rows are sorted by slot index ascending; entries whose
    softmax mass underflowed to zero are packed at the end with index 0 and
    weight 0 (inert for all downstream consumers). With ``with_gap`` a
    third array carries the per-row pruning log-gap. ``renormalize``
    overrides the config flag (the oracle-equality contract needs raw
    values regardless of config).
    """
    keys = np.asarray(keys, dtype=np.float64)
    squeeze = keys.ndim == 1
    if squeeze:
        keys = keys[None, :]
    parts = split_parts(keys, cfg)
    logp = log_softmax(parts, cfg.tau)
    idx, logv, gap = _beam_topk_batch(logp, cfg.top_k, counters)

    weights = np.exp(logv)
    # Re-sort each row by slot index; push underflowed entries to the end.
    sort_key = np.where(weights > 0.0, idx, cfg.capacity)
    order = np.argsort(sort_key, axis=-1, kind="stable")
    idx = np.take_along_axis(idx, order, axis=-1)
    weights = np.take_along_axis(weights, order, axis=-1)
    dead = weights <= 0.0
    idx[dead] = 0
    weights[dead] = 0.0
    if cfg.renormalize if renormalize is None else renormalize:
        total = weights.sum(axis=-1, keepdims=True)
        np.divide(weights, total, out=weights, where=total > 0)

    if squeeze:
        idx, weights, gap = idx[0], weights[0], gap[0]
    if with_gap:
        return idx, weights, gap
    return idx, weights


def beam_search_topk(
    k: np.ndarray, cfg: DecoderConfig, counters: BeamCounters | None = None
) -> SparseAddress:
    """Exact top-K of the product softmax without materializing it.

    Always returns the raw truncated softmax values (the quantity the dense
    brute-force oracle reproduces), ignoring ``cfg.renormalize``.
    """
    idx, w = decode_batch(k, cfg, counters, renormalize=False)
    live = w > 0.0
    return SparseAddress(idx[live], w[live], cfg.capacity)


def decode_address(
    k: np.ndarray, cfg: DecoderConfig, counters: BeamCounters | None = None
) -> SparseAddress:
    """Full address decode: product softmax followed by top-K truncation.

    Honors ``cfg.renormalize``; by default kept weights stay raw, since the
    memory-side normalizer already rescales reads dynamically.
    """
    idx, w = decode_batch(k, cfg, counters)
    live = w > 0.0
    return SparseAddress(idx[live], w[live], cfg.capacity)

"""Time-dependent cyclic shifting of sparse addresses.

Shifting converts absolute slot addressing into relative addressing: the
defining rule is that position ``i`` of the shifted vector reads entry
``(i + t) mod capacity`` of the original. Equivalently, mass stored at
original index ``j`` lands at shifted index ``(j - t) mod capacity``; that
sparse-index transform is derived from the dense rule and is the single
source of truth for the shift direction.

Because both write and read addresses are shifted by the same step index,
the interaction between a write at step ``t`` and a read at step ``t'``
depends only on ``t - t'``. ``t`` is the absolute token position within the
sequence, starting at 0 (matching the zero initial state).
"""

from __future__ import annotations

import math

import numpy as np

from .decoder import SparseAddress
from .errors import ConfigError

ADDRESS_MODES = ("relative", "absolute")


def shift_indices(indices: np.ndarray, t, capacity: int) -> np.ndarray:
    """Sparse-index form of the shift: original ``j`` -> ``(j - t) % M``.

    Broadcasts over arbitrary batch shapes; ``t`` may be an array.
    """
    return (np.asarray(indices, dtype=np.int64) - np.asarray(t, dtype=np.int64)) % capacity


def cyclic_shift(addr: SparseAddress, t: int) -> SparseAddress:
    """Apply the step-``t`` cyclic shift to a sparse address.

    Weights travel with their indices; the result is re-sorted ascending.
    """
    idx = shift_indices(addr.indices, t, addr.capacity)
    order = np.argsort(idx)
    return SparseAddress(idx[order], addr.weights[order], addr.capacity)


def apply_positional(addr: SparseAddress, t: int, mode: str) -> SparseAddress:
    """Shift in ``relative`` mode; return the address unchanged in ``absolute``."""
    if mode not in ADDRESS_MODES:
        raise ConfigError(f"addressing mode must be one of {ADDRESS_MODES}, got {mode!r}")
    if mode == "absolute":
        return addr
    return cyclic_shift(addr, t)


def dense_cyclic_shift(vec: np.ndarray, t: int) -> np.ndarray:
    """Dense form of the shift: ``out[i] = vec[(i + t) % M]`` (oracle path)."""
    return np.roll(np.asarray(vec), -int(t), axis=-1)


def address_dot(a: SparseAddress, b: SparseAddress) -> float:
    """Inner product of two sparse addresses, order-independent.

    Summation uses ``math.fsum`` over the index intersection, so the result
    depends only on the multiset of matched weight products. This makes the
    relative-distance invariance of shifted dot products hold exactly, not
    just up to rounding.
    """
    if a.capacity != b.capacity:
        raise ConfigError("addresses live in different capacities")
    common, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
    if common.size == 0:
        return 0.0
    return math.fsum((a.weights[ia] * b.weights[ib]).tolist())

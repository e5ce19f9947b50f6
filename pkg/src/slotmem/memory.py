"""Power-decay slot memory: sparse writes, mass tracking, normalized reads.

State per head is a slot matrix ``S`` (capacity x value_dim) plus a
normalizer vector ``z`` (accumulated write mass per slot). A write with
sparse weights ``w`` and value ``v`` updates each active slot ``m``:

    S[m] <- (1 - w[m])**gamma * S[m] + w[m] * v
    z[m] <- (1 - w[m])**gamma * z[m] + w[m]

with ``S`` starting at zero and ``z`` at ``1/capacity`` per entry. Slots the
address does not touch are bit-identical afterwards, since their decay
factor is exactly one; that is what makes sparse execution exact rather
than approximate. A read returns ``sum_m r[m] * S[m] / (z[m] + eps)``.

``gamma`` decouples forgetting from write intensity: at ``gamma = 0`` the
decay is identically one and the state is a pure weighted accumulation
(``0**0`` is taken as 1, the continuous limit, so even saturated writes
never erase); ``gamma = 1`` is plain complement decay; larger ``gamma``
forgets faster. ``smoothed_decay`` is the surrogate used by the gradient
path near ``w -> 1``, where the true derivative of the decay either blows
up (gamma < 1) or vanishes (gamma >= 1).
"""

from __future__ import annotations

import numpy as np

from .decoder import DecoderConfig, SparseAddress, decode_batch
from .errors import ConfigError, NumericError
from .positional import ADDRESS_MODES, shift_indices

DEFAULT_EPS = 1e-6
DEFAULT_GAMMA = 1.0
DEFAULT_EPS_PROXY = 0.01


def decay_factors(w: np.ndarray, gamma: float) -> np.ndarray:
    """Per-slot retention ``(1 - w)**gamma`` with ``0**0 := 1``."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w > 1.0):
        raise ConfigError("write weights above 1 violate the address contract")
    return np.power(1.0 - w, gamma)


def smoothed_decay(w: np.ndarray, gamma: float, eps_proxy: float) -> np.ndarray:
    """Surrogate retention ``(eps + (1-eps)(1-w))**gamma``, bounded away from 0."""
    w = np.asarray(w, dtype=np.float64)
    return np.power(eps_proxy + (1.0 - eps_proxy) * (1.0 - w), gamma)


def proxy_decay_derivative(w: np.ndarray, gamma: float, eps_proxy: float) -> np.ndarray:
    """d/dw of the surrogate retention: ``-gamma*(1-eps)*(eps+(1-eps)(1-w))**(gamma-1)``.

    Finite for all ``w`` in [0, 1] whenever ``eps_proxy > 0``; with
    ``eps_proxy = 0`` it degenerates to the true derivative of the exact
    decay (divergent at ``w = 1`` for ``gamma < 1``, by design).
    """
    w = np.asarray(w, dtype=np.float64)
    if gamma == 0.0:
        return np.zeros_like(w)
    base = eps_proxy + (1.0 - eps_proxy) * (1.0 - w)
    return -gamma * (1.0 - eps_proxy) * np.power(base, gamma - 1.0)


class MemoryState:
    """Slot matrix plus mass normalizer for one head of one sequence.

    Owned exclusively by a single sequence-processing context; distinct
    heads or batch lanes hold independent states.
    """

    def __init__(
        self,
        capacity: int,
        value_dim: int,
        gamma: float = DEFAULT_GAMMA,
        eps: float = DEFAULT_EPS,
    ):
        if capacity < 1 or value_dim < 1:
            raise ConfigError("capacity and value_dim must be positive")
        if gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {gamma}")
        if not eps > 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        self.capacity = capacity
        self.value_dim = value_dim
        self.gamma = float(gamma)
        self.eps = float(eps)
        self.slots = np.zeros((capacity, value_dim), dtype=np.float64)
        self.mass = np.full(capacity, 1.0 / capacity, dtype=np.float64)

    def _check_address(self, addr: SparseAddress) -> None:
        if addr.capacity != self.capacity:
            raise ConfigError(
                f"address capacity {addr.capacity} != memory capacity {self.capacity}"
            )

    def write(self, addr: SparseAddress, value: np.ndarray) -> None:
        """Decay-and-accumulate the active slots; all others are untouched."""
        self._check_address(addr)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (self.value_dim,):
            raise ConfigError(f"value shape {value.shape} != ({self.value_dim},)")
        idx, w = addr.indices, addr.weights
        d = decay_factors(w, self.gamma)
        self.slots[idx] = d[:, None] * self.slots[idx] + w[:, None] * value
        self.mass[idx] = d * self.mass[idx] + w
        if idx.size and float(self.mass[idx].min()) <= 0.0:
            raise NumericError("slot mass dropped to zero (normalizer invariant broken)")

    def read(self, addr: SparseAddress) -> np.ndarray:
        """Mass-normalized gather: ``sum_m r[m] * S[m] / (z[m] + eps)``."""
        self._check_address(addr)
        idx, w = addr.indices, addr.weights
        rows = self.slots[idx] / (self.mass[idx] + self.eps)[:, None]
        return w @ rows if idx.size else np.zeros(self.value_dim)


def memory_step(
    state: MemoryState,
    k: np.ndarray,
    q: np.ndarray,
    v: np.ndarray,
    t: int,
    cfg: DecoderConfig,
    mode: str = "absolute",
    trace: list | None = None,
    layer: int = 0,
    head: int = 0,
    counters=None,
) -> np.ndarray:
    """One full step: decode both addresses, shift, write, then read.

    The read sees the post-write state of the same step. When ``trace`` is
    given, one event per touched slot is appended (writes before reads,
    slots ascending); the event type lives in ``slotmem.traces``.
    """
    if mode not in ADDRESS_MODES:
        raise ConfigError(f"addressing mode must be one of {ADDRESS_MODES}, got {mode!r}")
    from .decoder import decode_address
    from .positional import apply_positional

    w_addr = apply_positional(decode_address(k, cfg, counters), t, mode)
    r_addr = apply_positional(decode_address(q, cfg, counters), t, mode)
    state.write(w_addr, v)
    out = state.read(r_addr)
    if trace is not None:
        from .traces import TraceEvent

        for slot, weight in zip(w_addr.indices.tolist(), w_addr.weights.tolist()):
            trace.append(TraceEvent(t=t, layer=layer, head=head, kind="write", slot=slot, weight=weight))
        for slot, weight in zip(r_addr.indices.tolist(), r_addr.weights.tolist()):
            trace.append(TraceEvent(t=t, layer=layer, head=head, kind="read", slot=slot, weight=weight))
    return out

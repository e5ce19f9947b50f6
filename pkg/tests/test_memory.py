"""Power-decay slot memory: hand-computed oracles and state invariants.

The closed-form values below were worked out by hand from the update rule
S <- (1-w)**gamma * S + w*v, z <- (1-w)**gamma * z + w with S0 = 0 and
z0 = 1/M, then frozen.
"""

import numpy as np
import pytest

from slotmem.decoder import DecoderConfig, SparseAddress
from slotmem.errors import ConfigError
from slotmem.memory import (
    MemoryState,
    decay_factors,
    memory_step,
    proxy_decay_derivative,
    smoothed_decay,
)


def _onehot(idx, w, capacity=8):
    return SparseAddress(np.array([idx]), np.array([w]), capacity)


def test_decay_factors_zero_power_zero_is_one():
    d = decay_factors(np.array([0.0, 0.5, 1.0]), gamma=0.0)
    np.testing.assert_array_equal(d, [1.0, 1.0, 1.0])
    d1 = decay_factors(np.array([0.0, 0.5, 1.0]), gamma=1.0)
    np.testing.assert_array_equal(d1, [1.0, 0.5, 0.0])
    with pytest.raises(ConfigError):
        decay_factors(np.array([1.5]), gamma=1.0)


def test_smoothed_decay_limits():
    w = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(
        smoothed_decay(w, 1.0, 0.0), decay_factors(w, 1.0), rtol=0, atol=0
    )
    # floor at w = 1 equals eps**gamma
    assert smoothed_decay(np.array([1.0]), 2.0, 0.01)[0] == pytest.approx(1e-4)


def test_proxy_derivative_matches_finite_difference():
    rng = np.random.default_rng(0)
    w = rng.uniform(0.0, 0.99, size=32)
    h = 1e-6
    for gamma in (0.0, 0.5, 1.0, 2.0):
        fd = (smoothed_decay(w + h, gamma, 0.01) - smoothed_decay(w - h, gamma, 0.01)) / (2 * h)
        np.testing.assert_allclose(
            proxy_decay_derivative(w, gamma, 0.01), fd, rtol=1e-6, atol=1e-9
        )


def test_proxy_derivative_finite_at_saturation():
    d = proxy_decay_derivative(np.array([1.0]), 0.5, 0.01)
    assert np.isfinite(d[0])
    # eps_proxy = 0 degenerates to the true (divergent) derivative
    with np.errstate(divide="ignore"):
        d0 = proxy_decay_derivative(np.array([1.0]), 0.5, 0.0)
    assert not np.isfinite(d0[0]) or abs(d0[0]) > 1e12


def test_initial_state():
    st = MemoryState(capacity=8, value_dim=3)
    np.testing.assert_array_equal(st.slots, 0.0)
    np.testing.assert_array_equal(st.mass, 1.0 / 8)


def test_saturated_first_write_replaces():
    # w = 1, gamma > 0: decay 0, so S = v exactly and z = 1 exactly.
    st = MemoryState(capacity=8, value_dim=2, gamma=1.0)
    v = np.array([2.0, -3.0])
    st.write(_onehot(5, 1.0), v)
    np.testing.assert_array_equal(st.slots[5], v)
    assert st.mass[5] == 1.0


def test_gamma_zero_is_pure_accumulation():
    st = MemoryState(capacity=8, value_dim=2, gamma=0.0)
    v1, v2 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    st.write(_onehot(3, 1.0), v1)
    st.write(_onehot(3, 1.0), v2)
    np.testing.assert_array_equal(st.slots[3], v1 + v2)
    assert st.mass[3] == pytest.approx(2.0 + 1.0 / 8, rel=0, abs=0)


def test_half_weight_writes_frozen_values():
    # gamma = 1, w = 0.5 twice with the same v: S = 0.75 v,
    # z = 0.25/M + 0.75.
    st = MemoryState(capacity=8, value_dim=1, gamma=1.0)
    v = np.array([4.0])
    st.write(_onehot(2, 0.5), v)
    st.write(_onehot(2, 0.5), v)
    np.testing.assert_allclose(st.slots[2], [3.0], rtol=0, atol=0)
    assert st.mass[2] == 0.25 / 8 + 0.75


def test_untouched_slots_bit_identical():
    rng = np.random.default_rng(1)
    st = MemoryState(capacity=16, value_dim=4)
    st.slots[:] = rng.normal(size=(16, 4))
    st.mass[:] = rng.uniform(0.1, 1.0, size=16)
    before_s, before_z = st.slots.copy(), st.mass.copy()
    addr = SparseAddress(np.array([3, 9]), np.array([0.4, 0.3]), 16)
    st.write(addr, rng.normal(size=4))
    untouched = np.setdiff1d(np.arange(16), addr.indices)
    assert np.array_equal(st.slots[untouched], before_s[untouched])
    assert np.array_equal(st.mass[untouched], before_z[untouched])


def test_read_is_mass_normalized_gather():
    st = MemoryState(capacity=8, value_dim=2, eps=1e-6)
    st.slots[1] = [2.0, 0.0]
    st.slots[4] = [0.0, 6.0]
    st.mass[1], st.mass[4] = 0.5, 2.0
    addr = SparseAddress(np.array([1, 4]), np.array([0.5, 0.25]), 8)
    out = st.read(addr)
    expect = 0.5 * st.slots[1] / (0.5 + 1e-6) + 0.25 * st.slots[4] / (2.0 + 1e-6)
    np.testing.assert_allclose(out, expect, rtol=1e-15)


def test_read_bounded_by_value_history():
    # Convexity: |o_j| <= max over history of |v_j| when read mass <= 1.
    rng = np.random.default_rng(2)
    cfg = DecoderConfig(order=2, part_dim=4, top_k=3, tau=0.8)
    st = MemoryState(capacity=16, value_dim=5)
    vmax = np.zeros(5)
    for t in range(100):
        v = rng.normal(size=5) * 3
        vmax = np.maximum(vmax, np.abs(v))
        out = memory_step(st, rng.normal(size=8), rng.normal(size=8), v, t, cfg)
        assert np.all(np.abs(out) <= vmax + 1e-12)
        assert st.mass.min() > 0.0


def test_memory_step_write_then_read_same_slot():
    # With sharp softmax both addresses pick the same slot; the read sees
    # the value written at the very same step.
    cfg = DecoderConfig(order=1, part_dim=8, top_k=1, tau=1e-3)
    st = MemoryState(capacity=8, value_dim=2, eps=1e-9)
    k = np.zeros(8)
    k[3] = 10.0
    v = np.array([1.0, -1.0])
    out = memory_step(st, k, k, v, t=0, cfg=cfg)
    np.testing.assert_allclose(out, v, rtol=1e-6)


def test_memory_step_relative_mode_shifts_both():
    # Same key for write and read at the same step: shift cancels, so the
    # relative-mode output matches the absolute-mode output exactly.
    cfg = DecoderConfig(order=2, part_dim=4, top_k=4, tau=0.5)
    rng = np.random.default_rng(3)
    k, q, v = rng.normal(size=8), rng.normal(size=8), rng.normal(size=3)
    out_abs = memory_step(MemoryState(16, 3), k, q, v, t=7, cfg=cfg, mode="absolute")
    out_rel = memory_step(MemoryState(16, 3), k, q, v, t=7, cfg=cfg, mode="relative")
    np.testing.assert_allclose(out_rel, out_abs, rtol=0, atol=0)


def test_memory_step_trace_events():
    cfg = DecoderConfig(order=2, part_dim=4, top_k=2, tau=0.7)
    rng = np.random.default_rng(4)
    trace = []
    st = MemoryState(16, 3)
    memory_step(st, rng.normal(size=8), rng.normal(size=8), rng.normal(size=3),
                t=5, cfg=cfg, trace=trace, layer=1, head=0)
    kinds = [e.kind for e in trace]
    assert kinds == ["write", "write", "read", "read"]
    assert all(e.t == 5 and e.layer == 1 and e.head == 0 for e in trace)
    w_slots = [e.slot for e in trace if e.kind == "write"]
    assert w_slots == sorted(w_slots)


def test_state_validation():
    with pytest.raises(ConfigError):
        MemoryState(0, 3)
    with pytest.raises(ConfigError):
        MemoryState(8, 3, gamma=-0.5)
    with pytest.raises(ConfigError):
        MemoryState(8, 3, eps=0.0)
    st = MemoryState(8, 3)
    with pytest.raises(ConfigError):
        st.write(_onehot(1, 0.5, capacity=16), np.zeros(3))
    with pytest.raises(ConfigError):
        st.write(_onehot(1, 0.5), np.zeros(4))

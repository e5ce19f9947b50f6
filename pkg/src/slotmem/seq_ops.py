"""Tape ops for the three sequence mixers.

``memory_attention`` is the sparse slot path: decode write/read addresses
from k and q, cyclically shift relative-mode heads by token position, run
the decay/accumulate recurrence, read after write each step. Only touched
slots are ever gathered or scattered, so work scales with top_k, not
capacity.

Backward follows the true chain rule everywhere except two pinned choices:
the top-K selection is a fixed mask (gradient flows only through kept
softmax values), and d/dw of the decay uses the derivative of the smoothed
surrogate ``(eps_p + (1-eps_p)(1-w))**gamma``. With ``decay_mode="exact"``
the forward stays exact and the surrogate derivative acts as a proxy; with
``decay_mode="smoothed"`` the forward itself uses the surrogate, making
the analytic gradient the true gradient of the computed function (the
configuration finite-difference checks run in).

The adjoint recurrence mirrors the forward in reverse: per step, read
contributions enter the slot adjoint first (reads saw the post-write
state), then write gradients are extracted and the adjoint is decayed back
through the write. Pre/post-write rows of touched slots are checkpointed
during forward, so backward never reconstructs memory states.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Node, Tape, accum
from .decoder import BeamCounters, DecoderConfig, _beam_topk_batch, log_softmax, split_parts
from .errors import ConfigError, NumericError
from .memory import (
    DEFAULT_EPS,
    DEFAULT_EPS_PROXY,
    decay_factors,
    proxy_decay_derivative,
    smoothed_decay,
)
from .positional import ADDRESS_MODES

DECAY_MODES = ("exact", "smoothed")


def _decode_gradient(
    logp: np.ndarray, idx: np.ndarray, weights: np.ndarray, grad_w: np.ndarray, tau: float
) -> np.ndarray:
    """Gradient on the dense key from upstream grads on kept address weights.

    Each kept weight is a product of per-part softmax probabilities, so part
    u of the key receives, at digit j:
    ``(sum_{kept i with digit_u(i)=j} g_i p_i - s_u[j] * sum_i g_i p_i) / tau``.
    Zero-weight (underflowed) entries contribute nothing since g*p = 0.
    """
    n, order, dp = logp.shape
    gp = grad_w * weights
    tot = gp.sum(axis=-1)
    gsub = np.zeros_like(logp)
    rows = np.arange(n)[:, None]
    rem = idx.copy()
    for u in reversed(range(order)):
        np.add.at(gsub[:, u, :], (rows, rem % dp), gp)
        rem //= dp
    return ((gsub - np.exp(logp) * tot[:, None, None]) / tau).reshape(n, order * dp)


def memory_attention(
    tape: Tape,
    q: Node,
    k: Node,
    v: Node,
    cfg: DecoderConfig,
    modes,
    gamma: float = 1.0,
    eps: float = DEFAULT_EPS,
    decay_mode: str = "exact",
    eps_proxy: float = DEFAULT_EPS_PROXY,
    counters: BeamCounters | None = None,
    trace: list | None = None,
    layer: int = 0,
):
    """Sparse slot-memory mixer over (B, T, H, .) streams.

    Returns ``(node, info)`` where the node value is (B, T, H, d_v) and
    ``info`` carries the decoded index arrays, a selection fingerprint and
    the minimum pruning gap (both feed the finite-difference checker), and
    the touched-slot count.
    """
    if k.value.ndim != 4 or q.value.shape != k.value.shape:
        raise ConfigError("q and k must both be (B, T, H, d_k)")
    B, T, H, dk = k.value.shape
    if v.value.shape[:3] != (B, T, H) or v.value.ndim != 4:
        raise ConfigError("v must be (B, T, H, d_v)")
    if len(modes) != H or any(m not in ADDRESS_MODES for m in modes):
        raise ConfigError(f"modes must give one of {ADDRESS_MODES} per head")
    if decay_mode not in DECAY_MODES:
        raise ConfigError(f"decay_mode must be one of {DECAY_MODES}, got {decay_mode!r}")
    dv = v.value.shape[3]
    M, K = cfg.capacity, cfg.top_k
    N, L = B * T * H, B * H

    dt = v.value.dtype

    # Address decoding stays in float64 for the exactness guarantees; the
    # recurrence below runs in the value dtype.
    k_logp = log_softmax(split_parts(k.value.reshape(N, dk), cfg), cfg.tau)
    q_logp = log_softmax(split_parts(q.value.reshape(N, dk), cfg), cfg.tau)
    widx, wlogv, wgap = _beam_topk_batch(k_logp, K, counters)
    ridx, rlogv, rgap = _beam_topk_batch(q_logp, K, counters)
    ww = np.exp(wlogv).astype(dt)
    rw = np.exp(rlogv).astype(dt)

    shifts = np.zeros((T, H), dtype=np.int64)
    for h, m in enumerate(modes):
        if m == "relative":
            shifts[:, h] = np.arange(T)
    swidx = (widx.reshape(B, T, H, K) - shifts[None, :, :, None]) % M
    sridx = (ridx.reshape(B, T, H, K) - shifts[None, :, :, None]) % M
    ww4 = ww.reshape(B, T, H, K)
    rw4 = rw.reshape(B, T, H, K)
    vv = v.value

    decay = decay_factors if decay_mode == "exact" else (
        lambda w, g: smoothed_decay(w, g, eps_proxy)
    )

    # Per lane the kept slot indices are distinct, so plain fancy-index
    # assignment is exact and much cheaper than ufunc.at. Underflowed
    # zero-weight entries are the one exception (they pack at index 0);
    # remap them to a scratch column M where their no-op updates can land.
    swl = np.where(ww4 > 0.0, swidx, M).reshape(B, T, L // B, K)
    srl = np.where(rw4 > 0.0, sridx, M).reshape(B, T, L // B, K)
    swl = np.moveaxis(swl, 0, 1).reshape(T, L, K)
    srl = np.moveaxis(srl, 0, 1).reshape(T, L, K)

    lane = np.arange(L)[:, None]
    S = np.zeros((L, M + 1, dv), dtype=dt)
    z = np.full((L, M + 1), 1.0 / M, dtype=dt)
    z[:, M] = 1.0
    prev_s = np.zeros((T, L, K, dv), dtype=dt)
    prev_z = np.zeros((T, L, K), dtype=dt)
    cur_s = np.zeros((T, L, K, dv), dtype=dt)
    cur_z = np.zeros((T, L, K), dtype=dt)
    d_all = np.zeros((T, L, K), dtype=dt)
    out = np.zeros((B, T, H, dv), dtype=dt)
    wwl = np.moveaxis(ww4, 1, 0).reshape(T, L, K)
    rwl = np.moveaxis(rw4, 1, 0).reshape(T, L, K)

    for t in range(T):
        iw = swl[t]
        w_t = wwl[t]
        val = vv[:, t].reshape(L, dv)
        d_t = decay(w_t, gamma)
        ps = S[lane, iw]
        pz = z[lane, iw]
        S[lane, iw] = d_t[..., None] * ps + w_t[..., None] * val[:, None, :]
        nz = d_t * pz + w_t
        z[lane, iw] = nz
        if float(nz.min()) <= 0.0:
            raise NumericError(f"slot mass nonpositive after write at step {t}")
        prev_s[t], prev_z[t], d_all[t] = ps, pz, d_t

        ir = srl[t]
        r_t = rwl[t]
        cs = S[lane, ir]
        cz = z[lane, ir]
        out[:, t] = np.einsum("lk,lkj->lj", r_t / (cz + eps), cs).reshape(B, H, dv)
        cur_s[t], cur_z[t] = cs, cz

    if trace is not None:
        if B != 1:
            raise ConfigError("access tracing expects a single-sequence batch")
        from .traces import TraceEvent

        for t in range(T):
            for h in range(H):
                for kind, sidx, swt in (("write", swidx, ww4), ("read", sridx, rw4)):
                    order = np.argsort(sidx[0, t, h])
                    for j in order:
                        wgt = float(swt[0, t, h, j])
                        if wgt > 0.0:
                            trace.append(
                                TraceEvent(
                                    t=t,
                                    layer=layer,
                                    head=h,
                                    kind=kind,
                                    slot=int(sidx[0, t, h, j]),
                                    weight=wgt,
                                )
                            )

    def bw(g):
        A = np.zeros((L, M + 1, dv), dtype=dt)
        bz = np.zeros((L, M + 1), dtype=dt)
        gww = np.zeros((T, L, K), dtype=dt)
        grw = np.zeros((T, L, K), dtype=dt)
        gv = np.zeros((B, T, H, dv), dtype=dt)
        for t in reversed(range(T)):
            go = g[:, t].reshape(L, dv)
            ir = srl[t]
            r_t = rwl[t]
            denom = cur_z[t] + eps
            go_dot_s = np.einsum("lj,lkj->lk", go, cur_s[t])
            grw[t] = go_dot_s / denom
            A[lane, ir] += (r_t / denom)[..., None] * go[:, None, :]
            bz[lane, ir] += -r_t * go_dot_s / denom**2

            iw = swl[t]
            w_t = wwl[t]
            val = vv[:, t].reshape(L, dv)
            ar = A[lane, iw]
            bzr = bz[lane, iw]
            gv[:, t] = np.einsum("lk,lkj->lj", w_t, ar).reshape(B, H, dv)
            dpr = proxy_decay_derivative(w_t, gamma, eps_proxy)
            gww[t] = (
                np.einsum("lkj,lj->lk", ar, val)
                + dpr * np.einsum("lkj,lkj->lk", ar, prev_s[t])
                + bzr * (dpr * prev_z[t] + 1.0)
            )
            A[lane, iw] = ar * d_all[t][..., None]
            bz[lane, iw] = bzr * d_all[t]
            for name, arr in (("write-weight", gww[t]), ("read-weight", grw[t])):
                if not np.all(np.isfinite(arr)):
                    bad = np.argwhere(~np.isfinite(arr))[0]
                    slot_arr = iw if name == "write-weight" else ir
                    raise NumericError(
                        f"non-finite {name} gradient at step {t}, "
                        f"slot {int(slot_arr[bad[0], bad[1]])}"
                    )

        accum(v, gv)
        gw_flat = np.moveaxis(gww.reshape(T, B, H, K), 0, 1).reshape(N, K)
        gr_flat = np.moveaxis(grw.reshape(T, B, H, K), 0, 1).reshape(N, K)
        gk = _decode_gradient(k_logp, widx, ww, gw_flat, cfg.tau)
        gq = _decode_gradient(q_logp, ridx, rw, gr_flat, cfg.tau)
        accum(k, gk.astype(dt, copy=False).reshape(B, T, H, dk))
        accum(q, gq.astype(dt, copy=False).reshape(B, T, H, dk))

    node = tape.node(out, bw, name="memory_attention")
    info = {
        "write_idx": widx.reshape(B, T, H, K),
        "read_idx": ridx.reshape(B, T, H, K),
        "min_gap": float(min(wgap.min(), rgap.min())),
        "fingerprint": (widx.tobytes(), ridx.tobytes()),
        "touched": 2 * N * K,
    }
    return node, info


def full_attention(tape: Tape, q: Node, k: Node, v: Node, rel: Node | None = None):
    """Causal softmax attention with 1/sqrt(d_k) score scaling.

    ``rel``, when given, is an (H, >=T) table of additive score offsets
    indexed by query-key distance. It lets a head express a pure
    position-offset pattern (attend one step back, say) through a single
    coordinate instead of waiting for the q/k bilinear form to align.
    """
    if k.value.ndim != 4 or q.value.shape != k.value.shape:
        raise ConfigError("q and k must both be (B, T, H, d_k)")
    B, T, H, dk = q.value.shape
    if v.value.shape[:3] != (B, T, H):
        raise ConfigError("v must be (B, T, H, d_v)")
    # head-major copies so every contraction is a BLAS matmul
    scale = 1.0 / np.sqrt(dk)
    qh = np.ascontiguousarray(q.value.transpose(0, 2, 1, 3)) * scale
    kh = np.ascontiguousarray(k.value.transpose(0, 2, 1, 3))
    vh = np.ascontiguousarray(v.value.transpose(0, 2, 1, 3))
    scores = qh @ kh.swapaxes(-1, -2)
    dist = None
    if rel is not None:
        if rel.value.ndim != 2 or rel.value.shape[0] != H or rel.value.shape[1] < T:
            raise ConfigError(
                f"rel must be (n_heads, >=seq_len), got {rel.value.shape}"
            )
        dist = np.maximum(np.arange(T)[:, None] - np.arange(T)[None, :], 0)
        scores = scores + rel.value[:, dist]
    causal = np.tril(np.ones((T, T), dtype=bool))
    scores = np.where(causal, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3)

    def bw(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 1, 3))
        accum(v, (p.swapaxes(-1, -2) @ gh).transpose(0, 2, 1, 3))
        gp = gh @ vh.swapaxes(-1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        if rel is not None:
            # masked entries carry gs == 0, so the clipped distance is safe
            grel = np.zeros_like(rel.value)
            gsum = gs.sum(axis=0)
            for h in range(H):
                np.add.at(grel[h], dist.ravel(), gsum[h].ravel())
            accum(rel, grel)
        accum(q, (gs @ kh).transpose(0, 2, 1, 3) * scale)
        accum(k, (gs.swapaxes(-1, -2) @ qh).transpose(0, 2, 1, 3))

    return tape.node(out, bw, name="full_attention")


def linear_attention(tape: Tape, q: Node, k: Node, v: Node, gates: Node, phi: str = "relu"):
    """Gated outer-product state recurrence with relu (or identity) features."""
    if k.value.ndim != 4 or q.value.shape != k.value.shape:
        raise ConfigError("q and k must both be (B, T, H, d_k)")
    B, T, H, dk = q.value.shape
    dv = v.value.shape[3]
    if gates.value.shape != (B, T, H):
        raise ConfigError(f"gates must be (B, T, H), got {gates.value.shape}")
    if phi == "relu":
        wf, rf = np.maximum(k.value, 0.0), np.maximum(q.value, 0.0)
    elif phi == "identity":
        wf, rf = k.value, q.value
    else:
        raise ConfigError(f"phi must be 'relu' or 'identity', got {phi!r}")
    gv_ = gates.value
    states = np.zeros((T, B, H, dk, dv))
    S = np.zeros((B, H, dk, dv))
    out = np.zeros((B, T, H, dv))
    for t in range(T):
        S = gv_[:, t, :, None, None] * S + np.einsum("bhk,bhj->bhkj", wf[:, t], v.value[:, t])
        states[t] = S
        out[:, t] = np.einsum("bhk,bhkj->bhj", rf[:, t], S)

    def bw(g):
        gS = np.zeros((B, H, dk, dv))
        gq_ = np.zeros_like(q.value)
        gk_ = np.zeros_like(k.value)
        gvv = np.zeros_like(v.value)
        ggate = np.zeros_like(gv_)
        for t in reversed(range(T)):
            grf = np.einsum("bhj,bhkj->bhk", g[:, t], states[t])
            gS += np.einsum("bhk,bhj->bhkj", rf[:, t], g[:, t])
            s_prev = states[t - 1] if t > 0 else np.zeros_like(gS)
            ggate[:, t] = np.einsum("bhkj,bhkj->bh", gS, s_prev)
            gwf = np.einsum("bhkj,bhj->bhk", gS, v.value[:, t])
            gvv[:, t] = np.einsum("bhkj,bhk->bhj", gS, wf[:, t])
            if phi == "relu":
                gq_[:, t] = grf * (q.value[:, t] > 0)
                gk_[:, t] = gwf * (k.value[:, t] > 0)
            else:
                gq_[:, t] = grf
                gk_[:, t] = gwf
            gS *= gv_[:, t, :, None, None]
        accum(q, gq_)
        accum(k, gk_)
        accum(v, gvv)
        accum(gates, ggate)

    return tape.node(out, bw, name="linear_attention")

"""Desk-scale sequence model with pluggable mixer kinds.

Standard pre-norm residual stack: rms-normed multi-head mixer with output
projection, then a 2x silu MLP. Three mixer kinds share the skeleton:

* ``slot``: sparse slot-memory attention. No positional embeddings; the
  cyclic shift of relative-mode heads is the positional signal. The q/k
  projections carry a learnable per-head log-scale (exp(alpha), alpha init
  0) acting as a dynamic softmax temperature, plus a bias so heads can
  learn content-independent addresses (the shifted-constant addressing a
  previous-token head needs).
* ``full_attention`` / ``linear_attention``: oracle-backed baselines with
  learned absolute position embeddings added at the input. Attention also
  carries a learned per-head score offset over query-key distances (init 0)
  so fixed-offset lookback patterns are one coordinate away rather than a
  q/k alignment problem; the linear kind gets a per-head sigmoid decay gate
  (bias init 4 so memory starts nearly undamped).

Head outputs are concatenated (H * d_v) and projected back to d_model, so
d_model need not equal H * d_v. Output head is the tied embedding by
default.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, Tape
from .baselines import MODEL_KINDS
from .decoder import BeamCounters, DecoderConfig
from .errors import ConfigError
from .memory import DEFAULT_EPS, DEFAULT_EPS_PROXY, DEFAULT_GAMMA
from .positional import ADDRESS_MODES
from .seq_ops import DECAY_MODES, full_attention, linear_attention, memory_attention

CHECKPOINT_VERSION = 1


def default_mode_schedule(n_layers: int, n_heads: int) -> tuple:
    """First layer all relative, later layers absolute."""
    out = []
    for i in range(n_layers):
        out.append(tuple("relative" if i == 0 else "absolute" for _ in range(n_heads)))
    return tuple(out)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    kind: str = "slot"
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 2
    d_k: int = 16
    d_v: int = 32
    order: int = 4
    part_dim: int = 4
    top_k: int = 8
    tau: float = 1.0
    gamma: float = DEFAULT_GAMMA
    eps: float = DEFAULT_EPS
    decay_mode: str = "exact"
    eps_proxy: float = DEFAULT_EPS_PROXY
    modes: tuple = None
    reparam: bool = True
    alpha_init: float = 0.0
    tie_embeddings: bool = True
    max_seq_len: int = 1024
    mlp_ratio: int = 2
    phi: str = "relu"
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_k", "d_v"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.decay_mode not in DECAY_MODES:
            raise ConfigError(f"decay_mode must be one of {DECAY_MODES}")
        if self.kind == "slot":
            if self.order * self.part_dim != self.d_k:
                raise ConfigError(
                    f"d_k must equal order*part_dim, got {self.d_k} != "
                    f"{self.order}*{self.part_dim}"
                )
            modes = self.modes
            if modes is None:
                modes = default_mode_schedule(self.n_layers, self.n_heads)
            modes = tuple(tuple(row) for row in modes)
            if len(modes) != self.n_layers or any(len(r) != self.n_heads for r in modes):
                raise ConfigError("modes must assign every (layer, head) exactly once")
            for row in modes:
                for m in row:
                    if m not in ADDRESS_MODES:
                        raise ConfigError(f"unknown addressing mode {m!r}")
            object.__setattr__(self, "modes", modes)

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(
            order=self.order, part_dim=self.part_dim, top_k=self.top_k, tau=self.tau
        )

    @property
    def capacity(self) -> int:
        return self.part_dim**self.order

    def state_sizes(self, seq_len: int) -> dict:
        """Per-model total and per-token active state element counts."""
        from .baselines import active_state_size, state_size

        per_head = state_size(
            self.kind,
            seq_len=seq_len,
            d_k=self.d_k,
            d_v=self.d_v,
            capacity=self.capacity if self.kind == "slot" else None,
        )
        total = per_head * self.n_heads * self.n_layers
        active = (
            active_state_size(self.top_k, self.d_v) * self.n_heads * self.n_layers
            if self.kind == "slot"
            else total
        )
        return {"total": total, "active": active}


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Param] = {}
        self._init_params(np.random.default_rng(seed))

    def _add(self, name: str, value: np.ndarray) -> Param:
        p = Param(np.asarray(value, dtype=self.cfg.dtype), name)
        self.params[name] = p
        return p

    def _init_params(self, rng) -> None:
        c = self.cfg
        std = 1.0 / math.sqrt(c.d_model)
        self._add("emb", rng.normal(0.0, std, (c.vocab_size, c.d_model)))
        if c.kind != "slot":
            self._add("pos", rng.normal(0.0, std, (c.max_seq_len, c.d_model)))
        for i in range(c.n_layers):
            pre = f"layer{i}."
            self._add(pre + "norm1", np.ones(c.d_model))
            self._add(pre + "norm2", np.ones(c.d_model))
            self._add(pre + "wq", rng.normal(0.0, std, (c.d_model, c.n_heads * c.d_k)))
            self._add(pre + "wk", rng.normal(0.0, std, (c.d_model, c.n_heads * c.d_k)))
            self._add(pre + "bq", np.zeros(c.n_heads * c.d_k))
            self._add(pre + "bk", np.zeros(c.n_heads * c.d_k))
            self._add(pre + "wv", rng.normal(0.0, std, (c.d_model, c.n_heads * c.d_v)))
            self._add(
                pre + "wo",
                rng.normal(0.0, std / np.sqrt(2 * c.n_layers), (c.n_heads * c.d_v, c.d_model)),
            )
            if c.kind == "slot" and c.reparam:
                # exp(alpha) scales the decode logits; starting it above 0
                # concentrates the top-K address mass from step one instead
                # of waiting for the gain to be learned.
                self._add(pre + "alpha_q", np.full(c.n_heads, c.alpha_init))
                self._add(pre + "alpha_k", np.full(c.n_heads, c.alpha_init))
            if c.kind == "full_attention":
                # additive score offset per head and query-key distance
                self._add(pre + "rel", np.zeros((c.n_heads, c.max_seq_len)))
            if c.kind == "linear_attention":
                self._add(pre + "wg", rng.normal(0.0, std, (c.d_model, c.n_heads)))
                self._add(pre + "bg", np.full(c.n_heads, 4.0))
            hidden = c.mlp_ratio * c.d_model
            self._add(pre + "mlp1", rng.normal(0.0, std, (c.d_model, hidden)))
            self._add(
                pre + "mlp2", rng.normal(0.0, std / np.sqrt(2 * c.n_layers), (hidden, c.d_model))
            )
        self._add("norm_f", np.ones(c.d_model))
        if not c.tie_embeddings:
            self._add("out_w", rng.normal(0.0, std, (c.d_model, c.vocab_size)))

    def param_list(self) -> list:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _qkv(self, tape: Tape, h: Node, i: int):
        c = self.cfg
        pre = f"layer{i}."
        if c.kind == "slot" and c.reparam:
            q = ad.head_scaled_linear(
                tape, h, tape.leaf(self.params[pre + "wq"]),
                tape.leaf(self.params[pre + "alpha_q"]), c.n_heads,
                b=tape.leaf(self.params[pre + "bq"]),
            )
            k = ad.head_scaled_linear(
                tape, h, tape.leaf(self.params[pre + "wk"]),
                tape.leaf(self.params[pre + "alpha_k"]), c.n_heads,
                b=tape.leaf(self.params[pre + "bk"]),
            )
        else:
            q = ad.linear(
                tape, h, tape.leaf(self.params[pre + "wq"]),
                tape.leaf(self.params[pre + "bq"]),
            )
            k = ad.linear(
                tape, h, tape.leaf(self.params[pre + "wk"]),
                tape.leaf(self.params[pre + "bk"]),
            )
        v = ad.linear(tape, h, tape.leaf(self.params[pre + "wv"]))
        B, T = h.value.shape[0], h.value.shape[1]
        q = ad.reshape(tape, q, (B, T, c.n_heads, c.d_k))
        k = ad.reshape(tape, k, (B, T, c.n_heads, c.d_k))
        v = ad.reshape(tape, v, (B, T, c.n_heads, c.d_v))
        return q, k, v

    def forward(
        self,
        tokens: np.ndarray,
        tape: Tape | None = None,
        counters: BeamCounters | None = None,
        trace: list | None = None,
    ):
        """Run the stack; returns (logits node, tape, info).

        ``info`` aggregates per-layer mixer diagnostics (decoded indices,
        selection fingerprint, pruning gap, touched-slot count).
        """
        c = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ConfigError("tokens must be (batch, seq_len)")
        B, T = tokens.shape
        tape = tape if tape is not None else Tape()
        info = {"layers": [], "fingerprint": (), "min_gap": np.inf, "touched": 0}

        x = ad.embedding(tape, tape.leaf(self.params["emb"]), tokens)
        if c.kind != "slot":
            if T > c.max_seq_len:
                raise ConfigError(f"seq_len {T} above max_seq_len {c.max_seq_len}")
            pos_ids = np.broadcast_to(np.arange(T), (B, T))
            x = ad.add(tape, x, ad.embedding(tape, tape.leaf(self.params["pos"]), pos_ids))

        for i in range(c.n_layers):
            pre = f"layer{i}."
            h = ad.rmsnorm(tape, x, tape.leaf(self.params[pre + "norm1"]))
            q, k, v = self._qkv(tape, h, i)
            if c.kind == "slot":
                mix, layer_info = memory_attention(
                    tape, q, k, v, c.decoder, c.modes[i],
                    gamma=c.gamma, eps=c.eps, decay_mode=c.decay_mode,
                    eps_proxy=c.eps_proxy, counters=counters, trace=trace, layer=i,
                )
                info["layers"].append(layer_info)
                info["fingerprint"] += layer_info["fingerprint"]
                info["min_gap"] = min(info["min_gap"], layer_info["min_gap"])
                info["touched"] += layer_info["touched"]
            elif c.kind == "full_attention":
                mix = full_attention(tape, q, k, v, tape.leaf(self.params[pre + "rel"]))
            else:
                gates = ad.sigmoid(
                    tape,
                    ad.linear(
                        tape, h, tape.leaf(self.params[pre + "wg"]),
                        tape.leaf(self.params[pre + "bg"]),
                    ),
                )
                mix = linear_attention(tape, q, k, v, gates, phi=c.phi)
            mix = ad.reshape(tape, mix, (B, T, c.n_heads * c.d_v))
            x = ad.add(tape, x, ad.linear(tape, mix, tape.leaf(self.params[pre + "wo"])))

            m = ad.rmsnorm(tape, x, tape.leaf(self.params[pre + "norm2"]))
            m = ad.linear(tape, m, tape.leaf(self.params[pre + "mlp1"]))
            m = ad.silu(tape, m)
            m = ad.linear(tape, m, tape.leaf(self.params[pre + "mlp2"]))
            x = ad.add(tape, x, m)

        x = ad.rmsnorm(tape, x, tape.leaf(self.params["norm_f"]))
        if c.tie_embeddings:
            logits = ad.linear_transposed(tape, x, tape.leaf(self.params["emb"]))
        else:
            logits = ad.linear(tape, x, tape.leaf(self.params["out_w"]))
        return logits, tape, info

    def loss(
        self,
        tokens: np.ndarray,
        positions: np.ndarray,
        targets: np.ndarray,
        counters: BeamCounters | None = None,
    ):
        """Mean cross-entropy at the supervised positions.

        ``positions`` is (B, Q) per-sequence answer positions, ``targets``
        the matching (B, Q) token ids. Returns (loss node, tape, info).
        """
        logits, tape, info = self.forward(tokens, counters=counters)
        picked = ad.take_positions(tape, logits, positions)
        n = picked.value.shape[0] * picked.value.shape[1]
        flat = ad.reshape(tape, picked, (n, self.cfg.vocab_size))
        loss = ad.cross_entropy_mean(tape, flat, np.asarray(targets).reshape(-1))
        return loss, tape, info

    # ------------------------------------------------------------ storage

    def save(self, path) -> None:
        payload = {name: p.value for name, p in self.params.items()}
        payload["__meta__"] = np.frombuffer(
            json.dumps(
                {"version": CHECKPOINT_VERSION, "config": asdict(self.cfg)}
            ).encode(),
            dtype=np.uint8,
        )
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "Model":
        with np.load(path) as data:
            if "__meta__" not in data:
                raise ConfigError(f"{path} is not a model checkpoint (missing metadata)")
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(
                    f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
                )
            raw = dict(meta["config"])
            if raw.get("modes") is not None:
                raw["modes"] = tuple(tuple(r) for r in raw["modes"])
            cfg = ModelConfig(**raw)
            model = cls(cfg, seed=0)
            for name, p in model.params.items():
                if name not in data:
                    raise ConfigError(f"checkpoint missing parameter {name}")
                arr = data[name]
                if arr.shape != p.value.shape:
                    raise ConfigError(
                        f"checkpoint parameter {name} has shape {arr.shape}, "
                        f"expected {p.value.shape}"
                    )
                p.value[...] = arr
        return model

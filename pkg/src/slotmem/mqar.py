"""Multi-query associative recall: generation, scoring, serialization.

A sequence opens with ``n_pairs`` adjacent (key, value) token pairs, each
key bound to a distinct value. The remainder holds query pairs: a
previously seen key followed by a filler slot. The model is scored at the
query-key position itself: having just read a repeated key, it must emit
the bound value as its next-token prediction. Everything else is
unsupervised. ``[k, v, k, _]`` is the smallest instance, with the answer
``v`` expected at the second ``k``.

Token ids: 0 is filler, 1..n_keys are keys, n_keys+1..n_keys+n_values are
values, so the key and value ranges can never collide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

FILLER = 0

# (n_pairs, seq_len) grid used for headline accuracy numbers.
SETTINGS7 = ((4, 64), (8, 64), (16, 64), (32, 128), (64, 256), (128, 512), (256, 1024))


@dataclass(frozen=True)
class MqarConfig:
    n_pairs: int
    seq_len: int
    n_keys: int | None = None
    n_values: int | None = None
    n_queries: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be positive")
        if 2 * self.n_pairs >= self.seq_len:
            raise ConfigError(
                f"need 2*n_pairs < seq_len, got {2 * self.n_pairs} >= {self.seq_len}"
            )
        if self.n_keys is None:
            object.__setattr__(self, "n_keys", max(64, self.n_pairs))
        if self.n_values is None:
            object.__setattr__(self, "n_values", max(64, self.n_pairs))
        if self.n_keys < self.n_pairs or self.n_values < self.n_pairs:
            raise ConfigError("need at least n_pairs distinct keys and values")
        room = (self.seq_len - 2 * self.n_pairs) // 2
        if self.n_queries is None:
            object.__setattr__(self, "n_queries", min(self.n_pairs, room))
        if not 1 <= self.n_queries <= self.n_pairs:
            raise ConfigError(f"n_queries must be in [1, n_pairs], got {self.n_queries}")
        if self.n_queries > room:
            raise ConfigError(
                f"{self.n_queries} query pairs do not fit in {self.seq_len - 2 * self.n_pairs} remaining slots"
            )

    @property
    def vocab_size(self) -> int:
        return 1 + self.n_keys + self.n_values

    def value_range(self) -> tuple:
        """Half-open token-id interval holding the value tokens."""
        return (1 + self.n_keys, 1 + self.n_keys + self.n_values)


@dataclass(frozen=True)
class MqarInstance:
    tokens: np.ndarray
    query_positions: np.ndarray
    answers: np.ndarray
    vocab_size: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        qpos = np.asarray(self.query_positions, dtype=np.int64)
        answers = np.asarray(self.answers, dtype=np.int64)
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "query_positions", qpos)
        object.__setattr__(self, "answers", answers)
        if tokens.ndim != 1 or qpos.shape != answers.shape or qpos.ndim != 1:
            raise ConfigError("malformed instance arrays")
        if tokens.size and not (0 <= tokens.min() and tokens.max() < self.vocab_size):
            raise ConfigError("token id outside vocab")
        if qpos.size and not (1 <= qpos.min() and qpos.max() < tokens.size):
            raise ConfigError("query position outside sequence")

    @property
    def seq_len(self) -> int:
        return int(self.tokens.size)


def generate_mqar(cfg: MqarConfig, seed: int | None = None) -> MqarInstance:
    """Sample one instance; deterministic given (cfg, seed).

    Keys and values are both drawn without replacement, so the key-value
    binding is injective and every query has exactly one right answer.
    Query pairs land on distinct even offsets in the post-pair remainder.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    keys = 1 + rng.choice(cfg.n_keys, size=cfg.n_pairs, replace=False)
    values = 1 + cfg.n_keys + rng.choice(cfg.n_values, size=cfg.n_pairs, replace=False)

    tokens = np.full(cfg.seq_len, FILLER, dtype=np.int64)
    tokens[0 : 2 * cfg.n_pairs : 2] = keys
    tokens[1 : 2 * cfg.n_pairs : 2] = values

    grid = np.arange(2 * cfg.n_pairs, cfg.seq_len - 1, 2)
    starts = np.sort(rng.choice(grid, size=cfg.n_queries, replace=False))
    which = rng.permutation(cfg.n_pairs)[: cfg.n_queries]
    tokens[starts] = keys[which]
    return MqarInstance(
        tokens=tokens,
        query_positions=starts,
        answers=values[which],
        vocab_size=cfg.vocab_size,
    )


def generate_batch(cfg: MqarConfig, count: int, seed: int | None = None) -> list:
    base = cfg.seed if seed is None else seed
    return [generate_mqar(cfg, seed=base + i) for i in range(count)]


def mqar_accuracy(outputs: np.ndarray, instance: MqarInstance) -> float:
    """Fraction of query positions whose argmax over vocab hits the answer.

    ``outputs`` is (seq_len, vocab) scores for one sequence.
    """
    outputs = np.asarray(outputs)
    if outputs.shape != (instance.seq_len, instance.vocab_size):
        raise ConfigError(
            f"outputs shape {outputs.shape} != ({instance.seq_len}, {instance.vocab_size})"
        )
    pred = outputs[instance.query_positions].argmax(axis=-1)
    return float(np.mean(pred == instance.answers))


def aggregate(per_setting) -> float:
    """Uniform average across settings (not weighted by query counts)."""
    vals = [float(v) for v in per_setting]
    if not vals:
        raise ConfigError("no accuracies to aggregate")
    return sum(vals) / len(vals)


def instance_to_json(instance: MqarInstance) -> str:
    return json.dumps(
        {
            "tokens": instance.tokens.tolist(),
            "query_positions": instance.query_positions.tolist(),
            "answers": instance.answers.tolist(),
            "vocab_size": instance.vocab_size,
        }
    )


def instance_from_json(line: str) -> MqarInstance:
    try:
        obj = json.loads(line)
        return MqarInstance(
            tokens=np.asarray(obj["tokens"], dtype=np.int64),
            query_positions=np.asarray(obj["query_positions"], dtype=np.int64),
            answers=np.asarray(obj["answers"], dtype=np.int64),
            vocab_size=int(obj["vocab_size"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad instance record: {exc}") from exc


def save_instances(path, instances) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(instance_to_json(inst) + "\n")


def load_instances(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(instance_from_json(line))
    return out

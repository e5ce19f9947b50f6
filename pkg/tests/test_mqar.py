"""Recall-task generator: structure, determinism, scoring, serialization."""

import numpy as np
import pytest

from slotmem.errors import ConfigError
from slotmem.mqar import (
    FILLER,
    SETTINGS7,
    MqarConfig,
    MqarInstance,
    aggregate,
    generate_batch,
    generate_mqar,
    instance_from_json,
    instance_to_json,
    load_instances,
    mqar_accuracy,
    save_instances,
)


def test_config_defaults_and_validation():
    cfg = MqarConfig(n_pairs=4, seq_len=64)
    assert cfg.n_keys == 64 and cfg.n_values == 64
    assert cfg.n_queries == 4
    assert cfg.vocab_size == 129
    assert cfg.value_range() == (65, 129)
    with pytest.raises(ConfigError):
        MqarConfig(n_pairs=32, seq_len=64)  # pairs fill the whole sequence
    with pytest.raises(ConfigError):
        MqarConfig(n_pairs=0, seq_len=8)
    with pytest.raises(ConfigError):
        MqarConfig(n_pairs=4, seq_len=64, n_keys=2)
    with pytest.raises(ConfigError):
        MqarConfig(n_pairs=4, seq_len=64, n_queries=9)


def test_all_seven_settings_construct():
    for n_pairs, seq_len in SETTINGS7:
        cfg = MqarConfig(n_pairs=n_pairs, seq_len=seq_len)
        inst = generate_mqar(cfg, seed=1)
        assert inst.seq_len == seq_len
        assert inst.query_positions.size == cfg.n_queries


def test_instance_layout():
    cfg = MqarConfig(n_pairs=4, seq_len=64)
    inst = generate_mqar(cfg, seed=7)
    toks = inst.tokens
    lo, hi = cfg.value_range()
    # pair block: alternating key, value
    assert np.all((1 <= toks[0:8:2]) & (toks[0:8:2] <= cfg.n_keys))
    assert np.all((lo <= toks[1:8:2]) & (toks[1:8:2] < hi))
    # keys and values each distinct
    assert len(set(toks[0:8:2])) == 4 and len(set(toks[1:8:2])) == 4
    # queries: repeated key at an even position past the block, filler
    # right after; supervision sits on the key position itself
    for p in inst.query_positions:
        assert p % 2 == 0 and p >= 8
        assert toks[p] in toks[0:8:2]
        assert toks[p + 1] == FILLER
    # answers are the bound values
    binding = dict(zip(toks[0:8:2], toks[1:8:2]))
    for p, a in zip(inst.query_positions, inst.answers):
        assert binding[toks[p]] == a
    # queried keys are distinct
    assert len(set(toks[inst.query_positions])) == inst.query_positions.size


def test_generation_deterministic():
    cfg = MqarConfig(n_pairs=8, seq_len=64)
    a = generate_mqar(cfg, seed=123)
    b = generate_mqar(cfg, seed=123)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.query_positions, b.query_positions)
    assert np.array_equal(a.answers, b.answers)
    c = generate_mqar(cfg, seed=124)
    assert not np.array_equal(a.tokens, c.tokens)


def test_generate_batch_distinct_seeds():
    cfg = MqarConfig(n_pairs=4, seq_len=64)
    batch = generate_batch(cfg, 8, seed=50)
    assert len(batch) == 8
    toks = {b.tokens.tobytes() for b in batch}
    assert len(toks) == 8
    again = generate_batch(cfg, 8, seed=50)
    assert all(np.array_equal(x.tokens, y.tokens) for x, y in zip(batch, again))


def test_accuracy_oracle_and_chance():
    cfg = MqarConfig(n_pairs=4, seq_len=64)
    inst = generate_mqar(cfg, seed=3)
    perfect = np.zeros((inst.seq_len, inst.vocab_size))
    perfect[inst.query_positions, inst.answers] = 1.0
    assert mqar_accuracy(perfect, inst) == 1.0
    # constant outputs pick token 0 everywhere: never a value token
    assert mqar_accuracy(np.zeros((inst.seq_len, inst.vocab_size)), inst) == 0.0
    with pytest.raises(ConfigError):
        mqar_accuracy(np.zeros((5, 5)), inst)


def test_aggregate_uniform_mean():
    assert aggregate([1.0, 0.0]) == 0.5
    assert aggregate([0.25, 0.5, 0.75]) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        aggregate([])


def test_instance_validation():
    with pytest.raises(ConfigError):
        MqarInstance(
            tokens=np.array([0, 1]), query_positions=np.array([5]),
            answers=np.array([1]), vocab_size=4,
        )
    with pytest.raises(ConfigError):
        MqarInstance(
            tokens=np.array([0, 9]), query_positions=np.array([1]),
            answers=np.array([1]), vocab_size=4,
        )


def test_json_round_trip(tmp_path):
    cfg = MqarConfig(n_pairs=4, seq_len=64)
    insts = generate_batch(cfg, 5, seed=9)
    back = instance_from_json(instance_to_json(insts[0]))
    assert np.array_equal(back.tokens, insts[0].tokens)
    assert back.vocab_size == insts[0].vocab_size

    path = tmp_path / "instances.jsonl"
    save_instances(path, insts)
    loaded = load_instances(path)
    assert len(loaded) == 5
    for a, b in zip(insts, loaded):
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.answers, b.answers)
    with pytest.raises(ConfigError):
        instance_from_json('{"tokens": "nope"}')


def test_minimal_four_token_instance():
    # [k, v, k, _]: the smallest possible layout.
    cfg = MqarConfig(n_pairs=1, seq_len=4, n_keys=2, n_values=2)
    inst = generate_mqar(cfg, seed=0)
    t = inst.tokens
    assert t[2] == t[0] and t[3] == FILLER
    assert inst.query_positions.tolist() == [2]
    assert inst.answers.tolist() == [t[1]]

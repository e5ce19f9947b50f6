"""Training loop, evaluation, sweeps, and the layer-level gradient check.

Everything is deterministic given (config, seed) in single-threaded mode:
data comes from a seeded generator stream, parameter init from the run
seed, and metrics are append-only JSONL rows (one per optimizer step, plus
eval rows). A non-finite loss aborts with the name of the first non-finite
tensor on the tape.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Param, Tape, grad_check
from .config import RunConfig, TaskConfig
from .decoder import BeamCounters, DecoderConfig
from .errors import ConfigError, NumericError
from .model import Model
from .mqar import MqarConfig, generate_batch, generate_mqar, mqar_accuracy
from .optim import AdamW, clip_global_norm, lr_at
from .seq_ops import memory_attention

EVAL_SEED_STRIDE = 1_000_003


def make_batch(cfg: MqarConfig, batch_size: int, rng) -> tuple:
    """Stack ``batch_size`` fresh instances into (tokens, positions, answers)."""
    seeds = rng.integers(0, 2**62, size=batch_size)
    insts = [generate_mqar(cfg, seed=int(s)) for s in seeds]
    tokens = np.stack([i.tokens for i in insts])
    positions = np.stack([i.query_positions for i in insts])
    answers = np.stack([i.answers for i in insts])
    return tokens, positions, answers


def first_nonfinite_tensor(tape: Tape) -> str:
    for node in tape.nodes:
        if not np.all(np.isfinite(node.value)):
            return node.name or "<unnamed>"
    return "<none>"


def evaluate(model: Model, task: TaskConfig, seed: int, n_instances: int | None = None,
             batch_size: int = 32) -> float:
    """Mean per-instance accuracy on freshly generated held-out instances."""
    n = task.eval_instances if n_instances is None else n_instances
    cfg = task.mqar(seed)
    insts = generate_batch(cfg, n, seed=seed * EVAL_SEED_STRIDE + 17)
    accs = []
    for lo in range(0, len(insts), batch_size):
        chunk = insts[lo : lo + batch_size]
        tokens = np.stack([i.tokens for i in chunk])
        logits, _, _ = model.forward(tokens)
        for row, inst in zip(logits.value, chunk):
            accs.append(mqar_accuracy(row, inst))
    return float(np.mean(accs))


def train(run: RunConfig, log=None) -> dict:
    """Run the loop; returns a summary dict and writes artifacts to out_dir.

    Artifacts: ``metrics.jsonl`` (per-step rows: step, loss, lr, grad_norm,
    touched; eval rows add accuracy), ``model.npz``, ``summary.json``.
    """
    os.makedirs(run.out_dir, exist_ok=True)
    mcfg = run.model_config()
    model = Model(mcfg, seed=run.seed)
    opt = AdamW(
        model.param_list(),
        lr=run.optim.peak_lr,
        betas=(run.optim.beta1, run.optim.beta2),
        weight_decay=run.optim.weight_decay,
        no_decay=("rel",),
    )
    data_rng = np.random.default_rng(run.seed)
    mq = run.task.mqar(run.seed)
    t0 = time.monotonic()
    accuracy = None
    reached = False
    steps_run = 0
    metrics_path = os.path.join(run.out_dir, "metrics.jsonl")
    with open(metrics_path, "w") as metrics:
        for step in range(run.steps):
            lr = lr_at(step, run.steps, run.optim.peak_lr, run.optim.warmup_frac,
                       run.optim.floor_lr)
            tokens, positions, answers = make_batch(mq, run.task.batch_size, data_rng)
            model.zero_grads()
            counters = BeamCounters()
            loss, tape, info = model.loss(tokens, positions, answers, counters=counters)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at step {step}; first non-finite tensor: "
                    f"{first_nonfinite_tensor(tape)}"
                )
            tape.backward(loss)
            gnorm = clip_global_norm(model.param_list(), run.optim.grad_clip)
            opt.step(lr)
            steps_run = step + 1
            row = {
                "step": step,
                "loss": loss_val,
                "lr": lr,
                "grad_norm": gnorm,
                "touched": info["touched"],
            }
            if (step + 1) % run.eval_every == 0 or step + 1 == run.steps:
                accuracy = evaluate(model, run.task, seed=run.seed)
                row["accuracy"] = accuracy
                if log is not None:
                    log(f"step {step + 1}: loss {loss_val:.4f} acc {accuracy:.4f}")
                if run.target_accuracy is not None and accuracy >= run.target_accuracy:
                    reached = True
            metrics.write(json.dumps(row) + "\n")
            if reached:
                break
    if accuracy is None:
        accuracy = evaluate(model, run.task, seed=run.seed)
    model.save(os.path.join(run.out_dir, "model.npz"))
    summary = {
        "steps_run": steps_run,
        "final_accuracy": accuracy,
        "reached_target": reached,
        "wall_seconds": time.monotonic() - t0,
        "param_count": model.param_count(),
        "state": mcfg.state_sizes(run.task.seq_len),
    }
    with open(os.path.join(run.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def eval_checkpoint(path, settings, seed: int = 0, n_instances: int = 64) -> dict:
    """Per-setting and uniform-aggregate accuracy for a saved model.

    Settings whose vocabulary exceeds the checkpoint's embedding table are
    rejected; the model is evaluated as-is on each (n_pairs, seq_len).
    """
    model = Model.load(path)
    per = {}
    for n_pairs, seq_len in settings:
        task = TaskConfig(n_pairs=n_pairs, seq_len=seq_len, eval_instances=n_instances)
        if task.vocab_size > model.cfg.vocab_size:
            raise ConfigError(
                f"setting ({n_pairs},{seq_len}) needs vocab {task.vocab_size}, "
                f"checkpoint has {model.cfg.vocab_size}"
            )
        per[f"{n_pairs}x{seq_len}"] = evaluate(model, task, seed=seed)
    agg = sum(per.values()) / len(per)
    return {"per_setting": per, "aggregate": agg}


# ------------------------------------------------------------------ sweeps

SWEEP_AXES = ("order", "capacity", "kind")


def sweep_points(axis: str, base: RunConfig) -> list:
    """Config points for the built-in ablation axes.

    ``order``: factor count U in {1, 2, 4} at fixed 256 slots (part_dim and
    d_k adjust). ``capacity``: slots in {64, 256, 1024} at fixed U=2.
    ``kind``: the three mixer families at the base dimensions.
    """
    if axis == "order":
        dims = [(1, 256), (2, 16), (4, 4)]
        return [
            {"name": f"U{u}", "model": {"order": u, "part_dim": dp, "d_k": u * dp}}
            for u, dp in dims
        ]
    if axis == "capacity":
        dims = [(2, 8), (2, 16), (2, 32)]
        return [
            {"name": f"M{dp**2 if u == 2 else dp**u}",
             "model": {"order": u, "part_dim": dp, "d_k": u * dp}}
            for u, dp in dims
        ]
    if axis == "kind":
        return [{"name": kind, "model": {"kind": kind}} for kind in
                ("slot", "full_attention", "linear_attention")]
    raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")


def run_sweep(base: RunConfig, axis: str, seeds) -> list:
    """Train each sweep point per seed; returns plot rows."""
    import dataclasses

    rows = []
    for point in sweep_points(axis, base):
        for seed in seeds:
            model_over = dict(base.model)
            model_over.update(point["model"])
            run = dataclasses.replace(
                base,
                seed=int(seed),
                model=model_over,
                out_dir=os.path.join(base.out_dir, f"{point['name']}-s{seed}"),
            )
            mcfg = run.model_config()
            summary = train(run)
            rows.append(
                {
                    "model_kind": mcfg.kind,
                    "state_size": mcfg.state_sizes(run.task.seq_len)["total"],
                    "accuracy": summary["final_accuracy"],
                    "name": point["name"],
                    "seed": int(seed),
                    "n_pairs": run.task.n_pairs,
                    "seq_len": run.task.seq_len,
                    "steps": summary["steps_run"],
                }
            )
    return rows


# ------------------------------------------------------- layer grad check


def layer_grad_check(
    gamma: float,
    seed: int = 0,
    order: int = 2,
    part_dim: int = 4,
    top_k: int = 2,
    T: int = 8,
    B: int = 2,
    n_heads: int = 2,
    d_model: int = 16,
    d_v: int = 5,
    n_coords: int = 6,
    rel_tol: float = 1e-4,
    decay_mode: str = "smoothed",
    eps_proxy: float = 0.01,
    max_resamples: int = 20,
) -> GradCheckReport:
    """Finite-difference check of one full sparse-memory layer.

    Projections (with the per-head scale on q/k), address decode, cyclic
    shift, memory recurrence, output projection: loss is a fixed random
    linear functional of the layer output. Points whose decode sits within
    1e-9 of a top-K tie are resampled, and coordinates that flip any
    selected index set between the +h/-h evaluations are skipped inside
    grad_check via the fingerprint.
    """
    cfg = DecoderConfig(order=order, part_dim=part_dim, top_k=top_k)
    d_k = cfg.key_dim
    modes = tuple("relative" if h % 2 == 0 else "absolute" for h in range(n_heads))
    rng = np.random.default_rng(seed)
    for _ in range(max_resamples):
        x = rng.normal(size=(B, T, d_model))
        proj = rng.normal(size=(B, T, n_heads, d_v))
        params = [
            Param(rng.normal(0.0, 0.5, (d_model, n_heads * d_k)), "wq"),
            Param(rng.normal(0.0, 0.5, (d_model, n_heads * d_k)), "wk"),
            Param(rng.normal(0.0, 0.5, (d_model, n_heads * d_v)), "wv"),
            Param(rng.normal(0.0, 0.3, n_heads), "alpha_q"),
            Param(rng.normal(0.0, 0.3, n_heads), "alpha_k"),
        ]
        by_name = {p.name: p for p in params}

        def run_layer(tape):
            xn = tape.constant(x)
            q = ad.head_scaled_linear(tape, xn, tape.leaf(by_name["wq"]),
                                      tape.leaf(by_name["alpha_q"]), n_heads)
            k = ad.head_scaled_linear(tape, xn, tape.leaf(by_name["wk"]),
                                      tape.leaf(by_name["alpha_k"]), n_heads)
            v = ad.linear(tape, xn, tape.leaf(by_name["wv"]))
            q = ad.reshape(tape, q, (B, T, n_heads, d_k))
            k = ad.reshape(tape, k, (B, T, n_heads, d_k))
            v = ad.reshape(tape, v, (B, T, n_heads, d_v))
            return memory_attention(
                tape, q, k, v, cfg, modes, gamma=gamma,
                decay_mode=decay_mode, eps_proxy=eps_proxy,
            )

        def loss_fn():
            out, info = run_layer(Tape())
            return float((out.value * proj).sum()), info["fingerprint"]

        def grad_fn():
            for p in params:
                p.zero_grad()
            tape = Tape()
            out, _ = run_layer(tape)
            loss = tape.node(np.asarray((out.value * proj).sum()),
                             lambda g: ad.accum(out, g * proj))
            tape.backward(loss)
            return {p.name: p.grad.copy() for p in params}

        _, info = run_layer(Tape())
        if info["min_gap"] < 1e-9:
            continue
        return grad_check(loss_fn, grad_fn, params, n_coords=n_coords,
                          rel_tol=rel_tol, seed=seed)
    raise NumericError("could not sample a point away from top-K tie boundaries")

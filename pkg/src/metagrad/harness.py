"""Runs configured experiments end to end and writes their artifacts.

Layout of an output directory::

    effective.cfg          configuration with defaults applied
    <method>.ckpt          trained parameters
    train_<method>.csv     per-iteration training losses
    rl_curve_<method>.csv  return curves (nav2d only)
    eval.csv               ResultRecords for every method and shot count
    run.json               build id, wall-clock seconds, chosen step sizes
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import baselines, rl
from .config import ExperimentConfig
from .meta import evaluate_few_shot, meta_train
from .models import MLPSpec, ParameterVector, load_checkpoint, save_checkpoint
from .results import build_id, curve_records, read_csv, write_records, write_rl_curve, write_training_log
from .rng import child_seed

ADAPTED_BY_INNER_STEP = ("maml", "fomaml", "context")


class SpecMismatch(ValueError):
    pass


@dataclass
class MethodRun:
    method: str
    spec: MLPSpec
    params: ParameterVector
    log: list = field(default_factory=list)
    info: dict = field(default_factory=dict)


def method_spec(cfg: ExperimentConfig, method: str) -> MLPSpec:
    if method == "oracle":
        return baselines.model_spec(cfg.task, cfg.hidden, cfg.activation, extra_inputs=cfg.task.latent_dim)
    if method == "context":
        return baselines.model_spec(cfg.task, cfg.hidden, cfg.activation, context_dim=cfg.z_dim)
    return baselines.model_spec(cfg.task, cfg.hidden, cfg.activation)


def eval_seed(cfg: ExperimentConfig) -> int:
    """Evaluation tasks depend only on the experiment seed, so all methods share them."""
    return child_seed(cfg.seed, "evaluation")


def metric_name(cfg: ExperimentConfig) -> str:
    return {"sinusoid": "mse", "synthetic_classification": "cross_entropy", "nav2d": "return"}[cfg.task.kind]


# ----------------------------------------------------------------- training


def train_method(cfg: ExperimentConfig, method: str, workers: int = 1) -> MethodRun:
    task, seed = cfg.task, cfg.seed
    spec = method_spec(cfg, method)
    info = {}
    if method == "random_init":
        return MethodRun(method, spec, baselines.random_init(spec, seed))
    if task.kind == "nav2d":
        if method in ("maml", "fomaml"):
            theta, log = rl.maml_rl_train(spec, cfg.rl_for(method), seed, task, workers)
        elif method == "context":
            spec, pv, log = baselines.context_adapt_train(task, cfg.z_dim, cfg.rl, cfg.rl.meta_iterations, seed,
                                                          cfg.hidden, cfg.activation, workers)
            return MethodRun(method, spec, pv, log, info)
        else:  # pretrain, oracle
            theta, log = rl.pretrain_policy(spec, cfg.rl, seed, task, workers)
        return MethodRun(method, spec, ParameterVector(theta, spec.layout), log, info)
    if method in ("maml", "fomaml"):
        pv, log = meta_train(spec, task, cfg.meta_for(method), cfg.iterations, seed, workers, cfg.backend)
    elif method == "context":
        spec, pv, log = baselines.context_adapt_train(task, cfg.z_dim, cfg.meta, cfg.iterations, seed,
                                                      cfg.hidden, cfg.activation, workers)
    elif method == "pretrain":
        pv, log = baselines.pretrain_all_tasks(spec, task, cfg.pretrain_iterations, seed, cfg.pretrain_lr,
                                               workers=workers)
    elif method == "oracle":
        spec, pv, log = baselines.oracle_train(task, cfg.pretrain_iterations, seed, cfg.hidden, cfg.activation,
                                               cfg.pretrain_lr, workers)
    elif method == "multitask_avg":
        rcfg = baselines.RegressorConfig(lr=cfg.regressor_lr, max_iterations=cfg.regressor_max_iterations)
        strength = cfg.strength
        if strength is None:
            strength = baselines.select_strength(spec, task, cfg.regularizer, seed, cfg=rcfg)
        info["strength"] = strength
        reg = baselines.Regularizer(cfg.regularizer, strength)
        pv, losses = baselines.multitask_average(spec, task, cfg.task_count, reg, seed, rcfg, workers)
        info["max_regressor_loss"] = max(losses)
        log = []
    else:
        raise ValueError(f"unknown method {method!r}")
    return MethodRun(method, spec, pv, log, info)


# --------------------------------------------------------------- evaluation


def _step_size(cfg: ExperimentConfig, run: MethodRun, K: int) -> float:
    if run.method == "context" and cfg.z_dim == 0:
        return 0.0
    if run.method in ADAPTED_BY_INNER_STEP:
        return cfg.meta.inner_step_size
    if cfg.baseline_step_size is not None:
        return cfg.baseline_step_size
    return baselines.tune_step_size(run.params.values, run.spec, cfg.task, K, cfg.seed,
                                    max(cfg.eval_steps, 1), cfg.validation_tasks)


def evaluate_method(cfg: ExperimentConfig, run: MethodRun, workers: int = 1):
    """Returns (records, {name: curves}) for one trained method."""
    meta = dict(method=run.method, task=cfg.task.kind, metric=metric_name(cfg), seed=cfg.seed, build_id=build_id())
    records, curves = [], {}
    if cfg.task.kind == "nav2d":
        updates = 0 if run.method == "oracle" else cfg.rl.eval_updates
        steps = (0.0,) if run.method == "context" and cfg.z_dim == 0 else cfg.rl.eval_step_sizes
        c = rl.evaluate_rl(run.params.values, run.spec, cfg.rl_eval_tasks, updates, cfg.rl.eval_samples, steps,
                           eval_seed(cfg), cfg.task, workers, cfg.rl.reduction)
        curves[run.method] = c
        run.info["eval_step_sizes"] = list(steps)
        return curve_records(c, shots=cfg.rl.eval_samples, **meta), curves
    for K in cfg.eval_shots:
        if run.method == "oracle":
            steps, alpha = 0, 0.0
        else:
            steps, alpha = cfg.eval_steps, _step_size(cfg, run, K)
        c = evaluate_few_shot(run.params.values, run.spec, cfg.task, cfg.eval_tasks, K, steps, alpha,
                              eval_seed(cfg), cfg.eval_query_size, oracle=run.method == "oracle")
        run.info[f"step_size_K{K}"] = alpha
        curves[f"{run.method}_K{K}"] = c
        records += curve_records(c, shots=K, **meta)
    return records, curves


# ------------------------------------------------------------------ driving


def prepare_output(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective.cfg").write_text(cfg.to_text(), encoding="utf-8", newline="\n")
    return out


def _write_summary(out: Path, summary: dict) -> None:
    (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> Path:
    out = prepare_output(cfg)
    records = []
    summary = {"build_id": build_id(), "workers": workers, "methods": {}}
    for method in cfg.methods:
        start = time.perf_counter()
        run = train_method(cfg, method, workers)
        trained = time.perf_counter()
        save_checkpoint(out / f"{method}.ckpt", run.spec, run.params)
        if run.log:
            write_training_log(out / f"train_{method}.csv", run.log)
        recs, curves = evaluate_method(cfg, run, workers)
        records += recs
        if cfg.task.kind == "nav2d":
            write_rl_curve(out / f"rl_curve_{method}.csv", curves[method])
        run.info.update(train_seconds=trained - start, eval_seconds=time.perf_counter() - trained)
        summary["methods"][method] = run.info
        write_records(out / "eval.csv", records)
    _write_summary(out, summary)
    return out


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path, workers: int = 1) -> Path:
    if len(cfg.methods) != 1:
        raise SpecMismatch("eval needs a config naming exactly one method")
    method = cfg.methods[0]
    spec, params = load_checkpoint(checkpoint)
    expected = method_spec(cfg, method)
    if spec != expected:
        raise SpecMismatch(f"checkpoint model {spec} does not match config model {expected}")
    out = prepare_output(cfg)
    run = MethodRun(method, spec, params)
    records, curves = evaluate_method(cfg, run, workers)
    write_records(out / "eval.csv", records)
    if cfg.task.kind == "nav2d":
        write_rl_curve(out / f"rl_curve_{method}.csv", curves[method])
    _write_summary(out, {"build_id": build_id(), "checkpoint": str(checkpoint), "methods": {method: run.info}})
    return out


def curves_from_records(path: str | Path) -> dict:
    """Group an eval.csv back into {(method, shots): [(step, mean, std_error), ...]}."""
    out: dict = {}
    for row in read_csv(path):
        key = (row["method"], int(row["shots"]))
        out.setdefault(key, []).append((int(row["step_count"]), float(row["mean"]), float(row["std_error"])))
    return out

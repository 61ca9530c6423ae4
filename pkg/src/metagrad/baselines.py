"""Comparison methods: pretraining on all tasks, multi-task parameter
averaging, context-vector adaptation and the task-conditioned oracle."""
from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels, rl
from .meta import (
    Adam,
    MetaConfig,
    TrainRecord,
    evaluate_few_shot,
    fused_supported,
    meta_train,
    outer_loop,
    supervised_loss_fn,
)
from .models import MLPSpec, ParameterVector, init
from .parallel import TaskPool
from .rng import child_seed, stream
from .tasks import TaskInstance, TaskSpec, oracle_inputs, sample_support_query, sample_task

REGULARIZERS = ("none", "l2", "l2_to_running_mean")
STRENGTH_GRID = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
STEP_SIZE_GRID = (0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1)


def loss_and_grad(theta: np.ndarray, spec: MLPSpec, x: np.ndarray, y) -> tuple[float, np.ndarray]:
    """Supervised loss and its gradient, through the compiled kernels when possible."""
    if fused_supported(spec):
        sizes = np.array(spec.sizes, dtype=np.int64)
        return kernels.loss_grad(theta, sizes, kernels.ACTIVATION_CODES[spec.activation], x, y)
    g = ad.Graph()
    p = g.param(theta)
    loss = supervised_loss_fn(spec, x, y)(p)
    (grad,) = ad.grad(loss, [p])
    return loss.item(), grad.value


def model_spec(task_spec: TaskSpec, hidden: Sequence[int] = (40, 40), activation: str = "relu",
               extra_inputs: int = 0, context_dim: int = 0) -> MLPSpec:
    """The MLP shape a task kind calls for, optionally widened for oracle or context inputs."""
    head = "softmax" if task_spec.kind == "synthetic_classification" else "linear"
    if task_spec.kind == "nav2d":
        return rl.policy_spec(hidden, "goal" if extra_inputs else "position", context_dim, activation)
    return MLPSpec(task_spec.input_dim + extra_inputs + context_dim, tuple(hidden), task_spec.output_dim,
                   activation, head, context_dim)


# ------------------------------------------------------- pretrain on all tasks


def _pretrain_job(args, spec, task_spec, K, seed, oracle):
    theta, it, i = args
    task = sample_task(task_spec, child_seed(seed, "pretrain-task", it, i))
    batch = sample_support_query(task, K, 0, stream(seed, "pretrain-data", it, i))
    x = oracle_inputs(task, batch.support_x) if oracle else batch.support_x
    loss, grad = loss_and_grad(theta, spec, x, batch.support_y)
    return grad, loss, loss


def pretrain_all_tasks(
    spec: MLPSpec,
    task_spec: TaskSpec,
    iterations: int,
    seed: int,
    lr: float = 0.001,
    tasks_per_batch: int = 25,
    oracle: bool = False,
    workers: int = 1,
) -> tuple[ParameterVector, list[TrainRecord]]:
    """Adam on batches that mix freshly drawn tasks, K examples each.

    With ``oracle`` every input row also carries the task descriptor.
    """
    if task_spec.kind == "nav2d":
        cfg = rl.RLConfig(meta_step_size=lr, meta_batch_size=tasks_per_batch, keep_best=False)
        theta, log = rl.pretrain_policy(spec, cfg, seed, task_spec, workers, iterations)
        return ParameterVector(theta, spec.layout), log
    job = functools.partial(_pretrain_job, spec=spec, task_spec=task_spec, K=task_spec.shots_K,
                            seed=seed, oracle=oracle)
    theta0 = init(spec, stream(seed, "init")).values
    theta, log = outer_loop(theta0, job, tasks_per_batch, Adam(lr), iterations, workers)
    # outer_loop sums per-task gradients; the mixed-batch objective is their mean,
    # which only rescales Adam's input and leaves the update unchanged
    return ParameterVector(theta, spec.layout), log


def oracle_train(
    task_spec: TaskSpec,
    iterations: int,
    seed: int,
    hidden: Sequence[int] = (40, 40),
    activation: str = "relu",
    lr: float = 0.001,
    workers: int = 1,
) -> tuple[MLPSpec, ParameterVector, list[TrainRecord]]:
    """Model fed the task latent alongside each input; never adapted at test time."""
    spec = model_spec(task_spec, hidden, activation, extra_inputs=task_spec.latent_dim)
    pv, log = pretrain_all_tasks(spec, task_spec, iterations, seed, lr, oracle=True, workers=workers)
    return spec, pv, log


def tune_step_size(
    theta: np.ndarray,
    spec: MLPSpec,
    task_spec: TaskSpec,
    K: int,
    seed: int,
    steps: int = 10,
    n_tasks: int = 100,
    grid: Sequence[float] = STEP_SIZE_GRID,
) -> float:
    """Grid step size with the lowest ``steps``-step loss on validation tasks.

    Validation tasks come from their own stream, disjoint from evaluation tasks.
    """
    val_seed = child_seed(seed, "validation")
    best, best_loss = grid[0], np.inf
    for alpha in grid:
        curves = evaluate_few_shot(theta, spec, task_spec, n_tasks, K, steps, alpha, val_seed)
        final = float(np.mean(curves[:, -1]))
        if np.isfinite(final) and final < best_loss:
            best, best_loss = alpha, final
    return best


# -------------------------------------------------- multi-task averaging


@dataclass(frozen=True)
class Regularizer:
    kind: str = "none"
    strength: float = 0.0

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.strength < 0:
            raise ValueError("regularizer strength must be non-negative")
        if (self.kind == "none") != (self.strength == 0):
            raise ValueError("strength must be 0 exactly when kind is 'none'")


@dataclass(frozen=True)
class RegressorConfig:
    lr: float = 0.01
    max_iterations: int = 5000
    target_loss: float = 0.02
    train_points: int = 100


def train_task_regressor(
    theta0: np.ndarray,
    spec: MLPSpec,
    task: TaskInstance,
    reg: Regularizer,
    anchor: np.ndarray | None,
    cfg: RegressorConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Full-batch Adam on one task until its data loss drops below the target.

    ``l2`` pulls toward zero, ``l2_to_running_mean`` toward ``anchor``.
    Returns the parameters and the final unregularized loss.
    """
    batch = sample_support_query(task, cfg.train_points, 0, rng)
    x, y = batch.support_x, batch.support_y
    theta = np.array(theta0, dtype=np.float64)
    target = None
    if reg.kind == "l2":
        target = np.zeros_like(theta)
    elif reg.kind == "l2_to_running_mean" and anchor is not None:
        target = anchor
    opt = Adam(cfg.lr)
    loss = np.inf
    for _ in range(cfg.max_iterations):
        loss, grad = loss_and_grad(theta, spec, x, y)
        if loss < cfg.target_loss:
            break
        if target is not None:
            grad = grad + 2.0 * reg.strength * (theta - target)
        theta = opt.step(theta, grad)
    else:
        loss, _ = loss_and_grad(theta, spec, x, y)
    return theta, float(loss)


def _regressor_job(i, theta0, spec, task_spec, reg, cfg, seed):
    task = sample_task(task_spec, child_seed(seed, "multitask-task", i))
    return train_task_regressor(theta0, spec, task, reg, None, cfg, stream(seed, "multitask-data", i))


def multitask_average(
    spec: MLPSpec,
    task_spec: TaskSpec,
    task_count: int,
    reg: Regularizer,
    seed: int,
    cfg: RegressorConfig = RegressorConfig(),
    workers: int = 1,
) -> tuple[ParameterVector, list[float]]:
    """Mean of per-task regressors that all start from the same initialization.

    Returns the averaged parameters and each regressor's final training loss.
    ``l2_to_running_mean`` is sequential: model i is pulled toward the mean of
    models 0..i-1.
    """
    if task_count < 1:
        raise ValueError("task_count must be >= 1")
    if task_spec.kind not in ("sinusoid", "synthetic_classification"):
        raise ValueError("parameter averaging is defined for supervised tasks")
    theta0 = init(spec, stream(seed, "init")).values
    losses = []
    if reg.kind == "l2_to_running_mean":
        mean = None
        for i in range(task_count):
            task = sample_task(task_spec, child_seed(seed, "multitask-task", i))
            theta, loss = train_task_regressor(theta0, spec, task, reg, mean, cfg,
                                               stream(seed, "multitask-data", i))
            mean = theta.copy() if mean is None else mean + (theta - mean) / (i + 1)
            losses.append(loss)
        return ParameterVector(mean, spec.layout), losses
    job = functools.partial(_regressor_job, theta0=theta0, spec=spec, task_spec=task_spec, reg=reg,
                            cfg=cfg, seed=seed)
    with TaskPool(workers) as pool:
        results = pool.map(job, range(task_count))
    total = np.zeros_like(theta0)
    for theta, loss in results:
        total += theta
        losses.append(loss)
    return ParameterVector(total / task_count, spec.layout), losses


def select_strength(
    spec: MLPSpec,
    task_spec: TaskSpec,
    kind: str,
    seed: int,
    probe_tasks: int = 5,
    cfg: RegressorConfig = RegressorConfig(),
    grid: Sequence[float] = STRENGTH_GRID,
) -> float:
    """Largest grid strength for which every probe regressor still reaches the target loss."""
    if kind == "none":
        return 0.0
    probe_seed = child_seed(seed, "strength-probe")
    for strength in sorted(grid, reverse=True):
        _, losses = multitask_average(spec, task_spec, probe_tasks, Regularizer(kind, strength), probe_seed, cfg)
        if max(losses) < cfg.target_loss:
            return strength
    return min(grid)


# ------------------------------------------------------ context vectors


def split_context(spec: MLPSpec, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(network parameters, context vector z)."""
    values = np.asarray(values)
    cut = spec.n_params - spec.context_dim
    return values[:cut].copy(), values[cut:].copy()


def context_adapt_train(
    task_spec: TaskSpec,
    z_dim: int,
    cfg: MetaConfig | rl.RLConfig,
    iterations: int,
    seed: int,
    hidden: Sequence[int] = (40, 40),
    activation: str = "relu",
    workers: int = 1,
) -> tuple[MLPSpec, ParameterVector, list[TrainRecord]]:
    """Meta-training where the inner loop may only change an input-appended z.

    The outer update trains both the network and the initial z. With
    ``z_dim = 0`` nothing is adaptable, so the inner step is a no-op.
    """
    if z_dim < 0:
        raise ValueError("z_dim must be >= 0")
    spec = model_spec(task_spec, hidden, activation, context_dim=z_dim)
    if task_spec.kind == "nav2d":
        if z_dim == 0:
            cfg = replace(cfg, inner_step_size=0.0)
        theta, log = rl.maml_rl_train(spec, cfg, seed, task_spec, workers, iterations)
        return spec, ParameterVector(theta, spec.layout), log
    if z_dim == 0:
        cfg = replace(cfg, inner_step_size=0.0)
    pv, log = meta_train(spec, task_spec, cfg, iterations, seed, workers, backend="graph")
    return spec, pv, log


def random_init(spec: MLPSpec, seed: int) -> ParameterVector:
    return init(spec, stream(seed, "init"))

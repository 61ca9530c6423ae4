"""Inner-loop adaptation, meta-gradients and the meta-training loop.

Two routes compute the same per-task meta-gradient:

* ``graph``: builds the adapted parameters inside an autodiff graph and
  differentiates the query loss back to the initial parameters. Works for any
  model and loss.
* ``fused``: for MLP regressors with squared error, runs the inner loop with
  the compiled kernels and back-propagates through each inner step as
  ``v <- v - alpha * H(theta_k) v`` using Hessian-vector products.

In first-order mode both routes treat the Jacobian of the inner update as the
identity and return the query-loss gradient taken at the adapted parameters.
"""
from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .models import MLPSpec, ParameterVector, forward, init
from .parallel import TaskPool
from .rng import stream
from .tasks import (
    SupportQueryBatch,
    TaskInstance,
    TaskSpec,
    mse_loss,
    sample_support_query,
    sample_task,
    xent_loss,
)


class MetaTrainingError(ad.NonFiniteError):
    """Non-finite value during meta-training; carries the iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class MetaConfig:
    inner_step_size: float = 0.01
    meta_step_size: float = 0.001
    inner_steps: int = 1
    meta_batch_size: int = 25
    first_order: bool = False
    meta_optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # 0 means "same as K"
    query_size: int = 0

    def __post_init__(self):
        if self.inner_step_size < 0 or self.meta_step_size <= 0:
            raise ValueError("step sizes must be positive")
        if self.inner_steps < 1 or self.meta_batch_size < 1:
            raise ValueError("inner_steps and meta_batch_size must be >= 1")
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown meta optimizer {self.meta_optimizer!r}")


@dataclass
class AdaptationResult:
    adapted: ad.Node
    inner_losses: list[float]
    query_loss: float | None = None

    @property
    def adapted_params(self) -> np.ndarray:
        return self.adapted.value


@dataclass
class TrainRecord:
    iteration: int
    pre_loss: float
    post_loss: float
    seconds: float


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: MetaConfig):
    if cfg.meta_optimizer == "sgd":
        return SGD(cfg.meta_step_size)
    return Adam(cfg.meta_step_size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def step_schedule(step_size: float | Sequence[float], steps: int) -> list[float]:
    """Expand a step size or a partial list of step sizes to ``steps`` entries."""
    if np.isscalar(step_size):
        return [float(step_size)] * steps
    sizes = [float(s) for s in step_size]
    if not sizes:
        raise ValueError("empty step-size schedule")
    return [sizes[min(i, len(sizes) - 1)] for i in range(steps)]


# -------------------------------------------------------------- graph route


def inner_adapt(
    params: ad.Node,
    loss_fn: Callable[[ad.Node], ad.Node],
    step_sizes: float | Sequence[float],
    steps: int = 1,
    first_order: bool = False,
    mask: np.ndarray | None = None,
) -> AdaptationResult:
    """Plain gradient steps ``params <- params - alpha * grad`` on one loss.

    Every step reuses the same ``loss_fn`` (same support data). Unless
    ``first_order`` is set, the step is recorded so the adapted node can be
    differentiated with respect to ``params``. Entries where ``mask`` is 0 are
    never changed.
    """
    current = params
    losses = []
    for k, alpha in enumerate(step_schedule(step_sizes, steps)):
        try:
            loss = loss_fn(current)
            (g,) = ad.grad(loss, [current], create_graph=not first_order)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"inner step {k}: {exc}") from exc
        losses.append(loss.item())
        if mask is not None:
            g = g * mask
        current = current - g * alpha
    return AdaptationResult(current, losses)


def supervised_loss_fn(spec: MLPSpec, x: np.ndarray, y: np.ndarray) -> Callable[[ad.Node], ad.Node]:
    if spec.output_head == "softmax":
        return lambda p: xent_loss(forward(spec, p, x, logits=True), y)
    return lambda p: mse_loss(forward(spec, p, x), y)


def graph_task_meta_gradient(
    theta: np.ndarray,
    spec: MLPSpec,
    batch: SupportQueryBatch,
    cfg: MetaConfig,
) -> tuple[np.ndarray, float, float, list[float]]:
    """Returns (meta-gradient, query loss at theta, query loss after adaptation, inner losses)."""
    g = ad.Graph()
    p = g.param(theta)
    support = supervised_loss_fn(spec, batch.support_x, batch.support_y)
    query = supervised_loss_fn(spec, batch.query_x, batch.query_y)
    with ad.no_record():
        pre = query(p).item()
    mask = spec.context_mask() if spec.context_dim else None
    res = inner_adapt(p, support, cfg.inner_step_size, cfg.inner_steps, cfg.first_order, mask)
    q = query(res.adapted)
    # first-order: the adapted node is p minus constants, so d(adapted)/dp = I
    (mg,) = ad.grad(q, [p])
    return mg.value, pre, q.item(), res.inner_losses


# -------------------------------------------------------------- fused route


def fused_supported(spec: MLPSpec) -> bool:
    return spec.output_head == "linear" and spec.context_dim == 0


def _check_finite(what: str, *values) -> None:
    for v in values:
        # a finite sum means finite entries; overflow in the sum falls through to the exact test
        total = v if isinstance(v, float) else float(np.asarray(v).sum())
        if not math.isfinite(total) and not np.all(np.isfinite(v)):
            raise ad.NonFiniteError(f"non-finite {what}")


def fused_task_meta_gradient(
    theta: np.ndarray,
    spec: MLPSpec,
    batch: SupportQueryBatch,
    cfg: MetaConfig,
) -> tuple[np.ndarray, float, float, list[float]]:
    sizes = np.array(spec.sizes, dtype=np.int64)
    act = kernels.ACTIVATION_CODES[spec.activation]
    sx, sy, qx, qy = batch.support_x, batch.support_y, batch.query_x, batch.query_y
    thetas = [theta]
    losses = []
    alphas = step_schedule(cfg.inner_step_size, cfg.inner_steps)
    for k, alpha in enumerate(alphas):
        value, grad = kernels.loss_grad(thetas[-1], sizes, act, sx, sy)
        _check_finite(f"support loss or gradient at inner step {k}", value, grad)
        losses.append(value)
        thetas.append(thetas[-1] - alpha * grad)
    pre = kernels.loss(theta, sizes, act, qx, qy)
    post, v = kernels.loss_grad(thetas[-1], sizes, act, qx, qy)
    _check_finite("query loss or gradient", pre, post, v)
    if not cfg.first_order:
        for k in range(len(alphas) - 1, -1, -1):
            v = v - alphas[k] * kernels.hvp(thetas[k], sizes, act, sx, sy, v)
        _check_finite("meta-gradient", v)
    return v, pre, post, losses


def resolve_backend(spec: MLPSpec, backend: str) -> str:
    if backend == "auto":
        return "fused" if fused_supported(spec) else "graph"
    if backend == "fused" and not fused_supported(spec):
        raise ValueError("the fused backend handles MLP regressors with a linear head only")
    if backend not in ("fused", "graph"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


def task_meta_gradient(theta, spec, batch, cfg, backend="auto"):
    fn = fused_task_meta_gradient if resolve_backend(spec, backend) == "fused" else graph_task_meta_gradient
    return fn(np.asarray(theta, dtype=np.float64), spec, batch, cfg)


def meta_gradient(
    theta: np.ndarray,
    spec: MLPSpec,
    batches: Sequence[SupportQueryBatch],
    cfg: MetaConfig,
    backend: str = "auto",
) -> np.ndarray:
    """Gradient of the summed post-adaptation query losses over a meta-batch."""
    if not batches:
        raise ValueError("empty meta-batch")
    total = None
    for batch in batches:
        g = task_meta_gradient(theta, spec, batch, cfg, backend)[0]
        total = g if total is None else total + g
    return total


# ---------------------------------------------------------------- training


def outer_loop(
    theta0: np.ndarray,
    job: Callable,
    n_tasks: int,
    optimizer,
    iterations: int,
    workers: int = 1,
    on_iteration: Callable[[np.ndarray, TrainRecord], None] | None = None,
) -> tuple[np.ndarray, list[TrainRecord]]:
    """Generic meta-training loop.

    ``job((theta, iteration, index))`` returns ``(grad, pre_loss, post_loss)``
    for one task; gradients are summed in task-index order before the update.
    ``on_iteration(theta, record)`` sees the parameters the record was measured at.
    """
    theta = np.array(theta0, dtype=np.float64)
    log: list[TrainRecord] = []
    start = time.perf_counter()
    with TaskPool(workers) as pool:
        for it in range(iterations):
            try:
                results = pool.map(job, [(theta, it, i) for i in range(n_tasks)])
            except ad.NonFiniteError as exc:
                raise MetaTrainingError(str(exc), it) from exc
            used = theta
            grad = results[0][0].copy()
            for r in results[1:]:
                grad += r[0]
            if not np.all(np.isfinite(grad)):
                raise MetaTrainingError("non-finite meta-gradient", it)
            theta = optimizer.step(theta, grad)
            rec = TrainRecord(
                it,
                float(np.mean([r[1] for r in results])),
                float(np.mean([r[2] for r in results])),
                time.perf_counter() - start,
            )
            log.append(rec)
            if on_iteration is not None:
                on_iteration(used, rec)
    return theta, log


def _query_size(cfg: MetaConfig, task_spec: TaskSpec) -> int:
    return cfg.query_size or task_spec.shots_K


def _supervised_job(args, spec, task_spec, cfg, seed, backend):
    theta, it, i = args
    rng = stream(seed, "meta-train", it, i)
    task = sample_task(task_spec, int(rng.integers(2**63 - 1)))
    batch = sample_support_query(task, task_spec.shots_K, _query_size(cfg, task_spec), rng)
    g, pre, post, _ = task_meta_gradient(theta, spec, batch, cfg, backend)
    return g, pre, post


def meta_train(
    spec: MLPSpec,
    task_spec: TaskSpec,
    cfg: MetaConfig,
    iterations: int,
    seed: int,
    workers: int = 1,
    backend: str = "auto",
    theta0: np.ndarray | None = None,
) -> tuple[ParameterVector, list[TrainRecord]]:
    """MAML for supervised tasks; returns the meta-learned parameters and a log."""
    if theta0 is None:
        theta0 = init(spec, stream(seed, "init")).values
    job = functools.partial(
        _supervised_job, spec=spec, task_spec=task_spec, cfg=cfg, seed=seed,
        backend=resolve_backend(spec, backend),
    )
    theta, log = outer_loop(theta0, job, cfg.meta_batch_size, make_optimizer(cfg), iterations, workers)
    return ParameterVector(theta, spec.layout), log


# -------------------------------------------------------------- evaluation


def fine_tune_eval(
    theta: np.ndarray,
    spec: MLPSpec,
    task: TaskInstance,
    K: int,
    eval_steps: int,
    step_size_schedule: float | Sequence[float],
    query_size: int = 100,
    rng: np.random.Generator | None = None,
    input_map: Callable[[np.ndarray], np.ndarray] | None = None,
) -> list[float]:
    """Query loss after 0, 1, ..., ``eval_steps`` gradient steps on K support points."""
    if eval_steps < 0:
        raise ValueError("eval_steps must be >= 0")
    batch = sample_support_query(task, K, query_size, rng)
    sx, qx = batch.support_x, batch.query_x
    if input_map is not None:
        sx, qx = input_map(sx), input_map(qx)
    theta = np.asarray(theta, dtype=np.float64)
    alphas = step_schedule(step_size_schedule, max(eval_steps, 1))
    out = []
    if fused_supported(spec):
        sizes = np.array(spec.sizes, dtype=np.int64)
        act = kernels.ACTIVATION_CODES[spec.activation]
        for k in range(eval_steps + 1):
            out.append(kernels.loss(theta, sizes, act, qx, batch.query_y))
            if k < eval_steps:
                _, g = kernels.loss_grad(theta, sizes, act, sx, batch.support_y)
                theta = theta - alphas[k] * g
        return out
    support = supervised_loss_fn(spec, sx, batch.support_y)
    query = supervised_loss_fn(spec, qx, batch.query_y)
    mask = spec.context_mask() if spec.context_dim else 1.0
    for k in range(eval_steps + 1):
        g = ad.Graph()
        p = g.param(theta)
        out.append(query(p).item())
        if k < eval_steps:
            (grad,) = ad.grad(support(p), [p])
            theta = theta - alphas[k] * (grad.value * mask)
    return out


def eval_task(task_spec: TaskSpec, seed: int, index: int) -> TaskInstance:
    return sample_task(task_spec, int(stream(seed, "eval-task", index).integers(2**63 - 1)))


def evaluate_few_shot(
    theta: np.ndarray,
    spec: MLPSpec,
    task_spec: TaskSpec,
    n_tasks: int,
    K: int,
    eval_steps: int,
    step_size_schedule: float | Sequence[float],
    seed: int,
    query_size: int = 100,
    oracle: bool = False,
) -> np.ndarray:
    """Loss curves over ``n_tasks`` held-out tasks, shape (n_tasks, eval_steps + 1).

    The same ``seed`` gives every method the same tasks and support points.
    """
    out = np.empty((n_tasks, eval_steps + 1))
    for i in range(n_tasks):
        task = eval_task(task_spec, seed, i)
        input_map = None
        if oracle:
            from .tasks import oracle_inputs

            input_map = functools.partial(oracle_inputs, task)
        out[i] = fine_tune_eval(
            theta, spec, task, K, eval_steps, step_size_schedule, query_size,
            stream(seed, "eval-data", i), input_map,
        )
    return out

"""REINFORCE with a linear feature baseline, and MAML over policies.

Policies are MLPs with a ``gaussian_policy`` head: a state-dependent mean and a
state-independent log standard deviation. Observation modes:

``position``  the agent's 2D position (what MAML and the baselines see)
``goal``      position and goal concatenated (the oracle)

Returns are undiscounted. The surrogate loss is ``-sum log pi(a|s) * A`` over
every state-action pair in the batch, divided either by the number of pairs
(``reduction="timestep"``, the default) or by the number of trajectories
(``"trajectory"``). Advantages are normalized to zero mean and unit variance
across the batch.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .meta import Adam, SGD, TrainRecord, inner_adapt, outer_loop, step_schedule
from .models import MLPSpec, forward, forward_numpy, init
from .rng import stream
from .tasks import NAV_START, TaskInstance, TaskSpec, nav2d_step, sample_task

OBSERVATIONS = ("position", "goal")
REDUCTIONS = ("timestep", "trajectory")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Trajectory:
    states: np.ndarray  # (T, 2) positions the actions were taken from
    actions: np.ndarray  # (T, act_dim) unclipped samples
    rewards: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,) under the sampling policy
    goal: np.ndarray

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))


@dataclass(frozen=True)
class RLConfig:
    K_trajectories: int = 20
    meta_batch_size: int = 20
    inner_step_size: float = 0.1
    meta_step_size: float = 0.01
    meta_iterations: int = 500
    first_order: bool = False
    meta_optimizer: str = "adam"
    keep_best: bool = True
    eval_updates: int = 3
    eval_samples: int = 40
    eval_step_sizes: tuple[float, ...] = (0.1, 0.05)
    reduction: str = "timestep"

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.K_trajectories < 1 or self.meta_batch_size < 1:
            raise ValueError("K_trajectories and meta_batch_size must be >= 1")
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown meta optimizer {self.meta_optimizer!r}")


def policy_spec(hidden: Sequence[int] = (100, 100), observe: str = "position", context_dim: int = 0,
                activation: str = "relu") -> MLPSpec:
    if observe not in OBSERVATIONS:
        raise ValueError(f"unknown observation mode {observe!r}")
    data_dim = 4 if observe == "goal" else 2
    return MLPSpec(data_dim + context_dim, tuple(hidden), 2, activation, "gaussian_policy", context_dim)


def observe_numpy(observe: str, states: np.ndarray, goal: np.ndarray) -> np.ndarray:
    if observe == "goal":
        return np.concatenate([states, np.broadcast_to(goal, states.shape)], axis=1)
    return states


def _observe_for(spec: MLPSpec) -> str:
    return "goal" if spec.data_dim == 4 else "position"


# ---------------------------------------------------------------- sampling


def sample_trajectories(
    theta: np.ndarray,
    spec: MLPSpec,
    task: TaskInstance,
    count: int,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """Roll out ``count`` episodes of the Gaussian policy in parallel."""
    if task.kind != "nav2d":
        raise ValueError("trajectories are sampled from nav2d tasks")
    observe = _observe_for(spec)
    H = task.spec.horizon
    goal = np.asarray(task.latent["goal"], dtype=np.float64)
    act_dim = spec.output_dim
    pos = np.tile(np.asarray(NAV_START, dtype=np.float64), (count, 1))
    states = np.zeros((count, H, 2))
    actions = np.zeros((count, H, act_dim))
    rewards = np.zeros((count, H))
    logps = np.zeros((count, H))
    lengths = np.zeros(count, dtype=np.int64)
    active = np.arange(count)
    for t in range(H):
        if active.size == 0:
            break
        mean, log_std = forward_numpy(spec, theta, observe_numpy(observe, pos[active], goal))
        noise = rng.standard_normal(mean.shape)
        a = mean + np.exp(log_std) * noise
        nxt, r, done = nav2d_step(pos[active], a, goal, t, H)
        states[active, t] = pos[active]
        actions[active, t] = a
        rewards[active, t] = r
        logps[active, t] = np.sum(-0.5 * noise * noise - log_std, axis=1) - 0.5 * act_dim * LOG_2PI
        pos[active] = nxt
        lengths[active] = t + 1
        active = active[~done]
    return [
        Trajectory(states[i, :n].copy(), actions[i, :n].copy(), rewards[i, :n].copy(), logps[i, :n].copy(), goal)
        for i, n in enumerate(lengths)
    ]


def returns_to_go(rewards: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(rewards)[::-1])[::-1].copy()


def mean_return(trajectories: Sequence[Trajectory]) -> float:
    return float(np.mean([t.total_return for t in trajectories]))


# ---------------------------------------------------------------- baseline


class LinearBaseline:
    """Return predictor linear in [s, s^2, t/H, (t/H)^2, (t/H)^3, 1], fit by ridge regression."""

    def __init__(self, reg: float = 1e-5, horizon: int = 100):
        self.reg = reg
        self.horizon = horizon
        self.coeffs: np.ndarray | None = None

    def features(self, traj: Trajectory) -> np.ndarray:
        s = np.clip(traj.states, -10.0, 10.0)
        tt = (np.arange(len(traj)) / self.horizon)[:, None]
        return np.concatenate([s, s * s, tt, tt**2, tt**3, np.ones_like(tt)], axis=1)

    def fit(self, trajectories: Sequence[Trajectory]) -> "LinearBaseline":
        F = np.concatenate([self.features(t) for t in trajectories])
        R = np.concatenate([returns_to_go(t.rewards) for t in trajectories])
        reg = self.reg
        for _ in range(5):
            A = F.T @ F + reg * np.eye(F.shape[1])
            coeffs = np.linalg.solve(A, F.T @ R)
            if np.all(np.isfinite(coeffs)):
                break
            reg *= 10.0
        self.coeffs = coeffs
        return self

    def predict(self, traj: Trajectory) -> np.ndarray:
        if self.coeffs is None:
            return np.zeros(len(traj))
        return self.features(traj) @ self.coeffs


# ------------------------------------------------------------------ losses


def gaussian_log_prob(spec: MLPSpec, params: ad.Node, inputs: np.ndarray, actions: np.ndarray) -> ad.Node:
    """Per-row log-density of ``actions`` under the policy, shape (N,)."""
    mean, log_std = forward(spec, params, inputs)
    n, d = mean.shape
    ls = ad.broadcast(log_std, 0, n)
    z = (actions - mean) * ad.exp(-ls)
    return ad.sum(ad.square(z) * -0.5 - ls, axis=1) - 0.5 * d * LOG_2PI


def advantages(
    trajectories: Sequence[Trajectory],
    baseline: LinearBaseline | None = None,
    normalize: bool = True,
) -> np.ndarray:
    adv = np.concatenate([
        returns_to_go(t.rewards) - (baseline.predict(t) if baseline is not None else 0.0)
        for t in trajectories
    ])
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv


def reinforce_loss(
    trajectories: Sequence[Trajectory],
    log_prob_fn: Callable[[np.ndarray, np.ndarray], ad.Node],
    baseline: LinearBaseline | None = None,
    normalize: bool = True,
    reduction: str = "timestep",
) -> ad.Node:
    """Surrogate whose gradient is the REINFORCE estimate of -grad(expected return).

    ``log_prob_fn(states, actions)`` must return the differentiable per-step
    log-probabilities for the stacked trajectories.
    """
    if not trajectories:
        raise ValueError("reinforce_loss needs at least one trajectory")
    adv = advantages(trajectories, baseline, normalize)
    states = np.concatenate([t.states for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    logp = log_prob_fn(states, actions)
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    denom = adv.shape[0] if reduction == "timestep" else len(trajectories)
    return ad.sum(logp * adv) * (-1.0 / denom)


def policy_loss(spec: MLPSpec, params: ad.Node, trajectories: Sequence[Trajectory],
                baseline: LinearBaseline | None, reduction: str = "timestep") -> ad.Node:
    observe = _observe_for(spec)
    goal = trajectories[0].goal

    def log_prob_fn(states, actions):
        return gaussian_log_prob(spec, params, observe_numpy(observe, states, goal), actions)

    return reinforce_loss(trajectories, log_prob_fn, baseline, reduction=reduction)


def _fitted_baseline(trajectories: Sequence[Trajectory], horizon: int) -> LinearBaseline:
    return LinearBaseline(horizon=horizon).fit(trajectories)


def policy_gradient(theta: np.ndarray, spec: MLPSpec, trajectories: Sequence[Trajectory],
                    horizon: int = 100, reduction: str = "timestep") -> np.ndarray:
    g = ad.Graph()
    p = g.param(theta)
    loss = policy_loss(spec, p, trajectories, _fitted_baseline(trajectories, horizon), reduction)
    return ad.grad(loss, [p])[0].value


def adapt_mask(spec: MLPSpec) -> np.ndarray | None:
    """Context policies adapt only their context vector."""
    return spec.context_mask() if spec.context_dim else None


# ---------------------------------------------------------------- training


def nav_task(task_spec: TaskSpec, seed: int, name: str, *indices: int) -> TaskInstance:
    return sample_task(task_spec, int(stream(seed, name, *indices).integers(2**63 - 1)))


def _maml_rl_job(args, spec, task_spec, cfg, seed):
    theta, it, i = args
    task = nav_task(task_spec, seed, "rl-train-task", it, i)
    H = task_spec.horizon
    pre = sample_trajectories(theta, spec, task, cfg.K_trajectories, stream(seed, "rl-pre", it, i))
    g = ad.Graph()
    p = g.param(theta)
    res = inner_adapt(
        p,
        lambda q: policy_loss(spec, q, pre, _fitted_baseline(pre, H), cfg.reduction),
        cfg.inner_step_size,
        1,
        cfg.first_order,
        adapt_mask(spec),
    )
    post = sample_trajectories(res.adapted.value, spec, task, cfg.K_trajectories, stream(seed, "rl-post", it, i))
    outer = policy_loss(spec, res.adapted, post, _fitted_baseline(post, H), cfg.reduction)
    (mg,) = ad.grad(outer, [p])
    return mg.value, -mean_return(pre), -mean_return(post)


def _pretrain_job(args, spec, task_spec, cfg, seed):
    theta, it, i = args
    task = nav_task(task_spec, seed, "rl-pretrain-task", it, i)
    trajs = sample_trajectories(theta, spec, task, cfg.K_trajectories, stream(seed, "rl-pretrain", it, i))
    grad = policy_gradient(theta, spec, trajs, task_spec.horizon, cfg.reduction)
    loss = -mean_return(trajs)
    return grad, loss, loss


def _optimizer(cfg: RLConfig):
    return Adam(cfg.meta_step_size) if cfg.meta_optimizer == "adam" else SGD(cfg.meta_step_size)


def _run(job, spec, cfg, iterations, seed, workers, theta0):
    if theta0 is None:
        theta0 = init(spec, stream(seed, "init")).values
    best = {"loss": np.inf, "theta": np.array(theta0)}

    def track(theta, rec):
        if rec.post_loss < best["loss"]:
            best["loss"] = rec.post_loss
            best["theta"] = theta

    theta, log = outer_loop(theta0, job, cfg.meta_batch_size, _optimizer(cfg), iterations, workers,
                            track if cfg.keep_best else None)
    if cfg.keep_best and iterations > 0:
        theta = best["theta"]
    return theta, log


def maml_rl_train(
    spec: MLPSpec,
    cfg: RLConfig,
    seed: int,
    task_spec: TaskSpec | None = None,
    workers: int = 1,
    iterations: int | None = None,
    theta0: np.ndarray | None = None,
) -> tuple[np.ndarray, list[TrainRecord]]:
    """MAML over policies; a spec with a context vector gives the context baseline.

    With ``keep_best`` the returned parameters are those whose post-adaptation
    return was highest during training. Log losses are negated returns.
    """
    task_spec = task_spec or TaskSpec("nav2d")
    job = functools.partial(_maml_rl_job, spec=spec, task_spec=task_spec, cfg=cfg, seed=seed)
    iterations = cfg.meta_iterations if iterations is None else iterations
    return _run(job, spec, cfg, iterations, seed, workers, theta0)


def pretrain_policy(
    spec: MLPSpec,
    cfg: RLConfig,
    seed: int,
    task_spec: TaskSpec | None = None,
    workers: int = 1,
    iterations: int | None = None,
) -> tuple[np.ndarray, list[TrainRecord]]:
    """Plain REINFORCE on tasks mixed across the batch.

    With a goal-observing spec this trains the oracle policy.
    """
    task_spec = task_spec or TaskSpec("nav2d")
    job = functools.partial(_pretrain_job, spec=spec, task_spec=task_spec, cfg=cfg, seed=seed)
    iterations = cfg.meta_iterations if iterations is None else iterations
    return _run(job, spec, cfg, iterations, seed, workers, None)


# -------------------------------------------------------------- evaluation


def rl_adapt_eval(
    theta: np.ndarray,
    spec: MLPSpec,
    task: TaskInstance,
    updates: int,
    samples_per_update: int,
    step_sizes: float | Sequence[float] = (0.1, 0.05),
    rng: np.random.Generator | None = None,
    reduction: str = "timestep",
) -> list[float]:
    """Mean return after 0, 1, ..., ``updates`` policy-gradient steps.

    Each entry averages freshly sampled rollouts of the current policy; those
    rollouts also drive the next gradient step.
    """
    if updates < 0:
        raise ValueError("updates must be >= 0")
    rng = rng if rng is not None else stream(task.seed, "rl-eval")
    alphas = step_schedule(step_sizes, max(updates, 1))
    mask = adapt_mask(spec)
    theta = np.asarray(theta, dtype=np.float64)
    out = []
    for k in range(updates + 1):
        trajs = sample_trajectories(theta, spec, task, samples_per_update, rng)
        out.append(mean_return(trajs))
        if k < updates:
            g = policy_gradient(theta, spec, trajs, task.spec.horizon, reduction)
            if mask is not None:
                g = g * mask
            theta = theta - alphas[k] * g
    return out


def _eval_job(i, theta, spec, task_spec, updates, samples, step_sizes, seed, reduction):
    task = nav_task(task_spec, seed, "rl-eval-task", i)
    return rl_adapt_eval(theta, spec, task, updates, samples, step_sizes, stream(seed, "rl-eval", i), reduction)


def evaluate_rl(
    theta: np.ndarray,
    spec: MLPSpec,
    n_tasks: int,
    updates: int,
    samples: int,
    step_sizes: float | Sequence[float],
    seed: int,
    task_spec: TaskSpec | None = None,
    workers: int = 1,
    reduction: str = "timestep",
) -> np.ndarray:
    """Return curves over held-out goals, shape (n_tasks, updates + 1)."""
    from .parallel import TaskPool

    task_spec = task_spec or TaskSpec("nav2d")
    job = functools.partial(_eval_job, theta=theta, spec=spec, task_spec=task_spec, updates=updates,
                            samples=samples, step_sizes=step_sizes, seed=seed, reduction=reduction)
    with TaskPool(workers) as pool:
        return np.array(pool.map(job, range(n_tasks)))

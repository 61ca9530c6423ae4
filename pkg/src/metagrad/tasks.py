"""Task distributions: sinusoid regression, synthetic N-way classification and
2D point navigation, plus the supervised losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import stream

KINDS = ("sinusoid", "synthetic_classification", "nav2d")
SUPERVISED_KINDS = ("sinusoid", "synthetic_classification")

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
SINUSOID_INPUT_RANGE = (-5.0, 5.0)

FEATURE_DIM = 16
CLASS_NOISE_STD = 0.3

NAV_HORIZON = 100
NAV_ACTION_LIMIT = 0.1
NAV_GOAL_TOLERANCE = 0.01
NAV_START = (0.0, 0.0)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    horizon: int | None = None
    shots_K: int = 10
    ways_N: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.horizon is None:
            object.__setattr__(self, "horizon", NAV_HORIZON if self.kind == "nav2d" else 1)
        if self.kind in SUPERVISED_KINDS and self.horizon != 1:
            raise ValueError("supervised tasks have horizon 1")
        if self.horizon < 1 or self.shots_K < 1 or self.ways_N < 1:
            raise ValueError("horizon, shots_K and ways_N must be positive")

    @property
    def input_dim(self) -> int:
        return {"sinusoid": 1, "synthetic_classification": FEATURE_DIM, "nav2d": 2}[self.kind]

    @property
    def output_dim(self) -> int:
        return {"sinusoid": 1, "synthetic_classification": self.ways_N, "nav2d": 2}[self.kind]

    @property
    def latent_dim(self) -> int:
        """Width of the task descriptor handed to oracle models."""
        return {"sinusoid": 2, "synthetic_classification": self.ways_N * FEATURE_DIM, "nav2d": 2}[self.kind]


@dataclass(frozen=True)
class TaskInstance:
    spec: TaskSpec
    latent: dict = field(hash=False)
    seed: int = 0

    @property
    def kind(self) -> str:
        return self.spec.kind

    def descriptor(self) -> np.ndarray:
        """Task latent flattened into a vector (the oracle's extra input)."""
        if self.kind == "sinusoid":
            return np.array([self.latent["amplitude"], self.latent["phase"]])
        if self.kind == "nav2d":
            return np.asarray(self.latent["goal"], dtype=np.float64).copy()
        return np.asarray(self.latent["prototypes"]).ravel().copy()


@dataclass
class SupportQueryBatch:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray


def sample_task(kind: str | TaskSpec, rng_seed: int) -> TaskInstance:
    spec = kind if isinstance(kind, TaskSpec) else TaskSpec(kind)
    rng = stream(rng_seed, "task-latent")
    if spec.kind == "sinusoid":
        latent = {
            "amplitude": float(rng.uniform(*AMPLITUDE_RANGE)),
            "phase": float(rng.uniform(*PHASE_RANGE)),
        }
    elif spec.kind == "synthetic_classification":
        protos = rng.standard_normal((spec.ways_N, FEATURE_DIM))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        latent = {"prototypes": protos}
    else:
        latent = {"goal": rng.uniform(0.0, 1.0, size=2)}
    return TaskInstance(spec, latent, int(rng_seed))


def sinusoid_eval(instance: TaskInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return instance.latent["amplitude"] * np.sin(x - instance.latent["phase"])


def _draw(instance: TaskInstance, per: int, rng: np.random.Generator):
    if instance.kind == "sinusoid":
        x = rng.uniform(*SINUSOID_INPUT_RANGE, size=(per, 1))
        return x, sinusoid_eval(instance, x)
    if instance.kind == "synthetic_classification":
        protos = instance.latent["prototypes"]
        n_way = protos.shape[0]
        labels = np.repeat(np.arange(n_way), per)
        x = protos[labels] + CLASS_NOISE_STD * rng.standard_normal((n_way * per, FEATURE_DIM))
        return x, labels
    raise ValueError("support/query batches exist only for supervised tasks")


def sample_support_query(
    instance: TaskInstance,
    K: int,
    query_size: int,
    rng: np.random.Generator | None = None,
) -> SupportQueryBatch:
    """Disjoint support and query draws.

    For classification ``K`` and ``query_size`` count examples per class.
    """
    if K < 1 or query_size < 0:
        raise ValueError("K must be >= 1 and query_size >= 0")
    if rng is None:
        rng = stream(instance.seed, "task-data")
    sx, sy = _draw(instance, K, rng)
    qx, qy = _draw(instance, query_size, rng)
    return SupportQueryBatch(sx, sy, qx, qy)


def oracle_inputs(instance: TaskInstance, x: np.ndarray) -> np.ndarray:
    """Append the task descriptor to every input row."""
    x = np.asarray(x, dtype=np.float64)
    d = instance.descriptor()
    return np.concatenate([x, np.broadcast_to(d, (x.shape[0], d.size))], axis=1)


# ------------------------------------------------------------------ losses


def mse_loss(pred: ad.Node, target) -> ad.Node:
    """Batch mean of the squared error summed over output dimensions."""
    if isinstance(target, ad.Node):
        target_shape = target.shape
    else:
        target = np.asarray(target, dtype=np.float64)
        target_shape = target.shape
    if pred.shape != target_shape:
        raise ad.ShapeError(f"mse: prediction {pred.shape} vs target {target_shape}")
    return ad.sum(ad.square(pred - target)) * (1.0 / pred.shape[0])


def xent_loss(logits: ad.Node, labels) -> ad.Node:
    """Mean negative log-likelihood of the true class under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ad.ShapeError(f"xent: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError("labels out of range")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    log_probs = logits - ad.broadcast(ad.logsumexp(logits), 1, c)
    return -ad.sum(log_probs * onehot) * (1.0 / n)


# ---------------------------------------------------------- 2D navigation


def nav2d_step(state, action, goal, t: int = 0, horizon: int = NAV_HORIZON):
    """One transition of the point-mass environment.

    ``t`` is the zero-based index of the step being taken. Works elementwise
    over a leading batch axis. Returns ``(next_state, reward, done)``.
    """
    state = np.asarray(state, dtype=np.float64)
    clipped = np.clip(np.asarray(action, dtype=np.float64), -NAV_ACTION_LIMIT, NAV_ACTION_LIMIT)
    nxt = state + clipped
    diff = nxt - np.asarray(goal, dtype=np.float64)
    dist2 = np.sum(diff * diff, axis=-1)
    done = (np.sqrt(dist2) < NAV_GOAL_TOLERANCE) | (t + 1 >= horizon)
    return nxt, -dist2, done


class Nav2DEnv:
    """Stateful wrapper around :func:`nav2d_step` for a single agent."""

    def __init__(self, instance: TaskInstance):
        self.goal = np.asarray(instance.latent["goal"], dtype=np.float64)
        self.horizon = instance.spec.horizon
        self.reset()

    def reset(self) -> np.ndarray:
        self.state = np.array(NAV_START)
        self.t = 0
        return self.state.copy()

    def step(self, action):
        self.state, reward, done = nav2d_step(self.state, action, self.goal, self.t, self.horizon)
        self.t += 1
        return self.state.copy(), float(reward), bool(done)

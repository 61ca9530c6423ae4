"""Experiment configuration: flat ``key = value`` sections, strict validation.

Every key has a default listed in :data:`DEFAULTS` except ``experiment.method``
and ``task.kind``, which are required. Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, replace
from pathlib import Path

from .baselines import REGULARIZERS
from .meta import MetaConfig
from .rl import REDUCTIONS, RLConfig
from .tasks import KINDS, TaskSpec

METHODS = ("maml", "fomaml", "pretrain", "multitask_avg", "context", "oracle", "random_init")
REQUIRED = (("experiment", "method"), ("task", "kind"))

# section -> key -> default (as text). "auto" is resolved at run time.
DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {
        "method": "",
        "seed": "0",
        "output_dir": "runs/default",
    },
    "task": {
        "kind": "",
        "shots_K": "10",
        "ways_N": "5",
        "horizon": "auto",
    },
    "model": {
        "hidden": "40,40",
        "activation": "relu",
    },
    "meta": {
        "iterations": "20000",
        "inner_step_size": "0.01",
        "meta_step_size": "0.001",
        "inner_steps": "1",
        "meta_batch_size": "25",
        "meta_optimizer": "adam",
        "adam_beta1": "0.9",
        "adam_beta2": "0.999",
        "adam_eps": "1e-8",
        "query_size": "0",
        "backend": "auto",
    },
    "rl": {
        "K_trajectories": "20",
        "meta_batch_size": "20",
        "meta_iterations": "500",
        "inner_step_size": "0.1",
        "meta_step_size": "0.01",
        "meta_optimizer": "adam",
        "keep_best": "true",
        "reduction": "timestep",
        "eval_updates": "3",
        "eval_samples": "40",
        "eval_step_sizes": "0.1,0.05",
        "eval_tasks": "40",
    },
    "baseline": {
        "pretrain_iterations": "20000",
        "pretrain_lr": "0.001",
        "task_count": "100",
        "regularizer": "none",
        "strength": "auto",
        "regressor_lr": "0.01",
        "regressor_max_iterations": "5000",
        "z_dim": "auto",
        "step_size": "auto",
        "validation_tasks": "100",
    },
    "eval": {
        "n_tasks": "600",
        "shots": "5",
        "steps": "10",
        "query_size": "100",
    },
}

DEFAULT_Z_DIM = {"sinusoid": 10, "synthetic_classification": 10, "nav2d": 2}


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _int(field, text, minimum=None):
    try:
        value = int(text)
    except ValueError:
        raise ConfigError(f"{field}: expected an integer, got {text!r}", field) from None
    if minimum is not None and value < minimum:
        raise ConfigError(f"{field}: must be >= {minimum}, got {value}", field)
    return value


def _float(field, text, minimum=None):
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"{field}: expected a number, got {text!r}", field) from None
    if minimum is not None and not value >= minimum:
        raise ConfigError(f"{field}: must be >= {minimum}, got {value}", field)
    return value


def _bool(field, text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{field}: expected true/false, got {text!r}", field)


def _choice(field, text, options):
    if text not in options:
        raise ConfigError(f"{field}: expected one of {', '.join(options)}, got {text!r}", field)
    return text


def _list(field, text, conv):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{field}: empty list", field)
    return tuple(conv(field, p) for p in parts)


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...]
    seed: int
    output_dir: str
    task: TaskSpec
    hidden: tuple[int, ...]
    activation: str
    iterations: int
    meta: MetaConfig
    backend: str
    rl: RLConfig
    rl_eval_tasks: int
    pretrain_iterations: int
    pretrain_lr: float
    task_count: int
    regularizer: str
    strength: float | None  # None means auto
    regressor_lr: float
    regressor_max_iterations: int
    z_dim: int
    baseline_step_size: float | None  # None means tuned
    validation_tasks: int
    eval_tasks: int
    eval_shots: tuple[int, ...]
    eval_steps: int
    eval_query_size: int
    raw: dict[str, dict[str, str]]

    def meta_for(self, method: str) -> MetaConfig:
        if method == "fomaml":
            return replace(self.meta, first_order=True)
        return self.meta

    def rl_for(self, method: str) -> RLConfig:
        if method == "fomaml":
            return replace(self.rl, first_order=True)
        return self.rl

    def to_text(self) -> str:
        """Effective configuration with every default filled in."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, values in self.raw.items():
            parser[section] = values
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue().replace("\r\n", "\n").rstrip("\n") + "\n"


def parse_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    raw = {section: dict(values) for section, values in DEFAULTS.items()}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]", section)
        for key, value in parser[section].items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
            raw[section][key] = value.strip()
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {dotted}", dotted)
        raw[section][key] = str(value).strip()
    for section, key in REQUIRED:
        if not raw[section][key]:
            raise ConfigError(f"missing required field {section}.{key}", f"{section}.{key}")
    return _build(raw)


def load(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, overrides)


def _build(raw: dict[str, dict[str, str]]) -> ExperimentConfig:
    e, t, m, r, b, ev = (raw[s] for s in ("experiment", "task", "meta", "rl", "baseline", "eval"))
    methods = _list("experiment.method", e["method"], lambda f, x: _choice(f, x, METHODS))
    kind = _choice("task.kind", t["kind"], KINDS)
    horizon = None if t["horizon"] == "auto" else _int("task.horizon", t["horizon"], 1)
    try:
        task = TaskSpec(kind, horizon, _int("task.shots_K", t["shots_K"], 1), _int("task.ways_N", t["ways_N"], 1))
    except ValueError as exc:
        raise ConfigError(f"task: {exc}", "task") from None
    if kind == "nav2d" and "multitask_avg" in methods:
        raise ConfigError("experiment.method: multitask_avg needs a supervised task", "experiment.method")
    try:
        meta = MetaConfig(
            inner_step_size=_float("meta.inner_step_size", m["inner_step_size"], 0.0),
            meta_step_size=_float("meta.meta_step_size", m["meta_step_size"], 0.0),
            inner_steps=_int("meta.inner_steps", m["inner_steps"], 1),
            meta_batch_size=_int("meta.meta_batch_size", m["meta_batch_size"], 1),
            meta_optimizer=_choice("meta.meta_optimizer", m["meta_optimizer"], ("sgd", "adam")),
            adam_beta1=_float("meta.adam_beta1", m["adam_beta1"], 0.0),
            adam_beta2=_float("meta.adam_beta2", m["adam_beta2"], 0.0),
            adam_eps=_float("meta.adam_eps", m["adam_eps"], 0.0),
            query_size=_int("meta.query_size", m["query_size"], 0),
        )
        rlcfg = RLConfig(
            K_trajectories=_int("rl.K_trajectories", r["K_trajectories"], 1),
            meta_batch_size=_int("rl.meta_batch_size", r["meta_batch_size"], 1),
            inner_step_size=_float("rl.inner_step_size", r["inner_step_size"], 0.0),
            meta_step_size=_float("rl.meta_step_size", r["meta_step_size"], 0.0),
            meta_iterations=_int("rl.meta_iterations", r["meta_iterations"], 0),
            meta_optimizer=_choice("rl.meta_optimizer", r["meta_optimizer"], ("sgd", "adam")),
            keep_best=_bool("rl.keep_best", r["keep_best"]),
            eval_updates=_int("rl.eval_updates", r["eval_updates"], 0),
            eval_samples=_int("rl.eval_samples", r["eval_samples"], 1),
            eval_step_sizes=_list("rl.eval_step_sizes", r["eval_step_sizes"], lambda f, x: _float(f, x, 0.0)),
            reduction=_choice("rl.reduction", r["reduction"], REDUCTIONS),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    hidden = _list("model.hidden", raw["model"]["hidden"], lambda f, x: _int(f, x, 1))
    activation = _choice("model.activation", raw["model"]["activation"], ("relu", "tanh"))
    z_dim = DEFAULT_Z_DIM[kind] if b["z_dim"] == "auto" else _int("baseline.z_dim", b["z_dim"], 0)
    return ExperimentConfig(
        methods=methods,
        seed=_int("experiment.seed", e["seed"], 0),
        output_dir=e["output_dir"],
        task=task,
        hidden=hidden,
        activation=activation,
        iterations=_int("meta.iterations", m["iterations"], 0),
        meta=meta,
        backend=_choice("meta.backend", m["backend"], ("auto", "fused", "graph")),
        rl=rlcfg,
        rl_eval_tasks=_int("rl.eval_tasks", r["eval_tasks"], 1),
        pretrain_iterations=_int("baseline.pretrain_iterations", b["pretrain_iterations"], 0),
        pretrain_lr=_float("baseline.pretrain_lr", b["pretrain_lr"], 0.0),
        task_count=_int("baseline.task_count", b["task_count"], 1),
        regularizer=_choice("baseline.regularizer", b["regularizer"], REGULARIZERS),
        strength=None if b["strength"] == "auto" else _float("baseline.strength", b["strength"], 0.0),
        regressor_lr=_float("baseline.regressor_lr", b["regressor_lr"], 0.0),
        regressor_max_iterations=_int("baseline.regressor_max_iterations", b["regressor_max_iterations"], 1),
        z_dim=z_dim,
        baseline_step_size=None if b["step_size"] == "auto" else _float("baseline.step_size", b["step_size"], 0.0),
        validation_tasks=_int("baseline.validation_tasks", b["validation_tasks"], 1),
        eval_tasks=_int("eval.n_tasks", ev["n_tasks"], 1),
        eval_shots=_list("eval.shots", ev["shots"], lambda f, x: _int(f, x, 1)),
        eval_steps=_int("eval.steps", ev["steps"], 0),
        eval_query_size=_int("eval.query_size", ev["query_size"], 1),
        raw=raw,
    )


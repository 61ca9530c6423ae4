"""Multilayer perceptrons over a flat parameter vector.

Parameters are laid out layer by layer as ``W0, b0, W1, b1, ...`` with each
weight matrix stored ``(fan_in, fan_out)`` row-major, followed by ``log_std``
for Gaussian policy heads. The same layout is read by the compiled kernels in
:mod:`metagrad.kernels`.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("relu", "tanh")
HEADS = ("linear", "softmax", "gaussian_policy")

CHECKPOINT_MAGIC = "METAGRAD-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    output_head: str = "linear"
    # free context vector stored after the network and appended to every input
    # row; input_dim counts it, callers pass rows of width input_dim - context_dim
    context_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"layer widths must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if not 0 <= self.context_dim < self.input_dim:
            raise ValueError("context_dim must be in [0, input_dim)")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    # frozen, so derived layout data is computed once per spec
    @cached_property
    def layout(self) -> tuple[tuple[str, tuple[int, ...], int], ...]:
        out = []
        off = 0
        sizes = self.sizes
        for i in range(len(sizes) - 1):
            for name, shape in ((f"W{i}", (sizes[i], sizes[i + 1])), (f"b{i}", (sizes[i + 1],))):
                out.append((name, shape, off))
                off += int(np.prod(shape))
        if self.output_head == "gaussian_policy":
            out.append(("log_std", (self.output_dim,), off))
            off += self.output_dim
        if self.context_dim:
            out.append(("context", (self.context_dim,), off))
        return tuple(out)

    @cached_property
    def n_params(self) -> int:
        name, shape, off = self.layout[-1]
        return off + int(np.prod(shape))

    @property
    def data_dim(self) -> int:
        """Width of the input rows callers supply."""
        return self.input_dim - self.context_dim

    @property
    def context_slice(self) -> slice:
        return slice(self.n_params - self.context_dim, self.n_params)

    def context_mask(self) -> np.ndarray:
        """1 on context entries, 0 elsewhere."""
        mask = np.zeros(self.n_params)
        mask[self.context_slice] = 1.0
        return mask

    @property
    def n_network_params(self) -> int:
        """Length of the prefix holding plain MLP weights and biases."""
        sizes = self.sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))

    def to_text(self) -> dict[str, str]:
        return {
            "input_dim": str(self.input_dim),
            "hidden": ",".join(str(h) for h in self.hidden),
            "output_dim": str(self.output_dim),
            "activation": self.activation,
            "output_head": self.output_head,
            "context_dim": str(self.context_dim),
        }

    @classmethod
    def from_text(cls, fields: dict[str, str]) -> "MLPSpec":
        hidden = tuple(int(h) for h in fields["hidden"].split(",") if h.strip())
        return cls(
            input_dim=int(fields["input_dim"]),
            hidden=hidden,
            output_dim=int(fields["output_dim"]),
            activation=fields["activation"],
            output_head=fields["output_head"],
            context_dim=int(fields.get("context_dim", "0")),
        )


@dataclass
class ParameterVector:
    """Flat parameter vector plus the layout mapping it onto layers."""

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...], int]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.layout = list(self.layout)
        end = 0
        for _, shape, off in self.layout:
            if off != end:
                raise ValueError("layout offsets must partition the vector without gaps")
            end = off + int(np.prod(shape))
        if self.layout and end != self.values.size:
            raise ValueError(f"layout covers {end} entries, vector has {self.values.size}")

    def __len__(self) -> int:
        return self.values.size

    def unflatten(self) -> dict[str, np.ndarray]:
        return {
            name: self.values[off:off + int(np.prod(shape))].reshape(shape).copy()
            for name, shape, off in self.layout
        }

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], layout) -> "ParameterVector":
        values = np.concatenate([np.asarray(arrays[name], dtype=np.float64).ravel() for name, _, _ in layout])
        return cls(values, list(layout))


def init(spec: MLPSpec, seed: int | np.random.Generator) -> ParameterVector:
    """Weights ~ N(0, 1/fan_in); biases, log-std and context entries zero."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = np.zeros(spec.n_params)
    for name, shape, off in spec.layout:
        if name.startswith("W"):
            n = shape[0] * shape[1]
            values[off:off + n] = rng.standard_normal(n) / np.sqrt(shape[0])
    return ParameterVector(values, spec.layout)


def _split(spec: MLPSpec, params: ad.Node) -> dict[str, ad.Node]:
    if params.shape != (spec.n_params,):
        raise ad.ShapeError(f"expected flat parameters of length {spec.n_params}, got {params.shape}")
    parts = {}
    for name, shape, off in spec.layout:
        n = int(np.prod(shape))
        part = ad.slice_axis(params, 0, off, off + n)
        parts[name] = ad.reshape(part, shape) if len(shape) > 1 else part
    return parts


def forward(spec: MLPSpec, params: ad.Node, x, logits: bool = False):
    """Differentiable forward pass.

    ``x`` is a node or array of shape (batch, input_dim). Returns the output
    node, or ``(mean, log_std)`` for a Gaussian policy head. ``logits=True``
    skips the softmax normalization of a softmax head.
    """
    graph = params.graph
    if not isinstance(x, ad.Node):
        x = graph.constant(x)
    if x.value.ndim != 2 or x.shape[1] != spec.data_dim:
        raise ad.ShapeError(f"input must have shape (batch, {spec.data_dim}), got {x.shape}")
    parts = _split(spec, params)
    if spec.context_dim:
        x = ad.concat([x, ad.broadcast(parts["context"], 0, x.shape[0])], axis=1)
    n_layers = len(spec.sizes) - 1
    h = x
    batch = x.shape[0]
    act = ad.relu if spec.activation == "relu" else ad.tanh
    for i in range(n_layers):
        h = h @ parts[f"W{i}"] + ad.broadcast(parts[f"b{i}"], 0, batch)
        if i < n_layers - 1:
            h = act(h)
    if spec.output_head == "softmax" and not logits:
        return ad.exp(h - ad.broadcast(ad.logsumexp(h), 1, spec.output_dim))
    if spec.output_head == "gaussian_policy":
        return h, parts["log_std"]
    return h


def forward_numpy(spec: MLPSpec, theta: np.ndarray, x: np.ndarray):
    """Plain numpy forward pass with the same semantics as :func:`forward`."""
    theta = np.asarray(theta, dtype=np.float64)
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != spec.data_dim:
        raise ValueError(f"input must have shape (batch, {spec.data_dim}), got {h.shape}")
    if spec.context_dim:
        z = theta[spec.context_slice]
        h = np.concatenate([h, np.broadcast_to(z, (h.shape[0], z.size))], axis=1)
    sizes = spec.sizes
    off = 0
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        a, b = sizes[i], sizes[i + 1]
        W = theta[off:off + a * b].reshape(a, b)
        off += a * b
        h = h @ W + theta[off:off + b]
        off += b
        if i < n_layers - 1:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    if spec.output_head == "softmax":
        z = h - h.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    if spec.output_head == "gaussian_policy":
        return h, theta[off:off + spec.output_dim].copy()
    return h


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, spec: MLPSpec, params: ParameterVector | np.ndarray) -> None:
    values = params.values if isinstance(params, ParameterVector) else np.asarray(params, dtype=np.float64)
    if values.size != spec.n_params:
        raise ValueError(f"parameter count {values.size} does not match spec ({spec.n_params})")
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines += [f"{k}={v}" for k, v in spec.to_text().items()]
    lines.append(f"n_params={values.size}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + values.astype("<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[MLPSpec, ParameterVector]:
    buf = io.BytesIO(Path(path).read_bytes())
    first = buf.readline().decode("utf-8").split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a metagrad checkpoint")
    if int(first[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {first[1]}")
    fields = {}
    while True:
        line = buf.readline()
        if not line:
            raise CheckpointError(f"{path}: truncated header")
        line = line.decode("utf-8").rstrip("\n")
        if line == "END":
            break
        key, _, value = line.partition("=")
        fields[key] = value
    spec = MLPSpec.from_text(fields)
    values = np.frombuffer(buf.read(), dtype="<f8").astype(np.float64)
    if values.size != int(fields["n_params"]) or values.size != spec.n_params:
        raise CheckpointError(f"{path}: expected {spec.n_params} parameters, found {values.size}")
    return spec, ParameterVector(values, spec.layout)

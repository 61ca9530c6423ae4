"""Fused MLP regression kernels: loss, gradient and Hessian-vector product.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``METAGRAD_KERNELS=numpy`` to force the fallback
or ``METAGRAD_KERNELS=cython`` to fail loudly when the extension is missing.

All functions take a flat parameter vector in the layout of
:class:`metagrad.models.MLPSpec` (no policy or context entries), the layer
sizes as an int64 array, an activation code, and C-contiguous float64 inputs
``x`` of shape (n, in) and targets ``y`` of shape (n, out).
"""
from __future__ import annotations

import os

import numpy as np

from . import _numpy

RELU = _numpy.RELU
TANH = _numpy.TANH
ACTIVATION_CODES = {"relu": RELU, "tanh": TANH}

_choice = os.environ.get("METAGRAD_KERNELS", "auto").lower()
if _choice not in ("auto", "numpy", "cython"):
    raise ImportError(f"METAGRAD_KERNELS must be auto, numpy or cython, not {_choice!r}")

_impl = _numpy
BACKEND = "numpy"
if _choice != "numpy":
    try:
        from . import _cmlp as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise


def _prep(theta, sizes, x, y):
    return (
        np.ascontiguousarray(theta, dtype=np.float64),
        np.ascontiguousarray(sizes, dtype=np.int64),
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
    )


def loss(theta, sizes, act, x, y) -> float:
    theta, sizes, x, y = _prep(theta, sizes, x, y)
    return _impl.loss(theta, sizes, act, x, y)


def loss_grad(theta, sizes, act, x, y) -> tuple[float, np.ndarray]:
    theta, sizes, x, y = _prep(theta, sizes, x, y)
    return _impl.loss_grad(theta, sizes, act, x, y)


def hvp(theta, sizes, act, x, y, v) -> np.ndarray:
    theta, sizes, x, y = _prep(theta, sizes, x, y)
    return _impl.hvp(theta, sizes, act, x, y, np.ascontiguousarray(v, dtype=np.float64))


def implementations() -> dict:
    """Every importable backend module by name, for benchmarks and tests."""
    out = {"numpy": _numpy}
    try:
        from . import _cmlp

        out["cython"] = _cmlp
    except ImportError:
        pass
    return out

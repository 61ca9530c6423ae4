"""Pure numpy MLP regression kernels.

Loss is the batch mean of squared error summed over output dimensions. The
Hessian-vector product is computed by a forward-over-reverse (R-operator)
pass, so it costs about two extra passes over the network.
"""
from __future__ import annotations

import numpy as np

RELU = 0
TANH = 1


def _unpack(theta, sizes):
    layers = []
    off = 0
    for i in range(len(sizes) - 1):
        a, b = int(sizes[i]), int(sizes[i + 1])
        W = theta[off:off + a * b].reshape(a, b)
        off += a * b
        layers.append((W, theta[off:off + b], off - a * b, off))
        off += b
    if off != theta.shape[0]:
        raise ValueError(f"parameter vector has {theta.shape[0]} entries, layer sizes need {off}")
    return layers


def _forward(layers, act, x):
    hs = [x]
    zs = []
    last = len(layers) - 1
    for i, (W, b, _, _) in enumerate(layers):
        z = hs[-1] @ W + b
        zs.append(z)
        if i < last:
            hs.append(np.maximum(z, 0.0) if act == RELU else np.tanh(z))
        else:
            hs.append(z)
    return zs, hs


def _dact(act, z, h):
    if act == RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - h * h


def loss(theta, sizes, act, x, y):
    layers = _unpack(theta, sizes)
    _, hs = _forward(layers, act, x)
    r = hs[-1] - y
    return float(np.sum(r * r) / x.shape[0])


def loss_grad(theta, sizes, act, x, y):
    """Return ``(loss, gradient)`` at ``theta``."""
    layers = _unpack(theta, sizes)
    zs, hs = _forward(layers, act, x)
    n = x.shape[0]
    r = hs[-1] - y
    value = float(np.sum(r * r) / n)
    out = np.empty_like(theta)
    dz = (2.0 / n) * r
    for i in range(len(layers) - 1, -1, -1):
        W, _, woff, boff = layers[i]
        out[woff:boff] = (hs[i].T @ dz).ravel()
        out[boff:boff + W.shape[1]] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ W.T) * _dact(act, zs[i - 1], hs[i])
    return value, out


def hvp(theta, sizes, act, x, y, v):
    """Hessian of the loss at ``theta`` applied to ``v``."""
    layers = _unpack(theta, sizes)
    vlayers = _unpack(v, sizes)
    zs, hs = _forward(layers, act, x)
    n = x.shape[0]
    last = len(layers) - 1

    # R-forward: directional derivative of activations along v
    rh = [np.zeros_like(x)]
    rz = []
    for i, ((W, _, _, _), (VW, Vb, _, _)) in enumerate(zip(layers, vlayers)):
        z_dir = hs[i] @ VW + Vb
        if i > 0:
            z_dir = z_dir + rh[i] @ W
        rz.append(z_dir)
        rh.append(z_dir * _dact(act, zs[i], hs[i + 1]) if i < last else z_dir)

    out = np.empty_like(theta)
    dz = (2.0 / n) * (hs[-1] - y)
    rdz = (2.0 / n) * rh[-1]
    for i in range(last, -1, -1):
        W, _, woff, boff = layers[i]
        VW = vlayers[i][0]
        out[woff:boff] = (rh[i].T @ dz + hs[i].T @ rdz).ravel()
        out[boff:boff + W.shape[1]] = rdz.sum(axis=0)
        if i > 0:
            dh = dz @ W.T
            rdh = rdz @ W.T + dz @ VW.T
            d1 = _dact(act, zs[i - 1], hs[i])
            rdz = rdh * d1
            if act == TANH:
                rdz = rdz - dh * 2.0 * hs[i] * d1 * rz[i - 1]
            dz = dh * d1
    return out

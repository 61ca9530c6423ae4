import numpy as np
import pytest

from metagrad import autodiff as ad
from metagrad import kernels
from metagrad.models import MLPSpec, forward, init
from metagrad.tasks import mse_loss
from conftest import rel_err

BACKENDS = sorted(kernels.implementations())


def problem(act, rng, sizes=(3, 7, 5, 2), n=9):
    spec = MLPSpec(sizes[0], sizes[1:-1], sizes[-1], act)
    theta = init(spec, int(rng.integers(1000))).values + 0.1 * rng.normal(size=spec.n_params)
    return spec, theta, rng.normal(size=(n, sizes[0])), rng.normal(size=(n, sizes[-1]))


def graph_reference(spec, theta, x, y, v):
    g = ad.Graph()
    p = g.param(theta)
    loss = mse_loss(forward(spec, p, x), y)
    (gp,) = ad.grad(loss, [p])
    return loss.item(), gp.value, ad.hessian_vector_product(loss, [p], v)


@pytest.mark.parametrize("name", BACKENDS)
@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_kernels_match_autodiff(name, act, rng):
    impl = kernels.implementations()[name]
    spec, theta, x, y = problem(act, rng)
    v = rng.normal(size=theta.size)
    sizes = np.array(spec.sizes, dtype=np.int64)
    code = kernels.ACTIVATION_CODES[act]
    want_loss, want_grad, want_hvp = graph_reference(spec, theta, x, y, v)
    assert abs(impl.loss(theta, sizes, code, x, y) - want_loss) < 1e-12
    got_loss, got_grad = impl.loss_grad(theta, sizes, code, x, y)
    assert abs(got_loss - want_loss) < 1e-12
    assert rel_err(got_grad, want_grad) < 1e-12
    assert rel_err(impl.hvp(theta, sizes, code, x, y, v), want_hvp) < 1e-11


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_hvp_matches_gradient_differences(act, rng):
    spec, theta, x, y = problem(act, rng)
    v = rng.normal(size=theta.size)
    sizes = np.array(spec.sizes)
    code = kernels.ACTIVATION_CODES[act]
    hv = kernels.hvp(theta, sizes, code, x, y, v)
    eps = 1e-5
    fd = (kernels.loss_grad(theta + eps * v, sizes, code, x, y)[1]
          - kernels.loss_grad(theta - eps * v, sizes, code, x, y)[1]) / (2 * eps)
    assert rel_err(hv, fd) < 1e-4


def test_single_layer_has_constant_hessian(rng):
    # linear regression: H = 2/n [x 1]^T [x 1] in block form
    spec = MLPSpec(2, (), 1)
    theta = rng.normal(size=spec.n_params)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 1))
    v = rng.normal(size=3)
    A = np.concatenate([x, np.ones((6, 1))], axis=1)
    want = 2 / 6 * A.T @ (A @ v)
    got = kernels.hvp(theta, np.array(spec.sizes), kernels.RELU, x, y, v)
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("name", BACKENDS)
def test_parameter_count_mismatch_raises(name, rng):
    impl = kernels.implementations()[name]
    spec, theta, x, y = problem("relu", rng)
    with pytest.raises(ValueError):
        impl.loss_grad(theta[:-1], np.array(spec.sizes, dtype=np.int64), 0, x, y)


def test_backends_agree_bitwise_enough(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    spec, theta, x, y = problem("tanh", rng, sizes=(1, 40, 40, 1), n=10)
    sizes = np.array(spec.sizes, dtype=np.int64)
    a = kernels.implementations()["numpy"].loss_grad(theta, sizes, 1, x, y)[1]
    b = kernels.implementations()["cython"].loss_grad(theta, sizes, 1, x, y)[1]
    assert rel_err(a, b) < 1e-13


def test_selected_backend_is_reported():
    assert kernels.BACKEND in kernels.implementations()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metagrad import autodiff as ad
from metagrad.models import (
    CheckpointError,
    MLPSpec,
    ParameterVector,
    forward,
    forward_numpy,
    init,
    load_checkpoint,
    save_checkpoint,
)
from conftest import numeric_grad, rel_err

SINE = MLPSpec(1, (40, 40), 1)


def test_sinusoid_net_parameter_count():
    assert SINE.n_params == (1 * 40 + 40) + (40 * 40 + 40) + (40 * 1 + 1) == 1761


def test_init_is_deterministic():
    np.testing.assert_array_equal(init(SINE, 7).values, init(SINE, 7).values)
    assert not np.array_equal(init(SINE, 7).values, init(SINE, 8).values)


def test_init_scale_tracks_fan_in():
    spec = MLPSpec(100, (100,), 100)
    parts = init(spec, 0).unflatten()
    for name in ("W0", "W1"):
        w = parts[name]
        assert w.size == 10_000
        assert abs(w.std() / (1 / np.sqrt(w.shape[0])) - 1) < 0.2
    assert np.all(parts["b0"] == 0) and np.all(parts["b1"] == 0)


def test_layout_partitions_vector():
    spec = MLPSpec(4, (3, 2), 2, "tanh", "gaussian_policy", context_dim=1)
    end = 0
    for _, shape, off in spec.layout:
        assert off == end
        end += int(np.prod(shape))
    assert end == spec.n_params
    assert [n for n, _, _ in spec.layout][-2:] == ["log_std", "context"]


def test_parameter_vector_rejects_bad_layout():
    with pytest.raises(ValueError):
        ParameterVector(np.zeros(5), [("a", (2,), 0), ("b", (2,), 3)])
    with pytest.raises(ValueError):
        ParameterVector(np.zeros(5), [("a", (2,), 0)])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(1, 3),
       st.integers(0, 10_000))
def test_flatten_unflatten_round_trip(din, hidden, dout, seed):
    spec = MLPSpec(din, tuple(hidden), dout)
    pv = init(spec, seed)
    back = ParameterVector.flatten(pv.unflatten(), spec.layout)
    np.testing.assert_array_equal(back.values, pv.values)


def test_zero_params_give_zero_output(rng):
    g = ad.Graph()
    out = forward(SINE, g.param(np.zeros(SINE.n_params)), rng.normal(size=(6, 1)))
    np.testing.assert_array_equal(out.value, np.zeros((6, 1)))


def test_softmax_rows_are_distributions(rng):
    spec = MLPSpec(3, (8,), 5, output_head="softmax")
    g = ad.Graph()
    p = forward(spec, g.param(init(spec, 1).values * 3), rng.normal(size=(10, 3))).value
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((p > 0) & (p < 1))


def test_single_hidden_unit_by_hand():
    spec = MLPSpec(1, (1,), 1)
    w1, b1, w2, b2 = 1.5, -0.5, -2.0, 0.25
    theta = np.array([w1, b1, w2, b2])
    x = np.array([[-1.0], [0.2], [1.0], [3.0]])
    want = np.maximum(w1 * x + b1, 0) * w2 + b2
    g = ad.Graph()
    np.testing.assert_allclose(forward(spec, g.param(theta), x).value, want, rtol=0, atol=1e-15)
    np.testing.assert_allclose(forward_numpy(spec, theta, x), want, rtol=0, atol=1e-15)


def test_gaussian_head_returns_mean_and_log_std(rng):
    spec = MLPSpec(2, (4,), 2, output_head="gaussian_policy")
    theta = init(spec, 0).values
    theta[-2:] = [0.3, -0.1]
    g = ad.Graph()
    mean, log_std = forward(spec, g.param(theta), rng.normal(size=(3, 2)))
    assert mean.shape == (3, 2)
    np.testing.assert_array_equal(log_std.value, [0.3, -0.1])


def test_context_is_appended_to_every_row(rng):
    spec = MLPSpec(3, (4,), 1, context_dim=2)
    theta = init(spec, 0).values
    theta[spec.context_slice] = [0.5, -1.0]
    x = rng.normal(size=(5, 1))
    plain = MLPSpec(3, (4,), 1)
    full = np.concatenate([x, np.tile([0.5, -1.0], (5, 1))], axis=1)
    np.testing.assert_allclose(forward_numpy(spec, theta, x), forward_numpy(plain, theta[:plain.n_params], full))
    g = ad.Graph()
    np.testing.assert_allclose(forward(spec, g.param(theta), x).value, forward_numpy(spec, theta, x))
    assert spec.context_mask().sum() == 2


@pytest.mark.parametrize("head", ["linear", "softmax", "gaussian_policy"])
@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_graph_and_numpy_forward_agree(head, act, rng):
    spec = MLPSpec(3, (6, 5), 2, act, head)
    theta = init(spec, 3).values
    x = rng.normal(size=(7, 3))
    g = ad.Graph()
    a = forward(spec, g.param(theta), x)
    b = forward_numpy(spec, theta, x)
    if head == "gaussian_policy":
        np.testing.assert_allclose(a[0].value, b[0], atol=1e-14)
        np.testing.assert_array_equal(a[1].value, b[1])
    else:
        np.testing.assert_allclose(a.value, b, atol=1e-14)


def test_forward_gradient_passes_finite_difference_check(rng):
    spec = MLPSpec(2, (5,), 3, "tanh", "softmax")
    theta = init(spec, 0).values
    x = rng.normal(size=(4, 2))
    w = rng.normal(size=(4, 3))
    g = ad.Graph()
    p = g.param(theta)
    (gp,) = ad.grad(ad.sum(forward(spec, p, x) * w), [p])
    fd = numeric_grad(lambda t: float(np.sum(forward_numpy(spec, t, x) * w)), theta)
    assert rel_err(gp.value, fd) < 1e-6


def test_input_shape_checked():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError):
        forward(SINE, g.param(np.zeros(SINE.n_params)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        MLPSpec(1, (0,), 1)
    with pytest.raises(ValueError):
        MLPSpec(1, (4,), 1, activation="gelu")


def test_checkpoint_round_trip(tmp_path):
    spec = MLPSpec(4, (3,), 2, "tanh", "gaussian_policy", context_dim=2)
    pv = init(spec, 5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, spec, pv)
    spec2, pv2 = load_checkpoint(path)
    assert spec2 == spec
    np.testing.assert_array_equal(pv2.values, pv.values)
    raw = path.read_bytes()
    assert raw.startswith(b"METAGRAD-CHECKPOINT 1\n")
    assert raw[-8 * spec.n_params:] == pv.values.astype("<f8").tobytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, SINE, init(SINE, 0))
    (tmp_path / "cut.ckpt").write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")
    with pytest.raises(ValueError):
        save_checkpoint(good, SINE, np.zeros(3))

"""End-to-end acceptance criteria A1-A7.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary (see conftest.py). Full-size training runs happen once per module in
fixtures and take roughly 20-30 minutes on one CPU core.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import conftest
from metagrad import autodiff as ad
from metagrad import cli, harness, kernels
from metagrad.config import parse_text
from metagrad.meta import MetaConfig, meta_gradient, meta_train, supervised_loss_fn, task_meta_gradient
from metagrad.models import MLPSpec, forward_numpy, init
from metagrad.tasks import SupportQueryBatch, sample_support_query, sample_task
from conftest import rel_err
from test_autodiff import BINARY, UNARY, check_binary, check_unary
from test_meta import closed_form, fd_meta_grad, quadratic_meta_grad

pytestmark = pytest.mark.acceptance

WORKERS = 1
RL_ITERATIONS = 300


def verdict(key, part, ok, detail):
    conftest.record_acceptance(key, part, bool(ok), detail)
    assert ok, f"{key} {part}: {detail}"


def sine_config(method, **over):
    overrides = {"experiment.method": method, "eval.shots": "5"}
    overrides.update(over)
    return parse_text(cli.preset_text("sinusoid-maml"), overrides)


def run_sine(method, **over):
    cfg = sine_config(method, **over)
    run = harness.train_method(cfg, method, WORKERS)
    records, curves = harness.evaluate_method(cfg, run, WORKERS)
    return run, records, curves[f"{method}_K5"]


@pytest.fixture(scope="module")
def maml_sine():
    return run_sine("maml")


@pytest.fixture(scope="module")
def fomaml_sine():
    return run_sine("fomaml")


@pytest.fixture(scope="module")
def pretrain_sine():
    return run_sine("pretrain")


@pytest.fixture(scope="module")
def multitask_sine():
    return run_sine("multitask_avg", **{"baseline.regularizer": "none"})


def at(records, step):
    (r,) = [r for r in records if r.step_count == step]
    return r


# ------------------------------------------------------------------ A1


def test_a1_maml_sinusoid_five_shot(maml_sine):
    _, recs, curves = maml_sine
    one, ten = at(recs, 1), at(recs, 10)
    assert one.n_tasks >= 600
    verdict("A1", "maml", one.mean <= 1.1 and ten.mean <= 0.7,
            f"MAML 5-shot MSE {one.mean:.3f} after 1 step (<= 1.1), {ten.mean:.3f} after 10 (<= 0.7)")


def test_a1_pretrain_baseline_range(pretrain_sine):
    _, recs, _ = pretrain_sine
    ten = at(recs, 10).mean
    verdict("A1", "pretrain", 1.5 <= ten <= 3.5, f"pretrain 5-shot MSE after 10 steps {ten:.3f} in [1.5, 3.5]")


def test_pretrained_net_tracks_conditional_mean(pretrain_sine):
    # phase ~ U[0, pi] and amplitude ~ U[0.1, 5] give E[f(x)] = -(2 E[A] / pi) cos x
    run, _, _ = pretrain_sine
    x = np.linspace(-5, 5, 201)[:, None]
    f = forward_numpy(run.spec, run.params.values, x)[:, 0]
    m = -(2 * 2.55 / math.pi) * np.cos(x[:, 0])
    assert np.mean(np.abs(f - m)) < 0.5


# ------------------------------------------------------------------ A2


def test_a2_baseline_ordering(maml_sine, pretrain_sine, multitask_sine):
    curves = {"maml": maml_sine[2], "pretrain": pretrain_sine[2], "multitask": multitask_sine[2]}
    lines, ok = [], True
    for step in (1, 5, 10):
        v = {k: c[:, step] for k, c in curves.items()}
        for lo, hi in (("maml", "pretrain"), ("pretrain", "multitask")):
            # tasks are shared, so the gap's error is the standard error of the paired difference
            d = v[hi] - v[lo]
            se = d.std(ddof=1) / math.sqrt(d.size)
            se_task = max(v[lo].std(ddof=1), v[hi].std(ddof=1)) / math.sqrt(d.size)
            good = d.mean() > 2 * max(se, se_task)
            ok &= good
            lines.append(f"{lo}<{hi}@{step}: gap {d.mean():.3f} vs 2SE {2 * max(se, se_task):.3f}")
    verdict("A2", "ordering", ok, "; ".join(lines))


# ------------------------------------------------------------------ A3


def rl_config(preset, **over):
    overrides = {"rl.meta_iterations": str(RL_ITERATIONS)}
    overrides.update(over)
    return parse_text(cli.preset_text(preset), overrides)


def run_rl(preset, method):
    cfg = rl_config(preset, **{"experiment.method": method})
    run = harness.train_method(cfg, method, WORKERS)
    _, curves = harness.evaluate_method(cfg, run, WORKERS)
    return curves[method]


def se(col):
    return col.std(ddof=1) / math.sqrt(col.size)


def test_a3_maml_navigation():
    c = run_rl("nav2d-maml", "maml")
    pre, two = c[:, 0], c[:, 2]
    improved = (two - pre).mean() > 2 * se(two - pre)
    verdict("A3", "maml", c.shape[0] >= 40 and improved and two.mean() >= -8,
            f"MAML return {pre.mean():.2f} before adaptation -> {two.mean():.2f} after 2 updates (>= -8), "
            f"{c.shape[0]} goals")


def test_a3_context_navigation():
    c = run_rl("nav2d-context", "context")
    two = c[:, 2]
    verdict("A3", "context", two.mean() >= -10,
            f"context-vector return {c[:, 0].mean():.2f} -> {two.mean():.2f} after 2 updates (>= -10)")


# ------------------------------------------------------------------ A4


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(1, 4), min_size=1, max_size=2), st.integers(1, 2),
       st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_a4_meta_gradient_matches_finite_differences(din, hidden, dout, steps, seed):
    spec = MLPSpec(din, tuple(hidden), dout, "tanh")
    if spec.n_params > 50:
        return
    r = np.random.default_rng(seed)
    theta = init(spec, seed).values + 0.1 * r.normal(size=spec.n_params)
    batch = SupportQueryBatch(r.normal(size=(5, din)), r.normal(size=(5, dout)),
                              r.normal(size=(5, din)), r.normal(size=(5, dout)))
    cfg = MetaConfig(inner_step_size=0.1, inner_steps=steps)
    fd = fd_meta_grad(theta, spec, batch, 0.1, steps)
    worst = max(rel_err(task_meta_gradient(theta, spec, batch, cfg, b)[0], fd) for b in ("graph", "fused"))
    verdict("A4", "finite-differences", worst < 1e-4, f"meta-gradient vs finite differences rel err {worst:.1e}")


def test_a4_quadratic_closed_form():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        theta, c = r.uniform(-3, 3, size=2)
        alpha, steps = r.uniform(0, 0.9), int(r.integers(1, 5))
        for fo in (False, True):
            worst = max(worst, abs(quadratic_meta_grad(theta, c, alpha, steps, fo)
                                   - closed_form(theta, c, alpha, steps, fo)))
    verdict("A4", "closed-form", worst < 1e-10, f"quadratic closed form max abs err {worst:.1e}")


# ------------------------------------------------------------------ A5


def meta_iteration_seconds(method, iterations=300, rounds=3):
    """Best-of-rounds mean seconds per meta-iteration, preset model and batch."""
    cfg = sine_config(method)
    spec = harness.method_spec(cfg, method)
    best = math.inf
    for r in range(rounds):
        _, log = meta_train(spec, cfg.task, cfg.meta_for(method), iterations, r, WORKERS, cfg.backend)
        best = min(best, log[-1].seconds / iterations)
    return best


def test_a5_first_order_approximation(maml_sine, fomaml_sine):
    (_, mrecs, _), (_, frecs, _) = maml_sine, fomaml_sine
    m10, f10 = at(mrecs, 10).mean, at(frecs, 10).mean
    # timed back to back so both methods see the same machine state
    m_it, f_it = math.inf, math.inf
    for _ in range(2):
        m_it = min(m_it, meta_iteration_seconds("maml"))
        f_it = min(f_it, meta_iteration_seconds("fomaml"))
    saving = 1 - f_it / m_it
    verdict("A5", "fomaml", f10 <= 1.5 * m10 and saving >= 0.2,
            f"FOMAML 10-step MSE {f10:.3f} vs MAML {m10:.3f} (ratio {f10 / m10:.2f}, limit 1.5); "
            f"meta-iteration {1e3 * f_it:.2f} ms vs {1e3 * m_it:.2f} ms ({100 * saving:.0f}% faster, need 20%)")


# ------------------------------------------------------------------ A6


def out_shape(op, *args):
    with ad.no_record():
        g = ad.Graph()
        return op(*(g.constant(a) for a in args)).shape


def test_a6_every_primitive_passes_finite_differences():
    r = np.random.default_rng(7)
    errs = {}
    for name, (op, make) in UNARY.items():
        x = make(r)
        w = r.normal(size=out_shape(op, x))
        errs[name] = check_unary(op, x, w)
    for name, (op, sa, sb) in BINARY.items():
        x = r.normal(size=sa)
        y = r.uniform(0.5, 2.0, size=sb) if name == "div" else r.normal(size=sb)
        w = r.normal(size=out_shape(op, x, y))
        errs[name] = check_binary(op, x, y, w)
    worst = max(errs, key=errs.get)
    verdict("A6", "primitives", errs[worst] < 1e-6,
            f"{len(errs)} primitives, worst {worst} rel err {errs[worst]:.1e} (< 1e-6)")


def test_a6_hvp_matches_gradient_differences():
    spec = MLPSpec(1, (10, 10), 1, "tanh")
    r = np.random.default_rng(3)
    theta = init(spec, 3).values
    x, y = r.uniform(-5, 5, size=(10, 1)), r.normal(size=(10, 1))
    v = r.normal(size=spec.n_params)
    sizes = np.array(spec.sizes)
    h = 1e-5
    fd = (kernels.loss_grad(theta + h * v, sizes, kernels.TANH, x, y)[1]
          - kernels.loss_grad(theta - h * v, sizes, kernels.TANH, x, y)[1]) / (2 * h)
    g = ad.Graph()
    p = g.param(theta)
    graph_hv = ad.hessian_vector_product(supervised_loss_fn(spec, x, y)(p), [p], v)
    kern_hv = kernels.hvp(theta, sizes, kernels.TANH, x, y, v)
    worst = max(rel_err(graph_hv, fd), rel_err(kern_hv, fd))
    verdict("A6", "hvp", worst < 1e-4, f"HVP vs gradient finite differences rel err {worst:.1e} (< 1e-4)")


def test_a6_alpha_zero_is_multitask_gradient():
    spec = MLPSpec(1, (8, 8), 1, "tanh")
    theta = init(spec, 0).values
    batches = [sample_support_query(sample_task("sinusoid", s), 5, 5) for s in range(4)]
    sizes = np.array(spec.sizes)
    plain = sum(kernels.loss_grad(theta, sizes, kernels.TANH, b.query_x, b.query_y)[1] for b in batches)
    cfg = MetaConfig(inner_step_size=0.0)
    fused = meta_gradient(theta, spec, batches, cfg, "fused")
    graph = meta_gradient(theta, spec, batches, cfg, "graph")
    exact = np.array_equal(fused, plain)
    verdict("A6", "alpha-zero", exact and rel_err(graph, plain) < 1e-14,
            f"alpha = 0 meta-gradient equals multi-task gradient (fused bit-exact: {exact}, "
            f"graph rel err {rel_err(graph, plain):.1e})")


# ------------------------------------------------------------------ A7

SMALL_RUNS = {
    "sinusoid-maml": ["meta.iterations=30", "meta.meta_batch_size=4", "eval.n_tasks=8", "eval.shots=5,10"],
    "sinusoid-baselines": ["baseline.pretrain_iterations=30", "baseline.task_count=3",
                           "baseline.regressor_max_iterations=50", "baseline.validation_tasks=4", "eval.n_tasks=8"],
    "nav2d-maml": ["rl.meta_iterations=2", "rl.meta_batch_size=3", "rl.K_trajectories=4", "rl.eval_tasks=3",
                   "rl.eval_samples=4", "model.hidden=16,16"],
    "nav2d-context": ["rl.meta_iterations=2", "rl.meta_batch_size=3", "rl.K_trajectories=4", "rl.eval_tasks=3",
                      "rl.eval_samples=4", "model.hidden=16,16"],
}


def reproduce(name, out, workers, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(out))
    argv = ["reproduce", name, "--workers", str(workers)]
    for item in SMALL_RUNS[name]:
        argv += ["--set", item]
    assert cli.main(argv) == 0
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


@pytest.mark.parametrize("name", sorted(SMALL_RUNS))
def test_a7_reproduce_is_byte_identical(name, tmp_path, monkeypatch, capsys):
    single = [reproduce(name, tmp_path / f"w1_{i}", 1, monkeypatch) for i in range(2)]
    multi = [reproduce(name, tmp_path / f"w2_{i}", 2, monkeypatch) for i in range(2)]
    capsys.readouterr()
    same = single[0] == single[1] and multi[0] == multi[1] and single[0] == multi[0]
    verdict("A7", name, same and "eval.csv" in single[0],
            f"{name}: {len(single[0])} CSVs identical across 2 runs x (1, 2) workers")

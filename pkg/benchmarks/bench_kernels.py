"""Compiled vs numpy kernels, and fused vs graph meta-gradients.

    python benchmarks/bench_kernels.py [--repeat 200] [--hidden 40,40] [--batch 10]

Prints the median microseconds per call and the speedup over numpy (kernels)
or over the graph route (meta-gradients). Results from both sides are checked
for agreement before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from metagrad import kernels
from metagrad.meta import MetaConfig, fused_task_meta_gradient, graph_task_meta_gradient
from metagrad.models import MLPSpec, init
from metagrad.tasks import sample_support_query, sample_task


def median_us(fn, repeat: int) -> float:
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return 1e6 * float(np.median(times))


def bench_kernels(spec: MLPSpec, n: int, repeat: int) -> list[tuple[str, str, float]]:
    r = np.random.default_rng(0)
    theta = init(spec, 0).values
    sizes = np.array(spec.sizes, dtype=np.int64)
    x = r.uniform(-5, 5, size=(n, spec.input_dim))
    y = r.normal(size=(n, spec.output_dim))
    v = r.normal(size=spec.n_params)
    act = kernels.ACTIVATION_CODES[spec.activation]
    impls = kernels.implementations()
    ref_l, ref_g = impls["numpy"].loss_grad(theta, sizes, act, x, y)
    ref_h = impls["numpy"].hvp(theta, sizes, act, x, y, v)
    rows = []
    for name, mod in impls.items():
        l, g = mod.loss_grad(theta, sizes, act, x, y)
        h = mod.hvp(theta, sizes, act, x, y, v)
        assert abs(l - ref_l) < 1e-10 * max(1.0, abs(ref_l))
        np.testing.assert_allclose(g, ref_g, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(h, ref_h, rtol=1e-9, atol=1e-12)
        rows.append(("loss_grad", name, median_us(lambda: mod.loss_grad(theta, sizes, act, x, y), repeat)))
        rows.append(("hvp", name, median_us(lambda: mod.hvp(theta, sizes, act, x, y, v), repeat)))
    return rows


def bench_meta(spec: MLPSpec, K: int, repeat: int, steps: int) -> list[tuple[str, str, float]]:
    theta = init(spec, 0).values
    batch = sample_support_query(sample_task("sinusoid", 0), K, K)
    rows = []
    for first_order in (False, True):
        cfg = MetaConfig(inner_steps=steps, first_order=first_order)
        a = graph_task_meta_gradient(theta, spec, batch, cfg)[0]
        b = fused_task_meta_gradient(theta, spec, batch, cfg)[0]
        np.testing.assert_allclose(b, a, rtol=1e-8, atol=1e-11)
        label = f"meta-grad {steps} step {'fo' if first_order else 'so'}"
        rows.append((label, "graph", median_us(lambda: graph_task_meta_gradient(theta, spec, batch, cfg), repeat)))
        rows.append((label, f"fused/{kernels.BACKEND}",
                     median_us(lambda: fused_task_meta_gradient(theta, spec, batch, cfg), repeat)))
    return rows


def report(rows: list[tuple[str, str, float]]) -> None:
    base = {}
    for what, impl, us in rows:
        base.setdefault(what, us)
    print(f"{'operation':<24}{'implementation':<18}{'median us':>12}{'speedup':>10}")
    for what, impl, us in rows:
        print(f"{what:<24}{impl:<18}{us:>12.1f}{base[what] / us:>9.2f}x")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--hidden", default="40,40")
    ap.add_argument("--batch", type=int, default=10)
    ap.add_argument("--steps", type=int, default=1)
    args = ap.parse_args(argv)
    spec = MLPSpec(1, tuple(int(h) for h in args.hidden.split(",")), 1)
    print(f"model {spec.sizes}, {spec.n_params} parameters, batch {args.batch}, "
          f"available kernels: {', '.join(kernels.implementations())}")
    rows = bench_kernels(spec, args.batch, args.repeat)
    rows += bench_meta(spec, args.batch, args.repeat, args.steps)
    report(rows)


if __name__ == "__main__":
    main()

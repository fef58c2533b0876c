"""Benchmark the compiled pooling kernels against the numpy fallback.

Times the two ragged kernels in isolation and a full training step through
each backend. Run from the repository root:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from recon import kernels
from recon.corpus import SyntheticSpec, gen_synthetic, tokenize
from recon.trainer import TrainConfig, init_state, train_step


def _time(fn, repeats=50):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(V=65_536, d=64, batch=40, mean_len=40, repeats=200):
    rng = np.random.default_rng(0)
    table = rng.normal(size=(V, d))
    lengths = rng.integers(mean_len // 2, 2 * mean_len, size=batch)
    ids = rng.integers(0, V, size=int(lengths.sum())).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
    gout = rng.normal(size=(batch, d))
    grad = np.zeros_like(table)

    rows = {}
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        pool = _time(lambda: kernels.pool_mean(table, ids, offsets), repeats)
        scatter = _time(lambda: kernels.scatter_mean_grad(grad, ids, offsets, gout), repeats)
        rows[backend] = (pool, scatter)
    return rows


def bench_train_step(steps=30, rounds=3):
    """Best-of-N per backend, alternating, so page-cache warmup is shared."""
    spec = SyntheticSpec(num_topics=2, docs_per_topic=50, mixed_fraction=0.5, seed=0)
    docs, _, _, _ = gen_synthetic(spec)

    def one_run(backend):
        kernels.set_backend(backend)
        cfg = TrainConfig(total_steps=steps, warmup_steps=5, seed=0)
        state = init_state(cfg)
        tokens = [tokenize(d.text, cfg.vocab_size) for d in docs]
        batch = list(zip(docs, tokens))[: cfg.batch_groups]
        train_step(state, batch, cfg)  # warm up
        start = time.perf_counter()
        while state.step < steps:
            train_step(state, batch, cfg)
        return (time.perf_counter() - start) / (steps - 1)

    results = {}
    for _ in range(rounds):
        for backend in kernels.available_backends():
            dt = one_run(backend)
            results[backend] = min(results.get(backend, dt), dt)
    return results


def main():
    print(f"available backends: {', '.join(kernels.available_backends())}")
    print()
    rows = bench_kernels()
    print(f"{'backend':<10} {'pool_mean':>12} {'scatter_grad':>12}")
    for backend, (pool, scatter) in sorted(rows.items()):
        print(f"{backend:<10} {pool * 1e6:>10.1f}us {scatter * 1e6:>10.1f}us")
    if len(rows) == 2:
        speed_p = rows["numpy"][0] / rows["compiled"][0]
        speed_s = rows["numpy"][1] / rows["compiled"][1]
        print(f"{'speedup':<10} {speed_p:>11.1f}x {speed_s:>11.1f}x")
    print()
    steps = bench_train_step()
    print(f"{'backend':<10} {'train_step':>12}")
    for backend, dt in sorted(steps.items()):
        print(f"{backend:<10} {dt * 1e3:>10.2f}ms")
    if len(steps) == 2:
        print(f"{'speedup':<10} {steps['numpy'] / steps['compiled']:>11.1f}x")


if __name__ == "__main__":
    main()

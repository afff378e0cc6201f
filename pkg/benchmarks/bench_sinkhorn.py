"""Benchmark the compiled Sinkhorn kernel against the pure-numpy fallback.

Usage: python3 benchmarks/bench_sinkhorn.py [--repeats N]

Times forward + backward over problem sizes matching training (a handful
of parts vs a few dozen words) and verifies both backends agree.
"""
import argparse
import time

import numpy as np

from partforge.kernels import sinkhorn_np

try:
    from partforge.kernels import _sinkhorn_cy
except ImportError:
    _sinkhorn_cy = None


SIZES = [(3, 12), (5, 26), (17, 32), (64, 64)]


def run_once(backend, C, log_r, log_c, eps, max_iter, dX):
    f_hist, g_hist, n_iter, _ = backend.sinkhorn_forward(
        C, log_r, log_c, eps, max_iter, 0.0
    )
    dC = backend.sinkhorn_backward(C, np.asarray(f_hist), np.asarray(g_hist),
                                   eps, dX)
    return np.asarray(f_hist), np.asarray(dC)


def bench(repeats: int) -> None:
    rng = np.random.default_rng(0)
    backends = [("numpy", sinkhorn_np)]
    if _sinkhorn_cy is not None:
        backends.append(("cython", _sinkhorn_cy))
    else:
        print("compiled kernel unavailable; benchmarking numpy only")

    header = f"{'size':>10} {'iters':>6}" + "".join(
        f" {name + ' ms':>12}" for name, _ in backends
    )
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)

    for n, m in SIZES:
        C = np.ascontiguousarray(rng.uniform(0, 2, size=(n, m)))
        log_r = np.log(np.full(n, 1.0 / n))
        log_c = np.log(np.full(m, 1.0 / m))
        dX = np.ascontiguousarray(rng.normal(size=(n, m)))
        max_iter = 100
        times = []
        results = []
        for _, mod in backends:
            run_once(mod, C, log_r, log_c, 0.05, max_iter, dX)  # warmup
            t0 = time.perf_counter()
            for _ in range(repeats):
                out = run_once(mod, C, log_r, log_c, 0.05, max_iter, dX)
            times.append((time.perf_counter() - t0) / repeats * 1e3)
            results.append(out)
        if len(results) == 2:
            for a, b in zip(results[0], results[1]):
                assert np.allclose(a, b, atol=1e-12), "backend mismatch"
        row = f"{f'{n}x{m}':>10} {max_iter:>6}" + "".join(
            f" {t:>12.3f}" for t in times
        )
        if len(times) == 2:
            row += f" {times[0] / times[1]:>8.1f}x"
        print(row)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    bench(parser.parse_args().repeats)

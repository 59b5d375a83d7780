"""Benchmark the compiled kernels against their pure-numpy fallbacks.

Runs each hot kernel on representative inputs with both variants, checks
that the outputs are bit-identical, and prints a timing table. Run as:

    python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from evadapt import _kernels
from evadapt._kernels import (_label_components_np, _pairwise_mask_overlap_np,
                              _threshold_crossings_np, _voxelize_counts_np)


def timeit(fn, *args, repeats=5):
    fn(*args)  # warm-up (triggers JIT compilation on the compiled path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def as_bytes(out):
    if isinstance(out, tuple):
        return b"".join(np.asarray(o).tobytes() for o in out)
    return np.asarray(out).tobytes()


def bench(name, compiled, fallback, args):
    t_c, out_c = timeit(compiled, *args)
    t_f, out_f = timeit(fallback, *args)
    match = "ok" if as_bytes(out_c) == as_bytes(out_f) else "MISMATCH"
    print(f"{name:24s} compiled {t_c * 1e3:9.3f} ms   "
          f"numpy {t_f * 1e3:9.3f} ms   speedup {t_f / t_c:7.1f}x   "
          f"outputs {match}")


def main():
    if not _kernels.USE_NUMBA:
        print("EVADAPT_NO_NUMBA is set; unset it to benchmark the "
              "compiled path.")
        return
    rng = np.random.default_rng(0)

    n = 200_000
    ts = np.sort(rng.integers(0, 40_000, n))
    xs = rng.integers(0, 128, n)
    ys = rng.integers(0, 128, n)
    ps = rng.choice(np.array([-1, 1]), n)
    bench("voxelize_counts", _kernels.voxelize_counts, _voxelize_counts_np,
          (ts, xs, ys, ps, 0, 40_000, 128, 128, 3, False))

    gt = (rng.random((12, 128 * 128)) < 0.2).astype(np.uint8)
    pred = (rng.random((12, 128 * 128)) < 0.2).astype(np.uint8)
    bench("pairwise_mask_overlap", _kernels.pairwise_mask_overlap,
          _pairwise_mask_overlap_np, (gt, pred))

    mask = (rng.random((512, 512)) < 0.55).astype(np.uint8)
    bench("label_components", _kernels.label_components,
          _label_components_np, (mask,))

    T, H, W = 41, 64, 64
    base = rng.random((H, W))
    drift = np.linspace(0, 1.5, T)[:, None, None] * rng.random((H, W))
    logI = np.log(base + drift + 1.0)
    cap = 16 * T * H * W

    def run_crossings(kernel):
        # fresh buffers per call so both variants' outputs can be compared
        def fn(logI, step, theta):
            bufs = [np.empty(cap, np.int64) for _ in range(4)]
            n = kernel(logI, step, theta, *bufs)
            return tuple(b[:n].copy() for b in bufs)
        return fn

    bench("threshold_crossings", run_crossings(_kernels.threshold_crossings),
          run_crossings(_threshold_crossings_np), (logI, 1.0, 0.05))


if __name__ == "__main__":
    main()

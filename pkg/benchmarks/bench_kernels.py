"""Compare the compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Checks that both backends return identical results on every input, then
prints the median wall time per call and the speed-up.
"""
import argparse
import statistics
import time

import numpy as np

from eadk import _pykernels

try:
    from eadk import _ckernels
except ImportError:
    _ckernels = None


def _time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    # training-sized assignment problems: 16 queries, up to 4 objects
    for n, m in ((16, 4), (16, 16), (64, 32), (200, 100)):
        yield "assignment_core", f"{n}x{m}", (rng.random((n, m)) * 10,)
    # evaluation matching: detections x ground truths IoU tables
    for n, m in ((16, 4), (100, 20), (1000, 100)):
        ious = rng.random((n, m)) * (rng.random((n, m)) < 0.3)
        yield "greedy_match", f"{n}x{m}", (ious, 0.5)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the Python kernels are available")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<16} {'size':>10} {'python ms':>11} {'cython ms':>11} {'speed-up':>9}")
    for name, size, fn_args in cases(rng):
        py_fn, c_fn = getattr(_pykernels, name), getattr(_ckernels, name)
        py_out, c_out = py_fn(*fn_args), c_fn(*fn_args)
        py_out = py_out if isinstance(py_out, tuple) else (py_out,)
        c_out = c_out if isinstance(c_out, tuple) else (c_out,)
        for a, b in zip(py_out, c_out):
            if not np.array_equal(np.asarray(a), np.asarray(b)):
                raise SystemExit(f"{name} {size}: backends disagree")
        t_py = _time(py_fn, fn_args, args.repeat)
        t_c = _time(c_fn, fn_args, args.repeat)
        print(f"{name:<16} {size:>10} {t_py * 1e3:>11.3f} {t_c * 1e3:>11.3f} {t_py / t_c:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

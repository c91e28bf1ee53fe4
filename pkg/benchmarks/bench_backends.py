"""Benchmark the compiled kernel core against the numpy fallback.

Times every kernel the hot paths use (forward/backward matmul variants,
column sums, row softmax) over a ladder of shapes, plus one composite
classifier pass resembling a balanced stage-2 update. Reports best-of-N
wall time per call and the py/cy ratio.

Usage: python3 benchmarks/bench_backends.py [--repeats 7] [--inner 20]
"""

import argparse
import time

import numpy as np

from sgtail import backend

# (rows, inner, cols): entity batches, pair batches, full-width pairs
SHAPES = (
    (64, 32, 20),
    (256, 128, 50),
    (1024, 256, 128),
    (4096, 520, 128),
)


def _time(fn, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - start) / inner)
    return best


def _kernel_cases(rng, n, k, m):
    a = rng.standard_normal((n, k))
    b = rng.standard_normal((k, m))
    at = rng.standard_normal((n, k))
    bt = rng.standard_normal((n, m))
    wt = rng.standard_normal((k, m))
    z = rng.standard_normal((n, m))
    return (
        ("matmul", lambda kr: kr.matmul(a, b)),
        ("matmul_t1", lambda kr: kr.matmul_t1(at, bt)),
        ("matmul_t2", lambda kr: kr.matmul_t2(z, wt)),
        ("colsum", lambda kr: kr.colsum(z)),
        ("softmax_rows", lambda kr: kr.softmax_rows(z, 10.0)),
    )


def _composite(rng, n, k, m):
    """One balanced classifier update: logits, probs, both gradients."""
    x = rng.standard_normal((n, k))
    w = rng.standard_normal((k, m))
    d = rng.standard_normal((n, m))

    def run(kr):
        logits = kr.matmul(x, w)
        kr.softmax_rows(logits, 1.0)
        kr.matmul_t1(x, d)
        kr.matmul_t2(d, w)

    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions, best kept")
    parser.add_argument("--inner", type=int, default=20,
                        help="calls per repetition")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    names = backend.available()
    print("backends:", ", ".join(names))
    if "cy" not in names:
        print("compiled core unavailable; timing the fallback only")

    rng = np.random.default_rng(args.seed)
    rows = []
    for n, k, m in SHAPES:
        for label, call in _kernel_cases(rng, n, k, m):
            times = {}
            for name in names:
                kr = backend.get(name)
                times[name] = _time(lambda: call(kr), args.repeats,
                                    args.inner)
            rows.append(("%s %dx%dx%d" % (label, n, k, m), times))
        comp = _composite(rng, n, k, m)
        times = {}
        for name in names:
            kr = backend.get(name)
            times[name] = _time(lambda: comp(kr), args.repeats, args.inner)
        rows.append(("classifier-pass %dx%dx%d" % (n, k, m), times))

    width = max(len(r[0]) for r in rows)
    header = "%-*s" % (width, "case")
    for name in names:
        header += "  %12s" % (name + " (us)")
    if len(names) == 2:
        header += "  %8s" % "py/cy"
    print(header)
    for label, times in rows:
        line = "%-*s" % (width, label)
        for name in names:
            line += "  %12.1f" % (times[name] * 1e6)
        if len(names) == 2:
            line += "  %8.2f" % (times["py"] / times["cy"])
        print(line)


if __name__ == "__main__":
    main()

"""Time the hot kernels on the numba path and on the numpy fallback.

    python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Each backend runs in its own interpreter because LSTORE_DISABLE_NUMBA is read
at import time. Output is one row per kernel with both timings and the speedup.
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _inputs(n, ncols=4):
    import numpy as np

    r = np.random.default_rng(0)
    n_slots = max(n // 4, 1)
    merge = (
        r.integers(0, 1 << 40, (ncols, n_slots), dtype=np.uint64),
        np.zeros(n_slots, np.uint64),
        np.zeros(n_slots, np.uint64),
        np.zeros(n_slots, np.uint8),
        r.integers(0, n_slots, n).astype(np.int64),
        (r.random(n) < 0.9).astype(np.uint8),
        r.integers(0, 1 << ncols, n, dtype=np.uint64),
        np.arange(n, dtype=np.uint64),
        r.integers(0, 1 << 40, (ncols, n), dtype=np.uint64),
    )
    deltas = r.integers(0, 1 << 13, n, dtype=np.uint64)
    scan = (
        r.integers(0, 1000, n, dtype=np.uint64),
        r.integers(0, 1000, n, dtype=np.uint64),
        r.integers(0, 1000, n, dtype=np.uint64),
        (r.random(n) < 0.05).astype(np.uint8),
        np.where(r.random(n) < 0.3, r.integers(1, 500, n), 0).astype(np.uint64),
    )
    return merge, deltas, scan


def _best(fn, repeat):
    fn()  # warm up (and compile)
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


def run_backend(n, repeat):
    from lstore import _accel

    merge, deltas, scan = _inputs(n)
    packed = _accel.for_pack(deltas, 13)
    res = {
        "merge_apply": _best(lambda: _accel.merge_apply(*[a.copy() for a in merge]), repeat),
        "for_pack": _best(lambda: _accel.for_pack(deltas, 13), repeat),
        "for_unpack": _best(lambda: _accel.for_unpack(packed, n, 13), repeat),
        "scan_classify": _best(lambda: _accel.scan_classify(*scan, 250, 600), repeat),
    }
    return {"backend": _accel.BACKEND, "seconds": res}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        print(json.dumps(run_backend(args.n, args.repeat)))
        return 0
    results = {}
    for disable in ("0", "1"):
        env = dict(os.environ, LSTORE_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, __file__, "--child", "--n", str(args.n),
                              "--repeat", str(args.repeat)], env=env, check=True,
                             capture_output=True, text=True).stdout
        got = json.loads(out.strip().splitlines()[-1])
        results[got["backend"]] = got["seconds"]
    jit, ref = results.get("numba"), results["numpy"]
    print(f"n={args.n} repeat={args.repeat} (best of)")
    print(f"{'kernel':<14} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for k in ref:
        a = jit[k] * 1e3 if jit else float("nan")
        b = ref[k] * 1e3
        print(f"{k:<14} {a:>10.2f} {b:>10.2f} {b / a if jit else float('nan'):>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is timed on shapes from the bench-scale and full-scale models; the
best of ``--repeat`` runs is reported, together with the max abs difference
between backends.
"""
import argparse
import json
import time

import numpy as np

from satfuse.kernels import backends


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for H, W, C in ((40, 80, 16), (100, 200, 64)):
        f = rng.normal(size=(H, W, C))
        d = rng.uniform(-2, 2, size=(H, W, 2))
        g = rng.normal(size=(H, W, C))
        yield f"warp_forward {H}x{W}x{C}", "warp_forward", (f, d)
        yield f"warp_backward {H}x{W}x{C}", "warp_backward", (f, d, g)
        x = rng.normal(size=(C, H, W))
        yield f"im2col 3x3 {C}x{H}x{W}", "im2col", (x, 3, 1, 1)
        cols = rng.normal(size=(C * 9, H * W))
        yield f"col2im 3x3 {C}x{H}x{W}", "col2im", (cols, C, H, W, 3, 1, 1)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    impls = backends()
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in impls) + f"{'speedup':>10s}{'max|diff|':>12s}")
    for label, name, inputs in cases(rng):
        t, outs = {}, {}
        for bk, mod in impls.items():
            fn = getattr(mod, name)
            outs[bk] = fn(*inputs)
            t[bk] = _best(lambda: fn(*inputs), args.repeat)
        ref = outs["python"]
        diff = max(
            float(np.abs(np.asarray(a) - np.asarray(b)).max())
            for o in outs.values()
            for a, b in zip(o if isinstance(o, tuple) else (o,), ref if isinstance(ref, tuple) else (ref,))
        )
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{label:32s}" + "".join(f"{t[n] * 1e3:10.2f}ms" for n in impls) + f"{speed:9.2f}x{diff:12.2e}")
        rows.append({"kernel": label, "ms": {k: v * 1e3 for k, v in t.items()}, "speedup": speed, "max_diff": diff})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()

"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on both backends over the same inputs; the script also
checks the outputs agree before reporting a speedup.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from promptmil import kernels


def cases(rng):
    x = rng.normal(size=(4096, 512)).astype(np.float32)
    t = rng.normal(size=(4, 512)).astype(np.float32)
    sim_col = rng.normal(size=20000)
    tied = rng.integers(0, 50, size=20000).astype(np.float64)
    scores = rng.normal(size=5000)
    labels = rng.integers(0, 2, size=5000)
    km_x = rng.normal(size=(2000, 64))
    km_c = km_x[rng.choice(len(km_x), 4, replace=False)]
    return {
        "cosine_similarity 4096x512 vs 4": lambda: kernels.cosine_similarity(x, t),
        "top_k n=20000 k=6000": lambda: kernels.top_k(sim_col, 6000),
        "top_k n=20000 k=6000 (ties)": lambda: kernels.top_k(tied, 6000),
        "auc n=5000": lambda: kernels.auc(scores, labels),
        "kmeans_lloyd 2000x64 k=4 x50": lambda: kernels.kmeans_lloyd(km_x, km_c, 50),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind == "f":
        return np.allclose(a, b, rtol=1e-5, atol=1e-6)
    return np.array_equal(a, b)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the Python fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':34s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, fn in cases(rng).items():
        times, outs = {}, {}
        for b in backends:
            with kernels.using(b):
                outs[b] = fn()
                times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        agree = all(_same(outs[backends[0]], outs[b]) for b in backends[1:])
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        rows.append({"kernel": name, **{f"{b}_s": t for b, t in times.items()}, "speedup": speedup, "agree": agree})
        print(f"{name:34s} " + " ".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
              + f"   {speedup:6.2f}x" + ("" if agree else "   MISMATCH"))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())

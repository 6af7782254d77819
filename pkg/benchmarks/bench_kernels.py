"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Shapes follow the default model: width 64, 4 heads, context 192, codebook 64.
"""
import argparse
import json
import time

import numpy as np

from songlm import kernels


def cases(rng):
    f = lambda *s: rng.normal(size=s).astype(np.float32)
    a = rng.integers(0, 40, size=60)
    b = rng.integers(0, 40, size=60)
    return {
        "matmul 64x64 @ 64x256": (kernels.matmul, (f(64, 64), f(64, 256))),
        "layer_norm 192x64": (kernels.layer_norm, (f(192, 64), f(64), f(64))),
        "attend 16 groups x 192 keys": (kernels.attend, (f(16, 16), f(16, 192, 16), f(16, 192, 16),
                                                         np.ones((16, 192), np.uint8), 0.25)),
        "gelu 64x256": (kernels.gelu, (f(64, 256),)),
        "rvq_assign 4096 frames, K=64": (kernels.rvq_assign, (f(4096, 8), f(64, 8))),
        "levenshtein 60x60": (kernels.levenshtein, (a, b)),
    }


def best_time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results to this file")
    args = p.parse_args(argv)
    backends = ["numpy"] + (["compiled"] if kernels._compiled is not None else [])
    rng = np.random.default_rng(0)
    table = cases(rng)
    results = {}
    for backend in backends:
        prev = kernels.use_backend(backend)
        results[backend] = {name: best_time(fn, a, args.repeat) for name, (fn, a) in table.items()}
        kernels.use_backend(prev)
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name in table:
        row = f"{name:32s}" + "".join(f"{results[b][name] * 1e3:10.3f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{results['numpy'][name] / results['compiled'][name]:11.1f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()

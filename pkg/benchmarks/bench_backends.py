"""Compare the compiled kernel against the numpy fallback.

Times block-sparse attention on random inputs for a few sizes, precisions and
mask densities, single-threaded, and prints one row per case:

    python3 benchmarks/bench_backends.py --sizes 2048,4096 --repeat 5
"""

import argparse
import json
import time

import numpy as np
from threadpoolctl import threadpool_limits

from pbs_attn import _backend
from pbs_attn.attention import AttentionConfig, ElementMask, attention_block_sparse


def random_grid(rng, t, density):
    grid = rng.random((t, t)) < density
    grid[np.arange(t), np.arange(t)] = True
    return grid


def time_case(q, k, v, cfg, grid, em, backend, repeat):
    attention_block_sparse(q, k, v, cfg, grid, em, backend=backend)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        attention_block_sparse(q, k, v, cfg, grid, em, backend=backend)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="1024,4096")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--block-size", type=int, default=128)
    p.add_argument("--densities", default="1.0,0.3")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="emit JSON lines instead of a table")
    args = p.parse_args(argv)

    backends = _backend.available()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(args.seed)
    if not args.json:
        print(f"{'n':>6} {'dtype':>7} {'density':>7} " +
              " ".join(f"{b + ' s':>12}" for b in backends) + "   speedup")
    with threadpool_limits(limits=1):
        for n in (int(x) for x in args.sizes.split(",")):
            for dtype in (np.float32, np.float64):
                q, k, v = (rng.standard_normal((n, args.dim)).astype(dtype) for _ in range(3))
                cfg = AttentionConfig(block_size=args.block_size)
                em = ElementMask.identity(n, n)
                t = -(-n // args.block_size)
                for density in (float(x) for x in args.densities.split(",")):
                    grid = np.tril(random_grid(rng, t, density))
                    res = {b: time_case(q, k, v, cfg, grid, em, b, args.repeat)
                           for b in backends}
                    speedup = res["python"] / res["compiled"] if "compiled" in res else 1.0
                    if args.json:
                        print(json.dumps({"n": n, "dtype": np.dtype(dtype).name,
                                          "density": density, "seconds": res,
                                          "speedup": speedup}))
                    else:
                        print(f"{n:>6} {np.dtype(dtype).name:>7} {density:>7.2f} " +
                              " ".join(f"{res[b]:>12.4f}" for b in backends) +
                              f"   {speedup:.2f}x")


if __name__ == "__main__":
    main()

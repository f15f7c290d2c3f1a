"""Time the block-gather attention kernels (compiled vs numpy) in isolation.

Routing is planned once per length; only ``attend_fwd`` / ``attend_bwd``
are timed, so the numbers isolate the gather + softmax + weighted-sum work.

    python benchmarks/bench_kernels.py --lengths 1024 4096 --repeats 3
"""
import argparse
import time

import numpy as np

from msattn import kernels
from msattn.ms_attention import MsConfig, build_plan


def problem(n, heads, d, cfg, rng):
    q, k, v = (rng.standard_normal((1, heads, n, d)).astype(np.float32) for _ in range(3))
    plan = build_plan(q, k, cfg)
    flat = lambda a: np.ascontiguousarray(a.reshape(heads, n, d))
    qt = plan.qtok.reshape(heads, *plan.qtok.shape[-2:])
    kt = plan.kvtok.reshape(heads, *plan.kvtok.shape[-2:])
    return flat(q), flat(k), flat(v), qt, kt


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", type=int, nargs="+", default=[1024, 2048, 4096, 8192])
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--head-dim", type=int, default=32)
    ap.add_argument("--s", type=int, default=16, help="region size for queries and keys")
    ap.add_argument("--topk", type=int, default=8)
    ap.add_argument("--merges", type=int, default=2)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = MsConfig(s_q=args.s, s_k=args.s, topk=args.topk, merges=args.merges, topn=args.topk)
    rng = np.random.default_rng(args.seed)
    names = kernels.names()
    print(f"backends: {names}")
    print(f"{'n':>6} {'backend':>9} {'fwd ms':>9} {'bwd ms':>9} {'speedup':>8}")
    for n in args.lengths:
        q, k, v, qt, kt = problem(n, args.heads, args.head_dim, cfg, rng)
        scale = 1.0 / np.sqrt(args.head_dim)
        dout = rng.standard_normal(q.shape).astype(np.float32)
        base = None
        for name in ["python"] + [x for x in names if x != "python"]:
            be = kernels.get_backend(name)
            out, lse = be.attend_fwd(q, k, v, qt, kt, scale)
            fwd = best_of(lambda: be.attend_fwd(q, k, v, qt, kt, scale), args.repeats)
            bwd = best_of(lambda: be.attend_bwd(q, k, v, qt, kt, scale, out, lse, dout), args.repeats)
            total = fwd + bwd
            base = base or total
            print(f"{n:>6} {name:>9} {1e3 * fwd:>9.2f} {1e3 * bwd:>9.2f} {base / total:>7.2f}x")


if __name__ == "__main__":
    main()

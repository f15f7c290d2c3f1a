"""FLOP / gathered-bytes / wall-time benchmark of MS attention against dense attention."""
from __future__ import annotations

import csv
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import kernels
from ..ms_attention import FlopCounter, MsConfig, dense_causal_oracle, dense_flop_account, flop_account, ms_attention

COLUMNS = (
    "n", "predicted_selection", "counted_selection", "predicted_attention", "counted_attention",
    "executed_attention", "predicted_gathered_bytes", "counted_gathered_bytes", "dense_predicted",
    "dense_counted", "backend", "ms_seconds", "dense_seconds",
)


def _timed(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(cfg: MsConfig, lengths: Sequence[int], d: int = 32, heads: int = 1, backends=("compiled", "python"),
          dense_max: int = 4096, repeats: int = 1, seed: int = 0) -> list:
    """One row per (length, backend) pairing closed-form predictions with counts.

    Counts come from an instrumented MS call (and a dense call) at batch 1.
    Lengths must be multiples of the config's block for the closed forms to be exact.
    """
    rows = []
    names = [b for b in backends if b == "python" or kernels.available()]
    rng = np.random.default_rng(seed)
    for n in lengths:
        q, k, v = (rng.standard_normal((1, heads, n, d)).astype(np.float32) for _ in range(3))
        pred = flop_account(n, cfg, d, heads, itemsize=4)
        dense_pred = dense_flop_account(n, d, heads)
        dense_cnt = FlopCounter()
        dense_s = None
        if n <= dense_max:
            dense_s = _timed(lambda: dense_causal_oracle(q, k, v, counter=dense_cnt), 1)
            if repeats > 1:
                dense_s = min(dense_s, _timed(lambda: dense_causal_oracle(q, k, v), repeats - 1))
        for name in names:
            cnt = FlopCounter()
            ms_attention(q, k, v, cfg, backend=name, counter=cnt)
            secs = _timed(lambda: ms_attention(q, k, v, cfg, backend=name), repeats)
            rows.append({
                "n": n,
                "predicted_selection": pred["selection_flops"],
                "counted_selection": cnt["selection"],
                "predicted_attention": pred["attention_flops"],
                "counted_attention": cnt["attention"],
                "executed_attention": cnt["executed_attention"] if name == "compiled" else None,
                "predicted_gathered_bytes": pred["gathered_kv_bytes"],
                "counted_gathered_bytes": cnt["gathered_kv_elements"] * 4,
                "dense_predicted": dense_pred,
                "dense_counted": dense_cnt["attention"] if n <= dense_max else None,
                "backend": name,
                "ms_seconds": secs,
                "dense_seconds": dense_s,
            })
    return rows


def loglog_slope(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)[0])


def write_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path

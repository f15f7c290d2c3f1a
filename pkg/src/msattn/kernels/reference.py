"""Pure-numpy block-gather attention kernels (the fallback backend).

Layout shared with the compiled backend:

    q, k, v  : (B, n, d)   float32 or float64, C-contiguous
    qtok     : (B, G, Lq)  int64 token index of every query in group g
    kvtok    : (B, G, Lk)  int64 token index of every gathered key, -1 = sentinel

Key ``kt`` is visible to query ``qt`` iff ``0 <= kt <= qt``.  Each token
appears as a query in exactly one group.  Blocks are computed densely
(masked entries included), so the multiply-add count equals the closed form
``2 * B * G * Lq * Lk * d``.
"""
import numpy as np

NAME = "python"


def _gather(x, idx):
    B = x.shape[0]
    bidx = np.arange(B).reshape((B,) + (1,) * (idx.ndim - 1))
    return x[bidx, np.maximum(idx, 0)]


def _mask(qtok, kvtok):
    kv = kvtok[:, :, None, :]
    return (kv >= 0) & (kv <= qtok[:, :, :, None])


def attend_fwd(q, k, v, qtok, kvtok, scale, counter=None):
    qg = _gather(q, qtok)
    kg = _gather(k, kvtok)
    vg = _gather(v, kvtok)
    s = np.matmul(qg, kg.swapaxes(-1, -2)) * q.dtype.type(scale)
    mask = _mask(qtok, kvtok)
    s = np.where(mask, s, -np.inf)
    mx = s.max(axis=-1, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0)
    p = np.exp(s - safe)
    l = p.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        og = np.matmul(p, vg) / l
        lse = (safe + np.log(l))[..., 0]
    og = np.where(l > 0, og, 0)
    B, n, d = q.shape
    out = np.zeros_like(q)
    lse_full = np.full((B, n), -np.inf, dtype=q.dtype)
    bidx = np.arange(B)[:, None, None]
    out[bidx, qtok] = og
    lse_full[bidx, qtok] = lse
    if counter is not None:
        G, Lq, Lk = qtok.shape[1], qtok.shape[2], kvtok.shape[2]
        counter.add("attention", 2 * B * G * Lq * Lk * d)
    return out, lse_full


def attend_bwd(q, k, v, qtok, kvtok, scale, out, lse, dout):
    scale = q.dtype.type(scale)
    qg = _gather(q, qtok)
    kg = _gather(k, kvtok)
    vg = _gather(v, kvtok)
    og = _gather(out, qtok)
    dog = _gather(dout, qtok)
    lg = _gather(lse, qtok)[..., None]
    s = np.matmul(qg, kg.swapaxes(-1, -2)) * scale
    mask = _mask(qtok, kvtok)
    p = np.where(mask, np.exp(s - np.where(np.isfinite(lg), lg, 0)), 0)
    dvg = np.matmul(p.swapaxes(-1, -2), dog)
    dp = np.matmul(dog, vg.swapaxes(-1, -2))
    delta = np.sum(dog * og, axis=-1, keepdims=True)
    ds = p * (dp - delta) * scale
    dqg = np.matmul(ds, kg)
    dkg = np.matmul(ds.swapaxes(-1, -2), qg)

    B = q.shape[0]
    bidx = np.arange(B)[:, None, None]
    dq = np.zeros_like(q)
    dq[bidx, qtok] = dqg
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    kv = np.maximum(kvtok, 0)
    np.add.at(dk, (bidx, kv), dkg)
    np.add.at(dv, (bidx, kv), dvg)
    return dq, dk, dv

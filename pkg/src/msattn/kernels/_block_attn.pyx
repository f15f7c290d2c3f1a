# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled block-gather attention kernels.

Same contract as ``msattn.kernels.reference``; masked keys are skipped
instead of computed, so ``executed_macs`` is at most the scheduled count.
Loops run in a fixed order, so results are deterministic.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, log, INFINITY
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

cnp.import_array()

NAME = "compiled"

ctypedef fused real:
    float
    double


cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real _dot(const real *a, const real *b, Py_ssize_t d) noexcept nogil:
    # four partial sums let the compiler keep several vector lanes busy
    cdef real s0 = 0, s1 = 0, s2 = 0, s3 = 0
    cdef Py_ssize_t c = 0
    while c + 4 <= d:
        s0 += a[c] * b[c]
        s1 += a[c + 1] * b[c + 1]
        s2 += a[c + 2] * b[c + 2]
        s3 += a[c + 3] * b[c + 3]
        c += 4
    while c < d:
        s0 += a[c] * b[c]
        c += 1
    return (s0 + s1) + (s2 + s3)


cdef long long _fwd(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                    const long long[:, :, ::1] qtok, const long long[:, :, ::1] kvtok,
                    double scale, real[:, :, ::1] out, real[:, ::1] lse) noexcept nogil:
    cdef Py_ssize_t B = q.shape[0], d = q.shape[2]
    cdef Py_ssize_t G = qtok.shape[1], Lq = qtok.shape[2], Lk = kvtok.shape[2]
    cdef Py_ssize_t b, g, i, j, c, nk
    cdef long long qt, macs = 0
    cdef double denom
    cdef real mx, x, pr, sc = <real> scale
    cdef real *kbuf = <real *> malloc(Lk * d * sizeof(real))
    cdef real *vbuf = <real *> malloc(Lk * d * sizeof(real))
    cdef long long *tok = <long long *> malloc(Lk * sizeof(long long))
    cdef real *s = <real *> malloc(Lk * sizeof(real))
    cdef real *o = <real *> malloc(d * sizeof(real))
    cdef const real *qrow
    cdef real *krow
    cdef real *orow
    for b in range(B):
        for g in range(G):
            # gather the group's visible-somewhere keys into contiguous scratch
            nk = 0
            for j in range(Lk):
                if kvtok[b, g, j] < 0:
                    continue
                tok[nk] = kvtok[b, g, j]
                memcpy(&kbuf[nk * d], &k[b, tok[nk], 0], d * sizeof(real))
                memcpy(&vbuf[nk * d], &v[b, tok[nk], 0], d * sizeof(real))
                nk += 1
            for i in range(Lq):
                qt = qtok[b, g, i]
                qrow = &q[b, qt, 0]
                mx = -INFINITY
                for j in range(nk):
                    if tok[j] > qt:
                        s[j] = -INFINITY
                        continue
                    x = _dot(qrow, &kbuf[j * d], d) * sc
                    s[j] = x
                    if x > mx:
                        mx = x
                    macs += d
                orow = &out[b, qt, 0]
                if mx == -INFINITY:
                    for c in range(d):
                        orow[c] = 0
                    lse[b, qt] = -INFINITY
                    continue
                for c in range(d):
                    o[c] = 0
                denom = 0.0
                for j in range(nk):
                    if s[j] == -INFINITY:
                        continue
                    pr = _exp(s[j] - mx)
                    denom += pr
                    krow = &vbuf[j * d]
                    for c in range(d):
                        o[c] += pr * krow[c]
                    macs += d
                for c in range(d):
                    orow[c] = <real> (o[c] / denom)
                lse[b, qt] = <real> (mx + log(denom))
    free(kbuf)
    free(vbuf)
    free(tok)
    free(s)
    free(o)
    return macs


cdef void _bwd(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
               const long long[:, :, ::1] qtok, const long long[:, :, ::1] kvtok,
               double scale, real[:, :, ::1] out, real[:, ::1] lse, real[:, :, ::1] dout,
               real[:, :, ::1] dq, real[:, :, ::1] dk, real[:, :, ::1] dv) noexcept nogil:
    cdef Py_ssize_t B = q.shape[0], d = q.shape[2]
    cdef Py_ssize_t G = qtok.shape[1], Lq = qtok.shape[2], Lk = kvtok.shape[2]
    cdef Py_ssize_t b, g, i, j, c, nk
    cdef long long qt
    cdef real pr, dsr, dp, delta, l, sc = <real> scale
    cdef real *kbuf = <real *> malloc(Lk * d * sizeof(real))
    cdef real *vbuf = <real *> malloc(Lk * d * sizeof(real))
    cdef real *dkbuf = <real *> malloc(Lk * d * sizeof(real))
    cdef real *dvbuf = <real *> malloc(Lk * d * sizeof(real))
    cdef long long *tok = <long long *> malloc(Lk * sizeof(long long))
    cdef const real *qrow
    cdef const real *dorow
    cdef real *dqrow
    cdef real *kr
    cdef real *vr
    for b in range(B):
        for g in range(G):
            nk = 0
            for j in range(Lk):
                if kvtok[b, g, j] < 0:
                    continue
                tok[nk] = kvtok[b, g, j]
                memcpy(&kbuf[nk * d], &k[b, tok[nk], 0], d * sizeof(real))
                memcpy(&vbuf[nk * d], &v[b, tok[nk], 0], d * sizeof(real))
                nk += 1
            memset(dkbuf, 0, nk * d * sizeof(real))
            memset(dvbuf, 0, nk * d * sizeof(real))
            for i in range(Lq):
                qt = qtok[b, g, i]
                l = lse[b, qt]
                if l == -INFINITY:
                    continue
                qrow = &q[b, qt, 0]
                dorow = &dout[b, qt, 0]
                dqrow = &dq[b, qt, 0]
                delta = _dot(dorow, &out[b, qt, 0], d)
                for j in range(nk):
                    if tok[j] > qt:
                        continue
                    kr = &kbuf[j * d]
                    vr = &vbuf[j * d]
                    pr = _exp(_dot(qrow, kr, d) * sc - l)
                    dp = _dot(dorow, vr, d)
                    dsr = pr * (dp - delta) * sc
                    vr = &dvbuf[j * d]
                    for c in range(d):
                        vr[c] += pr * dorow[c]
                    vr = &dkbuf[j * d]
                    for c in range(d):
                        dqrow[c] += dsr * kr[c]
                        vr[c] += dsr * qrow[c]
            # scatter-add the group's key/value gradients back to token rows
            for j in range(nk):
                for c in range(d):
                    dk[b, tok[j], c] += dkbuf[j * d + c]
                    dv[b, tok[j], c] += dvbuf[j * d + c]
    free(kbuf)
    free(vbuf)
    free(dkbuf)
    free(dvbuf)
    free(tok)


def attend_fwd(q, k, v, qtok, kvtok, scale, counter=None):
    q = np.ascontiguousarray(q)
    k = np.ascontiguousarray(k, dtype=q.dtype)
    v = np.ascontiguousarray(v, dtype=q.dtype)
    qtok = np.ascontiguousarray(qtok, dtype=np.int64)
    kvtok = np.ascontiguousarray(kvtok, dtype=np.int64)
    out = np.zeros_like(q)
    lse = np.full(q.shape[:2], -np.inf, dtype=q.dtype)
    cdef long long macs
    if q.dtype == np.float32:
        macs = _fwd[float](q, k, v, qtok, kvtok, float(scale), out, lse)
    elif q.dtype == np.float64:
        macs = _fwd[double](q, k, v, qtok, kvtok, float(scale), out, lse)
    else:
        raise TypeError(f"unsupported dtype {q.dtype}")
    if counter is not None:
        B, G, Lq = qtok.shape
        counter.add("attention", 2 * B * G * Lq * kvtok.shape[2] * q.shape[2])
        counter.add("executed_attention", int(macs))
    return out, lse


def attend_bwd(q, k, v, qtok, kvtok, scale, out, lse, dout):
    q = np.ascontiguousarray(q)
    dt = q.dtype
    k = np.ascontiguousarray(k, dtype=dt)
    v = np.ascontiguousarray(v, dtype=dt)
    out = np.ascontiguousarray(out, dtype=dt)
    lse = np.ascontiguousarray(lse, dtype=dt)
    dout = np.ascontiguousarray(dout, dtype=dt)
    qtok = np.ascontiguousarray(qtok, dtype=np.int64)
    kvtok = np.ascontiguousarray(kvtok, dtype=np.int64)
    dq = np.zeros_like(q)
    dk = np.zeros_like(q)
    dv = np.zeros_like(q)
    if dt == np.float32:
        _bwd[float](q, k, v, qtok, kvtok, float(scale), out, lse, dout, dq, dk, dv)
    elif dt == np.float64:
        _bwd[double](q, k, v, qtok, kvtok, float(scale), out, lse, dout, dq, dk, dv)
    else:
        raise TypeError(f"unsupported dtype {dt}")
    return dq, dk, dv

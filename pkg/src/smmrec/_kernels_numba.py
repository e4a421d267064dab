"""numba @njit implementations of the hot kernels.

Loop bodies accumulate in float64 regardless of the array dtype, so
float32 results may differ from the numpy backend by normal rounding;
parity tests compare with tolerances. See kernels.py for the contract.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def cope_forward(q, k, table, mask):
    n_slices, seq, dim = q.shape
    p_max = table.shape[0] - 1
    scale = 1.0 / math.sqrt(dim)

    pos = np.zeros((n_slices, seq, seq), dtype=q.dtype)
    sig = np.zeros((n_slices, seq, seq), dtype=q.dtype)
    praw = np.zeros((n_slices, seq, seq), dtype=q.dtype)
    qe = np.zeros((n_slices, seq, p_max + 1), dtype=q.dtype)

    table_t = np.ascontiguousarray(table.T)
    for n in range(n_slices):
        qn = np.ascontiguousarray(q[n])
        qe[n] = np.dot(qn, table_t)  # BLAS for the matmul-heavy parts
        scores = np.dot(qn, np.ascontiguousarray(k[n].T))
        for i in range(seq):
            for j in range(seq):
                sig[n, i, j] = 1.0 / (1.0 + math.exp(-scores[i, j] * scale))
            # direction-aware span sums of masked gates
            run = 0.0
            for j in range(i, -1, -1):
                if mask[n, i, j]:
                    run += sig[n, i, j]
                praw[n, i, j] = run
            run = sig[n, i, i] if mask[n, i, i] else 0.0
            for j in range(i + 1, seq):
                if mask[n, i, j]:
                    run += sig[n, i, j]
                praw[n, i, j] = run
            for j in range(seq):
                p = float(praw[n, i, j])
                if p > p_max:
                    p = float(p_max)
                if p < 0.0:
                    p = 0.0
                fl = math.floor(p)
                w = p - fl
                fi = int(fl)
                ci = fi + 1 if w > 0.0 else fi
                pos[n, i, j] = w * qe[n, i, ci] + (1.0 - w) * qe[n, i, fi]
    return pos, sig, praw, qe


@njit(cache=True)
def cope_backward(d, q, k, table, mask, sig, praw, qe):
    n_slices, seq, dim = q.shape
    p_max = table.shape[0] - 1
    scale = 1.0 / math.sqrt(dim)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dtable = np.zeros_like(table)

    for n in range(n_slices):
        dqe = np.zeros((seq, p_max + 1), dtype=np.float64)
        for i in range(seq):
            dp = np.zeros(seq, dtype=np.float64)
            for j in range(seq):
                dd = float(d[n, i, j])
                if dd == 0.0:
                    continue
                p = float(praw[n, i, j])
                clamped = p > p_max
                if clamped:
                    p = float(p_max)
                if p < 0.0:
                    p = 0.0
                fl = math.floor(p)
                w = p - fl
                fi = int(fl)
                ci = fi + 1 if w > 0.0 else fi
                dqe[i, ci] += dd * w
                dqe[i, fi] += dd * (1.0 - w)
                if not clamped:
                    dp[j] = dd * (qe[n, i, ci] - qe[n, i, fi])
            # span backward: gate u feeds every position whose span covers u
            run = 0.0
            dgate = np.zeros(seq, dtype=np.float64)
            for u in range(i + 1):
                run += dp[u]
                dgate[u] = run
            run = 0.0
            for u in range(seq - 1, i - 1, -1):
                if u > i:
                    run += dp[u]
                dgate[u] += run
            for u in range(seq):
                if mask[n, i, u] and dgate[u] != 0.0:
                    sg = float(sig[n, i, u])
                    ds = dgate[u] * sg * (1.0 - sg) * scale
                    for a in range(dim):
                        dq[n, i, a] += ds * k[n, u, a]
                        dk[n, u, a] += ds * q[n, i, a]
        for i in range(seq):
            for r in range(p_max + 1):
                v = dqe[i, r]
                if v != 0.0:
                    for a in range(dim):
                        dq[n, i, a] += v * table[r, a]
                        dtable[r, a] += v * q[n, i, a]
    return dq, dk, dtable


@njit(cache=True)
def scatter_add_rows(out, indices, rows):
    for m in range(indices.shape[0]):
        r = indices[m]
        for a in range(rows.shape[1]):
            out[r, a] += rows[m, a]

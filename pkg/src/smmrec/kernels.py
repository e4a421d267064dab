"""Hot numeric kernels with two interchangeable backends.

The contextual-position attention term and the scatter-add used by
embedding/gather gradients are the only non-BLAS inner loops in the
package. Both ship in two flavors:

  * pure numpy (this module) — always available, fully vectorized;
  * numba @njit loops (smmrec._kernels_numba) — faster on larger
    sequence lengths, JIT-compiled on first use.

Selection is controlled by the SMMREC_BACKEND environment variable:
"numpy" forces the fallback, "numba" requires numba, anything else
(or unset) auto-selects numba when importable. `benchmarks/
bench_kernels.py` compares the two.

Kernel contract (shared by both backends), per collapsed batch*heads
slice n, query i, key j over sequence length T:

  sig[n,i,j]  = sigmoid(q_i . k_j / sqrt(D))          (pre-mask gates)
  gate        = sig where mask else 0
  praw[n,i,j] = sum of gate[n,i,u] for u in the inclusive span
                between j and i (direction-aware)
  p           = clip(praw, 0, P)  with P = table rows - 1
  pos[n,i,j]  = (p-floor(p)) * q_i.e[ceil(p)] + (1-(p-floor(p))) * q_i.e[floor(p)]

cope_forward returns (pos, sig, praw, qe) where qe[n,i,r] = q_i . e_r;
cope_backward consumes those saved arrays plus d = dL/dpos and returns
(dq, dk, dtable).
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigurationError

ENV_FLAG = "SMMREC_BACKEND"


def cope_forward_numpy(q, k, table, mask):
    n_slices, seq, dim = q.shape
    p_max = table.shape[0] - 1
    scale = 1.0 / np.sqrt(dim)

    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    sig = 1.0 / (1.0 + np.exp(-scores))
    gate = np.where(mask, sig, 0.0)

    run = np.cumsum(gate, axis=2)
    idx = np.arange(seq)
    diag_run = run[:, idx, idx][:, :, None]
    diag_gate = gate[:, idx, idx][:, :, None]
    lower = np.tri(seq, dtype=bool)  # lower[i, j] true when j <= i
    praw = np.where(lower, diag_run - run + gate, run - diag_run + diag_gate)

    p = np.clip(praw, 0.0, float(p_max))
    floor = np.floor(p)
    w = p - floor
    fi = floor.astype(np.int64)
    ci = np.ceil(p).astype(np.int64)

    qe = np.matmul(q, table.T)
    qe_ceil = np.take_along_axis(qe, ci, axis=2)
    qe_floor = np.take_along_axis(qe, fi, axis=2)
    pos = (w * qe_ceil + (1.0 - w) * qe_floor).astype(q.dtype)
    return pos, sig.astype(q.dtype), praw.astype(q.dtype), qe.astype(q.dtype)


def cope_backward_numpy(d, q, k, table, mask, sig, praw, qe):
    n_slices, seq, dim = q.shape
    p_max = table.shape[0] - 1
    scale = 1.0 / np.sqrt(dim)

    p = np.clip(praw, 0.0, float(p_max))
    floor = np.floor(p)
    w = p - floor
    fi = floor.astype(np.int64)
    ci = np.ceil(p).astype(np.int64)
    qe_ceil = np.take_along_axis(qe, ci, axis=2)
    qe_floor = np.take_along_axis(qe, fi, axis=2)

    dqe = np.zeros_like(qe)
    nn = np.broadcast_to(np.arange(n_slices)[:, None, None], d.shape)
    ii = np.broadcast_to(np.arange(seq)[None, :, None], d.shape)
    np.add.at(dqe, (nn, ii, ci), d * w)
    np.add.at(dqe, (nn, ii, fi), d * (1.0 - w))

    # clamp passes gradient only where the raw position was in range
    dp = np.where(praw <= p_max, d * (qe_ceil - qe_floor), 0.0)

    lower = np.tri(seq, dtype=bool)
    upper_incl = ~np.tri(seq, k=-1, dtype=bool)  # u >= i
    dp_left = np.where(lower, dp, 0.0)
    dp_right = np.where(~lower, dp, 0.0)
    cum_left = np.cumsum(dp_left, axis=2)
    rev_right = np.flip(np.cumsum(np.flip(dp_right, axis=2), axis=2), axis=2)
    dgate = np.where(lower, cum_left, 0.0) + np.where(upper_incl, rev_right, 0.0)

    dsig = np.where(mask, dgate, 0.0)
    dscores = dsig * sig * (1.0 - sig) * scale

    dq = np.matmul(dqe, table) + np.matmul(dscores, k)
    dk = np.matmul(dscores.transpose(0, 2, 1), q)
    dtable = np.einsum("nir,nia->ra", dqe, q)
    return dq.astype(q.dtype), dk.astype(q.dtype), dtable.astype(table.dtype)


def scatter_add_rows_numpy(out, indices, rows):
    """out[indices[m]] += rows[m] with repeated indices accumulating."""
    np.add.at(out, indices, rows)


_NUMPY_BACKEND = {
    "cope_forward": cope_forward_numpy,
    "cope_backward": cope_backward_numpy,
    "scatter_add_rows": scatter_add_rows_numpy,
}


def _load_numba_backend():
    from . import _kernels_numba as nb

    return {
        "cope_forward": nb.cope_forward,
        "cope_backward": nb.cope_backward,
        "scatter_add_rows": nb.scatter_add_rows,
    }


def _select() -> tuple[str, dict]:
    flag = os.environ.get(ENV_FLAG, "auto").strip().lower() or "auto"
    if flag == "numpy":
        return "numpy", _NUMPY_BACKEND
    if flag == "numba":
        try:
            return "numba", _load_numba_backend()
        except ImportError as exc:
            raise ConfigurationError(f"{ENV_FLAG}=numba but numba is unavailable: {exc}")
    if flag != "auto":
        raise ConfigurationError(f"{ENV_FLAG} must be numpy, numba, or auto; got {flag!r}")
    try:
        return "numba", _load_numba_backend()
    except ImportError:
        return "numpy", _NUMPY_BACKEND


_BACKEND_NAME, _ACTIVE = _select()


def backend_name() -> str:
    return _BACKEND_NAME


def cope_forward(q, k, table, mask):
    return _ACTIVE["cope_forward"](q, k, table, mask)


def cope_backward(d, q, k, table, mask, sig, praw, qe):
    return _ACTIVE["cope_backward"](d, q, k, table, mask, sig, praw, qe)


def scatter_add_rows(out, indices, rows):
    return _ACTIVE["scatter_add_rows"](out, indices, rows)

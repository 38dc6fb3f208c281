"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``EXPRESSMLN_NUMBA`` is not set to ``0``. Both paths are importable
directly (``numba_impl`` / ``numpy_impl``) so they can be compared.

``matmul`` must be row-deterministic: two identical rows of ``a`` have to
produce bit-identical output rows wherever they sit in the matrix. BLAS gemm
does not promise that, and the expressiveness checks compare GNN outputs of
symmetric entities bit for bit.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np


# ---------------------------------------------------------------------------
# numpy fallback
# ---------------------------------------------------------------------------


def _np_matmul(a, b):
    # einsum without path optimisation runs its own reduction loop per
    # output element, never BLAS, so equal rows give equal results.
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def _np_segment_sum(values, ids, n_segments):
    out = np.zeros((n_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, ids, values)
    return out


def _np_formula_log_potentials(lit_atom, lit_neg, const_true, weights, n_latent):
    n_states = 1 << n_latent
    out = np.zeros(n_states, dtype=np.float64)
    if len(weights) == 0:
        return out
    shifts = (n_latent - 1 - np.arange(n_latent)).astype(np.int64)
    chunk = 1 << 16
    for start in range(0, n_states, chunk):
        states = np.arange(start, min(start + chunk, n_states), dtype=np.int64)
        bits = ((states[:, None] >> shifts[None, :]) & 1).astype(bool)
        acc = np.zeros(len(states), dtype=np.float64)
        for f in range(len(weights)):
            if const_true[f]:
                acc += weights[f]
                continue
            idx = lit_atom[f]
            mask = idx >= 0
            if not mask.any():
                continue
            lit_true = bits[:, idx[mask]] != lit_neg[f][mask][None, :]
            acc += weights[f] * lit_true.any(axis=1)
        out[start:start + len(states)] = acc
    return out


numpy_impl = SimpleNamespace(
    name="numpy",
    matmul=_np_matmul,
    segment_sum=_np_segment_sum,
    formula_log_potentials=_np_formula_log_potentials,
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def matmul(a, b):
        n, k = a.shape
        m = b.shape[1]
        out = np.zeros((n, m))
        for i in range(n):
            for p in range(k):
                av = a[i, p]
                if av == 0.0:
                    continue
                for j in range(m):
                    out[i, j] += av * b[p, j]
        return out

    @njit(cache=True)
    def _segment_sum_2d(values, ids, n_segments):
        out = np.zeros((n_segments, values.shape[1]))
        for r in range(values.shape[0]):
            s = ids[r]
            for j in range(values.shape[1]):
                out[s, j] += values[r, j]
        return out

    def segment_sum(values, ids, n_segments):
        values = np.ascontiguousarray(values, dtype=np.float64)
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        if values.ndim == 1:
            return _segment_sum_2d(values.reshape(-1, 1), ids, n_segments).reshape(-1)
        return _segment_sum_2d(values, ids, n_segments)

    @njit(cache=True)
    def formula_log_potentials(lit_atom, lit_neg, const_true, weights, n_latent):
        n_states = 1 << n_latent
        out = np.zeros(n_states)
        n_f, n_l = lit_atom.shape
        # a clause holds iff a positive literal's bit is set or a negated one's is clear
        pos = np.zeros(n_f, dtype=np.int64)
        neg = np.zeros(n_f, dtype=np.int64)
        for f in range(n_f):
            for j in range(n_l):
                a = lit_atom[f, j]
                if a < 0:
                    continue
                bit = np.int64(1) << (n_latent - 1 - a)
                if lit_neg[f, j]:
                    neg[f] |= bit
                else:
                    pos[f] |= bit
        for s in range(n_states):
            acc = 0.0
            for f in range(n_f):
                if const_true[f] or (s & pos[f]) != 0 or (~s & neg[f]) != 0:
                    acc += weights[f]
            out[s] = acc
        return out

    def _matmul(a, b):
        return matmul(np.ascontiguousarray(a, dtype=np.float64),
                      np.ascontiguousarray(b, dtype=np.float64))

    def _flp(lit_atom, lit_neg, const_true, weights, n_latent):
        return formula_log_potentials(
            np.ascontiguousarray(lit_atom, dtype=np.int64),
            np.ascontiguousarray(lit_neg, dtype=np.bool_),
            np.ascontiguousarray(const_true, dtype=np.bool_),
            np.ascontiguousarray(weights, dtype=np.float64),
            int(n_latent),
        )

    return SimpleNamespace(
        name="numba",
        matmul=_matmul,
        segment_sum=segment_sum,
        formula_log_potentials=_flp,
    )


def _jit_requested() -> bool:
    return os.environ.get("EXPRESSMLN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    numba_impl = _build_numba_impl()
except ImportError:  # numba is an optional extra
    numba_impl = None

active = numba_impl if (numba_impl is not None and _jit_requested()) else numpy_impl
backend = active.name

matmul = active.matmul
segment_sum = active.segment_sum
formula_log_potentials = active.formula_log_potentials

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expressmln import _kernels

BACKENDS = [_kernels.numpy_impl] + ([_kernels.numba_impl] if _kernels.numba_impl is not None else [])
backend_ids = [b.name for b in BACKENDS]


def brute_log_potentials(lit_atom, lit_neg, const_true, weights, k):
    out = np.zeros(1 << k)
    for s in range(1 << k):
        bits = [(s >> (k - 1 - j)) & 1 for j in range(k)]
        for f in range(len(weights)):
            sat = bool(const_true[f]) or any(
                a >= 0 and (bits[a] == 1) != bool(n) for a, n in zip(lit_atom[f], lit_neg[f]))
            out[s] += weights[f] * sat
    return out


@pytest.mark.parametrize("impl", BACKENDS, ids=backend_ids)
class TestKernels:
    def test_matmul_matches_numpy(self, impl):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(impl.matmul(a, b), a @ b, rtol=1e-12, atol=1e-12)

    def test_matmul_equal_rows_are_bit_identical(self, impl):
        rng = np.random.default_rng(1)
        row = rng.normal(size=33)
        a = rng.normal(size=(40, 33))
        a[3] = row
        a[37] = row
        out = impl.matmul(a, rng.normal(size=(33, 17)))
        assert np.array_equal(out[3], out[37])

    def test_segment_sum(self, impl):
        rng = np.random.default_rng(2)
        vals = rng.normal(size=(20, 4))
        ids = rng.integers(6, size=20)
        expected = np.zeros((6, 4))
        for v, i in zip(vals, ids):
            expected[i] += v
        np.testing.assert_allclose(impl.segment_sum(vals, ids, 6), expected, atol=1e-12)
        np.testing.assert_allclose(impl.segment_sum(vals[:, 0], ids, 6), expected[:, 0], atol=1e-12)

    def test_segment_sum_empty_segments_are_zero(self, impl):
        out = impl.segment_sum(np.ones((2, 3)), np.array([0, 0]), 3)
        np.testing.assert_array_equal(out[1:], 0.0)

    def test_log_potentials_against_brute_force(self, impl):
        rng = np.random.default_rng(3)
        for _ in range(20):
            k = int(rng.integers(1, 7))
            F, L = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            lit_atom = rng.integers(-1, k, size=(F, L))
            lit_neg = rng.integers(2, size=(F, L)).astype(bool)
            const_true = rng.random(F) < 0.2
            w = rng.normal(size=F)
            got = impl.formula_log_potentials(lit_atom, lit_neg, const_true, w, k)
            np.testing.assert_allclose(got, brute_log_potentials(lit_atom, lit_neg, const_true, w, k),
                                       atol=1e-12)


@pytest.mark.skipif(_kernels.numba_impl is None, reason="numba not installed")
class TestBackendParity:
    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 12), k=st.integers(1, 9), m=st.integers(1, 6), seed=st.integers(0, 10 ** 6))
    def test_matmul_bitwise_parity(self, n, k, m, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        np.testing.assert_allclose(_kernels.numba_impl.matmul(a, b), _kernels.numpy_impl.matmul(a, b),
                                   rtol=1e-13, atol=1e-13)

    def test_log_potentials_parity(self):
        rng = np.random.default_rng(4)
        lit_atom = rng.integers(-1, 10, size=(30, 3))
        lit_neg = rng.integers(2, size=(30, 3)).astype(bool)
        const_true = rng.random(30) < 0.1
        w = rng.normal(size=30)
        np.testing.assert_array_equal(
            _kernels.numba_impl.formula_log_potentials(lit_atom, lit_neg, const_true, w, 10),
            _kernels.numpy_impl.formula_log_potentials(lit_atom, lit_neg, const_true, w, 10))


class TestBackendSelection:
    def _backend(self, flag):
        env = dict(os.environ, EXPRESSMLN_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", "from expressmln import _kernels; print(_kernels.backend)"],
                             env=env, capture_output=True, text=True, check=True)
        return out.stdout.strip()

    def test_flag_zero_selects_numpy(self):
        assert self._backend("0") == "numpy"

    @pytest.mark.skipif(_kernels.numba_impl is None, reason="numba not installed")
    def test_default_selects_numba(self):
        assert self._backend("1") == "numba"

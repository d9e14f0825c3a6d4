"""Both kernel backends must honor the same contract; when the compiled
extension is present its results must match the NumPy fallback."""

import numpy as np
import pytest

from knnmt import _kernels
from knnmt._kernels import _kernels_py


def compiled_or_skip():
    if _kernels.BACKEND != "compiled":
        pytest.skip("compiled kernels not built")
    return _kernels


class TestFallbackContract:
    def test_topk_sorted_with_id_ties(self):
        keys = np.zeros((6, 4), dtype=np.float32)
        keys[4] = 2.0
        q = np.zeros((1, 4), dtype=np.float32)
        d2, ids = _kernels_py.topk_l2(q, keys, 4)
        np.testing.assert_array_equal(ids[0], [0, 1, 2, 3])
        np.testing.assert_array_equal(d2[0], [0, 0, 0, 0])

    def test_topk_k_bounds(self):
        keys = np.zeros((3, 2), dtype=np.float32)
        q = np.zeros((1, 2), dtype=np.float32)
        with pytest.raises(ValueError):
            _kernels_py.topk_l2(q, keys, 0)
        with pytest.raises(ValueError):
            _kernels_py.topk_l2(q, keys, 4)

    def test_subset_matches_direct(self):
        rng = np.random.default_rng(0)
        keys = rng.normal(size=(50, 8)).astype(np.float32)
        q = rng.normal(size=8).astype(np.float32)
        ids = np.array([3, 17, 44], dtype=np.int64)
        expect = ((keys[ids].astype(np.float64) - q.astype(np.float64)) ** 2).sum(axis=1)
        np.testing.assert_allclose(_kernels_py.subset_l2(q, keys, ids), expect, rtol=1e-12)


class TestBackendEquivalence:
    def test_topk_identical(self):
        cy = compiled_or_skip()
        rng = np.random.default_rng(1)
        for dtype in (np.float32, np.float64):
            keys = rng.normal(size=(800, 24)).astype(dtype)
            queries = rng.normal(size=(40, 24)).astype(dtype)
            d_py, i_py = _kernels_py.topk_l2(queries, keys, 9)
            d_cy, i_cy = cy.topk_l2(queries, keys, 9)
            np.testing.assert_array_equal(i_py, i_cy)
            np.testing.assert_allclose(d_py, d_cy, rtol=1e-12, atol=1e-12)

    def test_topk_duplicate_tie_break(self):
        cy = compiled_or_skip()
        keys = np.tile(np.arange(4, dtype=np.float32), (9, 1))
        keys[::2] += 1.0
        q = np.arange(4, dtype=np.float32)[None, :]
        d_py, i_py = _kernels_py.topk_l2(q, keys, 5)
        d_cy, i_cy = cy.topk_l2(q, keys, 5)
        np.testing.assert_array_equal(i_py, i_cy)
        np.testing.assert_array_equal(i_py[0], [1, 3, 5, 7, 0])

    def test_subset_identical(self):
        cy = compiled_or_skip()
        rng = np.random.default_rng(2)
        keys = rng.normal(size=(300, 16)).astype(np.float32)
        q = rng.normal(size=16).astype(np.float32)
        ids = rng.integers(0, 300, size=40).astype(np.int64)
        np.testing.assert_allclose(_kernels_py.subset_l2(q, keys, ids),
                                   cy.subset_l2(q, keys, ids), rtol=1e-12)

    def test_lut_scan_identical(self):
        cy = compiled_or_skip()
        rng = np.random.default_rng(3)
        codes = rng.integers(0, 256, size=(120, 32), dtype=np.uint8)
        lut = rng.random((32, 256))
        ids = rng.integers(0, 120, size=60).astype(np.int64)
        np.testing.assert_allclose(_kernels_py.lut_scan(codes, lut, ids),
                                   cy.lut_scan(codes, lut, ids), rtol=1e-12)

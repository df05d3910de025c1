import subprocess
import sys

import numpy as np
import pytest

from phraseforge import kernels
from phraseforge.kernels import _scan_py

try:
    from phraseforge.kernels import _scan as _scan_cy
except ImportError:
    _scan_cy = None

BACKENDS = [("python", _scan_py)] + ([("cython", _scan_cy)] if _scan_cy else [])


def random_matrix(n, width, seed, n_dupes=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, width)).astype(np.float32)
    for i in range(n_dupes):
        m[rng.integers(n)] = m[rng.integers(n)]
    return m


def stable_full_sort(scores, k):
    return np.argsort(-scores, kind="stable")[:k]


@pytest.mark.parametrize("name,mod", BACKENDS)
class TestBackendContract:
    def test_topk_matches_full_stable_sort(self, name, mod):
        m = random_matrix(3000, 32, seed=0, n_dupes=50)
        rng = np.random.default_rng(1)
        for k in (1, 7, 100, 2999, 3000):
            q = rng.standard_normal(32)
            scores = mod.dot_scores(m, q)
            want = stable_full_sort(scores, k)
            idx, got_scores = mod.topk_scan(m, q, k)
            assert np.array_equal(idx, want)
            assert np.array_equal(got_scores, scores[want])

    def test_ties_keep_lowest_indices(self, name, mod):
        # Rows 0, 3, 6 identical: the tie at the cut keeps the earliest rows.
        m = np.zeros((8, 4), dtype=np.float32)
        m[[0, 3, 6]] = 1.0
        q = np.ones(4)
        idx, scores = mod.topk_scan(m, q, 2)
        assert idx.tolist() == [0, 3]
        assert scores.tolist() == [4.0, 4.0]

    def test_all_zero_query_is_index_order(self, name, mod):
        m = random_matrix(50, 8, seed=2)
        idx, scores = mod.topk_scan(m, np.zeros(8), 5)
        assert idx.tolist() == [0, 1, 2, 3, 4]
        assert np.all(scores == 0.0)

    def test_k_larger_than_n(self, name, mod):
        m = random_matrix(6, 8, seed=3)
        idx, scores = mod.topk_scan(m, np.ones(8), 50)
        assert len(idx) == 6
        assert np.all(np.diff(scores) <= 0)

    def test_k_zero_rejected(self, name, mod):
        m = random_matrix(4, 8, seed=4)
        with pytest.raises(ValueError):
            mod.topk_scan(m, np.ones(8), 0)

    def test_shape_mismatch_rejected(self, name, mod):
        m = random_matrix(4, 8, seed=5)
        with pytest.raises(ValueError):
            mod.dot_scores(m, np.ones(9))

    def test_float64_accumulation(self, name, mod):
        # Accumulating float32 row values in float32 would lose this signal.
        m = np.array([[2.0 ** 24, 1.0, 1.0, 1.0]], dtype=np.float32)
        scores = mod.dot_scores(m, np.ones(4))
        assert scores[0] == 2.0 ** 24 + 3.0


@pytest.mark.skipif(_scan_cy is None, reason="compiled kernel not built")
class TestCrossBackend:
    def test_rankings_agree_on_random_data(self):
        m = random_matrix(5000, 64, seed=10, n_dupes=100)
        rng = np.random.default_rng(11)
        for _ in range(5):
            q = rng.standard_normal(64)
            i_py, s_py = _scan_py.topk_scan(m, q, 50)
            i_cy, s_cy = _scan_cy.topk_scan(m, q, 50)
            assert np.array_equal(i_py, i_cy)
            np.testing.assert_allclose(s_py, s_cy, rtol=1e-12, atol=1e-12)

    def test_scores_close_to_scalar_loop(self):
        m = random_matrix(40, 16, seed=12)
        q = np.random.default_rng(13).standard_normal(16)
        want = np.array([sum(float(m[i, j]) * q[j] for j in range(16))
                         for i in range(40)])
        np.testing.assert_allclose(_scan_cy.dot_scores(m, q), want, rtol=1e-12)
        np.testing.assert_allclose(_scan_py.dot_scores(m, q), want, rtol=1e-12)


class TestBackendSelection:
    def test_active_backend_is_exposed(self):
        assert kernels.BACKEND_NAME in ("cython", "python")

    @pytest.mark.parametrize("forced", ["python"] + (["cython"] if _scan_cy else []))
    def test_env_var_forces_backend(self, forced):
        code = ("import phraseforge.kernels as k; print(k.BACKEND_NAME)")
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True,
            env={"PATH": "/usr/bin:/bin", "PHRASEFORGE_KERNEL": forced},
        )
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == forced

    def test_bad_env_value_rejected(self):
        code = "import phraseforge.kernels"
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True,
            env={"PATH": "/usr/bin:/bin", "PHRASEFORGE_KERNEL": "turbo"},
        )
        assert out.returncode != 0
        assert "PHRASEFORGE_KERNEL" in out.stderr

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from ckarank import numerics
from ckarank.errors import NumericError, ShapeError


def random_matrix(rng, rows, cols, rank=None):
    if rank is None:
        return rng.standard_normal((rows, cols))
    return rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))


def rel_fro(a, b):
    denom = max(np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


class TestCenterColumns:
    def test_single_column(self):
        np.testing.assert_array_equal(numerics.center_columns([[1.0], [3.0]]), [[-1.0], [1.0]])

    def test_hand_example(self):
        out = numerics.center_columns([[1, 2], [3, 4], [5, 6]])
        np.testing.assert_allclose(out, [[-2, -2], [0, 0], [2, 2]], atol=0)

    def test_idempotent(self):
        m = numerics.center_columns(np.random.default_rng(0).standard_normal((7, 3)))
        np.testing.assert_allclose(numerics.center_columns(m), m, atol=1e-12)

    def test_columns_sum_to_zero(self):
        m = np.random.default_rng(1).standard_normal((11, 5)) * 100 + 7
        assert np.all(np.abs(numerics.center_columns(m).sum(axis=0)) < 1e-10)

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            numerics.center_columns(np.zeros((0, 3)))

    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            numerics.center_columns([[np.nan], [1.0]])


class TestSvd:
    @pytest.mark.parametrize("m, expected", [
        (np.eye(3), [1, 1, 1]),
        (np.diag([3.0, 1.0]), [3, 1]),
        ([[0.0, 2.0], [2.0, 0.0]], [2, 2]),
    ])
    def test_known_spectra(self, m, expected):
        np.testing.assert_allclose(numerics.svd(m).singular_values, expected, atol=1e-14)

    @pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (16, 16), (64, 64), (40, 7)])
    def test_reconstruction_and_orthonormality(self, shape):
        a = random_matrix(np.random.default_rng(sum(shape)), *shape)
        res = numerics.svd(a)
        k = min(shape)
        assert res.singular_values.shape == (k,)
        assert rel_fro(res.reconstruct(), a) < 1e-8
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(k), atol=1e-10)
        np.testing.assert_allclose(res.vt @ res.vt.T, np.eye(k), atol=1e-10)
        assert np.all(np.diff(res.singular_values) <= 0)
        assert np.all(res.singular_values >= 0)

    def test_matches_lapack(self):
        a = random_matrix(np.random.default_rng(3), 20, 12)
        np.testing.assert_allclose(numerics.svd(a).singular_values,
                                   np.linalg.svd(a, compute_uv=False), rtol=1e-12)

    def test_rank_deficient_has_orthonormal_u(self):
        a = random_matrix(np.random.default_rng(4), 8, 6, rank=2)
        res = numerics.svd(a)
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(6), atol=1e-10)
        assert rel_fro(res.reconstruct(), a) < 1e-8

    def test_zero_matrix(self):
        res = numerics.svd(np.zeros((3, 2)))
        np.testing.assert_array_equal(res.singular_values, [0, 0])
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(2), atol=1e-12)

    def test_deterministic(self):
        a = random_matrix(np.random.default_rng(5), 10, 10)
        r1, r2 = numerics.svd(a), numerics.svd(a.copy())
        assert r1.u.tobytes() == r2.u.tobytes()
        assert r1.singular_values.tobytes() == r2.singular_values.tobytes()

    def test_non_convergence_reports_sweeps(self, monkeypatch):
        monkeypatch.setattr(numerics, "MAX_SWEEPS", 1)
        with pytest.raises(NumericError, match="1 sweeps"):
            numerics.svd(random_matrix(np.random.default_rng(6), 6, 6))


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 12), cols=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_svd_reconstruction_property(rows, cols, seed):
    a = random_matrix(np.random.default_rng(seed), rows, cols)
    assert rel_fro(numerics.svd(a).reconstruct(), a) < 1e-8


class TestBestRankR:
    def test_full_rank_is_identity(self):
        a = random_matrix(np.random.default_rng(0), 5, 4)
        assert rel_fro(numerics.best_rank_r(a, 4), a) < 1e-12

    def test_rank_zero(self):
        a = random_matrix(np.random.default_rng(1), 3, 3)
        out = numerics.best_rank_r(a, 0)
        assert not out.any()
        assert np.linalg.norm(a - out) == pytest.approx(np.linalg.norm(a))

    def test_diag_example(self):
        out = numerics.best_rank_r(np.diag([3.0, 1.0]), 1)
        np.testing.assert_allclose(out, np.diag([3.0, 0.0]), atol=1e-14)
        assert np.linalg.norm(np.diag([3.0, 1.0]) - out) == pytest.approx(1.0)

    def test_rank_out_of_range(self):
        with pytest.raises(ValueError):
            numerics.best_rank_r(np.eye(2), 3)

    def test_error_matches_tail_and_is_monotone(self):
        a = random_matrix(np.random.default_rng(2), 9, 7)
        s = np.linalg.svd(a, compute_uv=False)
        errors = []
        for r in range(8):
            approx = numerics.best_rank_r(a, r)
            assert np.linalg.matrix_rank(approx, tol=1e-9) <= r
            err = np.linalg.norm(a - approx)
            assert err == pytest.approx(np.sqrt(np.sum(s[r:] ** 2)), abs=1e-8)
            errors.append(err)
        assert all(x >= y for x, y in zip(errors, errors[1:]))
        assert errors[-1] < 1e-10


def _sphere_points(count):
    # Fibonacci lattice on the unit sphere.
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])


def brute_force_rank_error(a, r):
    """Best rank-r error of a 3x3 matrix by searching over subspaces, no SVD.

    For rank 1 the column space is spanned by a unit vector u and the residual
    is ||a - u u^T a||; for rank 2 it is the complement of a unit normal w and
    the residual is ||w w^T a||. A dense sphere grid is refined by Nelder-Mead.
    """
    if r == 0:
        return np.linalg.norm(a)
    if r == 3:
        return 0.0

    def resid(v):
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        proj = np.outer(v, v) @ a
        return np.linalg.norm(a - proj) if r == 1 else np.linalg.norm(proj)

    pts = _sphere_points(4000)
    start = min(pts, key=resid)
    res = minimize(resid, start, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14,
                                                              "maxiter": 4000})
    return min(res.fun, resid(start))


@pytest.mark.parametrize("seed", range(6))
def test_eckart_young_against_exhaustive_oracle(seed):
    a = np.random.default_rng(seed).integers(-5, 6, size=(3, 3)).astype(float)
    for r in range(4):
        ours = np.linalg.norm(a - numerics.best_rank_r(a, r))
        oracle = brute_force_rank_error(a, r)
        assert ours <= oracle + 1e-9
        assert ours == pytest.approx(oracle, abs=1e-6)


class TestPseudoInverse:
    def test_identity(self):
        np.testing.assert_allclose(numerics.pseudo_inverse(np.eye(3)), np.eye(3), atol=1e-14)

    def test_singular_diag(self):
        np.testing.assert_allclose(numerics.pseudo_inverse(np.diag([2.0, 0.0]), 1e-10),
                                   np.diag([0.5, 0.0]), atol=1e-14)

    @staticmethod
    def check_penrose(a, p):
        assert rel_fro(a @ p @ a, a) < 1e-8
        assert rel_fro(p @ a @ p, p) < 1e-8
        assert rel_fro((a @ p).T, a @ p) < 1e-8
        assert rel_fro((p @ a).T, p @ a) < 1e-8

    def test_rank_one_example(self):
        a = np.array([[1.0, 2.0], [2.0, 4.0]])
        p = numerics.pseudo_inverse(a)
        self.check_penrose(a, p)
        # a = 5 * v v^T with v = (1, 2)/sqrt(5), so a+ = v v^T / 5 = a / 25.
        np.testing.assert_allclose(p, a / 25.0, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_penrose_random_rank_deficient(self, seed):
        rng = np.random.default_rng(seed)
        a = random_matrix(rng, 9, 7, rank=3)
        self.check_penrose(a, numerics.pseudo_inverse(a))

    def test_tol_must_be_positive(self):
        with pytest.raises(ValueError):
            numerics.pseudo_inverse(np.eye(2), 0.0)


class TestConditionNumber:
    def test_examples(self):
        assert numerics.condition_number(np.eye(4)) == pytest.approx(1.0)
        assert numerics.condition_number(np.diag([4.0, 2.0])) == pytest.approx(2.0)
        assert numerics.condition_number([[1.0, 1.0], [0.0, 1.0]]) == pytest.approx((3 + 5 ** 0.5) / 2)

    def test_zero_matrix(self):
        with pytest.raises(NumericError):
            numerics.condition_number(np.zeros((2, 2)))

    def test_drops_null_directions(self):
        assert numerics.condition_number(np.diag([4.0, 2.0, 0.0])) == pytest.approx(2.0)


def test_non_matrix_rejected():
    with pytest.raises(ShapeError):
        numerics.svd(np.zeros(3))


def test_truncation_errors_exhaustive_small():
    s = np.array([3.0, 2.0, 1.0])
    expected = [np.sqrt(14), np.sqrt(5), 1.0, 0.0]
    np.testing.assert_allclose(numerics.truncation_errors(s), expected)
    for r, combo in enumerate(itertools.accumulate([0, *s[::-1] ** 2])):
        assert numerics.truncation_errors(s)[3 - r] == pytest.approx(np.sqrt(combo))

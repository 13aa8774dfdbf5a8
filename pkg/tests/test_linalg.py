import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from manifold_gcd import linalg
from manifold_gcd.linalg import LinalgError


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_svd_diagonal():
    res = linalg.svd(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(res.s, [3.0, 1.0])


def test_svd_permutation_matrix():
    np.testing.assert_allclose(linalg.svd([[0.0, 1.0], [1.0, 0.0]]).s, [1.0, 1.0])


def test_svd_reconstruction_and_orthogonality(rng):
    a = rng.standard_normal((6, 4))
    u, s, vt = linalg.svd(a)
    assert np.linalg.norm(u @ np.diag(s) @ vt - a) / np.linalg.norm(a) < 1e-10
    assert np.abs(u.T @ u - np.eye(4)).max() < 1e-10
    assert np.abs(vt @ vt.T - np.eye(4)).max() < 1e-10
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)


def test_svd_sign_convention_is_deterministic(rng):
    a = rng.standard_normal((5, 7))
    u, _, _ = linalg.svd(a)
    for j in range(u.shape[1]):
        first = u[np.flatnonzero(np.abs(u[:, j]) > 1e-12)[0], j]
        assert first >= 0
    u2, s2, vt2 = linalg.svd(a.copy())
    assert np.array_equal(u, u2) and np.array_equal(s2, linalg.svd(a).s)


def test_svd_rejects_non_finite():
    with pytest.raises(LinalgError):
        linalg.svd([[1.0, np.nan]])


def test_sym_eig_examples():
    w, _ = linalg.sym_eig(np.eye(3))
    np.testing.assert_allclose(w, [1, 1, 1])
    w, _ = linalg.sym_eig(np.diag([0.01, 0.5, 0.49]))
    np.testing.assert_allclose(w, [0.5, 0.49, 0.01])


def test_sym_eig_autocorrelation_psd_and_trace(rng):
    z = rng.standard_normal((20, 6))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    a = z.T @ z / 20
    w, v = linalg.sym_eig(a)
    assert w.min() >= -1e-12
    assert abs(w.sum() - np.trace(a)) < 1e-10
    assert np.abs(a @ v - v * w).max() < 1e-9
    assert np.abs(v.T @ v - np.eye(6)).max() < 1e-10


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(LinalgError):
        linalg.sym_eig([[1.0, 2.0], [0.0, 1.0]])


def test_nuclear_norm_examples():
    assert linalg.nuclear_norm(np.eye(3)) == pytest.approx(3.0)
    assert linalg.nuclear_norm([[1.0, 1.0], [1.0, 1.0]]) == pytest.approx(2.0)


def test_frobenius_examples(rng):
    assert linalg.frobenius_norm(np.zeros((3, 2))) == 0
    assert linalg.frobenius_norm(np.eye(5)) == pytest.approx(np.sqrt(5))
    a = rng.standard_normal((7, 3))
    assert abs(linalg.frobenius_norm(a) - np.sqrt(np.sum(linalg.svd(a).s ** 2))) < 1e-10


def test_dense_kernels(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_array_equal(linalg.matmul(np.eye(3), a), a)
    np.testing.assert_array_equal(linalg.matmul(a, np.eye(4)), a)
    np.testing.assert_array_equal(linalg.transpose(linalg.transpose(a)), a)
    assert np.abs(linalg.matmul(a, b) - naive_matmul(a, b)).max() < 1e-12
    np.testing.assert_array_equal(linalg.row_slice(a, 1, 3), a[1:3])
    np.testing.assert_array_equal(linalg.add(a, a), linalg.scale(a, 2))
    with pytest.raises(LinalgError):
        linalg.matmul(a, a)
    with pytest.raises(LinalgError):
        linalg.add(a, b)


def test_unit_row_nuclear_norm_bound(rng):
    for _ in range(1000):
        p, d = rng.integers(1, 33, size=2)
        c = rng.standard_normal((p, d))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        nuc = linalg.nuclear_norm(c)
        assert 0 <= nuc <= np.sqrt(p * min(p, d)) + 1e-9


def test_singular_values_match_eigenvalues_of_gram(rng):
    for _ in range(20):
        a = rng.standard_normal((8, 5))
        s = linalg.svd(a).s
        w, _ = linalg.sym_eig(a.T @ a)
        np.testing.assert_allclose(s, np.sqrt(np.clip(w, 0, None)), atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(-10, 10)), st.integers(0, 2**32 - 1))
def test_nuclear_norm_invariances(a, seed):
    r = np.random.default_rng(seed)
    base = linalg.nuclear_norm(a)
    tol = 1e-9 * max(1.0, base)
    assert abs(linalg.nuclear_norm(a[r.permutation(5)][:, r.permutation(4)]) - base) < tol
    q_left, q_right = linalg.random_orthogonal(5, r), linalg.random_orthogonal(4, r)
    assert abs(linalg.nuclear_norm(q_left @ a @ q_right) - base) < tol

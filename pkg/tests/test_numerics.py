import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import crandn
from rtbse.errors import ShapeMismatch, SingularMatrix
from rtbse.numerics import (TOL, gauss_solve, invert_small, jacobi_eigh, smallest_eigvec,
                            solve_column)


def test_invert_identity():
    np.testing.assert_array_equal(invert_small(np.eye(4)), np.eye(4))


def test_invert_diagonal():
    np.testing.assert_allclose(invert_small(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]), atol=1e-15)


def test_invert_multiply_back(rng):
    for _ in range(20):
        m = crandn(rng, 4, 4) + 2 * np.eye(4)
        np.testing.assert_allclose(m @ invert_small(m), np.eye(4), atol=1e-10)


def test_invert_stack_matches_numpy(rng):
    m = crandn(rng, 50, 3, 3)
    np.testing.assert_allclose(invert_small(m), np.linalg.inv(m), rtol=1e-9, atol=1e-9)


def test_invert_residual_bound(rng):
    m = crandn(rng, 100, 5, 5)
    res = np.linalg.norm(m @ invert_small(m) - np.eye(5), axis=(1, 2))
    assert np.all(res <= 1e-9 * np.linalg.norm(m, axis=(1, 2)))


def test_singular_raises():
    with pytest.raises(SingularMatrix):
        invert_small(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularMatrix):
        invert_small(np.zeros((3, 3)))


def test_gauss_solve_flags_only_bad_members():
    m = np.stack([np.eye(2), np.zeros((2, 2)), 3 * np.eye(2)])
    x, ok = gauss_solve(m, np.ones((3, 2, 1)))
    assert ok.tolist() == [True, False, True]
    np.testing.assert_allclose(x[2, :, 0], [1 / 3, 1 / 3])
    assert np.all(x[1] == 0)


def test_shape_checks():
    with pytest.raises(ShapeMismatch):
        invert_small(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        invert_small(np.eye(TOL.max_dim + 1))


def test_solve_column_examples():
    np.testing.assert_array_equal(solve_column(np.eye(4), 2), np.eye(4)[2])
    np.testing.assert_allclose(solve_column(np.diag([2.0, 4.0]), 0), [0.5, 0.0])


def test_solve_column_matches_inverse(rng):
    m = crandn(rng, 4, 4)
    inv = np.linalg.inv(m)
    for n in range(4):
        np.testing.assert_allclose(solve_column(m, n), inv[:, n], atol=1e-10)


def test_solve_column_index_range():
    with pytest.raises(IndexError):
        solve_column(np.eye(3), 3)


def test_smallest_eigvec_examples():
    np.testing.assert_allclose(smallest_eigvec(np.diag([1.0, 2.0, 3.0])), [1, 0, 0], atol=1e-14)
    m = np.diag([1.0, 1.0, 0.0])
    np.testing.assert_allclose(smallest_eigvec(m), [0, 0, 1], atol=1e-14)


def test_smallest_eigvec_rank_deficient(rng):
    for m_size in (2, 3, 4, 6):
        a = crandn(rng, m_size, m_size - 1)
        m = a @ a.conj().T
        v = smallest_eigvec(m)
        assert np.linalg.norm(m @ v) <= 1e-8 * np.linalg.norm(m)
        assert abs(np.linalg.norm(v) - 1) <= 1e-12
        k = np.argmax(np.abs(v))
        assert v[k].imag == 0 and v[k].real >= 0


def test_jacobi_matches_numpy(rng):
    a = crandn(rng, 30, 4, 4)
    h = a @ np.conj(np.swapaxes(a, 1, 2))
    w, v = jacobi_eigh(h)
    np.testing.assert_allclose(w, np.linalg.eigvalsh(h), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(h @ v, v * w[:, None, :], atol=1e-10)


def test_jacobi_rejects_non_hermitian():
    with pytest.raises(ValueError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_double_inverse(m, seed):
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(crandn(rng, m, m))
    s = np.logspace(0, rng.uniform(0, 6), m)
    mat = (u * s) @ np.linalg.qr(crandn(rng, m, m))[0]
    back = invert_small(invert_small(mat))
    assert np.linalg.norm(back - mat) <= 1e-8 * np.linalg.norm(mat)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_solve_column_agrees_with_inverse(m, seed):
    rng = np.random.default_rng(seed)
    mat = crandn(rng, m, m) + np.eye(m)
    inv = invert_small(mat)
    for n in range(m):
        np.testing.assert_allclose(solve_column(mat, n), inv[:, n], rtol=1e-9, atol=1e-9)

"""Dense kernels for stacks of small complex matrices.

Every function accepts a single ``(M, M)`` matrix or a stack ``(..., M, M)``
and loops over the matrix dimension only, so a whole frequency axis is
processed with a handful of vectorized numpy calls.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, ShapeMismatch, SingularMatrix


@dataclass(frozen=True)
class Tolerances:
    max_dim: int = 16
    cond_max: float = 1e12
    hermitian_atol: float = 1e-12
    jacobi_tol: float = 1e-15
    jacobi_max_sweeps: int = 60


TOL = Tolerances()


def _check_square(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeMismatch(f"expected square matrices, got shape {m.shape}")
    if not 1 <= m.shape[-1] <= TOL.max_dim:
        raise ShapeMismatch(f"matrix size {m.shape[-1]} outside [1, {TOL.max_dim}]")
    return m


def gauss_solve(a, b, cond_max=None):
    """Solve ``a @ x = b`` by Gaussian elimination with partial pivoting.

    Parameters
    ----------
    a: ndarray (..., M, M)
        Stack of square matrices.
    b: ndarray (..., M, K)
        Right-hand sides.
    cond_max: float, optional
        A pivot smaller than ``max|a| / cond_max`` flags the matrix as singular.

    Returns
    -------
    x: ndarray (..., M, K)
        Solutions; rows of flagged matrices are filled with zeros.
    ok: ndarray of bool (...)
        False where the matrix was numerically singular.
    """
    a = _check_square(a)
    cond_max = TOL.cond_max if cond_max is None else cond_max
    b = np.asarray(b)
    n = a.shape[-1]
    batch = a.shape[:-2]
    n_rhs = b.shape[-1]
    dtype = np.result_type(a.dtype, b.dtype, np.float64)
    aug = np.empty(batch + (n, n + n_rhs), dtype=dtype)
    aug[..., :n] = a
    aug[..., n:] = b
    aug = aug.reshape((-1,) + aug.shape[-2:])
    scale = np.abs(aug[:, :, :n]).max(axis=(1, 2))
    ok = np.isfinite(scale) & (scale > 0)
    thresh = scale / cond_max

    for k in range(n):
        if k < n - 1:
            piv = k + np.argmax(np.abs(aug[:, k:, k]), axis=1)
            swap = np.nonzero(piv != k)[0]
            if swap.size:
                pk = piv[swap]
                top = aug[swap, k].copy()
                aug[swap, k] = aug[swap, pk]
                aug[swap, pk] = top
        pivot = aug[:, k, k]
        bad = ~(np.abs(pivot) > thresh)
        ok &= ~bad
        aug[:, k, k:] *= (1.0 / np.where(bad, 1.0, pivot))[:, None]
        if k + 1 < n:
            # entries left of the diagonal are never read again, so only the trailing block is updated
            aug[:, k + 1:, k + 1:] -= aug[:, k + 1:, k, None] * aug[:, k, None, k + 1:]

    x = aug[:, :, n:]
    for k in range(n - 1, 0, -1):
        x[:, :k] -= aug[:, :k, k, None] * x[:, k, None, :]

    x[~ok] = 0.0
    return x.reshape(batch + x.shape[-2:]), ok.reshape(batch)


def invert_small(m):
    """Inverse of a (stack of) small square matrix.

    Raises
    ------
    SingularMatrix
        If any matrix in the stack has a pivot below the conditioning threshold.
    """
    m = _check_square(m)
    eye = np.broadcast_to(np.eye(m.shape[-1]), m.shape)
    inv, ok = gauss_solve(m, eye)
    if not np.all(ok):
        raise SingularMatrix(f"{np.size(ok) - np.count_nonzero(ok)} singular matrices in stack")
    return inv


def solve_column(m, n: int):
    """Return ``m^{-1} e_n``, i.e. column ``n`` of the inverse, without forming it."""
    m = _check_square(m)
    size = m.shape[-1]
    if not 0 <= n < size:
        raise IndexError(f"column {n} out of range for size {size}")
    e = np.zeros((size, 1))
    e[n] = 1.0
    x, ok = gauss_solve(m, e)
    if not np.all(ok):
        raise SingularMatrix("singular matrix in solve_column")
    return x[..., 0]


def _check_hermitian(m):
    m = _check_square(m)
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - np.conj(np.swapaxes(m, -1, -2))).max(initial=0.0) > TOL.hermitian_atol * scale:
        raise ValueError("matrix is not Hermitian")
    return 0.5 * (m + np.conj(np.swapaxes(m, -1, -2)))


def jacobi_eigh(m):
    """Eigen-decomposition of Hermitian matrices by cyclic complex Jacobi sweeps.

    Returns eigenvalues in ascending order with the matching unit eigenvectors
    as columns, like ``numpy.linalg.eigh``.
    """
    a = _check_hermitian(m).astype(complex)
    batch = a.shape[:-2]
    n = a.shape[-1]
    a = a.reshape((-1, n, n)).copy()
    v = np.broadcast_to(np.eye(n, dtype=complex), a.shape).copy()
    norm = np.sqrt((np.abs(a) ** 2).sum(axis=(1, 2)))
    iu = np.triu_indices(n, 1)

    for _ in range(TOL.jacobi_max_sweeps):
        off = np.sqrt(2.0 * (np.abs(a[:, iu[0], iu[1]]) ** 2).sum(axis=1))
        if np.all(off <= TOL.jacobi_tol * norm):
            break
        for p, q in zip(*iu):
            apq = a[:, p, q]
            mag = np.abs(apq)
            active = mag > 0
            safe = np.where(active, mag, 1.0)
            phase = np.where(active, apq / safe, 1.0)
            tau = (a[:, q, q].real - a[:, p, p].real) / (2.0 * safe)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau**2))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = t * c
            rot = np.empty((a.shape[0], 2, 2), dtype=complex)
            rot[:, 0, 0] = c
            rot[:, 0, 1] = s
            rot[:, 1, 0] = -s * np.conj(phase)
            rot[:, 1, 1] = c * np.conj(phase)
            idx = [p, q]
            a[:, :, idx] = a[:, :, idx] @ rot
            a[:, idx, :] = np.conj(np.swapaxes(rot, 1, 2)) @ a[:, idx, :]
            v[:, :, idx] = v[:, :, idx] @ rot
    else:
        off = np.sqrt(2.0 * (np.abs(a[:, iu[0], iu[1]]) ** 2).sum(axis=1))
        if not np.all(off <= 1e3 * TOL.jacobi_tol * np.maximum(norm, 1e-300)):
            raise ConvergenceFailure("Jacobi sweeps did not converge")

    w = np.real(np.diagonal(a, axis1=1, axis2=2))
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return w.reshape(batch + (n,)), v.reshape(batch + (n, n))


def fix_phase(v):
    """Rotate vectors (last axis) so their largest-magnitude entry is real nonnegative."""
    v = np.asarray(v)
    k = np.argmax(np.abs(v), axis=-1)
    lead = np.take_along_axis(v, k[..., None], axis=-1)
    mag = np.abs(lead)
    out = v * np.where(mag > 0, np.conj(lead) / np.where(mag > 0, mag, 1.0), 1.0)
    # exact real lead entry instead of one carrying rounding residue
    np.put_along_axis(out, k[..., None], mag.astype(out.dtype), axis=-1)
    return out


def smallest_eigvec(m):
    """Unit eigenvector of the smallest eigenvalue of a Hermitian PSD matrix.

    The phase is fixed so that the largest-magnitude entry is real and
    nonnegative, which makes the result deterministic.
    """
    _, vecs = jacobi_eigh(m)
    v = vecs[..., :, 0]
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return fix_phase(v)

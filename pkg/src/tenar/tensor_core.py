"""Dense tensor algebra on numpy arrays.

Tensors are plain ``numpy.ndarray`` objects of shape ``(d_1, ..., d_K)``.
Vectorization is first-index-fastest (Fortran order), so ``vec(x)`` lists
entry ``(i_1, ..., i_K)`` at flat position ``i_1 + i_2 d_1 + i_3 d_1 d_2 + ...``.
Every matricization, permutation and rearrangement below is defined with
respect to that layout. Modes are numbered from 0.
"""

from __future__ import annotations

from functools import reduce
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, eigs

from .errors import ConvergenceError, ValidationError

DENSE_EIG_LIMIT = 512


def vec(x: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization (first index fastest)."""
    return np.asarray(x).reshape(-1, order="F")


def unvec(v: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`vec`."""
    dims = tuple(int(d) for d in dims)
    v = np.asarray(v)
    if v.size != int(np.prod(dims)):
        raise ValidationError(f"cannot fold {v.size} entries into dims {dims}")
    return v.reshape(dims, order="F")


def _check_mode(k: int, K: int) -> None:
    if not 0 <= k < K:
        raise ValidationError(f"mode {k} out of range for an order-{K} tensor")


def matricize(x: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` unfolding ``X_(k)`` of shape ``d_k x (d / d_k)``.

    Entry ``(i_1, ..., i_K)`` lands in row ``i_k`` and column
    ``sum_{s != k} i_s J_s`` with ``J_s`` the product of the dimensions
    ``d_l`` for ``l < s, l != k``. Moving mode ``k`` to the front and
    reshaping the remainder in Fortran order realizes exactly that column index.
    """
    x = np.asarray(x)
    _check_mode(k, x.ndim)
    return np.moveaxis(x, k, 0).reshape(x.shape[k], -1, order="F")


def fold(m: np.ndarray, k: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize` for a tensor of shape ``dims``."""
    dims = tuple(int(d) for d in dims)
    _check_mode(k, len(dims))
    m = np.asarray(m)
    rest = dims[:k] + dims[k + 1:]
    if m.shape != (dims[k], int(np.prod(rest))):
        raise ValidationError(f"matrix of shape {m.shape} does not unfold dims {dims} along mode {k}")
    return np.moveaxis(m.reshape((dims[k],) + rest, order="F"), 0, k)


def mode_dot(arr: np.ndarray, a: np.ndarray, axis: int) -> np.ndarray:
    """Contract ``arr`` along ``axis`` with the columns of ``a`` (no validation).

    Works on stacked tensors: ``axis`` is a numpy axis, not a model mode.
    """
    return np.moveaxis(np.tensordot(a, arr, axes=(1, axis)), 0, axis)


def mode_product(x: np.ndarray, a: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` product ``x x_k a``; satisfies ``(x x_k a)_(k) = a @ X_(k)``."""
    x = np.asarray(x)
    a = np.asarray(a)
    _check_mode(k, x.ndim)
    if a.ndim != 2 or a.shape[1] != x.shape[k]:
        raise ValidationError(
            f"matrix of shape {a.shape} cannot multiply mode {k} of size {x.shape[k]}"
        )
    return mode_dot(x, a, k)


def multi_mode_product(x: np.ndarray, mats: Sequence[np.ndarray], skip: int | None = None) -> np.ndarray:
    """``x x_1 A_1 x_2 ... x_K A_K``, optionally leaving mode ``skip`` untouched."""
    out = np.asarray(x)
    for k, a in enumerate(mats):
        if k != skip:
            out = mode_product(out, a, k)
    return out


def kron_chain(mats: Sequence[np.ndarray]) -> np.ndarray:
    """``A_K kron ... kron A_1`` for ``mats = [A_1, ..., A_K]``."""
    if len(mats) == 0:
        raise ValidationError("kron_chain needs at least one matrix")
    return reduce(lambda acc, a: np.kron(a, acc), mats[1:], np.asarray(mats[0]))


def outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product ``a_1 o a_2 o ... o a_K``."""
    return reduce(np.multiply.outer, [np.asarray(v) for v in vectors])


# Permutation matrices are carried as index maps ``idx`` with ``P @ v == v[idx]``.

def perm_P_index(m: int, n: int) -> np.ndarray:
    """Index map of ``P_{m,n} = sum_{i<=n, j<=m} U_ij kron U_ij'`` (``U_ij`` is n x m)."""
    if m < 1 or n < 1:
        raise ValidationError("perm_P needs m, n >= 1")
    i, j = np.divmod(np.arange(m * n), m)
    return j * n + i


def perm_Q_index(k: int, dims: Sequence[int]) -> np.ndarray:
    """Index map of ``Q_k``: ``vec(X_(k)) == vec(x)[perm_Q_index(k, dims)]``."""
    dims = tuple(int(d) for d in dims)
    _check_mode(k, len(dims))
    positions = np.arange(int(np.prod(dims))).reshape(dims, order="F")
    return vec(matricize(positions, k))


def dense_permutation(idx: np.ndarray) -> np.ndarray:
    """Materialize the 0/1 matrix whose action is ``v -> v[idx]``."""
    n = len(idx)
    out = np.zeros((n, n))
    out[np.arange(n), idx] = 1.0
    return out


def perm_P(m: int, n: int) -> np.ndarray:
    return dense_permutation(perm_P_index(m, n))


def perm_Q(k: int, dims: Sequence[int]) -> np.ndarray:
    return dense_permutation(perm_Q_index(k, dims))


def rearrange_phi(phi: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Rearrange a ``d x d`` matrix into an order-K tensor of dims ``(d_1^2, ..., d_K^2)``.

    ``rearrange_phi(kron_chain([A_1, ..., A_K])) == outer([vec(A_1), ..., vec(A_K)])``.
    Pure index permutation: entry ``(row(i), col(j))`` of ``phi`` goes to
    ``(i_1 + d_1 j_1, ..., i_K + d_K j_K)``.
    """
    dims = tuple(int(d) for d in dims)
    K = len(dims)
    d = int(np.prod(dims))
    phi = np.asarray(phi)
    if phi.shape != (d, d):
        raise ValidationError(f"expected a {d}x{d} matrix for dims {dims}, got {phi.shape}")
    t = phi.reshape(dims + dims, order="F")
    order = [ax for k in range(K) for ax in (k, K + k)]
    return t.transpose(order).reshape(tuple(dk * dk for dk in dims), order="F")


def rearrange_phi_inv(t: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`rearrange_phi`."""
    dims = tuple(int(d) for d in dims)
    K = len(dims)
    d = int(np.prod(dims))
    t = np.asarray(t)
    if t.shape != tuple(dk * dk for dk in dims):
        raise ValidationError(f"tensor of shape {t.shape} does not match dims {dims}")
    pairs = t.reshape(tuple(x for dk in dims for x in (dk, dk)), order="F")
    order = [2 * k for k in range(K)] + [2 * k + 1 for k in range(K)]
    return pairs.transpose(order).reshape((d, d), order="F")


def spectral_radius(m: np.ndarray, tol: float = 1e-8, max_iter: int | None = None) -> float:
    """Largest eigenvalue modulus.

    Dense eigensolve up to ``DENSE_EIG_LIMIT`` rows, implicitly restarted
    Arnoldi (ARPACK) above that. Raises :class:`ConvergenceError` carrying the
    best available estimate if the iterative solver stalls.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"spectral radius needs a square matrix, got {m.shape}")
    n = m.shape[0]
    if n == 0:
        return 0.0
    if n <= DENSE_EIG_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(m))))
    try:
        vals = eigs(m, k=1, which="LM", tol=tol, maxiter=max_iter, return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        best = float(np.max(np.abs(exc.eigenvalues))) if len(exc.eigenvalues) else None
        raise ConvergenceError("spectral radius iteration did not converge", estimate=best) from exc
    return float(np.abs(vals[0]))

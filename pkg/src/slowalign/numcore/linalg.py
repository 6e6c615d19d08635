"""Small dense linear algebra: Cholesky with jitter, Jacobi eigensolver, top-k SVD."""
from __future__ import annotations

import numpy as np

from ..errors import ContractViolation, NotPositiveDefiniteError, NumericalFailure

JITTER_SCHEDULE = (1e-10, 1e-8, 1e-6)


def _check_symmetric(S, tol=1e-9):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {S.shape}")
    scale = 1.0 + np.abs(S).max(initial=0.0)
    if np.abs(S - S.T).max(initial=0.0) > tol * scale:
        raise ContractViolation("matrix is not symmetric")
    return S


def cholesky(S):
    """Lower-triangular L with L @ L.T == S.

    Raises NotPositiveDefiniteError on a non-positive pivot.
    """
    S = _check_symmetric(S)
    d = S.shape[0]
    L = np.zeros_like(S)
    floor = d * np.finfo(np.float64).eps * max(np.abs(np.diag(S)).max(initial=0.0), 0.0)
    for j in range(d):
        pivot = S[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > floor:
            raise NotPositiveDefiniteError(f"non-positive pivot {pivot:.3e} at column {j}")
        L[j, j] = np.sqrt(pivot)
        if j + 1 < d:
            L[j + 1:, j] = (S[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def cholesky_jittered(S, schedule=JITTER_SCHEDULE):
    """Cholesky factor of ``S``, retrying with ``eps * tr(S)/d * I`` added on failure.

    An all-zero matrix uses unit scale for the jitter, so it still factors.
    """
    S = _check_symmetric(S)
    try:
        return cholesky(S), 0.0
    except NotPositiveDefiniteError:
        pass
    d = S.shape[0]
    scale = np.trace(S) / d
    if not scale > 0:
        scale = 1.0
    for eps in schedule:
        jitter = eps * scale
        try:
            return cholesky(S + jitter * np.eye(d)), jitter
        except NotPositiveDefiniteError:
            continue
    raise NumericalFailure("covariance is not positive definite after the full jitter schedule")


def jacobi_eigh(S, tol=1e-12, max_sweeps=None):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted.
    """
    A = _check_symmetric(S).copy()
    d = A.shape[0]
    V = np.eye(d)
    if d == 1:
        return np.diag(A).copy(), V
    if max_sweeps is None:
        max_sweeps = 100 * d
    total = np.linalg.norm(A)
    if total == 0.0:
        return np.zeros(d), V
    iu = np.triu_indices(d, 1)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (A[iu] ** 2).sum())
        if off <= tol * total:
            return np.diag(A).copy(), V
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    raise NumericalFailure(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def _fix_signs(rows):
    for r in rows:
        nz = np.flatnonzero(np.abs(r) > 1e-12)
        if nz.size and r[nz[0]] < 0:
            r *= -1.0
    return rows


def svd_topk(W, k):
    """Top-k singular values and right singular vectors (as rows) of ``W``.

    Works on the eigendecomposition of ``W.T @ W``; left vectors are never formed.
    Each row's first non-negligible entry is made non-negative.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ContractViolation("svd_topk expects a matrix")
    if not isinstance(k, (int, np.integer)) or k < 1 or k > min(W.shape):
        raise ContractViolation(f"k must be in [1, {min(W.shape)}], got {k!r}")
    G = W.T @ W
    G = 0.5 * (G + G.T)
    _, vecs = jacobi_eigh(G)
    sig = np.linalg.norm(W @ vecs, axis=0)
    order = np.argsort(-sig, kind="stable")[:k]
    V = _fix_signs(vecs[:, order].T.copy())
    return sig[order], V

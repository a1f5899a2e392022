"""Dense symmetric linear algebra: Gram products, Jacobi eigendecomposition,
power iteration and matrix exponentials.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  The helpers
``as_matrix`` and ``as_symmetric`` enforce the finiteness/symmetry contract
at module boundaries.
"""

from typing import NamedTuple

import numpy as np

from .errors import InputValidationError, NumericalError

SYMMETRY_RTOL = 1e-12
_RESTART_SEED = 0x5EED_0F_E16


class EigenDecomp(NamedTuple):
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # column j pairs with eigenvalues[j]


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InputValidationError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputValidationError(f"{name} contains non-finite entries")
    return a


def as_symmetric(a, name="matrix"):
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise InputValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.abs(a - a.T) <= SYMMETRY_RTOL * np.maximum(1.0, np.abs(a))):
        raise InputValidationError(f"{name} is not symmetric")
    return a


def gram(J):
    """Return ``J @ J.T`` as an exactly symmetric matrix."""
    J = as_matrix(J, "J")
    if J.shape[0] < 1:
        raise InputValidationError("J must have at least one row")
    G = J @ J.T
    return 0.5 * (G + G.T)


def _fix_signs(Q):
    # largest-magnitude component of each eigenvector is made positive
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs


def _off_norm(A):
    # direct sum over the strict upper triangle; sum(A*A) - sum(diag**2)
    # cancels catastrophically once the off-diagonal part is tiny
    return np.sqrt(2.0 * np.sum(np.square(np.triu(A, 1))))


def sym_eig(M, max_sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back in descending order.  Eigenvector signs are fixed
    so the largest-magnitude entry of each column is positive, which makes
    the output a deterministic function of the input.
    """
    A = as_symmetric(M, "M").copy()
    n = A.shape[0]
    if n < 1:
        raise InputValidationError("dimension must be >= 1")
    V = np.eye(n)
    scale = np.linalg.norm(A)
    target = 1e-15 * scale
    off = 0.0
    for _ in range(max_sweeps):
        off = _off_norm(A)
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                if abs(apq) <= 1e-18 * (abs(A[p, p]) + abs(A[q, q])):
                    A[p, q] = A[q, p] = 0.0  # below rounding of the diagonal
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp = A[p, :].copy()
                rq = A[q, :]
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp = A[:, p].copy()
                cq = A[:, q]
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = _off_norm(A)
        if off > target:
            raise NumericalError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {off:.3e})",
                residual=off,
            )
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return EigenDecomp(w[order], _fix_signs(V[:, order]))


def _squaring_stack(A, tol_s, max_iters, first_check=64):
    """Repeated squaring of a stack of PSD matrices scaled to unit Frobenius norm.

    After s squarings ``P = A**p / trace(A**p)`` with ``p = 2**s``, and
    ``trace(A P)`` climbs monotonically to the largest eigenvalue.  Once
    ``p >= first_check``, a squaring that moves it by at most ``tol_s``
    (per-matrix tolerance in scaled units) ends the loop.  Returns the
    estimates, the final P stack and a converged mask.
    """
    P = A
    p = 1
    rq_prev = None
    while True:
        P = P @ P
        P /= P.trace(axis1=1, axis2=2)[:, None, None]
        p *= 2
        if 2 * p < first_check:
            continue
        rq = np.einsum("bij,bji->b", A, P)
        if rq_prev is not None:
            converged = np.abs(rq - rq_prev) <= tol_s
            if p > max_iters or converged.all():
                return rq, P, converged
        rq_prev = rq


def _unit_start(n):
    return np.full(n, 1.0 / np.sqrt(n))


def _dominant_vectors(P):
    """Unit vectors in the range of each (nearly rank-one) P.

    Applies P to the all-ones start; where that lands numerically orthogonal
    to the dominant eigenspace, retries from a fixed-seed random vector and
    finally takes P's heaviest column.
    """
    b, n, _ = P.shape
    v = P @ _unit_start(n)
    nv = np.linalg.norm(v, axis=1)
    bad = nv < 1e-8
    if bad.any():
        r = np.random.default_rng(_RESTART_SEED).standard_normal(n)
        r /= np.linalg.norm(r)
        v[bad] = P[bad] @ r
        nv[bad] = np.linalg.norm(v[bad], axis=1)
        still = np.flatnonzero(nv < 1e-8)
        for i in still:
            j = int(np.argmax(np.diagonal(P[i])))
            v[i] = P[i][:, j]
            nv[i] = np.linalg.norm(v[i])
    return v / nv[:, None]


def max_eigenvalues(Ms, tol=1e-10, max_iters=10_000, vectors=True):
    """Dominant eigenpairs of a stack of symmetric PSD matrices.

    ``Ms`` has shape (b, n, n).  Returns ``(lambdas, vectors)`` with shapes
    (b,) and (b, n); ``vectors`` is None when not requested.  Power
    iteration runs as repeated squaring, so ``max_iters`` bounds the
    effective power reached (one round past it at most).
    """
    Ms = np.asarray(Ms, dtype=np.float64)
    if Ms.ndim != 3 or Ms.shape[1] != Ms.shape[2]:
        raise InputValidationError(f"expected a (b, n, n) stack, got shape {Ms.shape}")
    b, n, _ = Ms.shape
    if n == 0:
        raise InputValidationError("dimension must be >= 1")
    if tol <= 0:
        raise InputValidationError("tol must be positive")
    if not np.all(np.isfinite(Ms)):
        raise InputValidationError("matrix contains non-finite entries")
    lams = np.zeros(b)
    vecs = np.tile(_unit_start(n), (b, 1)) if vectors else None
    scale = np.sqrt(np.einsum("bij,bij->b", Ms, Ms))
    if not (np.all(np.isfinite(scale)) and np.all(scale > 1e-150)):
        # squares over- or underflowed; rescale by the largest entry first
        amax = np.max(np.abs(Ms), axis=(1, 2))
        R = Ms / np.where(amax > 0, amax, 1.0)[:, None, None]
        scale = amax * np.sqrt(np.einsum("bij,bij->b", R, R))
    live = scale > 0
    if not live.any():
        return lams, vecs
    if live.all():
        A, sc = Ms / scale[:, None, None], scale
    else:
        idx = np.flatnonzero(live)
        A, sc = Ms[idx] / scale[idx, None, None], scale[idx]
    # |lambda - est| <= tol * max(1, lambda) in original units, and
    # lambda >= scale / sqrt(n)
    tol_s = tol * np.maximum(1.0, sc / np.sqrt(n)) / sc
    if np.any(np.einsum("bii->b", A) <= 0):
        raise InputValidationError("matrix is not positive semi-definite (non-positive trace)")
    lam, P, ok = _squaring_stack(A, tol_s, max_iters)
    if not ok.all():
        j = int(np.flatnonzero(~ok)[0])
        last = float(lam[j] * sc[j])
        raise NumericalError(
            f"power iteration did not converge within {max_iters} iterations "
            f"(last Rayleigh quotient {last!r})",
            residual=last,
        )
    if live.all():
        lams = lam * sc
        if vectors:
            vecs = _dominant_vectors(P)
    else:
        lams[idx] = lam * sc
        if vectors:
            vecs[idx] = _dominant_vectors(P)
    return lams, vecs


def max_eigenpair(M, tol=1e-10, max_iters=10_000):
    """Largest eigenvalue and a unit eigenvector of a symmetric PSD matrix."""
    M = as_symmetric(M, "M")
    if M.shape[0] == 0:
        raise InputValidationError("dimension must be >= 1")
    lams, vecs = max_eigenvalues(M[None], tol=tol, max_iters=max_iters)
    return float(lams[0]), vecs[0]


def sym_exp(M, s):
    """``Q exp(s*Lambda) Q^T`` for symmetric ``M``; exactly the identity at s=0."""
    if not np.isfinite(s):
        raise InputValidationError("s must be finite")
    M = as_symmetric(M, "M")
    if s == 0:
        return np.eye(M.shape[0])
    w, Q = sym_eig(M)
    E = (Q * np.exp(s * w)) @ Q.T
    return 0.5 * (E + E.T)

"""Dense matrix primitives used throughout the package.

Everything here works on ``numpy`` arrays. Inputs may be stored as 32-bit
floats; all decompositions and projections are accumulated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ThinSVD",
    "RankDeficientError",
    "as_matrix",
    "thin_svd",
    "truncate_svd",
    "orthogonalize",
    "cosine_similarity",
    "softmax_neg",
    "project_residual",
]

# smallest/largest singular value ratio below which orthogonalize refuses
RANK_RTOL = 1e-8


class RankDeficientError(ValueError):
    """Raised when a matrix expected to have full column rank does not."""


@dataclass(frozen=True)
class ThinSVD:
    """Thin singular value decomposition ``M = U @ diag(S) @ V.T``.

    ``U`` is ``m x r``, ``S`` has length ``r`` and ``V`` is ``n x r``.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.S.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.U.shape[0], self.V.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float64 array or raise ``ValueError``."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if A.shape[0] == 0 or A.shape[1] == 0:
        raise ValueError(f"{name} must have positive dimensions, got {A.shape}")
    if not np.all(np.isfinite(A)):
        bad = np.argwhere(~np.isfinite(A))[0]
        raise ValueError(f"{name} contains a non-finite value at {tuple(int(i) for i in bad)}")
    return A


def _fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of each U column made non-negative; argmax
    # returns the lowest row index on ties
    if U.shape[1] == 0:
        return U, V
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, V * signs


def thin_svd(M) -> ThinSVD:
    """Exact thin SVD with a deterministic sign convention.

    Singular values come back non-increasing. For each singular pair the
    entry of largest magnitude in the ``U`` column is made non-negative,
    so repeated calls on the same input are bit-identical.
    """
    A = as_matrix(M)
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    U, V = _fix_signs(U, Vt.T)
    return ThinSVD(U=U, S=S, V=V)


def truncate_svd(svd: ThinSVD, k: int) -> ThinSVD:
    """Keep the leading ``k`` singular triplets (best rank-``k`` approximation)."""
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise TypeError(f"k must be an integer, got {type(k).__name__}")
    if k < 1 or k > svd.rank:
        raise ValueError(f"k must be in [1, {svd.rank}], got {k}")
    return ThinSVD(U=svd.U[:, :k], S=svd.S[:k], V=svd.V[:, :k])


def orthogonalize(M) -> np.ndarray:
    """Nearest matrix with orthonormal columns (the polar factor).

    For ``M = P diag(s) Q.T`` this returns ``P @ Q.T``, the minimiser of
    ``||M - X||_F`` over all ``X`` with ``X.T @ X = I``.

    Raises
    ------
    RankDeficientError
        If ``M`` has more columns than rows or its smallest singular value is
        at most ``1e-8`` times the largest.
    """
    A = as_matrix(M)
    m, p = A.shape
    if p > m:
        raise RankDeficientError(f"cannot orthogonalize {m}x{p}: more columns than rows")
    P, s, Qt = np.linalg.svd(A, full_matrices=False)
    if s[0] == 0.0 or s[-1] <= RANK_RTOL * s[0]:
        raise RankDeficientError(
            f"matrix is rank deficient: smallest singular value {s[-1]:.3e} "
            f"vs largest {s[0]:.3e} (ratio {s[-1] / s[0] if s[0] else 0.0:.3e}, "
            f"cutoff {RANK_RTOL:g})"
        )
    return P @ Qt


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax_neg(r, temperature: float = 1.0) -> np.ndarray:
    """Softmax of negated residuals, ``exp(-r/t) / sum(exp(-r/t))``.

    Shifted by ``min(r)`` before exponentiation, so adding a constant to every
    residual leaves the output unchanged.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("softmax of an empty residual vector")
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals must be finite")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    e = np.exp(-(r - r.min()) / temperature)
    return e / e.sum()


def project_residual(z, V) -> float:
    """``||z - V V^T z||_2`` for ``V`` with orthonormal columns."""
    z = np.asarray(z, dtype=np.float64).ravel()
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != z.shape[0]:
        raise ValueError(f"dimension mismatch: z has length {z.shape[0]}, basis has shape {V.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    return float(np.linalg.norm(z - V @ (V.T @ z)))

"""Dense linear algebra on small float64 matrices.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The SVD is a
one-sided (Hestenes) Jacobi iteration, chosen because it is short, accurate to
working precision and fully deterministic for a given input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

MAX_SWEEPS = 100
OFF_DIAGONAL_TOL = 1e-12
DEFAULT_PINV_TOL = 1e-10


def as_matrix(data) -> np.ndarray:
    """Validate ``data`` as a finite 2-D float64 matrix and return a copy."""
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


def center_columns(m) -> np.ndarray:
    """Subtract each column's mean."""
    m = as_matrix(m)
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError("cannot center an empty matrix")
    return m - m.mean(axis=0, keepdims=True)


def _complete_basis(cols: np.ndarray, missing: list[int]) -> None:
    """Fill rows ``missing`` of ``cols`` (a k x n array of orthonormal rows)
    with unit vectors orthogonal to every other row, in place."""
    n = cols.shape[1]
    filled = [i for i in range(cols.shape[0]) if i not in missing]
    candidate = 0
    for idx in missing:
        while True:
            if candidate >= n:
                raise NumericError("could not complete orthonormal basis")
            v = np.zeros(n)
            v[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for j in filled:
                    v -= (cols[j] @ v) * cols[j]
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                cols[idx] = v / norm
                filled.append(idx)
                break


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    rows, cols = a.shape
    # Work on columns stored as rows for contiguous access.
    w = a.T.copy()
    v = np.eye(cols)
    # Columns below this squared norm are rounding noise; rotating them never settles.
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for i in range(cols - 1):
            for j in range(i + 1, cols):
                wi = w[i]
                wj = w[j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if alpha <= negligible or beta <= negligible:
                    continue
                if gamma == 0.0 or abs(gamma) <= OFF_DIAGONAL_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                w[i], w[j] = c * wi - s * wj, s * wi + c * wj
                vi = v[i]
                vj = v[j]
                v[i], v[j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge after {MAX_SWEEPS} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->i", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[order]
    vt = v[order]
    u_rows = np.zeros_like(w)
    scale = sigma[0] if cols else 0.0
    missing = []
    for k in range(cols):
        if sigma[k] > scale * 1e-13 and sigma[k] > 0.0:
            u_rows[k] = w[k] / sigma[k]
        else:
            missing.append(k)
    if missing:
        _complete_basis(u_rows, missing)
    return SvdResult(u=u_rows.T.copy(), singular_values=sigma, vt=vt)


def svd(m) -> SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` with ``min(rows, cols)`` singular values."""
    a = as_matrix(m)
    if min(a.shape) == 0:
        raise ShapeError("cannot decompose an empty matrix")
    if a.shape[0] >= a.shape[1]:
        return _jacobi_tall(a)
    res = _jacobi_tall(a.T)
    return SvdResult(u=res.vt.T.copy(), singular_values=res.singular_values, vt=res.u.T.copy())


def truncation_errors(singular_values) -> np.ndarray:
    """Frobenius error of the best rank-r approximation for r = 0..k."""
    s = np.asarray(singular_values, dtype=np.float64)
    tail = np.concatenate([np.cumsum((s * s)[::-1])[::-1], [0.0]])
    return np.sqrt(tail)


def best_rank_r(m, r: int) -> np.ndarray:
    """Best Frobenius-norm approximation of ``m`` with rank at most ``r``."""
    a = as_matrix(m)
    k = min(a.shape)
    if not 0 <= r <= k:
        raise ValueError(f"rank {r} outside [0, {k}]")
    if r == 0:
        return np.zeros_like(a)
    res = svd(a)
    return (res.u[:, :r] * res.singular_values[:r]) @ res.vt[:r]


def pseudo_inverse(m, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose inverse; singular values below ``tol * s_max`` are dropped."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = as_matrix(m)
    res = svd(a)
    s = res.singular_values
    if s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    keep = s > tol * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (res.vt.T * inv) @ res.u.T


def condition_number(m, tol: float = DEFAULT_PINV_TOL) -> float:
    """Ratio of the largest to the smallest singular value above ``tol * s_max``."""
    s = svd(m).singular_values
    if s[0] == 0.0:
        raise NumericError("condition number of the zero matrix is undefined")
    kept = s[s > tol * s[0]]
    return float(kept[0] / kept[-1])


def numerical_rank(m, tol: float = DEFAULT_PINV_TOL) -> int:
    s = svd(m).singular_values
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))

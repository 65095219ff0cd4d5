"""Batched eigenvalues of small symmetric matrices.

Matrices arrive stacked as ``(..., d, d)`` with d in {2, 3}. The 2x2 case is
closed form. The 3x3 case uses the trigonometric formula and re-does the
entries whose eigenvalues are nearly tied with cyclic Jacobi rotations.
Eigenvalues come back sorted in non-increasing order.
"""
from __future__ import annotations

import numpy as np

TIE_RATIO = 1e-4
JACOBI_TOL = 1e-12


def eig2(a: np.ndarray) -> np.ndarray:
    p, q, r = a[..., 0, 0], a[..., 1, 1], a[..., 0, 1]
    mean = 0.5 * (p + q)
    rad = np.hypot(0.5 * (p - q), r)
    return np.stack([mean + rad, mean - rad], axis=-1)


def _eig3_trig(a: np.ndarray):
    q = np.trace(a, axis1=-2, axis2=-1) / 3.0
    off = a[..., 0, 1] ** 2 + a[..., 0, 2] ** 2 + a[..., 1, 2] ** 2
    d0, d1, d2 = a[..., 0, 0] - q, a[..., 1, 1] - q, a[..., 2, 2] - q
    p = np.sqrt((d0**2 + d1**2 + d2**2 + 2.0 * off) / 6.0)
    safe = np.where(p > 0, p, 1.0)
    b = (a - q[..., None, None] * np.eye(3)) / safe[..., None, None]
    r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    vals = np.stack([e1, e2, e3], axis=-1)
    vals = np.where((p > 0)[..., None], vals, q[..., None])
    return vals, p


def jacobi_eigvalsh(a: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 50) -> np.ndarray:
    """Cyclic Jacobi on a stack of symmetric matrices; stops when the
    off-diagonal Frobenius norm is below ``tol`` times the full norm."""
    a = np.array(a, dtype=float, copy=True)
    d = a.shape[-1]
    norm = np.sqrt((a**2).sum(axis=(-2, -1)))
    upper = np.triu_indices(d, 1)
    for _ in range(max_sweeps):
        # summing the off-diagonal squares directly; total minus diagonal cancels
        off = np.sqrt(2.0 * (a[..., upper[0], upper[1]] ** 2).sum(-1))
        if np.all(off <= tol * np.maximum(norm, 1e-300)):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[..., p, q]
                app = a[..., p, p]
                aqq = a[..., q, q]
                active = np.abs(apq) > 0
                with np.errstate(over="ignore", divide="ignore"):
                    theta = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                    t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(theta == 0, 1.0, t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t**2 + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                col_p = a[..., :, p].copy()
                col_q = a[..., :, q].copy()
                a[..., :, p] = c[..., None] * col_p - s[..., None] * col_q
                a[..., :, q] = s[..., None] * col_p + c[..., None] * col_q
                row_p = a[..., p, :].copy()
                row_q = a[..., q, :].copy()
                a[..., p, :] = c[..., None] * row_p - s[..., None] * row_q
                a[..., q, :] = s[..., None] * row_p + c[..., None] * row_q
    vals = np.diagonal(a, axis1=-2, axis2=-1)
    return -np.sort(-vals, axis=-1)


def eig3(a: np.ndarray) -> np.ndarray:
    vals, p = _eig3_trig(a)
    gaps = np.minimum(vals[..., 0] - vals[..., 1], vals[..., 1] - vals[..., 2])
    tied = (p > 0) & (gaps < TIE_RATIO * p)
    if np.any(tied):
        vals = vals.copy()
        vals[tied] = jacobi_eigvalsh(a[tied])
    return vals


def eigvalsh_desc(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of stacked symmetric matrices, largest first."""
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    if d == 2:
        return eig2(a)
    if d == 3:
        return eig3(a)
    return np.linalg.eigvalsh(a)[..., ::-1]

"""Elementary symmetric polynomials of spectra and their derivatives.

Indices in the public operations are 1-based, matching the usual
``lambda_1 >= ... >= lambda_n`` labelling. The vectorised helpers at the
bottom (``sigma_table``, ``sigma_d1_table``) work on stacked spectra of shape
``(..., n)`` and are what the grid solver calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateSpectrumError, DomainError

DEGENERATE_GAP = 1e-9


@dataclass(frozen=True)
class Spectrum:
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).ravel()
        if vals.size < 2:
            raise DomainError(f"spectrum needs n >= 2 entries, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise DomainError("spectrum entries must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.size

    def sorted(self) -> "Spectrum":
        """Same spectrum with entries in non-increasing order."""
        return Spectrum(np.sort(self.values)[::-1])

    def to_json(self) -> list:
        return [float(v) for v in self.values]


@dataclass(frozen=True)
class SymMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DomainError(f"expected a square matrix, got shape {a.shape}")
        # enforce exact symmetry from the upper triangle
        a = np.triu(a) + np.triu(a, 1).T
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def diag(cls, values: Sequence[float]) -> "SymMatrix":
        return cls(np.diag(np.asarray(values, dtype=float)))

    def is_diagonal(self) -> bool:
        return not np.any(self.entries - np.diag(np.diag(self.entries)))


@dataclass(frozen=True)
class TensorSlice:
    """Third derivatives ``u_{pph}`` (and optionally ``u_{pqh}``) for one fixed ``h``."""

    diag: np.ndarray
    offdiag: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        d = np.array(self.diag, dtype=float).ravel()
        d.setflags(write=False)
        object.__setattr__(self, "diag", d)
        if self.offdiag is not None:
            o = np.array(self.offdiag, dtype=float)
            if o.shape != (d.size, d.size) or np.any(o != o.T):
                raise DomainError("offdiag slice must be a symmetric n x n array")
            object.__setattr__(self, "offdiag", o)


def _as_values(lam) -> np.ndarray:
    if isinstance(lam, Spectrum):
        return lam.values
    return np.asarray(lam, dtype=float)


def _check_index(i: int, n: int, name: str = "index") -> int:
    if not 1 <= i <= n:
        raise DomainError(f"{name} {i} outside 1..{n}")
    return i - 1


def sigma_table(lam) -> np.ndarray:
    """All of sigma_0..sigma_n for stacked spectra.

    Builds the coefficients of prod_i (t + lam_i) one factor at a time, so the
    cost is O(n^2) per spectrum instead of enumerating subsets.
    """
    lam = np.asarray(_as_values(lam), dtype=float)
    n = lam.shape[-1]
    e = np.zeros(lam.shape[:-1] + (n + 1,))
    e[..., 0] = 1.0
    for i in range(n):
        x = lam[..., i : i + 1]
        e[..., 1 : i + 2] = e[..., 1 : i + 2] + x * e[..., 0 : i + 1]
    return e


def sigma(k: int, lam) -> float:
    vals = _as_values(lam)
    n = vals.shape[-1]
    if not 0 <= k <= n:
        raise DomainError(f"k={k} outside 0..{n}")
    out = sigma_table(vals)[..., k]
    return float(out) if np.ndim(out) == 0 else out


def _drop(vals: np.ndarray, excluded: Iterable[int]) -> np.ndarray:
    n = vals.shape[-1]
    idx = [_check_index(i, n, "excluded index") for i in excluded]
    if len(set(idx)) != len(idx):
        raise DomainError(f"repeated excluded index in {sorted(i + 1 for i in idx)}")
    keep = [j for j in range(n) if j not in idx]
    return vals[..., keep]


def sigma_restricted(k: int, lam, excluded: Iterable[int]) -> float:
    """sigma_k of the spectrum with the ``excluded`` entries removed.

    ``sigma_restricted(k, lam, {i})`` is the usual sigma_k(lam | i).
    """
    vals = _as_values(lam)
    excluded = list(excluded)
    if len(excluded) > 2:
        raise DomainError("at most two indices may be excluded")
    rest = _drop(vals, excluded)
    m = rest.shape[-1]
    if k < 0:
        raise DomainError(f"k={k} is negative")
    if k > m:
        # no k-subsets left
        return 0.0 if rest.ndim == 1 else np.zeros(rest.shape[:-1])
    out = sigma_table(rest)[..., k]
    return float(out) if np.ndim(out) == 0 else out


def sigma_d1(k: int, lam, i: int) -> float:
    """First partial d sigma_k / d lam_i = sigma_{k-1}(lam | i)."""
    vals = _as_values(lam)
    n = vals.shape[-1]
    _check_index(i, n)
    if not 1 <= k <= n:
        raise DomainError(f"k={k} outside 1..{n}")
    return sigma_restricted(k - 1, vals, [i])


def sigma_d2(k: int, lam, p: int, q: int) -> float:
    """Second partial: sigma_{k-2}(lam | pq) off the diagonal, zero on it."""
    vals = _as_values(lam)
    n = vals.shape[-1]
    _check_index(p, n)
    _check_index(q, n)
    if not 0 <= k <= n:
        raise DomainError(f"k={k} outside 0..{n}")
    if p == q or k < 2:
        return 0.0
    lo, hi = min(p, q), max(p, q)
    return sigma_restricted(k - 2, vals, [lo, hi])


def sigma_d1_table(k: int, lam) -> np.ndarray:
    """Vectorised gradient: entry i is sigma_{k-1}(lam | i), shape (..., n)."""
    lam = np.asarray(_as_values(lam), dtype=float)
    n = lam.shape[-1]
    out = np.empty(lam.shape)
    for i in range(n):
        rest = np.delete(lam, i, axis=-1)
        out[..., i] = sigma_table(rest)[..., k - 1]
    return out


def gradient(k: int, lam) -> np.ndarray:
    vals = _as_values(lam)
    if k == 0:
        return np.zeros(vals.size)
    return np.array([sigma_d1(k, vals, i + 1) for i in range(vals.size)])


def hessian(k: int, lam) -> np.ndarray:
    vals = _as_values(lam)
    n = vals.size
    return np.array(
        [[sigma_d2(k, vals, p + 1, q + 1) for q in range(n)] for p in range(n)]
    )


def directional_d1(k: int, lam, slice_: TensorSlice) -> float:
    """The scalar (sigma_k)_h = sum_p sigma_k^{pp} u_{pph}."""
    vals = _as_values(lam)
    d = slice_.diag if isinstance(slice_, TensorSlice) else np.asarray(slice_, float)
    if d.size != vals.size:
        raise DomainError(f"slice has {d.size} entries, spectrum has {vals.size}")
    return float(gradient(k, vals) @ d)


def directional_d2(k: int, lam, slice_: TensorSlice) -> float:
    """sum_{p,q} sigma_k^{pp,qq} u_{pph} u_{qqh}."""
    vals = _as_values(lam)
    d = slice_.diag if isinstance(slice_, TensorSlice) else np.asarray(slice_, float)
    if d.size != vals.size:
        raise DomainError(f"slice has {d.size} entries, spectrum has {vals.size}")
    return float(d @ hessian(k, vals) @ d)


@dataclass(frozen=True)
class SymmetricFunction:
    """Tag for sigma_k (``l is None``) or the quotient sigma_k / sigma_l."""

    k: int
    l: Optional[int] = None

    @property
    def name(self) -> str:
        return f"sigma_{self.k}" if self.l is None else f"sigma_{self.k}/sigma_{self.l}"

    def value(self, lam) -> float:
        if self.l is None:
            return sigma(self.k, lam)
        return sigma(self.k, lam) / sigma(self.l, lam)

    def first(self, lam) -> np.ndarray:
        gk = gradient(self.k, lam)
        if self.l is None:
            return gk
        sk, sl = sigma(self.k, lam), sigma(self.l, lam)
        if sl <= 0:
            raise DomainError(f"sigma_{self.l} <= 0; quotient undefined")
        gl = gradient(self.l, lam)
        return gk / sl - sk * gl / sl**2

    def second(self, lam) -> np.ndarray:
        hk = hessian(self.k, lam)
        if self.l is None:
            return hk
        sk, sl = sigma(self.k, lam), sigma(self.l, lam)
        if sl <= 0:
            raise DomainError(f"sigma_{self.l} <= 0; quotient undefined")
        gk, gl, hl = gradient(self.k, lam), gradient(self.l, lam), hessian(self.l, lam)
        cross = np.outer(gk, gl) + np.outer(gl, gk)
        return hk / sl - cross / sl**2 - sk * hl / sl**2 + 2 * sk * np.outer(gl, gl) / sl**3


def sigma_fn(k: int, l: Optional[int] = None) -> SymmetricFunction:
    if l is not None and not 0 <= l < k:
        raise DomainError(f"quotient needs 0 <= l < k, got k={k}, l={l}")
    return SymmetricFunction(k, l)


def second_derivative_form(F: SymmetricFunction, A: SymMatrix, B: SymMatrix,
                           gap_tol: float = DEGENERATE_GAP,
                           strict: bool = False) -> float:
    """Second derivative of the matrix function F at diagonal A in direction B.

    For near-coincident diagonal entries the divided difference of first
    derivatives is replaced by its limit ``f^{jj} - f^{jk}`` (for sigma_k this
    is ``-sigma_{k-2}(lam | jk)``). With ``strict=True`` such a pair raises
    instead.
    """
    if A.n != B.n:
        raise DomainError(f"A is {A.n}x{A.n} but B is {B.n}x{B.n}")
    if not A.is_diagonal():
        raise DomainError("A must be diagonal")
    kappa = np.diag(A.entries).copy()
    b = B.entries
    first = F.first(kappa)
    second = F.second(kappa)
    bd = np.diag(b)
    total = float(bd @ second @ bd)
    n = A.n
    for j in range(n):
        for l in range(j + 1, n):
            if b[j, l] == 0.0:
                continue
            gap = kappa[j] - kappa[l]
            if abs(gap) < gap_tol * max(1.0, abs(kappa[j]), abs(kappa[l])):
                if strict:
                    raise DegenerateSpectrumError(
                        f"eigenvalues {j + 1} and {l + 1} coincide within {gap_tol:g}"
                    )
                quotient = second[j, j] - second[j, l]
            else:
                quotient = (first[j] - first[l]) / gap
            total += 2.0 * quotient * b[j, l] ** 2
    return total


def maclaurin_constant(n: int, k: int) -> float:
    """c_{n,k} making the Newton-Maclaurin gap vanish at lam = (1, ..., 1)."""
    return comb(n, k - 1) / (n ** (1.0 / (k - 1)) * comb(n, k) ** ((k - 2) / (k - 1)))


def newton_maclaurin_gap(lam, k: int) -> float:
    """sigma_{k-1} - c_{n,k} sigma_1^{1/(k-1)} sigma_k^{(k-2)/(k-1)}; >= 0 on Gamma_k."""
    vals = _as_values(lam)
    n = vals.size
    if k < 2:
        raise DomainError(f"Newton-Maclaurin gap needs k >= 2, got {k}")
    if k > n:
        raise DomainError(f"k={k} exceeds n={n}")
    e = sigma_table(vals)
    s1, sk = e[1], e[k]
    if s1 < 0 or sk < 0:
        raise DomainError("spectrum outside Gamma_k")
    return float(e[k - 1] - maclaurin_constant(n, k) * s1 ** (1.0 / (k - 1)) * sk ** ((k - 2) / (k - 1)))


def sigma_d2_table(k: int, lam) -> np.ndarray:
    """Vectorised Hessian in lam: entry (p, q) is sigma_{k-2}(lam | pq), zero on the diagonal."""
    lam = np.asarray(_as_values(lam), dtype=float)
    n = lam.shape[-1]
    out = np.zeros(lam.shape + (n,))
    if k < 2:
        return out
    for p in range(n):
        for q in range(p + 1, n):
            rest = np.delete(lam, [p, q], axis=-1)
            val = sigma_table(rest)[..., k - 2]
            out[..., p, q] = val
            out[..., q, p] = val
    return out

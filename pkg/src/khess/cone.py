"""Garding cones Gamma_k = {sigma_1 > 0, ..., sigma_k > 0} and the K0 shift."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .symfun import Spectrum, _as_values, sigma_restricted, sigma_table

CLOSED_TOL = 1e-12
PRODUCT_SLACK = 1e-12


@dataclass(frozen=True)
class ConeVerdict:
    max_level: int
    margins: np.ndarray

    def contains(self, k: int) -> bool:
        return self.max_level >= k

    def to_json(self) -> dict:
        return {"max_level": self.max_level, "margins": [float(m) for m in self.margins]}


@dataclass(frozen=True)
class ShiftBound:
    K0: float
    sup_f: float
    n: int
    k: int


def cone_level(lam) -> np.ndarray:
    """Largest m with lam in Gamma_m, vectorised over stacked spectra."""
    e = sigma_table(lam)[..., 1:]
    positive = np.cumprod(e > 0, axis=-1)
    return positive.sum(axis=-1)


def classify(lam) -> ConeVerdict:
    vals = _as_values(lam)
    margins = sigma_table(vals)[1:]
    level = int(cone_level(vals))
    return ConeVerdict(level, margins)


def in_cone(lam, k: int) -> bool:
    return bool(cone_level(_as_values(lam)) >= k)


def closed_cone_mask(lam, k: int, tol: float = CLOSED_TOL) -> np.ndarray:
    """Membership in the closure of Gamma_k, with slack ``tol * scale^m`` on sigma_m."""
    lam = np.asarray(_as_values(lam), dtype=float)
    e = sigma_table(lam)
    scale = np.maximum(1.0, np.abs(lam).max(axis=-1))
    ok = np.ones(lam.shape[:-1], dtype=bool)
    for m in range(1, k + 1):
        ok &= e[..., m] >= -tol * scale**m
    return ok


def in_closed_cone(lam, k: int, tol: float = CLOSED_TOL) -> bool:
    return bool(closed_cone_mask(lam, k, tol))


def compute_shift(sup_f: float, n: int, k: int) -> ShiftBound:
    """Smallest K0 with (K0 / n)^k >= sup_f."""
    if not sup_f > 0:
        raise DomainError(f"sup_f must be positive, got {sup_f}")
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    return ShiftBound(n * sup_f ** (1.0 / k), float(sup_f), n, k)


def shift_spectrum(lam, K0: float) -> Spectrum:
    return Spectrum(_as_values(lam) + K0)


def _sorted_desc(lam) -> np.ndarray:
    return np.sort(_as_values(lam))[::-1]


def tail_positivity_check(lam, k: int) -> bool:
    """Whether lam_k + ... + lam_n > 0 for the non-increasingly sorted spectrum."""
    vals = _sorted_desc(lam)
    if not 1 <= k <= vals.size:
        raise DomainError(f"k={k} outside 1..{vals.size}")
    return bool(vals[k - 1 :].sum() > 0)


def product_bound_check(lam, k: int) -> bool:
    """sigma_k >= lam_1 ... lam_k >= lam_k^k (sorted spectrum), with relative slack."""
    vals = _sorted_desc(lam)
    if not 1 <= k <= vals.size:
        raise DomainError(f"k={k} outside 1..{vals.size}")
    sk = sigma_table(vals)[k]
    prod = float(np.prod(vals[:k]))
    power = vals[k - 1] ** k
    slack = PRODUCT_SLACK * max(abs(sk), abs(prod), abs(power), 1e-300)
    return bool(sk >= prod - slack and prod >= power - slack)


def product_chain(lam, k: int) -> list[float]:
    """The intermediate terms sigma_{k-j}(lam | 1..j) * lam_1 ... lam_j, j = 0..k."""
    vals = _sorted_desc(lam)
    out = []
    for j in range(k + 1):
        rest = vals[j:]
        out.append(float(np.prod(vals[:j]) * sigma_table(rest)[k - j]))
    return out


def rejection_sample(rng: np.random.Generator, n: int, k: int, size: int,
                     box: float = 1.0, max_rounds: int = 1000) -> np.ndarray:
    """Uniform samples of Gamma_k intersected with [-box, box]^n."""
    found = []
    have = 0
    batch = max(256, 4 * size)
    for _ in range(max_rounds):
        cand = rng.uniform(-box, box, size=(batch, n))
        keep = cand[cone_level(cand) >= k]
        found.append(keep)
        have += len(keep)
        if have >= size:
            break
    else:
        raise RuntimeError(f"rejection sampling of Gamma_{k} in R^{n} too slow")
    return np.concatenate(found)[:size]


def boundary_sample(rng: np.random.Generator, n: int, k: int, size: int) -> np.ndarray:
    """Samples of Gamma_k concentrated near its boundary.

    A positive spectrum is pushed along a random direction; the largest step
    keeping it in Gamma_k is found by bisection and a random fraction of it
    (biased towards 1) is taken.
    """
    base = rng.uniform(0.05, 1.0, size=(size, n))
    direction = rng.normal(size=(size, n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    lo = np.zeros(size)
    hi = np.full(size, 1.0)
    # grow hi until it leaves the cone (or give up at a large step)
    for _ in range(40):
        inside = cone_level(base + hi[:, None] * direction) >= k
        if not inside.any():
            break
        hi = np.where(inside, 2 * hi, hi)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        inside = cone_level(base + mid[:, None] * direction) >= k
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    frac = 1.0 - rng.uniform(0, 1, size) ** 3
    out = base + (frac * lo)[:, None] * direction
    scale = np.abs(out).max(axis=1, keepdims=True)
    out = out / scale
    return out[cone_level(out) >= k]


def sample_cone(rng: np.random.Generator, n: int, k: int, size: int) -> np.ndarray:
    """Half uniform (rejection) samples, half near-boundary samples of Gamma_k."""
    half = size // 2
    a = rejection_sample(rng, n, k, size - half)
    b = boundary_sample(rng, n, k, half)
    while len(b) < half:
        b = np.concatenate([b, boundary_sample(rng, n, k, half)])
    return np.concatenate([a, b[:half]])


def restricted_positive(lam, k: int) -> bool:
    """Whether sigma_{k-1}(lam | i) > 0 for every i (holds on Gamma_k)."""
    vals = _as_values(lam)
    return all(sigma_restricted(k - 1, vals, [i + 1]) > 0 for i in range(vals.size))

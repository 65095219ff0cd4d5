"""Interior-estimate quantities on solved fields and randomized inequality suites."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from itertools import combinations, permutations
from math import comb
from typing import Callable, Optional, Sequence

import numpy as np

from .cone import closed_cone_mask, cone_level, compute_shift, sample_cone
from .eig import eigvalsh_desc
from .errors import AdmissibilityError, DomainError, NonConvergenceError
from .grid import GridDomain, ScalarField, gradient_all, hessian_all, interior
from .solver import ADMISSIBLE_TOL, RhsSpec, solve_dirichlet
from .symfun import Spectrum, TensorSlice, sigma_d1_table, sigma_d2_table, sigma_table

log = logging.getLogger(__name__)

POSITIVE_U_TOL = 1e-12
SHIFT_TOL = 1e-10
CONCAVITY_SLACK = 1e-10
WEIGHTED_SLACK = 1e-10
SHIFTED_SLACK = 1e-12
NEWTON_SLACK = 1e-12
FIELD_SHIFT_SLACK = 1e-8
STABLE_REL = 0.05
BLOWUP_RATIO = 1.1


# -- configs and reports ---------------------------------------------------------

@dataclass(frozen=True)
class PogorelovConfig:
    """Weights of the test function (-u)^beta exp(eps/2 |Du|^2 + a/2 |x|^2) u_xixi.

    ``beta = 0`` is accepted so the pure-eigenvalue case can be evaluated;
    ``m`` and ``N`` belong to the power-sum test function.
    """

    beta: float = 1.0
    eps: float = 0.0
    a: float = 0.0
    m: int = 2
    N: float = 0.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise DomainError(f"beta must be >= 0, got {self.beta}")
        if not self.eps >= 0 or not self.a >= 0 or not self.N >= 0:
            raise DomainError("eps, a and N must be nonnegative")
        if int(self.m) != self.m or self.m < 2:
            raise DomainError(f"m must be an integer >= 2, got {self.m}")

    def smallness_ok(self, max_grad: float) -> bool:
        """eps > 8 eps^2 max|Du|^2 (trivially false when eps = 0)."""
        return self.eps > 8.0 * self.eps**2 * max_grad**2

    def to_json(self) -> dict:
        return {"beta": self.beta, "eps": self.eps, "a": self.a, "m": self.m, "N": self.N}


@dataclass
class LevelResult:
    resolution: int
    max: float
    argmax: list
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"resolution": self.resolution, "max": self.max, "argmax": self.argmax}
        out.update(self.extra)
        return out


@dataclass
class EstimateReport:
    quantity: str
    config: dict
    domain: dict
    levels: list = field(default_factory=list)
    verdict: bool = False
    slack: float = float("nan")
    flagged: bool = False
    note: str = ""

    @property
    def maxima(self) -> np.ndarray:
        return np.array([lv.max for lv in self.levels])

    @property
    def resolutions(self) -> list:
        return [lv.resolution for lv in self.levels]

    def finalize(self) -> "EstimateReport":
        self.verdict, self.slack = bounded_verdict(self.maxima)
        if self.flagged:
            self.verdict = False
        return self

    def to_json(self) -> dict:
        return {
            "quantity": self.quantity,
            "config": self.config,
            "domain": self.domain,
            "levels": [lv.to_json() for lv in self.levels],
            "verdict": self.verdict,
            "slack": self.slack,
            "flagged": self.flagged,
            "note": self.note,
        }

    def csv_rows(self) -> list:
        return [{"quantity": self.quantity, "resolution": lv.resolution, "max": repr(lv.max),
                 "argmax": " ".join(repr(c) for c in lv.argmax), "flag": int(self.flagged)}
                for lv in self.levels]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["quantity", "resolution", "max", "argmax", "flag"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(self.csv_rows())
        return buf.getvalue()


def bounded_verdict(values: Sequence[float]) -> tuple:
    """(verdict, slack): the last two values agree to 5% and the last is at
    most 1.1 times the first. ``slack`` is 0.05 minus the relative change."""
    v = np.asarray(values, dtype=float)
    if v.size < 2 or not np.all(np.isfinite(v)):
        return False, float("nan")
    prev, last = v[-2], v[-1]
    denom = max(abs(prev), abs(last))
    rel = 0.0 if denom == 0 else abs(last - prev) / denom
    verdict = rel <= STABLE_REL and last <= BLOWUP_RATIO * v[0] + 1e-15 * abs(v[0])
    return bool(verdict), float(STABLE_REL - rel)


# -- nodal quantities ------------------------------------------------------------

def _free_nodes(u: ScalarField, margin: float = 0.0):
    """Hessians, gradients, values and coordinates at the free nodes."""
    dom = u.domain
    imask = interior(u.mask, dom.dim)
    H = hessian_all(u.values, dom.h)[imask]
    g = gradient_all(u.values, dom.h)[imask]
    vals = u.values[u.mask]
    x = dom.coords()[u.mask]
    if margin > 0:
        lo, hi = np.asarray(dom.lows), np.asarray(dom.highs)
        keep = np.all((x - lo >= margin - 1e-12) & (hi - x >= margin - 1e-12), axis=1)
        H, g, vals, x = H[keep], g[keep], vals[keep], x[keep]
    if vals.size == 0:
        raise DomainError("no free nodes to evaluate")
    return H, g, vals, x


def _neg_part(vals: np.ndarray) -> np.ndarray:
    if np.any(vals > POSITIVE_U_TOL):
        raise DomainError(f"quantity undefined: u reaches {vals.max():.3e} > 0 at a free node")
    return np.clip(-vals, 0.0, None)


def _argmax(q: np.ndarray, x: np.ndarray) -> tuple:
    i = int(np.argmax(q))
    return float(q[i]), [float(c) for c in x[i]]


def pogorelov_sigma2_quantity(u: ScalarField, cfg: PogorelovConfig, margin: float = 0.0) -> tuple:
    """Grid max of (-u)^beta exp(eps/2 |Du|^2 + a/2 |x|^2) lambda_max(D^2 u)."""
    H, g, vals, x = _free_nodes(u, margin)
    w = _neg_part(vals) ** cfg.beta
    weight = np.exp(0.5 * cfg.eps * (g**2).sum(-1) + 0.5 * cfg.a * (x**2).sum(-1))
    lam_max = eigvalsh_desc(H)[:, 0]
    return _argmax(w * weight * lam_max, x)


def laplacian_quantity(u: ScalarField, margin: float = 0.0) -> tuple:
    """Grid max of (-u) tr(D_h^2 u)."""
    H, _, vals, x = _free_nodes(u, margin)
    return _argmax(_neg_part(vals) * np.trace(H, axis1=-2, axis2=-1), x)


def pm_quantity(u: ScalarField, K0: float, m: int) -> np.ndarray:
    """Nodal power sums sum_j (lambda_j + K0)^m over the free nodes."""
    if int(m) != m or m < 1:
        raise DomainError(f"m must be a positive integer, got {m}")
    H, _, _, _ = _free_nodes(u)
    return power_sum(eigvalsh_desc(H), K0, int(m))


def power_sum(lam, K0: float, m: int) -> np.ndarray:
    kappa = np.asarray(lam, dtype=float) + K0
    if np.any(kappa < -SHIFT_TOL):
        raise AdmissibilityError(f"shifted spectrum reaches {kappa.min():.3e} < 0")
    return (np.clip(kappa, 0.0, None) ** m).sum(-1)


def max_gradient(u: ScalarField) -> float:
    _, g, _, _ = _free_nodes(u)
    return float(np.sqrt((g**2).sum(-1)).max())


@dataclass
class FieldShiftCheck:
    K0: float
    cone: int
    nodes_checked: int
    min_eig: float
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_json(self) -> dict:
        return {"K0": self.K0, "cone": self.cone, "nodes_checked": self.nodes_checked,
                "min_eig": self.min_eig, "violations": self.violations, "passed": self.passed}


def field_shift_check(u: ScalarField, k: int, sup_f: float, tol: float = FIELD_SHIFT_SLACK) -> FieldShiftCheck:
    """At nodes whose spectrum lies in Gamma_{k+1}, check lambda_min >= -K0 - tol.

    For k = n the next cone does not exist; Gamma_n nodes are checked instead.
    """
    n = u.domain.dim
    K0 = compute_shift(sup_f, n, k).K0
    H, _, _, _ = _free_nodes(u)
    lam = eigvalsh_desc(H)
    level = min(k + 1, n)
    sel = lam[cone_level(lam) >= level]
    min_eig = float(sel[:, -1].min()) if len(sel) else float("nan")
    bad = int((sel[:, -1] < -K0 - tol).sum()) if len(sel) else 0
    return FieldShiftCheck(K0, level, len(sel), min_eig, bad)


# -- inequality gaps, vectorised over samples ---------------------------------

def _d1(k: int, lam: np.ndarray) -> np.ndarray:
    return np.zeros(lam.shape) if k == 0 else sigma_d1_table(k, lam)


def _as_batch(lam, xi=None):
    lam = np.atleast_2d(np.asarray(lam.values if isinstance(lam, Spectrum) else lam, dtype=float))
    if xi is None:
        return lam, None
    if isinstance(xi, TensorSlice):
        xi = xi.diag
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if xi.shape != lam.shape:
        raise DomainError(f"slice shape {xi.shape} does not match spectrum shape {lam.shape}")
    return lam, xi


def _quotient_parts(k: int, l: int, lam: np.ndarray, xi: np.ndarray):
    n = lam.shape[-1]
    if not 0 <= l < k <= n:
        raise DomainError(f"need 0 <= l < k <= n, got k={k}, l={l}, n={n}")
    e = sigma_table(lam)
    sk, sl = e[:, k], e[:, l]
    if np.any(sl <= 0):
        raise DomainError(f"sigma_{l} <= 0; spectrum outside the admissible cone")
    if np.any(cone_level(lam) < k):
        raise DomainError(f"spectrum outside Gamma_{k}")
    dk = np.einsum("ip,ip->i", _d1(k, lam), xi)
    dl = np.einsum("ip,ip->i", _d1(l, lam), xi)
    d2k = np.einsum("ip,ipq,iq->i", xi, sigma_d2_table(k, lam), xi)
    d2l = np.einsum("ip,ipq,iq->i", xi, sigma_d2_table(l, lam), xi)
    return sk, sl, dk, dl, d2k, d2l


def concavity_gap(k: int, l: int, lam, xi) -> tuple:
    """Signed gap and scale of the quotient-concavity inequality, batched.

    LHS = -sigma_k^{pp,qq} xi_p xi_q / sigma_k + sigma_l^{pp,qq} xi_p xi_q / sigma_l
    RHS = (A - B)((alpha - 1) A - (alpha + 1) B) with A = (sigma_k)_h / sigma_k,
    B = (sigma_l)_h / sigma_l and alpha = 1 / (k - l).
    """
    lam, xi = _as_batch(lam, xi)
    sk, sl, dk, dl, d2k, d2l = _quotient_parts(k, l, lam, xi)
    alpha = 1.0 / (k - l)
    A, B = dk / sk, dl / sl
    lhs = -d2k / sk + d2l / sl
    rhs = (A - B) * ((alpha - 1) * A - (alpha + 1) * B)
    scale = np.max(np.abs([d2k / sk, d2l / sl, (alpha - 1) * A**2, 2 * alpha * A * B,
                           (alpha + 1) * B**2]), axis=0)
    return lhs - rhs, scale


def weighted_concavity_gap(k: int, l: int, lam, xi, delta: float) -> tuple:
    """Signed gap and scale of the delta-weighted form, batched.

    LHS = -sigma_k^{pp,qq} xi_p xi_q + (1 - alpha + alpha/delta) (sigma_k)_h^2 / sigma_k
    RHS = sigma_k (alpha + 1 - delta alpha) B^2 - (sigma_k / sigma_l) sigma_l^{pp,qq} xi_p xi_q
    """
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    lam, xi = _as_batch(lam, xi)
    sk, sl, dk, dl, d2k, d2l = _quotient_parts(k, l, lam, xi)
    alpha = 1.0 / (k - l)
    B = dl / sl
    t1, t2 = -d2k, (1 - alpha + alpha / delta) * dk**2 / sk
    t3, t4 = sk * (alpha + 1 - delta * alpha) * B**2, -(sk / sl) * d2l
    scale = np.max(np.abs([t1, t2, t3, t4]), axis=0)
    return (t1 + t2) - (t3 + t4), scale


def concavity_check(k: int, l: int, lam, slice_) -> float:
    gap, _ = concavity_gap(k, l, lam, slice_)
    return float(gap[0])


def weighted_concavity_check(k: int, l: int, lam, slice_, delta: float) -> float:
    gap, _ = weighted_concavity_gap(k, l, lam, slice_, delta)
    return float(gap[0])


def shifted_gap(lam, K0: float, k: int, i: int, j: int) -> tuple:
    """kappa_j sigma_k^{jj,ii} + sigma_k^{jj} - sigma_k^{ii} with kappa = lam + K0.

    ``i`` and ``j`` are 1-based and may be arrays; returns (gap, scale).
    """
    lam, _ = _as_batch(lam)
    n = lam.shape[-1]
    if not 2 <= k <= n:
        raise DomainError(f"need 2 <= k <= n, got k={k}")
    i, j = np.asarray(i) - 1, np.asarray(j) - 1
    if np.any(i == j) or np.any((i < 0) | (i >= n) | (j < 0) | (j >= n)):
        raise DomainError("need distinct indices in 1..n")
    kappa = lam + np.asarray(K0, dtype=float).reshape(-1, 1)
    if np.any(kappa < -SHIFTED_SLACK * np.maximum(1.0, np.abs(lam).max(-1, keepdims=True))):
        raise DomainError("shifted spectrum is not entrywise nonnegative")
    rows = np.arange(lam.shape[0])
    d1 = sigma_d1_table(k, lam)
    d2 = sigma_d2_table(k, lam)
    t1 = kappa[rows, j] * d2[rows, j, i]
    t2, t3 = d1[rows, j], d1[rows, i]
    scale = np.max(np.abs([t1, t2, t3]), axis=0)
    return t1 + t2 - t3, scale


def shifted_second_derivative_check(lam, K0: float, k: int, i: int, j: int) -> float:
    gap, _ = shifted_gap(lam, K0, k, i, j)
    return float(gap[0])


def newton_pair_gap(lam, mu: int, a: int, b: int) -> tuple:
    """sigma_{mu-1}(lam|ab)^2 - sigma_mu(lam|ab) sigma_{mu-2}(lam|ab), batched."""
    lam, _ = _as_batch(lam)
    rest = np.delete(lam, [a - 1, b - 1], axis=-1)
    e = sigma_table(rest)
    m = rest.shape[-1]
    get = lambda r: e[:, r] if 0 <= r <= m else np.zeros(len(rest))
    s1, s0, s2 = get(mu - 1), get(mu), get(mu - 2)
    scale = np.maximum(s1**2, np.abs(s0 * s2))
    return s1**2 - s0 * s2, scale


@dataclass
class GrowthClaims:
    lower_bound: bool
    lower_ratio: float
    upper_ratios: dict
    calibrated: dict

    @property
    def within_calibrated(self) -> dict:
        return {key: bool(self.upper_ratios[key] <= self.calibrated[key] * (1 + 1e-12))
                for key in self.upper_ratios}

    def to_json(self) -> dict:
        return {"lower_bound": self.lower_bound, "lower_ratio": self.lower_ratio,
                "upper_ratios": self.upper_ratios, "calibrated": self.calibrated,
                "within_calibrated": self.within_calibrated}


def calibrated_constants(n: int, mu: int) -> dict:
    """The three ratios evaluated at lam = (1, ..., 1)."""
    m = n - 2
    c = lambda r: float(comb(m, r)) if 0 <= r <= m else 0.0
    return {"mu-1": c(mu - 1), "mu": c(mu), "mu-2": c(mu - 2)}


def restricted_growth_claims_check(lam, mu: int, a: int, b: int) -> GrowthClaims:
    """Lower bound sigma_{mu-1}(lam|a) >= lam_1...lam_mu / lam_a and the ratios

        sigma_{mu-1}(lam|ab) / (lam_1...lam_{mu+1} / (lam_a lam_b))
        sigma_mu(lam|ab)     / (lam_1...lam_{mu+2} / (lam_a lam_b))
        sigma_{mu-2}(lam|ab) / (lam_1...lam_mu     / (lam_a lam_b))

    for a spectrum sorted in decreasing order.
    """
    vals = np.asarray(lam.values if isinstance(lam, Spectrum) else lam, dtype=float)
    n = vals.size
    if not 2 <= mu <= n - 2:
        raise DomainError(f"need 2 <= mu <= n - 2, got mu={mu}, n={n}")
    if not (1 <= a <= mu and 1 <= b <= mu and a != b):
        raise DomainError(f"need distinct a, b in 1..{mu}")
    if np.any(np.diff(vals) > 0):
        raise DomainError("spectrum must be sorted in decreasing order")
    if int(cone_level(vals)) < mu + 2:
        raise DomainError(f"spectrum outside Gamma_{mu + 2}")
    la, lb = vals[a - 1], vals[b - 1]
    if la <= 0 or lb <= 0:
        raise DomainError("lam_a and lam_b must be positive")
    lower = sigma_table(np.delete(vals, a - 1))[mu - 1]
    lower_target = np.prod(vals[:mu]) / la
    e = sigma_table(np.delete(vals, [a - 1, b - 1]))
    ab = la * lb
    ratios = {
        "mu-1": float(e[mu - 1] / (np.prod(vals[:mu + 1]) / ab)),
        "mu": float(e[mu] / (np.prod(vals[:mu + 2]) / ab)),
        "mu-2": float(e[mu - 2] / (np.prod(vals[:mu]) / ab)),
    }
    return GrowthClaims(bool(lower >= lower_target * (1 - 1e-12)), float(lower / lower_target),
                        ratios, calibrated_constants(n, mu))


# -- randomized suites ---------------------------------------------------------

MAX_WITNESSES = 5


def random_slices(rng: np.random.Generator, size: int, n: int) -> np.ndarray:
    """First half uniform on [-1, 1]^n, second half +-10^U[-2, 2] entrywise."""
    half = size // 2
    uni = rng.uniform(-1.0, 1.0, (size - half, n))
    heavy = rng.choice([-1.0, 1.0], (half, n)) * 10.0 ** rng.uniform(-2.0, 2.0, (half, n))
    return np.concatenate([uni, heavy])


@dataclass
class SuiteResult:
    name: str
    config: dict
    samples: int
    violations: int = 0
    min_normalized_gap: float = float("inf")
    witnesses: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def absorb(self, gap, scale, slack, witness_fn):
        scale = np.maximum(scale, np.finfo(float).tiny)
        norm = gap / scale
        if norm.size:
            self.min_normalized_gap = min(self.min_normalized_gap, float(norm.min()))
        bad = np.flatnonzero(gap < -slack * scale)
        self.violations += int(bad.size)
        for idx in bad[: MAX_WITNESSES - len(self.witnesses)]:
            self.witnesses.append(witness_fn(int(idx)) | {"gap": float(gap[idx]),
                                                         "scale": float(scale[idx])})
        return bad

    def to_json(self) -> dict:
        return {"name": self.name, "config": self.config, "samples": self.samples,
                "violations": self.violations, "passed": self.passed,
                "min_normalized_gap": self.min_normalized_gap, "witnesses": self.witnesses,
                "observations": self.observations, **self.extra}


def concavity_suite(rng: np.random.Generator, n: int, k: int, l: int, samples: int = 10_000,
                    deltas: Sequence[float] = (0.1, 0.01)) -> list:
    """Both concavity inequalities on ``samples`` (spectrum, slice) pairs.

    Returns one SuiteResult for the plain form and one per delta. A weighted
    violation seen only at the largest delta is recorded as an observation
    (the weighted form is only claimed for small delta) rather than a failure.
    """
    lam = sample_cone(rng, n, k, samples)
    xi = random_slices(rng, samples, n)
    wit = lambda i: {"lam": lam[i].tolist(), "slice": xi[i].tolist()}
    cfg = {"n": n, "k": k, "l": l}
    plain = SuiteResult("concavity", cfg, samples)
    plain.absorb(*concavity_gap(k, l, lam, xi), CONCAVITY_SLACK, wit)
    out = [plain]
    bad_at = {}
    for delta in deltas:
        res = SuiteResult("weighted-concavity", cfg | {"delta": delta}, samples)
        bad_at[delta] = set(res.absorb(*weighted_concavity_gap(k, l, lam, xi, delta),
                                       WEIGHTED_SLACK, wit).tolist())
        out.append(res)
    ds = sorted(deltas)
    if len(ds) > 1:
        big, small = ds[-1], ds[0]
        only_big = bad_at[big] - bad_at[small]
        if only_big:
            res_big = out[1 + list(deltas).index(big)]
            res_big.observations.append(
                f"{len(only_big)} violations at delta={big} vanish at delta={small}")
            res_big.violations -= len(only_big)
    return out


def shifted_suite(rng: np.random.Generator, n: int, k: int, samples: int = 10_000) -> list:
    """Shifted second-derivative inequality and the restricted Newton inequality.

    Spectra come from Gamma_{k+1}; sup_f is drawn above sigma_k(lam) and K0
    follows from it, so every sample is shifted-admissible.
    """
    if not 2 <= k < n:
        raise DomainError(f"need 2 <= k < n, got k={k}, n={n}")
    lam = sample_cone(rng, n, k + 1, samples)
    sup_f = sigma_table(lam)[:, k] * (1.0 + rng.uniform(0.0, 1.0, samples))
    K0 = n * sup_f ** (1.0 / k)
    cfg = {"n": n, "k": k}
    shifted = SuiteResult("shifted-second-derivative", cfg, samples)
    for i, j in permutations(range(1, n + 1), 2):
        wit = lambda s, i=i, j=j: {"lam": lam[s].tolist(), "K0": float(K0[s]), "i": i, "j": j}
        shifted.absorb(*shifted_gap(lam, K0, k, i, j), SHIFTED_SLACK, wit)
    newton = SuiteResult("restricted-newton", cfg | {"mu": list(range(2, n - 1))}, samples)
    for mu in range(2, n - 1):
        for a, b in combinations(range(1, n + 1), 2):
            wit = lambda s, mu=mu, a=a, b=b: {"lam": lam[s].tolist(), "mu": mu, "a": a, "b": b}
            newton.absorb(*newton_pair_gap(lam, mu, a, b), NEWTON_SLACK, wit)
    return [shifted, newton]


def growth_suite(rng: np.random.Generator, n: int, mu: int, samples: int = 2_000,
                 ratio: float = 0.1) -> SuiteResult:
    """Growth claims on sorted Gamma_{mu+2} spectra with lam_{mu+1} <= ratio lam_1."""
    res = SuiteResult("restricted-growth", {"n": n, "mu": mu, "ratio": ratio}, samples)
    cal = calibrated_constants(n, mu)
    worst = {key: 0.0 for key in cal}
    got = 0
    while got < samples:
        head = rng.uniform(0.2, 1.0, (4 * samples, mu))
        tail = rng.uniform(-ratio, ratio, (4 * samples, n - mu))
        lam = -np.sort(-np.concatenate([head, tail], axis=1), axis=1)
        ok = (cone_level(lam) >= mu + 2) & (lam[:, mu] <= ratio * lam[:, 0])
        for row in lam[ok][: samples - got]:
            for a, b in combinations(range(1, mu + 1), 2):
                claim = restricted_growth_claims_check(row, mu, a, b)
                if not claim.lower_bound:
                    res.violations += 1
                    if len(res.witnesses) < MAX_WITNESSES:
                        res.witnesses.append({"lam": row.tolist(), "a": a, "b": b,
                                              "ratio": claim.lower_ratio})
                for key, r in claim.upper_ratios.items():
                    worst[key] = max(worst[key], r)
            got += 1
    res.extra = {"calibrated": cal, "empirical": worst}
    return res


# -- refinement scans ------------------------------------------------------------

@dataclass(frozen=True)
class ScanProblem:
    dim: int
    k: int
    rhs: RhsSpec
    low: float = 0.0
    high: float = 1.0
    label: str = ""
    boundary: Optional[Callable] = None

    def domain(self, resolution: int) -> GridDomain:
        return GridDomain.box(self.dim, self.low, self.high, resolution)

    def to_json(self) -> dict:
        return {"dim": self.dim, "k": self.k, "f": self.label or self.rhs.label,
                "box": [self.low, self.high],
                "boundary": "zero" if self.boundary is None else "custom"}


def prolong(coarse: ScalarField, domain: GridDomain) -> ScalarField:
    """Cubic interpolation of a coarse field onto a finer grid of the same box."""
    from scipy.ndimage import map_coordinates

    cd = coarse.domain
    x = domain.coords()
    idx = [(x[..., ax] - cd.lows[ax]) / cd.h for ax in range(domain.dim)]
    vals = map_coordinates(coarse.values, idx, order=3, mode="nearest")
    return ScalarField(domain, vals)


def _admissible_start(u: ScalarField, k: int) -> bool:
    H, _, _, _ = _free_nodes(u)
    return bool(np.all(closed_cone_mask(eigvalsh_desc(H), k, ADMISSIBLE_TOL)))


def solve_levels(problem: ScanProblem, levels: Sequence[int], tol: float = 1e-10,
                 max_iter: int = 80):
    """Solve on each level. Yields ``(resolution, field or None, report or error)``.

    The previous level, interpolated, is used as the starting guess only when
    every free node of it is admissible; otherwise Newton may settle on a
    non-admissible branch there, or face an indefinite Jacobian, so the level
    falls back to the solver's own starting guesses.
    """
    prev = None
    for res in levels:
        dom = problem.domain(res)
        start = prolong(prev, dom) if prev is not None else None
        if start is not None and not _admissible_start(start, problem.k):
            log.info("interpolated start at %d is not admissible; using the default", res)
            start = None
        try:
            u, rep = solve_dirichlet(dom, problem.rhs, problem.k, tol=tol, max_iter=max_iter,
                                     boundary=problem.boundary, initial=start)
        except NonConvergenceError as err:
            yield res, None, err
            return
        if rep.admissibility_violations:
            yield res, None, NonConvergenceError(
                f"{rep.admissibility_violations} nodes outside the closed cone", rep)
            return
        prev = u
        yield res, u, rep


@dataclass(frozen=True)
class QuantitySpec:
    tag: str
    cfg: Optional[PogorelovConfig] = None
    margin: float = 0.0

    @property
    def name(self) -> str:
        if self.tag == "pogorelov":
            return f"pogorelov[beta={self.cfg.beta:g}]"
        return self.tag

    def evaluate(self, u: ScalarField) -> tuple:
        if self.tag == "laplacian":
            return laplacian_quantity(u, self.margin)
        if self.tag == "pogorelov":
            return pogorelov_sigma2_quantity(u, self.cfg, self.margin)
        raise DomainError(f"unknown quantity {self.tag!r}")

    def level_extra(self, u: ScalarField, grad: float) -> dict:
        if self.tag != "pogorelov":
            return {}
        return {"max_grad": grad, "smallness_ok": self.cfg.smallness_ok(grad)}

    def config(self) -> dict:
        out = {"margin": self.margin}
        if self.cfg is not None:
            out.update(self.cfg.to_json())
        return out


def refinement_scans(problem: ScanProblem, quantities: Sequence[QuantitySpec],
                     levels: Sequence[int], tol: float = 1e-10,
                     interior_margin: Optional[float] = None) -> list:
    """One EstimateReport per quantity, all sharing the same solves.

    ``interior_margin`` adds a diagnostic column with the same quantity taken
    only over nodes at least that far from the box; it does not affect the
    verdict.
    """
    reports = [EstimateReport(q.name, problem.to_json() | q.config(), {}) for q in quantities]
    solves = []
    for res, u, info in solve_levels(problem, levels, tol):
        if u is None:
            for rep in reports:
                rep.flagged = True
                rep.note = f"solver failed at resolution {res}: {info}"
            break
        grad = max_gradient(u)
        solves.append({"resolution": res, "iterations": info.iterations,
                       "residual": info.final_residual})
        for q, rep in zip(quantities, reports):
            val, loc = q.evaluate(u)
            extra = {"iterations": info.iterations} | q.level_extra(u, grad)
            if interior_margin:
                inner = QuantitySpec(q.tag, q.cfg, interior_margin)
                extra["interior_max"] = inner.evaluate(u)[0]
            rep.levels.append(LevelResult(res, val, loc, extra))
            rep.domain = problem.domain(res).describe()
    for rep in reports:
        rep.finalize()
    return reports


def refinement_scan(problem: ScanProblem, quantity, levels: Sequence[int],
                    tol: float = 1e-10) -> EstimateReport:
    if isinstance(quantity, str):
        quantity = QuantitySpec(quantity)
    return refinement_scans(problem, [quantity], levels, tol)[0]


def sin_bump_rhs(amplitude: float = 0.5) -> RhsSpec:
    """f = 1 + amplitude sin(pi x) sin(pi y)."""
    def fn(x):
        return 1.0 + amplitude * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    return RhsSpec.position(fn, 1.0 + abs(amplitude), label=f"1+{amplitude:g}sin(pi x)sin(pi y)")

"""Blow-down experiment for entire solutions of sigma_k(D^2 u) = 1.

A candidate u is rescaled to v(y) = (u(Ry) - R^2) / R^2, the Dirichlet
problem sigma_k(D^2 v) = 1 is solved on the sublevel set {v <= 0} with the
candidate's own values as boundary data, and the Hessian is measured on the
inner region {v <= -1/2}. For a quadratic candidate nothing changes with R;
a perturbed one should flatten out as R grows.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, GrowthViolationError, NonConvergenceError
from .grid import GridDomain, ScalarField, hessian_all, interior
from .solver import RhsSpec, solve_dirichlet

log = logging.getLogger(__name__)

KINDS = ("quadratic", "perturbed-quadratic", "custom")
INNER_SLACK_NODES = 5
ERROR_FRACTION = 0.1
OSC_FLOOR = 1e-12  # below this the oscillation is rounding noise


@dataclass(frozen=True)
class EntireCandidate:
    """A function on R^n with the growth u(x) >= c|x|^2 - b.

    ``evaluator`` maps points of shape ``(..., n)`` to values of shape ``(...)``.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    n: int
    c: float
    b: float
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown candidate kind {self.kind!r}")
        if not self.c > 0 or not self.b >= 0:
            raise DomainError("growth constants need c > 0 and b >= 0")
        if self.n not in (2, 3):
            raise DomainError(f"n must be 2 or 3, got {self.n}")

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(x, dtype=float)), dtype=float)

    @classmethod
    def quadratic(cls, n: int, coef: float = 1.0) -> "EntireCandidate":
        """u = coef |x|^2 / 2."""
        if not coef > 0:
            raise DomainError("coef must be positive")
        fn = lambda x: 0.5 * coef * (x**2).sum(-1)
        return cls(fn, n, 0.25 * coef, 0.0, "quadratic", {"coef": coef})

    @classmethod
    def unit_quadratic(cls, n: int, k: int) -> "EntireCandidate":
        """The radial quadratic with sigma_k(D^2 u) = 1."""
        return cls.quadratic(n, (1.0 / comb(n, k)) ** (1.0 / k))

    @classmethod
    def perturbed_quadratic(cls, n: int, amp: float = 0.1, coef: float = 1.0) -> "EntireCandidate":
        """u = coef |x|^2 / 2 + amp sin(x_1)."""
        if not coef > 0:
            raise DomainError("coef must be positive")
        fn = lambda x: 0.5 * coef * (x**2).sum(-1) + amp * np.sin(x[..., 0])
        return cls(fn, n, 0.25 * coef, max(1.0, abs(amp)), "perturbed-quadratic",
                   {"coef": coef, "amp": amp})

    @classmethod
    def from_config(cls, cfg: dict, n: int, k: int) -> "EntireCandidate":
        kind = cfg.get("kind")
        params = dict(cfg.get("params", {}))
        if kind == "quadratic":
            if "coef" not in params:
                return cls.unit_quadratic(n, k)
            return cls.quadratic(n, float(params["coef"]))
        if kind == "perturbed-quadratic":
            return cls.perturbed_quadratic(n, float(params.get("amp", 0.1)),
                                           float(params.get("coef", 1.0)))
        raise DomainError(f"candidate kind {kind!r} cannot be built from a config")

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params, "n": self.n, "c": self.c, "b": self.b}


@dataclass
class Certificate:
    ok: bool
    witness: Optional[dict] = None

    def __bool__(self) -> bool:
        return self.ok


def growth_certificate(candidate: EntireCandidate, c: float, b: float, radii: Sequence[float],
                       seed: int = 0, points: int = 64) -> Certificate:
    """Check u(x) >= c|x|^2 - b at ``points`` random points on each sphere."""
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0):
        raise DomainError("radii must be positive")
    rng = np.random.default_rng(seed)
    for r in radii:
        d = rng.normal(size=(points, candidate.n))
        x = r * d / np.linalg.norm(d, axis=1, keepdims=True)
        vals = candidate(x)
        bad = np.flatnonzero(vals < c * r**2 - b)
        if bad.size:
            i = int(bad[0])
            return Certificate(False, {"x": x[i].tolist(), "u": float(vals[i]),
                                       "bound": float(c * r**2 - b)})
    return Certificate(True)


def rescale(candidate: EntireCandidate, R: float) -> Callable[[np.ndarray], np.ndarray]:
    """y -> (u(R y) - R^2) / R^2."""
    if not R > 0:
        raise DomainError(f"R must be positive, got {R}")
    R = float(R)
    return lambda y: (candidate(R * np.asarray(y, dtype=float)) - R**2) / R**2


@dataclass(frozen=True)
class MaskedDomain:
    domain: GridDomain
    mask: np.ndarray
    R: float
    level: float

    def radius(self) -> float:
        x = self.domain.coords()[self.mask]
        return float(np.sqrt((x**2).sum(-1)).max())


def bounding_halfwidth(candidate: EntireCandidate) -> float:
    """Sublevel sets {v <= 0} lie in |y|^2 <= (1 + b) / c."""
    return float(np.sqrt((1.0 + candidate.b) / candidate.c))


def sublevel_domain(candidate: EntireCandidate, R: float, level: float = 1.0,
                    resolution: int = 65) -> MaskedDomain:
    """Nodes with u(R y) <= level R^2 on a box around the growth bound."""
    if not 0 < level <= 1:
        raise DomainError(f"level fraction must lie in (0, 1], got {level}")
    L = bounding_halfwidth(candidate)
    dom = GridDomain.box(candidate.n, -L, L, resolution)
    v = rescale(candidate, R)(dom.coords())
    mask = v <= level - 1.0
    edge = ~dom.interior_mask()
    if np.any(mask & edge):
        raise GrowthViolationError(
            f"sublevel set at R={R} reaches the bounding box |y| <= {L:.4g}")
    return MaskedDomain(dom, mask, float(R), float(level))


@dataclass
class RigidityTrace:
    R: list = field(default_factory=list)
    sup_lap: list = field(default_factory=list)
    osc: list = field(default_factory=list)
    estimate: list = field(default_factory=list)
    error_estimate: list = field(default_factory=list)
    inner_ok: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    resolution: int = 0
    exponent: float = float("nan")
    fit_R: list = field(default_factory=list)
    flagged: bool = False
    note: str = ""

    def exponents_so_far(self) -> list:
        return [fit_exponent(self.R[:i + 1], self.osc[:i + 1]) for i in range(len(self.R))]

    def to_json(self) -> dict:
        return {"R": self.R, "sup_lap": self.sup_lap, "osc": self.osc,
                "estimate": self.estimate, "error_estimate": self.error_estimate,
                "inner_ok": self.inner_ok, "iterations": self.iterations,
                "resolution": self.resolution, "exponent": self.exponent,
                "fit_R": self.fit_R, "flagged": self.flagged, "note": self.note}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["R", "sup_lap", "osc", "exponent_so_far", "flag"])
        for R, lap, osc, ex in zip(self.R, self.sup_lap, self.osc, self.exponents_so_far()):
            w.writerow([repr(R), repr(lap), repr(osc), repr(ex), int(self.flagged)])
        return buf.getvalue()


def fit_exponent(R: Sequence[float], osc: Sequence[float]) -> float:
    """Least-squares slope of log osc against log R (nan if undefined)."""
    R, osc = np.asarray(R, dtype=float), np.asarray(osc, dtype=float)
    ok = osc > OSC_FLOOR
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(R[ok]), np.log(osc[ok]), 1)[0])


@dataclass
class _Measure:
    sup_lap: float
    osc: float
    estimate: float
    inner_ok: bool
    iterations: int
    hessian: np.ndarray  # full grid, nan off the free nodes
    inner: np.ndarray


def _osc(H: np.ndarray) -> float:
    return float((H.max(axis=0) - H.min(axis=0)).max())


def _measure(candidate: EntireCandidate, k: int, R: float, resolution: int,
             beta: float, tol: float) -> _Measure:
    md = sublevel_domain(candidate, R, 1.0, resolution)
    dom = md.domain
    data = rescale(candidate, R)(dom.coords())
    start = ScalarField(dom, data, md.mask)
    v, rep = solve_dirichlet(dom, RhsSpec.constant(1.0), k, tol=tol, boundary=data,
                             mask=md.mask, initial=start)
    full = np.full(dom.shape + (dom.dim, dom.dim), np.nan)
    full[(slice(1, -1),) * dom.dim] = hessian_all(v.values, dom.h)
    inner = (data <= -0.5) & md.mask
    if not inner.any():
        raise DomainError(f"inner region is empty at R={R}; raise the resolution")
    H = full[md.mask]
    lap = np.trace(H, axis1=-2, axis2=-1)
    vals = v.values[md.mask]
    est = float((np.clip(-vals, 0.0, None) ** beta * lap).max())
    inner_ok = bool(np.all(v.values[inner] <= -0.5 + INNER_SLACK_NODES * dom.h))
    lap_inner = np.trace(full[inner], axis1=-2, axis2=-1)
    return _Measure(float(np.abs(lap_inner).max()), _osc(full[inner]), est, inner_ok,
                    rep.iterations, full, inner)


def rigidity_experiment(candidate: EntireCandidate, k: int, schedule: Sequence[float],
                        resolution: int = 129, beta: float = 1.0, tol: float = 1e-10,
                        seed: int = 0) -> RigidityTrace:
    """Solve the rescaled Dirichlet problem for each R and record the Hessian.

    Each R is also solved on the grid with every other node. Both Hessians
    are compared on the coarse inner nodes, so the change in ``osc`` reflects
    discretisation error only and not which nodes fall in the inner region;
    R values whose change exceeds 10% of ``osc`` are left out of the fit.
    """
    if not 1 <= k <= candidate.n:
        raise DomainError(f"need 1 <= k <= n, got k={k}")
    schedule = [float(R) for R in schedule]
    if not schedule or any(R <= 0 for R in schedule) or np.any(np.diff(schedule) <= 0):
        raise DomainError("schedule must be positive and strictly increasing")
    if resolution % 2 == 0 or resolution < 9:
        raise DomainError(f"resolution must be odd and >= 9, got {resolution}")
    L = bounding_halfwidth(candidate)
    radii = np.linspace(0.5, max(schedule) * L, 32)
    cert = growth_certificate(candidate, candidate.c, candidate.b, radii, seed=seed)
    if not cert:
        raise GrowthViolationError(f"growth certificate failed at {cert.witness}")
    coarse_res = (resolution - 1) // 2 + 1
    trace = RigidityTrace(resolution=resolution)
    for R in schedule:
        try:
            m = _measure(candidate, k, R, resolution, beta, tol)
            mc = _measure(candidate, k, R, coarse_res, beta, tol)
        except NonConvergenceError as err:
            trace.flagged = True
            trace.note = f"solver failed at R={R}: {err}"
            break
        trace.R.append(R)
        trace.sup_lap.append(m.sup_lap)
        trace.osc.append(m.osc)
        trace.estimate.append(m.estimate)
        shared = m.hessian[(slice(None, None, 2),) * candidate.n][mc.inner]
        trace.error_estimate.append(abs(_osc(shared) - _osc(mc.hessian[mc.inner])))
        trace.inner_ok.append(m.inner_ok)
        trace.iterations.append(m.iterations)
    keep = [i for i, (o, e) in enumerate(zip(trace.osc, trace.error_estimate))
            if o > OSC_FLOOR and e < ERROR_FRACTION * o]
    trace.fit_R = [trace.R[i] for i in keep]
    trace.exponent = fit_exponent(trace.fit_R, [trace.osc[i] for i in keep])
    return trace

"""Damped Newton solver for sigma_k(D^2 u) = f(x, u, Du) with Dirichlet data.

The discretisation is the plain central-difference Hessian (9-point in 2D,
19-point in 3D). Each Newton step solves the linearisation

    sum_{pq} T_pq(D_h^2 u) d_p d_q w - f_u w - f_p . D_h w = -F(u)

where T is the Newton tensor T_{k-1}(H) = sum_i (-1)^i sigma_{k-1-i}(H) H^i,
i.e. the matrix derivative of sigma_k, which in the eigenframe of H is
diag(sigma_{k-1}(lam | i)). Steps are halved until the max-norm residual
decreases and no admissible node leaves the closed Garding cone.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cone import closed_cone_mask
from .eig import eigvalsh_desc
from .errors import ConeViolationError, DomainError, NonConvergenceError
from .grid import GridDomain, ScalarField, gradient_all, hessian_all, interior
from .symfun import sigma_table

log = logging.getLogger(__name__)

ADMISSIBLE_TOL = 1e-10
MAX_HALVINGS = 30
FD_STEP = 1e-6

Evaluator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RhsSpec:
    """Right-hand side f(x, u, Du) > 0.

    ``evaluator(x, u, p)`` takes node coordinates ``(N, dim)``, values ``(N,)``
    and gradients ``(N, dim)`` and returns ``(N,)``. ``f_u`` and ``f_p`` are
    optional analytic derivatives with the same signature (``f_p`` returns
    ``(N, dim)``); for ``kind == "full"`` they fall back to one-sided
    differences.
    """

    kind: str
    evaluator: Evaluator
    sup_f: float
    f_u: Optional[Evaluator] = None
    f_p: Optional[Evaluator] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("constant", "position", "full"):
            raise DomainError(f"unknown rhs kind {self.kind!r}")
        if not self.sup_f > 0:
            raise DomainError("sup_f must be positive")

    @classmethod
    def constant(cls, value: float) -> "RhsSpec":
        if not value > 0:
            raise DomainError(f"f must be positive, got {value}")
        return cls("constant", lambda x, u, p: np.full(len(x), float(value)), float(value),
                   label=repr(float(value)))

    @classmethod
    def position(cls, fn: Callable[[np.ndarray], np.ndarray], sup_f: float, label: str = "") -> "RhsSpec":
        return cls("position", lambda x, u, p: fn(x), sup_f, label=label)

    def __call__(self, x, u, p) -> np.ndarray:
        vals = np.asarray(self.evaluator(x, u, p), dtype=float)
        if np.any(~(vals > 0)):
            bad = int(np.argmin(vals))
            raise DomainError(f"rhs must be positive; got {vals[bad]!r} at x={x[bad].tolist()}")
        return vals

    def derivatives(self, x, u, p, f0):
        """Return (f_u, f_p) at the given states."""
        n, dim = x.shape
        if self.kind != "full":
            return np.zeros(n), np.zeros((n, dim))
        if self.f_u is not None:
            fu = np.asarray(self.f_u(x, u, p), dtype=float)
        else:
            du = FD_STEP * (1.0 + np.abs(u))
            fu = (self(x, u + du, p) - f0) / du
        if self.f_p is not None:
            fp = np.asarray(self.f_p(x, u, p), dtype=float)
        else:
            fp = np.empty((n, dim))
            for r in range(dim):
                dp = FD_STEP * (1.0 + np.abs(p[:, r]))
                q = p.copy()
                q[:, r] += dp
                fp[:, r] = (self(x, u, q) - f0) / dp
        return fu, fp


@dataclass
class SolveReport:
    iterations: int = 0
    final_residual: float = float("inf")
    admissibility_violations: int = 0
    damping_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    violation_history: list = field(default_factory=list)
    converged: bool = False

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "admissibility_violations": self.admissibility_violations,
            "damping_history": list(self.damping_history),
            "residual_history": list(self.residual_history),
            "violation_history": list(self.violation_history),
            "converged": self.converged,
        }


def newton_tensor(H: np.ndarray, e: np.ndarray, k: int) -> np.ndarray:
    """T_{k-1}(H) for stacked matrices ``H`` given ``e = sigma_table(eig(H))``."""
    dim = H.shape[-1]
    T = np.zeros_like(H)
    power = np.broadcast_to(np.eye(dim), H.shape).copy()
    for i in range(k):
        T += ((-1) ** i) * e[..., k - 1 - i, None, None] * power
        power = power @ H
    return T


class _Problem:
    """Index bookkeeping and residual/Jacobian assembly on one grid."""

    def __init__(self, domain: GridDomain, mask: np.ndarray, rhs: RhsSpec, k: int):
        self.domain = domain
        self.rhs = rhs
        self.k = k
        self.dim = domain.dim
        self.h = domain.h
        self.mask = mask
        self.imask = interior(mask, self.dim)  # mask restricted to the interior block
        self.flat = np.flatnonzero(mask.ravel())
        self.pos = np.full(mask.size, -1, dtype=np.int64)
        self.pos[self.flat] = np.arange(self.flat.size)
        self.strides = np.array([int(np.prod(domain.shape[ax + 1:])) for ax in range(self.dim)])
        self.x = domain.coords().reshape(-1, self.dim)[self.flat]
        self._stencil = self._build_stencil()

    def _build_stencil(self):
        """Offsets with weights for each Hessian entry / gradient component."""
        dim = self.dim
        hess = {}  # offset -> list of (p, q, weight) contributions per T-entry
        grad = {}
        def add(table, off, item):
            table.setdefault(off, []).append(item)
        for p in range(dim):
            e = np.zeros(dim, dtype=int)
            e[p] = 1
            add(hess, tuple(e), (p, p, 1.0))
            add(hess, tuple(-e), (p, p, 1.0))
            add(hess, (0,) * dim, (p, p, -2.0))
            add(grad, tuple(e), (p, 1.0))
            add(grad, tuple(-e), (p, -1.0))
        for p, q in combinations(range(dim), 2):
            for sp_, sq in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                o = np.zeros(dim, dtype=int)
                o[p], o[q] = sp_, sq
                # H_pq and H_qp both carry the mixed stencil
                add(hess, tuple(o), (p, q, 2.0 * 0.25 * sp_ * sq))
        offsets = sorted(set(hess) | set(grad) | {(0,) * dim})
        return [(o, hess.get(o, []), grad.get(o, [])) for o in offsets]

    def local(self, values: np.ndarray):
        H = hessian_all(values, self.h)[self.imask]
        g = gradient_all(values, self.h)[self.imask]
        lam = eigvalsh_desc(H)
        e = sigma_table(lam)
        return H, g, lam, e

    def residual(self, values: np.ndarray):
        H, g, lam, e = self.local(values)
        u = values.ravel()[self.flat]
        f = self.rhs(self.x, u, g)
        return e[:, self.k] - f, lam

    def jacobian(self, values: np.ndarray):
        H, g, lam, e = self.local(values)
        u = values.ravel()[self.flat]
        f = self.rhs(self.x, u, g)
        F = e[:, self.k] - f
        fu, fp = self.rhs.derivatives(self.x, u, g, f)
        T = newton_tensor(H, e, self.k)
        n = self.flat.size
        rows, cols, vals = [], [], []
        for off, hterms, gterms in self._stencil:
            coef = np.zeros(n)
            for p, q, w in hterms:
                coef += w * T[:, p, q] / self.h**2
            for r, w in gterms:
                coef -= w * fp[:, r] / (2.0 * self.h)
            if not any(off):
                coef -= fu
            nb = self.pos[self.flat + int(np.dot(off, self.strides))]
            keep = nb >= 0
            rows.append(np.arange(n)[keep])
            cols.append(nb[keep])
            vals.append(coef[keep])
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
        return F, J, lam


def _linear_solve(J: sp.csr_matrix, rhs: np.ndarray, method: str, rtol: float) -> np.ndarray:
    if method == "direct":
        return spla.spsolve(J.tocsc(), rhs)
    d = J.diagonal()
    d = np.where(d != 0, d, 1.0)
    M = spla.LinearOperator(J.shape, matvec=lambda v: v / d)
    x, info = spla.bicgstab(J, rhs, rtol=rtol, atol=0.0, M=M, maxiter=2000)
    if info == 0:
        return x
    # strongly anisotropic coefficients near a degenerate boundary defeat
    # the diagonal preconditioner; retry with algebraic multigrid
    log.debug("bicgstab info=%s; retrying with AMG-preconditioned GMRES", info)
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(J.tocsr())
    x, info = spla.gmres(J, rhs, x0=x, rtol=rtol, atol=0.0, M=ml.aspreconditioner(),
                         restart=50, maxiter=40)
    if info != 0:
        log.debug("gmres info=%s; falling back to a direct solve", info)
        return spla.spsolve(J.tocsc(), rhs)
    return x


def initial_guess(domain: GridDomain, rhs: RhsSpec, k: int, boundary=None, mask=None,
                  factor: float = 1.1) -> ScalarField:
    """Convex quadratic w = a/2 |x - c|^2 - b lying below the Dirichlet data.

    ``a`` is ``factor * (sup_f / C(n, k))^(1/k)`` so that sigma_k(D^2 w) >=
    sup_f, which makes w a subsolution. ``b`` is the smallest shift keeping w
    below the data on the pinned nodes that touch a free node's stencil (for
    zero data on a box this is every boundary node). Pinned nodes then take
    the data.
    """
    n = domain.dim
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= dim, got k={k}")
    a = quadratic_coefficient(n, k, rhs.sup_f, factor)
    mask = domain.interior_mask() if mask is None else np.asarray(mask, dtype=bool)
    data = _boundary_values(domain, boundary)
    x = domain.coords()
    r2 = ((x - domain.center()) ** 2).sum(-1)
    ring = _stencil_ring(mask)
    b = float(np.max(0.5 * a * r2[ring] - data[ring])) if ring.any() else 0.0
    u = ScalarField(domain, 0.5 * a * r2 - b, mask)
    u.values[~u.mask] = data[~u.mask]
    return u


def poisson_guess(domain: GridDomain, rhs: RhsSpec, k: int, boundary=None,
                  mask=None) -> ScalarField:
    """Solution of the discrete Poisson problem Lap v = n a with the Dirichlet data.

    ``a = (f / C(n, k))^(1/k)`` is the curvature of the radial solution, so
    the Laplacian matches its trace while the values follow the data. ``f``
    is evaluated pointwise when it depends on position only, else ``sup_f``.
    """
    n = domain.dim
    mask = domain.interior_mask() if mask is None else np.asarray(mask, dtype=bool)
    data = _boundary_values(domain, boundary)
    flat = np.flatnonzero(mask.ravel())
    if rhs.kind == "position" and flat.size:
        x = domain.coords().reshape(-1, n)[flat]
        f = rhs(x, np.zeros(flat.size), np.zeros((flat.size, n)))
        a = (f / comb(n, k)) ** (1.0 / k)
    else:
        a = quadratic_coefficient(n, k, rhs.sup_f, 1.0)
    pos = np.full(mask.size, -1)
    pos[flat] = np.arange(flat.size)
    inv_h2 = 1.0 / domain.h**2
    ids = np.arange(flat.size)
    rows, cols, vals = [ids], [ids], [np.full(flat.size, -2.0 * n * inv_h2)]
    b = np.full(flat.size, n * a)
    for ax in range(n):
        stride = int(np.prod(domain.shape[ax + 1:]))
        for sgn in (1, -1):
            nb = flat + sgn * stride
            free = pos[nb] >= 0
            rows.append(ids[free])
            cols.append(pos[nb[free]])
            vals.append(np.full(int(free.sum()), inv_h2))
            b[~free] -= data.ravel()[nb[~free]] * inv_h2
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(flat.size, flat.size))
    u = ScalarField(domain, data.copy(), mask)
    if flat.size:
        u.values.ravel()[flat] = _poisson_solve(A, b, n)
    return u


def _poisson_solve(A, b, dim):
    if dim == 2:
        return spla.spsolve(A, b)
    import pyamg

    # -A is the SPD 7-point Laplacian
    ml = pyamg.ruge_stuben_solver(-A.tocsr())
    return -ml.solve(b, tol=1e-10, accel="cg")


def _stencil_ring(mask: np.ndarray) -> np.ndarray:
    """Pinned nodes within one step (diagonals included) of a free node."""
    from scipy.ndimage import binary_dilation

    grown = binary_dilation(mask, structure=np.ones((3,) * mask.ndim, dtype=bool))
    return grown & ~mask


def quadratic_coefficient(n: int, k: int, sup_f: float, factor: float = 1.1) -> float:
    return factor * (sup_f / comb(n, k)) ** (1.0 / k)


def _boundary_values(domain: GridDomain, boundary) -> np.ndarray:
    if boundary is None:
        return np.zeros(domain.shape)
    if callable(boundary):
        return np.asarray(boundary(domain.coords()), dtype=float).reshape(domain.shape)
    arr = np.asarray(boundary, dtype=float)
    return np.broadcast_to(arr, domain.shape).copy()


def solve_dirichlet(domain: GridDomain, rhs: RhsSpec, k: int, tol: float = 1e-10,
                    max_iter: int = 60, boundary=None, mask=None,
                    initial: Optional[ScalarField] = None, linear_solver: str = "auto",
                    admissible_tol: float = ADMISSIBLE_TOL):
    """Solve sigma_k(D_h^2 u) = f on the free nodes, Dirichlet data elsewhere.

    ``boundary`` is a callable of node coordinates, an array over the grid, or
    None for zero data. Returns ``(field, report)``; raises
    ``NonConvergenceError`` (carrying the report) when ``max_iter`` runs out
    and ``ConeViolationError`` when damping cannot keep the iterate admissible.
    """
    if not 1 <= k <= domain.dim:
        raise DomainError(f"need 1 <= k <= dim, got k={k}, dim={domain.dim}")
    if not tol > 0:
        raise DomainError("tol must be positive")
    if linear_solver == "auto":
        linear_solver = "direct" if domain.dim == 2 else "iterative"
    mask = domain.interior_mask() if mask is None else np.asarray(mask, dtype=bool)
    data = _boundary_values(domain, boundary)
    problem = _Problem(domain, mask, rhs, k)
    if initial is not None:
        u = ScalarField(domain, initial.values.copy(), mask)
        u.values[~mask] = data[~mask]
        return _newton(problem, u, k, tol, max_iter, linear_solver, admissible_tol)

    # Two starts: the shifted quadratic suits zero data on convex domains, the
    # Poisson start follows curved Dirichlet data. Try the one with fewer
    # inadmissible nodes first and fall back to the other.
    starts = [initial_guess(domain, rhs, k, boundary=data, mask=mask),
              poisson_guess(domain, rhs, k, boundary=data, mask=mask)]
    starts.sort(key=lambda w: int((~closed_cone_mask(nodal_spectra(w), k, admissible_tol)).sum()))
    first_error = None
    for start in starts:
        try:
            return _newton(problem, start, k, tol, max_iter, linear_solver, admissible_tol)
        except (NonConvergenceError, ConeViolationError) as exc:
            log.debug("start failed (%s), trying the next one", exc)
            first_error = first_error or exc
    raise first_error


def _newton(problem, u, k, tol, max_iter, linear_solver, admissible_tol):
    report = SolveReport()
    values = u.values

    F, J, lam = problem.jacobian(values)
    admissible = closed_cone_mask(lam, k, admissible_tol)
    res = float(np.abs(F).max()) if F.size else 0.0
    report.residual_history.append(res)
    report.violation_history.append(int((~admissible).sum()))

    for it in range(max_iter):
        if res <= tol:
            break
        rtol = 1e-7
        step = _linear_solve(J, -F, linear_solver, rtol)
        t = 1.0
        accepted = False
        any_admissible = False
        for _ in range(MAX_HALVINGS + 1):
            trial = values.copy()
            trial.ravel()[problem.flat] += t * step
            Ft, lam_t = problem.residual(trial)
            adm_t = closed_cone_mask(lam_t, k, admissible_tol)
            keeps = bool(np.all(adm_t[admissible]))
            any_admissible |= keeps
            if keeps and np.abs(Ft).max() < res:
                accepted = True
                break
            t *= 0.5
        report.iterations = it + 1
        if not accepted:
            report.final_residual = res
            report.admissibility_violations = int((~admissible).sum())
            u.values = values
            if not any_admissible:
                raise ConeViolationError(
                    f"iterate left the closed Gamma_{k} cone after {MAX_HALVINGS} halvings", report)
            raise NonConvergenceError(
                f"residual stalled at {res:.3e} (tol {tol:.1e}) after {it + 1} iterations", report)
        values = trial
        report.damping_history.append(t)
        F, J, lam = problem.jacobian(values)
        admissible = closed_cone_mask(lam, k, admissible_tol)
        res = float(np.abs(F).max())
        report.residual_history.append(res)
        report.violation_history.append(int((~admissible).sum()))
        log.debug("newton %d: residual %.3e step %.3g", it + 1, res, t)

    u.values = values
    report.final_residual = res
    report.admissibility_violations = int((~admissible).sum())
    if res > tol:
        raise NonConvergenceError(
            f"no convergence in {max_iter} iterations (residual {res:.3e})", report)
    report.converged = True
    return u, report


def nodal_spectra(u: ScalarField) -> np.ndarray:
    """Eigenvalues (largest first) of the discrete Hessian at every free node."""
    H = hessian_all(u.values, u.domain.h)[interior(u.mask, u.domain.dim)]
    return eigvalsh_desc(H)


# -- radial oracle ----------------------------------------------------------

def radial_coefficient(n: int, k: int, f_const: float) -> float:
    """c with C(n, k) c^k = f, so u = c (r^2 - R^2) / 2 solves sigma_k = f on B_R."""
    return (f_const / comb(n, k)) ** (1.0 / k)


def solve_radial(ball_radius: float, n: int, k: int, f_const: float = 1.0, mesh: int = 201,
                 f_radial: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """Radial solution of sigma_k(D^2 u) = f on the ball with u = 0 on the sphere.

    For u = u(r) the operator is C(n-1,k-1)(u'/r)^{k-1}u'' + C(n-1,k)(u'/r)^k
    = C(n-1,k-1)/(k r^{n-1}) (r^{n-k} u'^k)', so u' follows from one
    quadrature of r^{n-1} f and u from a second one. Returns an array of
    rows ``(r, u(r))``.
    """
    if not ball_radius > 0:
        raise DomainError(f"ball radius must be positive, got {ball_radius}")
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    if mesh < 2:
        raise DomainError("mesh needs at least two points")
    r = np.linspace(0.0, ball_radius, mesh)
    if f_radial is None:
        if not f_const > 0:
            raise DomainError("f must be positive")
        c = radial_coefficient(n, k, f_const)
        return np.column_stack([r, 0.5 * c * (r**2 - ball_radius**2)])

    from scipy.integrate import quad

    scale = k / comb(n - 1, k - 1)

    def du(s):
        if s == 0.0:
            return 0.0
        mass, _ = quad(lambda t: t ** (n - 1) * f_radial(np.array(t)), 0.0, s,
                       epsabs=0.0, epsrel=1e-13, limit=200)
        return (scale * mass * s ** (k - n)) ** (1.0 / k)

    u = np.empty_like(r)
    for i, ri in enumerate(r):
        val, _ = quad(du, ri, ball_radius, epsabs=0.0, epsrel=1e-11, limit=200)
        u[i] = -val
    return np.column_stack([r, u])

import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from khess.cone import closed_cone_mask
from khess.errors import DomainError, NonConvergenceError
from khess.grid import GridDomain, ScalarField
from khess.solver import (
    RhsSpec, initial_guess, newton_tensor, nodal_spectra, poisson_guess, quadratic_coefficient,
    radial_coefficient, solve_dirichlet, solve_radial,
)
from khess.symfun import sigma_table
from khess.eig import eigvalsh_desc


def _r2(x):
    return (x**2).sum(-1)


def test_initial_guess_coefficient():
    assert quadratic_coefficient(2, 2, 1.0) == pytest.approx(1.1)
    assert quadratic_coefficient(3, 2, 1.0, factor=1.0) == pytest.approx(3 ** -0.5)
    d = GridDomain.box(2, 0, 1, 17)
    w = initial_guess(d, RhsSpec.constant(1.0), 2)
    assert np.all(w.values <= 0)
    # away from the clamped boundary the Hessian is 1.1 I
    lam = nodal_spectra(w).reshape(15, 15, 2)[1:-1, 1:-1]
    assert np.allclose(sigma_table(lam)[..., 2], 1.21)


def test_poisson_guess_reproduces_quadratic_data():
    # data |x|^2/2 has Laplacian n, which is n a for f = C(n, k)
    for dim, k, f in ((2, 2, 1.0), (3, 2, 3.0)):
        d = GridDomain.box(dim, -1, 1, 9)
        exact = 0.5 * _r2(d.coords())
        w = poisson_guess(d, RhsSpec.constant(f), k, boundary=lambda x: 0.5 * _r2(x))
        assert np.abs(w.values - exact).max() < 1e-10


def test_poisson_guess_uses_local_rhs():
    # f = e^x gives trace 2 e^(x/2), matched by e^x + y^2/2 only up to O(1)
    d = GridDomain.box(2, 0, 1, 33)
    ex = lambda x: np.exp(x[..., 0]) + 0.5 * x[..., 1] ** 2
    w = poisson_guess(d, RhsSpec.position(lambda x: np.exp(x[:, 0]), np.e), 2, boundary=ex)
    assert np.all(closed_cone_mask(nodal_spectra(w), 2, 1e-10))
    assert np.array_equal(w.values[~w.mask], ex(d.coords())[~w.mask])


def test_rhs_positivity():
    with pytest.raises(DomainError):
        RhsSpec.constant(0.0)
    bad = RhsSpec.position(lambda x: x[:, 0] - 0.5, 1.0)
    with pytest.raises(DomainError):
        bad(np.array([[0.1, 0.2]]), np.zeros(1), np.zeros((1, 2)))


def test_newton_tensor_is_sigma_derivative(rng):
    # d/dt sigma_k(H + tE) = tr(T E)
    for d, k in [(2, 2), (3, 2), (3, 3), (3, 1)]:
        H = rng.normal(size=(d, d))
        H = H + H.T
        E = rng.normal(size=(d, d))
        E = E + E.T
        e = sigma_table(np.linalg.eigvalsh(H))
        T = newton_tensor(H[None], e[None], k)[0]
        s = lambda t: sigma_table(np.linalg.eigvalsh(H + t * E))[k]
        fd = (s(1e-6) - s(-1e-6)) / 2e-6
        assert np.trace(T @ E) == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_monge_ampere_quadratic_exact():
    d = GridDomain.box(2, -1, 1, 33)
    g = lambda x: 0.5 * _r2(x)
    u, rep = solve_dirichlet(d, RhsSpec.constant(1.0), 2, boundary=g)
    assert np.abs(u.values - g(d.coords())).max() <= 1e-9
    assert rep.converged and rep.final_residual <= 1e-10


def test_sigma2_3d_quadratic_exact():
    d = GridDomain.box(3, -1, 1, 17)
    g = lambda x: _r2(x) / (2 * np.sqrt(3))
    u, rep = solve_dirichlet(d, RhsSpec.constant(1.0), 2, boundary=g)
    assert np.abs(u.values - g(d.coords())).max() <= 1e-9


def test_gradient_dependent_rhs_quadratic_exact():
    # f equals 1 exactly on u = |x|^2/2, where Du = x
    def f(x, u, p):
        return np.exp(0.1 * (_r2(p) - _r2(x)) + 0.2 * (u - 0.5 * _r2(x)))
    rhs = RhsSpec("full", f, sup_f=np.e)
    d = GridDomain.box(2, -1, 1, 25)
    g = lambda x: 0.5 * _r2(x)
    u, rep = solve_dirichlet(d, rhs, 2, boundary=g)
    assert np.abs(u.values - g(d.coords())).max() <= 1e-9


def _masked_disc(res, n=2, k=2, f_radial=None, f_const=1.0, R=1.0, half=1.25):
    d = GridDomain.box(n, -half, half, res)
    x = d.coords()
    r = np.sqrt(_r2(x))
    mask = (r < R) & d.interior_mask()
    if f_radial is None:
        c = radial_coefficient(n, k, f_const)
        exact = 0.5 * c * (r**2 - R**2)
        rhs = RhsSpec.constant(f_const)
    else:
        big = half * np.sqrt(n) + 0.01
        prof = solve_radial(big, n, k, mesh=801, f_radial=f_radial)
        spline = CubicSpline(prof[:, 0], prof[:, 1])
        exact = spline(r) - spline(R)
        rhs = RhsSpec.position(lambda x: f_radial(np.sqrt(_r2(x))), float(f_radial(np.array(big))))
    u, _ = solve_dirichlet(d, rhs, k, boundary=exact, mask=mask)
    return d, np.abs(u.values - exact)[mask].max()


@pytest.mark.parametrize("res", [65, 129])
def test_masked_disc_matches_radial_constant(res):
    d, err = _masked_disc(res)
    assert err <= 5 * d.h**2


@pytest.mark.parametrize("res", [65, 129])
def test_masked_disc_matches_radial_varying(res):
    d, err = _masked_disc(res, f_radial=lambda r: 1.0 + r**2)
    assert err <= 5 * d.h**2


def test_comparison_bracketing():
    for dim, res in [(2, 65), (3, 17)]:
        d = GridDomain.box(dim, 0, 1, res)
        rhs = RhsSpec.constant(1.0)
        u, rep = solve_dirichlet(d, rhs, 2)
        w = initial_guess(d, rhs, 2)
        assert np.all(w.values <= u.values + 1e-9)
        assert np.all(u.values <= 1e-9)
        assert rep.admissibility_violations == 0


def test_admissible_nodes_never_leave_cone():
    d = GridDomain.box(2, 0, 1, 33)
    u, rep = solve_dirichlet(d, RhsSpec.constant(1.0), 2)
    hist = rep.violation_history
    assert all(a >= b for a, b in zip(hist, hist[1:]))
    assert np.all(closed_cone_mask(nodal_spectra(u), 2, 1e-10))


def test_max_iter_raises_with_report():
    d = GridDomain.box(2, 0, 1, 33)
    with pytest.raises(NonConvergenceError) as info:
        solve_dirichlet(d, RhsSpec.constant(1.0), 2, max_iter=2)
    assert info.value.report.iterations == 2


def test_bad_arguments():
    d = GridDomain.box(2, 0, 1, 9)
    with pytest.raises(DomainError):
        solve_dirichlet(d, RhsSpec.constant(1.0), 3)
    with pytest.raises(DomainError):
        solve_dirichlet(d, RhsSpec.constant(1.0), 2, tol=0.0)


@pytest.mark.parametrize("n, k, c", [(2, 2, 1.0), (3, 2, 3 ** -0.5), (3, 3, 1.0)])
def test_radial_constant(n, k, c):
    prof = solve_radial(1.0, n, k, 1.0, mesh=11)
    assert np.allclose(prof[:, 1], 0.5 * c * (prof[:, 0] ** 2 - 1.0), rtol=0, atol=1e-15)


def test_radial_quadrature_agrees_with_closed_form():
    prof = solve_radial(1.0, 3, 2, mesh=21, f_radial=lambda r: np.ones_like(r))
    assert np.allclose(prof[:, 1], 0.5 * 3**-0.5 * (prof[:, 0] ** 2 - 1.0), rtol=0, atol=1e-10)


def test_radial_rejects_bad_radius():
    with pytest.raises(DomainError):
        solve_radial(0.0, 2, 2)


def test_smooth_problem_second_order():
    # u = exp(x) + y^2/2 has det D^2 u = exp(x)
    exact = lambda x: np.exp(x[..., 0]) + 0.5 * x[..., 1] ** 2
    rhs = RhsSpec.position(lambda x: np.exp(x[:, 0]), np.e)
    errs = []
    for res in (17, 33, 65):
        d = GridDomain.box(2, 0, 1, res)
        u, _ = solve_dirichlet(d, rhs, 2, boundary=exact)
        errs.append(np.abs(u.values - exact(d.coords())).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8)


def test_self_convergence_zero_boundary_square():
    # Richardson self-convergence on the unit square with zero data
    vals = []
    for res in (33, 65, 129):
        d = GridDomain.box(2, 0, 1, res)
        u, _ = solve_dirichlet(d, RhsSpec.constant(1.0), 2)
        vals.append(u.values)
    coarse = [vals[0], vals[1][::2, ::2], vals[2][::4, ::4]]
    e1 = np.abs(coarse[0] - coarse[1]).max()
    e2 = np.abs(coarse[1] - coarse[2]).max()
    assert np.log2(e1 / e2) >= 1.8

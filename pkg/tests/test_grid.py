import numpy as np
import pytest

from khess.errors import DomainError
from khess.grid import (
    GridDomain, ScalarField, discrete_hessian, field_from_function, gradient_field,
    hessian_all, read_field, write_field,
)


def test_domain_invariants():
    with pytest.raises(DomainError):
        GridDomain.box(2, 0, 1, 4)
    with pytest.raises(DomainError):
        GridDomain(2, (0, 0), (1, 2), 9)
    with pytest.raises(DomainError):
        GridDomain.box(4, 0, 1, 9)
    d = GridDomain.box(3, -1, 1, 9)
    assert d.h == 0.25 and d.shape == (9, 9, 9)


def test_hessian_exact_on_quadratics():
    d = GridDomain.box(2, -1, 1, 11)
    half_x2 = field_from_function(d, lambda x: 0.5 * x[..., 0] ** 2)
    H = hessian_all(half_x2.values, d.h)
    assert np.allclose(H[..., 0, 0], 1.0, atol=1e-12) and np.allclose(H[..., 1, 1], 0.0, atol=1e-12)
    assert np.allclose(H[..., 0, 1], 0.0, atol=1e-12)
    xy = field_from_function(d, lambda x: x[..., 0] * x[..., 1])
    m = discrete_hessian(xy, (3, 7)).entries
    assert m == pytest.approx(np.array([[0.0, 1.0], [1.0, 0.0]]), abs=1e-12)


def test_quartic_truncation():
    # (h^4 - 0 + h^4) / h^2 = 2 h^2 at x = 0
    d = GridDomain.box(2, -1, 1, 9)
    u = field_from_function(d, lambda x: x[..., 0] ** 4)
    m = discrete_hessian(u, (4, 4)).entries
    assert m[0, 0] == pytest.approx(2 * d.h**2, rel=1e-12)


def test_hessian_3d_mixed():
    d = GridDomain.box(3, 0, 1, 7)
    u = field_from_function(d, lambda x: x[..., 0] * x[..., 2] + 0.5 * x[..., 1] ** 2)
    m = discrete_hessian(u, (2, 3, 4)).entries
    assert m == pytest.approx(np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]]), abs=1e-12)


def test_boundary_node_rejected():
    d = GridDomain.box(2, 0, 1, 9)
    u = field_from_function(d, lambda x: x[..., 0])
    with pytest.raises(DomainError):
        discrete_hessian(u, (0, 3))


def test_gradient_examples():
    d = GridDomain.box(2, 0, 1, 9)
    g = gradient_field(field_from_function(d, lambda x: x[..., 0]))
    assert np.allclose(g[..., 0], 1.0, atol=1e-12) and np.allclose(g[..., 1], 0.0)
    assert np.all(gradient_field(ScalarField(d, np.full(d.shape, 3.0))) == 0.0)
    g2 = gradient_field(field_from_function(d, lambda x: x[..., 0] ** 2))
    # x = 0.5 is node 4, interior index 3
    assert g2[3, 2, 0] == pytest.approx(1.0, abs=1e-14)


def test_mask_must_be_interior():
    d = GridDomain.box(2, 0, 1, 9)
    with pytest.raises(DomainError):
        ScalarField(d, np.zeros(d.shape), np.ones(d.shape, bool))


def test_field_roundtrip_bit_exact(tmp_path, rng):
    d = GridDomain(2, (-0.3, 0.1), (0.7, 1.1), 13)
    u = ScalarField(d, rng.normal(size=d.shape) * 10.0 ** rng.uniform(-300, 300, d.shape))
    p = tmp_path / "u.field"
    write_field(p, u)
    back = read_field(p)
    assert back.domain == d
    assert np.array_equal(back.values, u.values)
    first = p.read_text().splitlines()[0]
    assert first.startswith("khess-field v1 dim=2 res=13 low=")


def test_read_field_rejects_garbage(tmp_path):
    p = tmp_path / "bad.field"
    p.write_text("hello\n1\n")
    with pytest.raises(DomainError):
        read_field(p)
    p.write_text("khess-field v1 dim=2 res=5 low=0,0 high=1,1\n1\n")
    with pytest.raises(DomainError):
        read_field(p)

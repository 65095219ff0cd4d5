"""Uniform box grids, nodal fields, central-difference derivatives, field files."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError
from .symfun import SymMatrix

FIELD_MAGIC = "khess-field v1"


@dataclass(frozen=True)
class GridDomain:
    dim: int
    lows: tuple
    highs: tuple
    resolution: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise DomainError(f"dim must be 2 or 3, got {self.dim}")
        lows = tuple(float(v) for v in np.broadcast_to(self.lows, (self.dim,)))
        highs = tuple(float(v) for v in np.broadcast_to(self.highs, (self.dim,)))
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        if self.resolution < 5:
            raise DomainError(f"resolution must be >= 5, got {self.resolution}")
        widths = np.subtract(highs, lows)
        if np.any(widths <= 0):
            raise DomainError("highs must exceed lows on every axis")
        if not np.allclose(widths, widths[0], rtol=1e-12, atol=0):
            raise DomainError("spacing must be identical on all axes (use a cube)")

    @classmethod
    def box(cls, dim: int, low: float, high: float, resolution: int) -> "GridDomain":
        return cls(dim, (low,) * dim, (high,) * dim, resolution)

    @property
    def h(self) -> float:
        return (self.highs[0] - self.lows[0]) / (self.resolution - 1)

    @property
    def shape(self) -> tuple:
        return (self.resolution,) * self.dim

    def axes(self) -> list:
        return [np.linspace(lo, hi, self.resolution) for lo, hi in zip(self.lows, self.highs)]

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (dim,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lows) + np.asarray(self.highs))

    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[(slice(1, -1),) * self.dim] = True
        return m

    def describe(self) -> dict:
        return {"dim": self.dim, "lows": list(self.lows), "highs": list(self.highs),
                "resolution": self.resolution, "h": self.h}


@dataclass
class ScalarField:
    """Nodal values on a grid. ``mask`` marks the free (interior) nodes;
    every other node carries Dirichlet data."""

    domain: GridDomain
    values: np.ndarray
    mask: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.domain.shape)
        if self.mask is None:
            self.mask = self.domain.interior_mask()
        else:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(self.domain.shape)
            if np.any(self.mask & ~self.domain.interior_mask()):
                raise DomainError("free nodes must be strictly inside the box")

    @property
    def boundary(self) -> np.ndarray:
        return self.values[~self.mask]

    def copy(self) -> "ScalarField":
        return ScalarField(self.domain, self.values.copy(), self.mask.copy())

    def scaled(self, s: float) -> "ScalarField":
        return ScalarField(self.domain, s * self.values, self.mask.copy())


def field_from_function(domain: GridDomain, fn, mask=None) -> ScalarField:
    x = domain.coords()
    return ScalarField(domain, fn(x), mask)


def _shift(values: np.ndarray, offset: Sequence[int]) -> np.ndarray:
    """View of ``values`` at ``node + offset`` for all strictly interior nodes."""
    sl = tuple(slice(1 + o, values.shape[ax] - 1 + o) for ax, o in enumerate(offset))
    return values[sl]


def _unit(dim: int, axis: int, sign: int = 1) -> tuple:
    e = [0] * dim
    e[axis] = sign
    return tuple(e)


def hessian_all(values: np.ndarray, h: float) -> np.ndarray:
    """Central-difference Hessians at all strictly interior nodes.

    Pure second derivatives use the three-point stencil, mixed ones the
    four-point cross stencil over ``4 h^2``. Shape: ``interior + (d, d)``.
    """
    dim = values.ndim
    zero = (0,) * dim
    centre = _shift(values, zero)
    H = np.empty(centre.shape + (dim, dim))
    for p in range(dim):
        H[..., p, p] = (_shift(values, _unit(dim, p)) - 2.0 * centre
                        + _shift(values, _unit(dim, p, -1))) / h**2
    for p, q in combinations(range(dim), 2):
        def off(sp, sq):
            o = [0] * dim
            o[p], o[q] = sp, sq
            return _shift(values, o)
        mixed = (off(1, 1) - off(1, -1) - off(-1, 1) + off(-1, -1)) / (4.0 * h**2)
        H[..., p, q] = mixed
        H[..., q, p] = mixed
    return H


def gradient_all(values: np.ndarray, h: float) -> np.ndarray:
    dim = values.ndim
    g = np.empty(_shift(values, (0,) * dim).shape + (dim,))
    for r in range(dim):
        g[..., r] = (_shift(values, _unit(dim, r)) - _shift(values, _unit(dim, r, -1))) / (2.0 * h)
    return g


def _check_interior(domain: GridDomain, node) -> tuple:
    node = tuple(int(i) for i in node)
    if len(node) != domain.dim:
        raise DomainError(f"node {node} has wrong dimension")
    if any(i < 1 or i > domain.resolution - 2 for i in node):
        raise DomainError(f"node {node} is not strictly interior")
    return node


def discrete_hessian(u: ScalarField, node) -> SymMatrix:
    node = _check_interior(u.domain, node)
    lo = tuple(slice(i - 1, i + 2) for i in node)
    H = hessian_all(u.values[lo], u.domain.h)
    return SymMatrix(H.reshape(u.domain.dim, u.domain.dim))


def gradient_field(u: ScalarField) -> np.ndarray:
    """Central-difference gradient on strictly interior nodes, shape ``interior + (dim,)``."""
    return gradient_all(u.values, u.domain.h)


def interior(arr: np.ndarray, dim: int) -> np.ndarray:
    """Restrict a full-grid nodal array to the strictly interior nodes."""
    return arr[(slice(1, -1),) * dim]


# -- field files ------------------------------------------------------------

def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def write_field(path, u: ScalarField) -> None:
    d = u.domain
    header = (f"{FIELD_MAGIC} dim={d.dim} res={d.resolution} "
              f"low={_fmt_vec(d.lows)} high={_fmt_vec(d.highs)}")
    lines = [header] + [format(float(v), ".17g") for v in u.values.ravel(order="C")]
    Path(path).write_text("\n".join(lines) + "\n")


def read_field(path) -> ScalarField:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(FIELD_MAGIC):
        raise DomainError(f"{path}: not a {FIELD_MAGIC} file")
    meta = dict(tok.split("=", 1) for tok in text[0][len(FIELD_MAGIC):].split())
    try:
        dim = int(meta["dim"])
        res = int(meta["res"])
        lows = tuple(float(x) for x in meta["low"].split(","))
        highs = tuple(float(x) for x in meta["high"].split(","))
    except (KeyError, ValueError) as exc:
        raise DomainError(f"{path}: malformed header: {text[0]!r}") from exc
    domain = GridDomain(dim, lows, highs, res)
    body = [line for line in text[1:] if line.strip()]
    if len(body) != res**dim:
        raise DomainError(f"{path}: expected {res ** dim} values, found {len(body)}")
    vals = np.array([float(x) for x in body]).reshape(domain.shape)
    return ScalarField(domain, vals)

"""Masked Cartesian discretization of the unit ball.

The domain is the open unit ball B1 in R^d (d = 1 or 2) embedded in a uniform
grid on [-1, 1]^d with an odd number of nodes per axis, so the origin is a
node.  Nodes are classified as

* ``interior``: ``|x| < 1 - band_width*h`` -- the free degrees of freedom;
* ``band``: positive quadrature weight but not interior -- carries the
  Dirichlet data g (values pinned, normal derivative free);
* ``exterior``: zero quadrature weight (the cell lies entirely outside B1).

Quadrature weights are ``h^d`` times the fraction of each node's cell inside
the ball, estimated with 4^d subsamples per cell; interior cells are whole
and get exactly ``h^d``.  ``hess_mask`` marks the nodes whose full
finite-difference stencil fits inside the array; the Hessian part of the
energy is integrated over it, which covers the whole ball up to O(h^2)
pole slivers.

Grids and fields are immutable values once built and every operation here is
pure, so they are safe to share across threads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InputError, InternalError

_SUBSAMPLES_PER_AXIS = 4


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform masked grid; see the module docstring for the node classes."""

    dim: int
    n: int
    band_width: float
    h: float
    axes: np.ndarray
    points: np.ndarray
    radius: np.ndarray
    weights: np.ndarray
    interior: np.ndarray
    band: np.ndarray
    hess_mask: np.ndarray

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def exterior(self) -> np.ndarray:
        return self.weights == 0.0

    @property
    def nonexterior(self) -> np.ndarray:
        return self.weights > 0.0

    def key(self) -> tuple:
        """Reproducibility key: grids rebuild exactly from these parameters."""
        return (self.dim, self.n, self.band_width)


def _cell_fractions(points: np.ndarray, h: float, dim: int) -> np.ndarray:
    """Fraction of each node's cell inside the unit ball, by subsampling."""
    k = _SUBSAMPLES_PER_AXIS
    offsets_1d = (np.arange(k) + 0.5) / k * h - h / 2.0
    grids = np.meshgrid(*([offsets_1d] * dim), indexing="ij")
    offsets = np.stack([g.ravel() for g in grids], axis=-1)
    count = np.zeros(points.shape[:-1])
    for off in offsets:
        shifted = points + off
        count += (np.sum(shifted * shifted, axis=-1) < 1.0)
    return count / offsets.shape[0]


def _stencil_shifts(dim: int) -> list:
    """Offsets a full second-difference stencil reads (axis and diagonal)."""
    if dim == 1:
        return [(-1,), (1,)]
    return [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]


def shifted(arr: np.ndarray, offset: tuple) -> np.ndarray:
    """Zero-padded translate: ``out[j] = arr[j - offset]``."""
    out = np.zeros_like(arr)
    src = []
    dst = []
    for ax, s in enumerate(offset):
        n = arr.shape[ax]
        if abs(s) >= n:
            return out
        dst.append(slice(max(s, 0), n + min(s, 0)))
        src.append(slice(max(-s, 0), n + min(-s, 0)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def build_grid(dim: int, n: int, band_width: float = 2.0) -> Grid:
    """Build the masked grid; deterministic in (dim, n, band_width).

    ``n`` must be odd and at least 9.  For ``dim == 2`` the band must be at
    least one layer wide so interior stencils never read a zero-weight node.
    """
    if dim == 3:
        raise InputError("dim=3 grids are unsupported in v1 (matrices support d=3)")
    if dim not in (1, 2):
        raise InputError(f"grid dim must be 1 or 2, got {dim}")
    if n % 2 == 0 or n < 9:
        raise InputError(f"n must be odd and >= 9, got {n}")
    if band_width <= 0.0:
        raise InputError("band_width must be positive")
    if dim == 2 and band_width < 1.0:
        raise InputError(
            "dim=2 grids need band_width >= 1 so diagonal stencil neighbours "
            "stay off zero-weight nodes"
        )
    h = 2.0 / (n - 1)
    if band_width * h >= 1.0:
        raise InputError(f"band_width={band_width} leaves no interior at n={n}")
    axes = np.linspace(-1.0, 1.0, n)
    mesh = np.meshgrid(*([axes] * dim), indexing="ij")
    points = np.stack(mesh, axis=-1)
    radius = np.sqrt(np.sum(points * points, axis=-1))
    weights = _cell_fractions(points, h, dim) * h**dim
    interior = (radius < 1.0 - band_width * h) & (weights > 0.0)
    band = (weights > 0.0) & ~interior

    edge = np.zeros((n,) * dim, dtype=bool)
    for ax in range(dim):
        idx_lo = [slice(None)] * dim
        idx_lo[ax] = 0
        idx_hi = [slice(None)] * dim
        idx_hi[ax] = n - 1
        edge[tuple(idx_lo)] = True
        edge[tuple(idx_hi)] = True
    hess_mask = (weights > 0.0) & ~edge

    # interior stencils must never read an exterior (zero-weight) node
    positive = weights > 0.0
    for off in _stencil_shifts(dim):
        if not shifted(positive, tuple(-s for s in off))[interior].all():
            raise InputError(
                f"band_width={band_width} too small: an interior stencil at "
                f"n={n} reaches an exterior node"
            )

    return Grid(
        dim=dim,
        n=n,
        band_width=float(band_width),
        h=h,
        axes=axes,
        points=points,
        radius=radius,
        weights=weights,
        interior=interior,
        band=band,
        hess_mask=hess_mask,
    )


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A grid function: one real value per node (treat as immutable)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise InputError(
                f"field shape {values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(values[self.grid.nonexterior])):
            raise InputError("field values must be finite at non-exterior nodes")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def full(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_callable(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "ScalarField":
        """Evaluate ``fn`` on the node positions (vectorized over (..., d))."""
        return cls(grid, np.asarray(fn(grid.points), dtype=float))


@dataclass(frozen=True, eq=False)
class HessianField:
    """Second-difference Hessians: one symmetric (d, d) matrix per masked node."""

    grid: Grid
    values: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Dirichlet data g extended to every node.

    ``profile``, when given, regenerates g on any grid (needed by refinement
    drivers).  With ``nonnegative`` set, g must be >= 0 and not identically
    zero.
    """

    g: ScalarField
    nonnegative: bool = False
    profile: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.nonnegative:
            vals = self.g.values
            if np.min(vals) < 0.0:
                raise InputError("boundary data flagged nonnegative has negative values")
            if np.max(np.abs(vals)) == 0.0:
                raise InputError("boundary data flagged nonnegative must not vanish identically")

    def on_grid(self, grid: Grid) -> "BoundaryData":
        """Re-materialize on another grid via the profile."""
        if self.g.grid is grid:
            return self
        if self.profile is None:
            raise InputError(
                "boundary data has no analytic profile; cannot transfer to a new grid"
            )
        return BoundaryData(
            ScalarField.from_callable(grid, self.profile),
            nonnegative=self.nonnegative,
            profile=self.profile,
        )


def second_differences(values: np.ndarray, h: float, dim: int) -> np.ndarray:
    """All Hessian entries by central differences, valid away from the array edge.

    Diagonal entries use the 3-point stencil, mixed entries the 4-point cross
    stencil; both are exact on quadratics.
    """
    out = np.zeros(values.shape + (dim, dim))
    h2 = h * h
    for ax in range(dim):
        e = tuple(1 if a == ax else 0 for a in range(dim))
        out[..., ax, ax] = (
            shifted(values, e) + shifted(values, tuple(-s for s in e)) - 2.0 * values
        ) / h2
    if dim == 2:
        cross = (
            shifted(values, (1, 1))
            + shifted(values, (-1, -1))
            - shifted(values, (1, -1))
            - shifted(values, (-1, 1))
        ) / (4.0 * h2)
        out[..., 0, 1] = cross
        out[..., 1, 0] = cross
    return out


def hessian(u: ScalarField, extended: bool = False) -> HessianField:
    """Discrete Hessian field of ``u``.

    By default values are reported on interior nodes, whose stencils read only
    interior or band nodes.  With ``extended=True`` the mask widens to every
    non-edge node of positive weight (the energy-quadrature scope); there the
    stencils may read the pinned g extension on band and fringe nodes.
    """
    grid = u.grid
    mask = grid.hess_mask if extended else grid.interior
    if not extended:
        positive = grid.nonexterior
        for off in _stencil_shifts(grid.dim):
            if not shifted(positive, tuple(-s for s in off))[grid.interior].all():
                raise InternalError(
                    "mask misconfiguration: an interior stencil reaches an exterior node"
                )
    full = second_differences(u.values, grid.h, grid.dim)
    full[~mask] = 0.0
    return HessianField(grid=grid, values=full, mask=mask)


def gradient_field(u: ScalarField) -> np.ndarray:
    """First-order central differences of ``u``; valid on interior nodes."""
    grid = u.grid
    out = np.zeros(grid.shape + (grid.dim,))
    for ax in range(grid.dim):
        e = tuple(1 if a == ax else 0 for a in range(grid.dim))
        # shifted(v, s)[j] = v[j - s], so the forward neighbour is shifted(v, -e)
        out[..., ax] = (shifted(u.values, tuple(-s for s in e)) - shifted(u.values, e)) / (
            2.0 * grid.h
        )
    out[~grid.interior] = 0.0
    return out


def apply_trace(u: ScalarField, bd: BoundaryData) -> ScalarField:
    """Overwrite band and exterior nodes with g; interior untouched."""
    if bd.g.grid.shape != u.grid.shape or bd.g.grid.h != u.grid.h:
        raise InputError("boundary data lives on a different grid")
    out = u.values.copy()
    pinned = ~u.grid.interior
    out[pinned] = bd.g.values[pinned]
    return ScalarField(u.grid, out)


def integrate(f: ScalarField) -> float:
    """Quadrature over the ball: sum of values times node weights."""
    return float(np.sum(f.values * f.grid.weights))


# ---------------------------------------------------------------------------
# boundary profiles (all satisfy A4 for positive amplitude)


def boundary_constant(grid: Grid, a: float) -> BoundaryData:
    def profile(points):
        points = np.asarray(points)
        return np.full(points.shape[:-1], float(a))

    return BoundaryData(ScalarField.from_callable(grid, profile), nonnegative=a > 0, profile=profile)


def boundary_half_affine(grid: Grid, a: float) -> BoundaryData:
    """g(x) = a*(1 + x_1)/2, vanishing only on the x_1 = -1 face."""

    def profile(points):
        return 0.5 * float(a) * (1.0 + np.asarray(points)[..., 0])

    return BoundaryData(ScalarField.from_callable(grid, profile), nonnegative=a > 0, profile=profile)


def boundary_radial_bump(grid: Grid, a: float, width: float = 0.45) -> BoundaryData:
    """Gaussian-profile radial bump g(x) = a * exp(-|x|^2 / (2 width^2))."""
    if width <= 0:
        raise InputError("bump width must be positive")

    def profile(points):
        points = np.asarray(points)
        r2 = np.sum(points * points, axis=-1)
        return float(a) * np.exp(-r2 / (2.0 * width * width))

    return BoundaryData(ScalarField.from_callable(grid, profile), nonnegative=a > 0, profile=profile)


def boundary_from_csv(grid: Grid, path, nonnegative: bool = True) -> BoundaryData:
    return BoundaryData(load_field_csv(grid, path), nonnegative=nonnegative, profile=None)


BOUNDARY_PROFILES = ("constant", "half_affine", "radial_bump", "csv")


def make_boundary(grid: Grid, kind: str, amplitude: float, width: float = 0.45, csv_path=None) -> BoundaryData:
    if kind == "constant":
        return boundary_constant(grid, amplitude)
    if kind == "half_affine":
        return boundary_half_affine(grid, amplitude)
    if kind == "radial_bump":
        return boundary_radial_bump(grid, amplitude, width)
    if kind == "csv":
        if csv_path is None:
            raise InputError("csv boundary needs a file path")
        return boundary_from_csv(grid, csv_path)
    raise InputError(f"unknown boundary profile {kind!r}; choose from {BOUNDARY_PROFILES}")


# ---------------------------------------------------------------------------
# CSV import/export: header x1[,x2],value, rows lexicographic by node index


def save_field_csv(path, field: ScalarField) -> None:
    grid = field.grid
    header = [f"x{i + 1}" for i in range(grid.dim)] + ["value"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx in np.ndindex(grid.shape):
            coords = [repr(float(c)) for c in grid.points[idx]]
            writer.writerow(coords + [repr(float(field.values[idx]))])


def load_field_csv(grid: Grid, path) -> ScalarField:
    values = np.empty(grid.shape)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected_cols = grid.dim + 1
        if header is None or len(header) != expected_cols:
            raise InputError(f"CSV header must have {expected_cols} columns")
        rows = list(reader)
    if len(rows) != int(np.prod(grid.shape)):
        raise InputError(
            f"CSV has {len(rows)} rows, grid has {int(np.prod(grid.shape))} nodes"
        )
    for row, idx in zip(rows, np.ndindex(grid.shape)):
        coords = np.array([float(c) for c in row[: grid.dim]])
        if np.max(np.abs(coords - grid.points[idx])) > 1e-9:
            raise InputError(f"CSV row order mismatch at node index {idx}")
        values[idx] = float(row[grid.dim])
    return ScalarField(grid, values)

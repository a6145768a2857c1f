"""
Grid Module
Uniform tensor grids, sampled fields, affine functions and jets.
Everything else in the lab computes on these value types.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np


class InvalidGridError(ValueError):
    """Raised when grid parameters do not describe a valid uniform grid"""


class SamplingError(ValueError):
    """Raised when a sampled function returns a non-finite value"""


class EmptyBallError(ValueError):
    """Raised when a ball restriction contains no grid points"""


# Slack for the Euclidean ball test so that points sitting on the sphere
# survive the rounding of linspace coordinates.
BALL_SLACK = 1e-12


@dataclass(frozen=True)
class Grid:
    """Uniform grid over the box [lo, hi]^dim with n points per axis"""
    dim: int
    n: int
    lo: float
    hi: float

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n ** self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @cached_property
    def points(self) -> np.ndarray:
        """All grid coordinates as a (size, dim) array in lexicographic order"""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def coord(self, index: int) -> np.ndarray:
        multi = np.unravel_index(index, self.shape)
        return self.axis[list(multi)]

    def index_of(self, point) -> int:
        """Flat index of the grid point nearest to `point`"""
        point = np.atleast_1d(np.asarray(point, dtype=float))
        multi = np.rint((point - self.lo) / self.h).astype(int)
        multi = np.clip(multi, 0, self.n - 1)
        return int(np.ravel_multi_index(tuple(multi), self.shape))

    @cached_property
    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[(slice(1, -1),) * self.dim] = True
        return mask.ravel()

    @property
    def boundary_mask(self) -> np.ndarray:
        return ~self.interior_mask

    def ball_mask(self, center, radius: float) -> np.ndarray:
        center = np.asarray(center, dtype=float).reshape(self.dim)
        dist = np.linalg.norm(self.points - center, axis=1)
        return dist <= radius + BALL_SLACK * max(1.0, radius)

    def header(self) -> str:
        return f"# dim={self.dim} n={self.n} lo={self.lo:.17g} hi={self.hi:.17g}"


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values sampled on every point of a grid"""
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if values.size != self.grid.size:
            raise ValueError(
                f"Field has {values.size} values but the grid has {self.grid.size} points"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise SamplingError(f"Non-finite value at index {bad}, point {self.grid.coord(bad)}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        """Values reshaped to the grid shape (axis k is coordinate k)"""
        return self.values.reshape(self.grid.shape)

    def scaled(self, factor: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * factor)


@dataclass(frozen=True, eq=False)
class AffineFn:
    """l(X) = a + b.X"""
    a: float
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=float)))

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.a + X @ self.b

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b.tolist()}


@dataclass(frozen=True, eq=False)
class Jet:
    """Value, gradient and Hessian of a function at one point"""
    value: float
    gradient: np.ndarray
    hessian: np.ndarray

    def __post_init__(self):
        gradient = np.atleast_1d(np.asarray(self.gradient, dtype=float))
        dim = gradient.size
        hessian = np.asarray(self.hessian, dtype=float).reshape(dim, dim)
        # keep only the upper triangle so the stored matrix is exactly symmetric
        upper = np.triu(hessian)
        hessian = upper + np.triu(upper, 1).T
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "gradient", gradient)
        object.__setattr__(self, "hessian", hessian)

    @property
    def dim(self) -> int:
        return self.gradient.size

    def scaled(self, value_factor: float, grad_factor: float, hess_factor: float) -> "Jet":
        return Jet(self.value * value_factor, self.gradient * grad_factor, self.hessian * hess_factor)


def make_grid(dim: int, n: int, lo: float, hi: float) -> Grid:
    """
    Build a uniform grid over [lo, hi]^dim.

    Args:
        dim: 1 or 2
        n: points per axis (at least 3)
        lo, hi: box corners, lo < hi

    Returns:
        Grid with spacing (hi - lo) / (n - 1)
    """
    if dim not in (1, 2):
        raise InvalidGridError(f"dim must be 1 or 2, got {dim}")
    if int(n) != n or n < 3:
        raise InvalidGridError(f"need at least 3 points per axis, got n={n}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise InvalidGridError(f"need lo < hi, got lo={lo}, hi={hi}")
    return Grid(dim=int(dim), n=int(n), lo=float(lo), hi=float(hi))


def sample(grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> ScalarField:
    """
    Sample a vectorized function on every grid point.

    `fn` takes an (N, dim) array of points and returns N values.
    """
    with np.errstate(all="ignore"):
        values = np.asarray(fn(grid.points), dtype=float)
    values = np.broadcast_to(values, (grid.size,)).copy()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        point = grid.coord(int(bad[0]))
        raise SamplingError(f"Function is not finite at grid point {point.tolist()} (index {bad[0]})")
    return ScalarField(grid, values)


def affine_field(grid: Grid, ell: AffineFn) -> ScalarField:
    return ScalarField(grid, ell(grid.points))


def sup_norm_on_ball(field: ScalarField, center, radius: float) -> float:
    """max |values| over grid points X with |X - center| <= radius"""
    mask = field.grid.ball_mask(center, radius)
    if not mask.any():
        raise EmptyBallError(f"No grid points within {radius} of {np.asarray(center).tolist()}")
    return float(np.max(np.abs(field.values[mask])))


def ball_values(field: ScalarField, center, radius: float,
                min_points: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Points and values of the grid restricted to a closed ball"""
    mask = field.grid.ball_mask(center, radius)
    count = int(mask.sum())
    if count == 0 or (min_points is not None and count < min_points):
        raise EmptyBallError(
            f"Ball of radius {radius} around {np.asarray(center).tolist()} holds {count} grid points"
        )
    return field.grid.points[mask], field.values[mask]

"""
Heat Kernels and Brownian Paths on the Flat Torus

Everything here lives on M = R^d / Z^d with the canonical representative in
[0, 1)^d.

Features:
- Theta-sum transition densities with a dual (Fourier) branch for large beta
- Brownian bridges and loops: winding draw, then Levy midpoint refinement
- Translation group elements x -> x + theta A (mod 1)
- Semigroup and normalization residuals on periodic grids
- CSV dumps of discretized paths
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import IO, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import BadSliceCount, ConfigInvalid, DimensionMismatch, NonpositiveBeta, NonpositiveTolerance

logger = logging.getLogger(__name__)

# Windings whose weight falls below this are never drawn
WINDING_TOL = 1e-17


def reduce_mod1(x) -> np.ndarray:
    """Half-open reduction to [0, 1)"""
    r = np.mod(np.asarray(x, dtype=float), 1.0)
    return np.where(r >= 1.0, 0.0, r)


def minimal_image(delta) -> np.ndarray:
    """Representative of delta mod 1 in [-1/2, 1/2]"""
    delta = np.asarray(delta, dtype=float)
    return delta - np.round(delta)


@dataclass(frozen=True)
class TorusPoint:
    coords: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'coords', tuple(float(c) for c in reduce_mod1(self.coords).ravel()))

    @property
    def d(self) -> int:
        return len(self.coords)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.coords)

    @classmethod
    def of(cls, coords) -> 'TorusPoint':
        return cls(tuple(np.atleast_1d(np.asarray(coords, dtype=float))))


PointLike = Union[TorusPoint, Sequence[float], np.ndarray, float]


def _as_array(x: PointLike) -> np.ndarray:
    if isinstance(x, TorusPoint):
        return x.array
    return np.atleast_1d(np.asarray(x, dtype=float))


def _check_beta(beta: float):
    if not beta > 0:
        raise NonpositiveBeta(f"beta must be positive, got {beta}")


def _check_tol(tol: float):
    if not tol > 0:
        raise NonpositiveTolerance(f"tol must be positive, got {tol}")


def theta_1d(delta, beta: float, tol: float) -> np.ndarray:
    """
    One-dimensional periodic heat kernel at displacement delta

    Uses the image sum for beta <= 1/pi and the Fourier series
    1 + 2 sum_k exp(-2 pi^2 k^2 beta) cos(2 pi k delta) otherwise; both are
    truncated so the discarded tail stays below tol.
    """
    _check_beta(beta)
    _check_tol(tol)
    delta = minimal_image(delta)
    log_tol = max(-math.log(tol), 1.0)
    if beta > 1.0 / math.pi:
        k_max = int(math.ceil(math.sqrt(log_tol / (2.0 * math.pi ** 2 * beta)))) + 1
        k = np.arange(1, k_max + 1, dtype=float)
        phase = 2.0 * math.pi * delta[..., None] * k
        return 1.0 + 2.0 * np.sum(np.exp(-2.0 * math.pi ** 2 * k ** 2 * beta) * np.cos(phase), axis=-1)
    n_max = int(math.ceil(math.sqrt(2.0 * beta * log_tol))) + 1
    n = np.arange(-n_max, n_max + 1, dtype=float)
    shifted = delta[..., None] + n
    return np.sum(np.exp(-shifted ** 2 / (2.0 * beta)), axis=-1) / math.sqrt(2.0 * math.pi * beta)


def transition_density(x: PointLike, y: PointLike, beta: float, tol: float):
    """
    p^beta(x, y) = (2 pi beta)^(-d/2) sum_n exp(-|x - y + n|^2 / 2 beta)

    Args:
        x, y: Points, or arrays of shape (..., d) that broadcast
        beta: Time length
        tol: Truncation tolerance of the lattice sum

    Returns:
        float for single points, array otherwise
    """
    xa, ya = _as_array(x), _as_array(y)
    if xa.shape[-1] != ya.shape[-1]:
        raise DimensionMismatch(f"Points of dimension {xa.shape[-1]} and {ya.shape[-1]}")
    value = np.prod(theta_1d(ya - xa, beta, tol), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def diagonal_density(beta: float, d: int, tol: float) -> float:
    """p^beta(x, x), the same for every x; also the maximum of p^beta"""
    return float(theta_1d(np.zeros(1), beta, tol)[0] ** d)


kernel_upper_bound = diagonal_density


def chapman_kolmogorov_residual(beta1: float, beta2: float, grid: int = 2048, tol: float = 1e-15) -> float:
    """
    max over x, y of |int p^b1(x,z) p^b2(z,y) dz - p^(b1+b2)(x,y)| in d = 1

    The kernel depends on y - x only, so the z-quadrature is a circular
    convolution on the periodic grid.
    """
    delta = np.arange(grid) / grid
    p1 = theta_1d(delta, beta1, tol)
    p2 = theta_1d(delta, beta2, tol)
    composed = np.real(np.fft.ifft(np.fft.fft(p1) * np.fft.fft(p2))) / grid
    return float(np.max(np.abs(composed - theta_1d(delta, beta1 + beta2, tol))))


def normalization_residual(beta: float, grid: int = 2048, tol: float = 1e-15) -> float:
    """|int p^beta(x, y) dy - 1| by the periodic trapezoid rule in d = 1"""
    delta = np.arange(grid) / grid
    return float(abs(np.mean(theta_1d(delta, beta, tol)) - 1.0))


@dataclass(frozen=True, eq=False)
class DiscretizedPath:
    """
    Brownian path sampled at tau_s = s beta / L, s = 0..L.

    Loops repeat their marked point as first and last slice.
    """
    slices: np.ndarray
    beta: float
    is_loop: bool = False

    def __post_init__(self):
        slices = np.asarray(self.slices, dtype=float)
        if slices.ndim == 1:
            slices = slices[:, None]
        if slices.ndim != 2 or slices.shape[0] < 2:
            raise BadSliceCount(f"A path needs L >= 1 slices, got shape {slices.shape}")
        _check_beta(self.beta)
        if self.is_loop and not np.array_equal(slices[0], slices[-1]):
            raise ConfigInvalid("Loop is not closed: first and last slice differ")
        slices.setflags(write=False)
        object.__setattr__(self, 'slices', slices)

    @property
    def L(self) -> int:
        return self.slices.shape[0] - 1

    @property
    def d(self) -> int:
        return self.slices.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.beta, self.L + 1)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.slices, columns=[f"coord_{c}" for c in range(self.d)])
        frame.insert(0, 'slice_index', np.arange(self.L + 1))
        return frame

    def to_csv(self, handle: IO[str]):
        """Debug dump with columns (slice_index, coord_0..coord_{d-1})"""
        self.to_frame().to_csv(handle, index=False, float_format='%.17g')


def _check_slices(L: int):
    if int(L) != L or L < 1:
        raise BadSliceCount(f"L must be a positive integer, got {L}")


def levy_fill(start: np.ndarray, end: np.ndarray, beta: float, L: int, rng: np.random.Generator) -> np.ndarray:
    """
    Euclidean Brownian bridge by midpoint refinement

    Args:
        start, end: Arrays of shape (..., d)
        beta: Total time
        L: Number of time steps
        rng: Seeded generator

    Returns:
        Array of shape (..., L + 1, d) with the given endpoints
    """
    tau = beta / L
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    path = np.empty(start.shape[:-1] + (L + 1, start.shape[-1]))
    path[..., 0, :] = start
    path[..., L, :] = end
    pending = deque([(0, L)])
    while pending:
        a, b = pending.popleft()
        if b - a < 2:
            continue
        m = (a + b) // 2
        mean = ((b - m) * path[..., a, :] + (m - a) * path[..., b, :]) / (b - a)
        sigma = math.sqrt(tau * (m - a) * (b - m) / (b - a))
        path[..., m, :] = mean + sigma * rng.standard_normal(mean.shape)
        pending.append((a, m))
        pending.append((m, b))
    return path


def sample_windings(delta: np.ndarray, beta: float, rng: Optional[np.random.Generator] = None,
                     uniforms: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Euclidean displacements delta + n with P(n) proportional to exp(-(delta + n)^2 / 2 beta)

    delta is reduced to its minimal image first; the draw is per coordinate
    and inverts the given uniforms when supplied.
    """
    base = minimal_image(delta)
    n_max = int(math.ceil(math.sqrt(2.0 * beta * -math.log(WINDING_TOL)))) + 1
    candidates = np.arange(-n_max, n_max + 1, dtype=float)
    shifted = base[..., None] + candidates
    weights = np.exp(-(shifted ** 2) / (2.0 * beta))
    cdf = np.cumsum(weights, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(base.shape) if uniforms is None else np.broadcast_to(uniforms, base.shape)
    index = np.minimum(np.sum(cdf < u[..., None], axis=-1), candidates.size - 1)
    return base + candidates[index]


def bridge_slices(x: np.ndarray, y: np.ndarray, beta: float, L: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized torus bridges, x and y of shape (..., d); returns (..., L + 1, d)"""
    x = reduce_mod1(x)
    y = reduce_mod1(y)
    displacement = sample_windings(y - x, beta, rng)
    euclid = levy_fill(np.zeros_like(x), displacement, beta, L, rng)
    slices = reduce_mod1(x[..., None, :] + euclid)
    slices[..., 0, :] = x
    slices[..., L, :] = y
    return slices


def sample_bridge(x: PointLike, y: PointLike, beta: float, L: int, rng: np.random.Generator) -> DiscretizedPath:
    """
    Torus Brownian bridge from x to y over time beta on L steps

    Raises:
        NonpositiveBeta, BadSliceCount, DimensionMismatch
    """
    _check_beta(beta)
    _check_slices(L)
    xa, ya = _as_array(x), _as_array(y)
    if xa.shape != ya.shape:
        raise DimensionMismatch(f"Bridge endpoints of shapes {xa.shape} and {ya.shape}")
    return DiscretizedPath(bridge_slices(xa, ya, beta, L, rng), beta, is_loop=False)


def sample_loop(x: PointLike, beta: float, L: int, rng: np.random.Generator) -> DiscretizedPath:
    """Bridge from x back to x, flagged as a loop"""
    _check_beta(beta)
    _check_slices(L)
    xa = _as_array(x)
    return DiscretizedPath(bridge_slices(xa, xa, beta, L, rng), beta, is_loop=True)


def zero_bridge(beta: float, L: int, rng: np.random.Generator, size: int, d: int = 1) -> np.ndarray:
    """Euclidean bridges from 0 to 0, shape (size, L + 1, d)"""
    _check_beta(beta)
    _check_slices(L)
    zeros = np.zeros((size, d))
    return levy_fill(zeros, zeros, beta, L, rng)


def linear_path(x: PointLike, y: PointLike, beta: float, L: int) -> DiscretizedPath:
    """Straight path x + (tau / beta)(y - x + n*) along the minimal image n*"""
    _check_beta(beta)
    _check_slices(L)
    xa, ya = reduce_mod1(_as_array(x)), reduce_mod1(_as_array(y))
    step = minimal_image(ya - xa)
    fraction = np.arange(L + 1)[:, None] / L
    slices = reduce_mod1(xa + fraction * step)
    slices[0], slices[-1] = xa, ya
    return DiscretizedPath(slices, beta, is_loop=bool(np.array_equal(xa, ya)))


@dataclass(frozen=True, eq=False)
class GroupElement:
    """
    Translation x -> x + theta A (mod 1).

    theta has d' entries and A is a d' x d matrix of full row rank d'.
    """
    theta: np.ndarray
    matrix_a: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        matrix_a = np.atleast_2d(np.asarray(self.matrix_a, dtype=float))
        if theta.ndim != 1 or matrix_a.shape[0] != theta.size:
            raise DimensionMismatch(f"theta of length {theta.size} does not match A of shape {matrix_a.shape}")
        if matrix_a.shape[0] > matrix_a.shape[1]:
            raise DimensionMismatch(f"A must have d' <= d, got shape {matrix_a.shape}")
        if np.linalg.svd(matrix_a, compute_uv=False).min() <= 1e-10:
            raise DimensionMismatch("A must have full row rank")
        theta.setflags(write=False)
        matrix_a.setflags(write=False)
        object.__setattr__(self, 'theta', theta)
        object.__setattr__(self, 'matrix_a', matrix_a)

    @classmethod
    def translation(cls, theta, d: int = 1) -> 'GroupElement':
        """Full translation group: d' = d, A = identity"""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size == 1 and d > 1:
            theta = np.full(d, theta[0])
        return cls(theta, np.eye(theta.size))

    @property
    def d(self) -> int:
        return self.matrix_a.shape[1]

    @property
    def shift(self) -> np.ndarray:
        return self.theta @ self.matrix_a

    @property
    def norm(self) -> float:
        """|theta A|, the length of the shift vector"""
        return float(np.linalg.norm(self.shift))

    def is_identity(self) -> bool:
        return not np.any(self.theta)

    def inverse(self) -> 'GroupElement':
        return GroupElement(-self.theta, self.matrix_a)

    def scaled(self, factor: float) -> 'GroupElement':
        return GroupElement(factor * self.theta, self.matrix_a)

    def compose(self, other: 'GroupElement') -> 'GroupElement':
        if not np.array_equal(self.matrix_a, other.matrix_a):
            raise DimensionMismatch("Composed elements must share the matrix A")
        return GroupElement(self.theta + other.theta, self.matrix_a)


def apply_group_point(g: GroupElement, x: PointLike):
    """x + theta A mod 1; TorusPoint in, TorusPoint out"""
    xa = _as_array(x)
    if xa.shape[-1] != g.d:
        raise DimensionMismatch(f"Point of dimension {xa.shape[-1]} under an action on d = {g.d}")
    moved = reduce_mod1(xa + g.shift)
    return TorusPoint.of(moved) if isinstance(x, TorusPoint) else moved


def apply_group_path(g: GroupElement, path: DiscretizedPath) -> DiscretizedPath:
    """Slice-wise action; the loop flag is preserved"""
    if path.d != g.d:
        raise DimensionMismatch(f"Path of dimension {path.d} under an action on d = {g.d}")
    return DiscretizedPath(reduce_mod1(path.slices + g.shift), path.beta, is_loop=path.is_loop)


def torus_distance(x, y) -> np.ndarray:
    """Minimal-image Euclidean distance, over the last axis"""
    return np.linalg.norm(minimal_image(np.asarray(y, dtype=float) - np.asarray(x, dtype=float)), axis=-1)

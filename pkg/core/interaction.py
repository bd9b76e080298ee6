"""
Interaction Potentials and Feynman-Kac Energies

Single-site potentials U, pair potentials V and the spatial decay J of the
coupling, with certified bound constants, and the path-energy functionals
evaluated by the trapezoid rule over slice times.

Features:
- Built-in potential library with closed-form bounds and Taylor constants
- Grid certification of U-bar and V-bar with Lipschitz inflation
- Symmetry checks under translation group elements
- Self, pair, full, boundary and conditional energies of path configurations
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings
from scipy import integrate

from .configurations import ClassicalBoundary, PathConfiguration
from .exceptions import (ConfigInvalid, DimensionMismatch, InadmissibleJ, MismatchedPaths,
                         OverlappingSupports, ZeroDistance)
from .torus_kernel import DiscretizedPath, GroupElement, reduce_mod1

if TYPE_CHECKING:
    from .cdlt_graph import DistanceOracle

logger = logging.getLogger(__name__)

# Total number of grid points used when certifying bounds
MAX_CERTIFICATION_POINTS = 2 ** 20
DECAY_CHECK_GRID = np.concatenate([np.linspace(0.05, 2.0, 200, endpoint=False), np.geomspace(2.0, 1e6, 2000)])


def decay_majorant(r):
    """(1/(r ln r))^3, the admissible tail for J at r >= 2"""
    r = np.asarray(r, dtype=float)
    return (1.0 / (r * np.log(r))) ** 3


def _evaluate(fn: Callable, r: np.ndarray) -> np.ndarray:
    try:
        values = np.asarray(fn(r), dtype=float)
        if values.shape == r.shape:
            return values
    except (TypeError, ValueError):
        pass
    return np.asarray(np.vectorize(fn, otypes=[float])(r), dtype=float)


def check_decay(J: Callable):
    """
    Validate J on a grid: bounded, nonincreasing, below the majorant for r >= 2

    Raises:
        InadmissibleJ
    """
    values = _evaluate(J, DECAY_CHECK_GRID)
    if not np.all(np.isfinite(values)):
        raise InadmissibleJ("J is not bounded on (0, inf)")
    scale = np.maximum(1.0, np.abs(values[:-1]))
    if np.any(np.diff(values) > 1e-15 * scale):
        raise InadmissibleJ("J is not monotone nonincreasing")
    tail = DECAY_CHECK_GRID >= 2.0
    if np.any(values[tail] > decay_majorant(DECAY_CHECK_GRID[tail]) * (1.0 + 1e-12)):
        raise InadmissibleJ("J exceeds (1/(r ln r))^3 for some r >= 2")


class DecayFunction:
    """Named spatial decay J(r) of the pair coupling"""

    def __init__(self, name: str, fn: Callable, **params):
        self.name = name
        self._fn = fn
        self.params = params

    def __call__(self, r):
        return self._fn(np.asarray(r, dtype=float))

    def descriptor(self) -> Dict[str, Any]:
        return {'name': self.name, **self.params}

    def __repr__(self):
        return f"DecayFunction({self.name}, {self.params})"

    @classmethod
    def zero(cls) -> 'DecayFunction':
        return cls('zero', lambda r: np.zeros_like(r))

    @classmethod
    def nearest(cls, j0: float = 1.0) -> 'DecayFunction':
        """Nearest-neighbour coupling j0 at r <= 1"""
        return cls('nearest', lambda r: np.where(r <= 1.0, j0, 0.0), j0=j0)

    @classmethod
    def cubic_log(cls, j0: float = 1.0) -> 'DecayFunction':
        """j0 min(1, (1/(r ln r))^3)"""
        def fn(r):
            rl = r * np.log(np.maximum(r, 1e-300))
            safe = np.where(rl > 1.0, rl, 1.0)
            return j0 * np.where(rl > 1.0, safe ** -3, 1.0)
        return cls('cubic_log', fn, j0=j0)


class SitePotential:
    """Single-site potential U on the torus; vectorized over (..., d)"""
    name = 'site'
    wavevector: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def analytic_bound(self) -> Optional[float]:
        """Closed-form bound on |U| and |grad U|, when known"""
        return None

    def descriptor(self) -> Dict[str, Any]:
        return {'name': self.name}


class ZeroPotential(SitePotential):
    name = 'zero'

    def __call__(self, x):
        return np.zeros(np.shape(x)[:-1])

    def gradient(self, x):
        return np.zeros(np.shape(x))

    @property
    def analytic_bound(self):
        return 0.0


class ConstantPotential(SitePotential):
    name = 'constant'

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], self.value)

    def gradient(self, x):
        return np.zeros(np.shape(x))

    @property
    def analytic_bound(self):
        return abs(self.value)

    def descriptor(self):
        return {'name': self.name, 'value': self.value}


class CosinePotential(SitePotential):
    """U(x) = amplitude cos(2 pi k.x) for an integer wavevector k"""
    name = 'cosine'

    def __init__(self, amplitude: float = 1.0, wavevector: Sequence[float] = (1,)):
        self.amplitude = float(amplitude)
        self.wavevector = np.atleast_1d(np.asarray(wavevector, dtype=float))

    def __call__(self, x):
        return self.amplitude * np.cos(2.0 * math.pi * (np.asarray(x) @ self.wavevector))

    def gradient(self, x):
        phase = 2.0 * math.pi * (np.asarray(x) @ self.wavevector)
        return -2.0 * math.pi * self.amplitude * np.sin(phase)[..., None] * self.wavevector

    @property
    def analytic_bound(self):
        k = float(np.linalg.norm(self.wavevector))
        return abs(self.amplitude) * max(1.0, 2.0 * math.pi * k)

    def descriptor(self):
        return {'name': self.name, 'amplitude': self.amplitude, 'wavevector': self.wavevector.tolist()}


class PairPotential:
    """Pair potential V(x, x'), vectorized over matching (..., d) inputs"""
    name = 'pair'
    wavevector: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray, xp: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivative_norms(self, x: np.ndarray, xp: np.ndarray) -> Tuple[np.ndarray, ...]:
        """|V|, |grad' V|, |grad'' V|, |grad' grad'' V| pointwise"""
        raise NotImplementedError

    @property
    def analytic_bound(self) -> Optional[float]:
        return None

    @property
    def taylor_constant(self) -> Optional[float]:
        """
        C with |V(x+s,x'+s') + V(x-s,x'-s') - 2V(x,x')| <= C V-bar |s - s'|^2
        for parallel shifts s, s', when known in closed form
        """
        return None

    def descriptor(self) -> Dict[str, Any]:
        return {'name': self.name}


class ZeroPairPotential(PairPotential):
    name = 'zero'

    def __call__(self, x, xp):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(xp))[:-1])

    def derivative_norms(self, x, xp):
        zero = self(x, xp)
        return zero, zero, zero, zero

    @property
    def analytic_bound(self):
        return 0.0

    @property
    def taylor_constant(self):
        return 0.0


class CosineDifferenceKernel(PairPotential):
    """V(x, x') = amplitude cos(2 pi k.(x - x')); invariant under every translation"""
    name = 'cosine_difference'

    def __init__(self, amplitude: float = 1.0, wavevector: Sequence[float] = (1,)):
        self.amplitude = float(amplitude)
        self.wavevector = np.atleast_1d(np.asarray(wavevector, dtype=float))

    def _phase(self, x, xp):
        return 2.0 * math.pi * ((np.asarray(x) - np.asarray(xp)) @ self.wavevector)

    def __call__(self, x, xp):
        return self.amplitude * np.cos(self._phase(x, xp))

    def derivative_norms(self, x, xp):
        phase = self._phase(x, xp)
        k = float(np.linalg.norm(self.wavevector))
        a = abs(self.amplitude)
        first = 2.0 * math.pi * k * a * np.abs(np.sin(phase))
        return a * np.abs(np.cos(phase)), first, first, 4.0 * math.pi ** 2 * k ** 2 * a * np.abs(np.cos(phase))

    @property
    def analytic_bound(self):
        k = float(np.linalg.norm(self.wavevector))
        return abs(self.amplitude) * max(1.0, 2.0 * math.pi * k, 4.0 * math.pi ** 2 * k ** 2)

    @property
    def taylor_constant(self):
        # |2a cos(phi)(cos delta - 1)| <= |a| delta^2 with delta = 2 pi k.(s - s')
        return 1.0

    def descriptor(self):
        return {'name': self.name, 'amplitude': self.amplitude, 'wavevector': self.wavevector.tolist()}


def _grid_points_per_axis(axes: int, requested: int) -> int:
    return max(8, min(requested, int(round(MAX_CERTIFICATION_POINTS ** (1.0 / axes)))))


def _mesh(axes: int, points: int) -> np.ndarray:
    line = np.arange(points) / points
    return np.stack(np.meshgrid(*([line] * axes), indexing='ij'), axis=-1)


class GridBound(NamedTuple):
    peak: float  # raw grid maximum
    inflated: float  # peak plus the Lipschitz allowance between grid points


def _grid_bound(quantities: Sequence[np.ndarray], spacing: float) -> GridBound:
    """Grid maximum plus the worst periodic finite-difference slope times half the grid diagonal"""
    peak = inflated = 0.0
    for quantity in quantities:
        top = float(np.max(quantity, initial=0.0))
        slope = 0.0
        for axis in range(quantity.ndim):
            step = np.abs(np.roll(quantity, -1, axis=axis) - quantity)
            slope = max(slope, float(step.max(initial=0.0)) / spacing)
        peak = max(peak, top)
        inflated = max(inflated, top + slope * spacing * math.sqrt(quantity.ndim) / 2.0)
    return GridBound(peak, inflated)


def certify_site_bound(u: SitePotential, d: int, grid_points: Optional[int] = None) -> GridBound:
    """Grid bound on max(|U|, |grad U|)"""
    requested = grid_points or getattr(settings, 'LORENTZFK_BOUND_GRID_POINTS', 4096)
    points = _grid_points_per_axis(d, requested)
    x = _mesh(d, points)
    values = np.abs(u(x))
    gradients = np.linalg.norm(u.gradient(x), axis=-1)
    return _grid_bound([values, gradients], 1.0 / points)


def certify_pair_bound(v: PairPotential, d: int, grid_points: Optional[int] = None) -> GridBound:
    """Grid bound on V and its first and mixed derivatives"""
    requested = grid_points or getattr(settings, 'LORENTZFK_BOUND_GRID_POINTS', 4096)
    points = _grid_points_per_axis(2 * d, requested)
    mesh = _mesh(2 * d, points)
    norms = v.derivative_norms(mesh[..., :d], mesh[..., d:])
    return _grid_bound([np.broadcast_to(q, mesh.shape[:-1]) for q in norms], 1.0 / points)


@dataclass(frozen=True)
class InteractionSpec:
    """
    Potentials U and V, decay J and their bound constants.

    u_bar bounds |U| and |grad U|; v_bar bounds |V| and its first and
    mixed second derivatives.
    """
    u_potential: SitePotential
    v_potential: PairPotential
    j_decay: Callable
    u_bar: float
    v_bar: float
    d: int = 1

    def J(self, r) -> np.ndarray:
        return _evaluate(self.j_decay, np.asarray(r, dtype=float))

    def descriptor(self) -> Dict[str, Any]:
        decay = self.j_decay.descriptor() if isinstance(self.j_decay, DecayFunction) else {'name': 'custom'}
        return {
            'potential_u': self.u_potential.descriptor(),
            'potential_v': self.v_potential.descriptor(),
            'decay_j': decay,
            'constants': {'u_bar': self.u_bar, 'v_bar': self.v_bar},
            'd': self.d,
        }


def _resolve_bound(label: str, certified: float, override: Optional[float]) -> float:
    if override is None:
        return certified
    override = float(override)
    if override < 0:
        raise ConfigInvalid(f"{label} must be nonnegative, got {override}")
    return override


def build_spec(u: SitePotential, v: PairPotential, j: Callable, d: int = 1,
               u_bar: Optional[float] = None, v_bar: Optional[float] = None,
               grid_points: Optional[int] = None) -> InteractionSpec:
    """
    Validate J, certify the bound constants and assemble an InteractionSpec

    Explicit u_bar / v_bar take precedence, then the potentials' closed-form
    bounds, then the inflated grid estimates. A closed-form bound below the
    raw grid maximum is rejected.
    """
    for potential in (u, v):
        k = getattr(potential, 'wavevector', None)
        if k is not None and k.size != d:
            raise DimensionMismatch(f"{potential.name} has a wavevector of length {k.size} on a d = {d} torus")
    check_decay(j)

    u_grid = certify_site_bound(u, d, grid_points)
    v_grid = certify_pair_bound(v, d, grid_points)
    for label, grid, closed in (('u_bar', u_grid, u.analytic_bound), ('v_bar', v_grid, v.analytic_bound)):
        if closed is not None and closed < grid.peak * (1.0 - 1e-9) - 1e-12:
            raise ConfigInvalid(f"{label}: closed-form bound {closed} is below the grid maximum {grid.peak}")
    u_final = _resolve_bound('u_bar', u_grid.inflated if u.analytic_bound is None else u.analytic_bound, u_bar)
    v_final = _resolve_bound('v_bar', v_grid.inflated if v.analytic_bound is None else v.analytic_bound, v_bar)
    logger.debug(f"Certified bounds u_bar={u_final:.6g} (grid {u_grid.inflated:.6g}), "
                 f"v_bar={v_final:.6g} (grid {v_grid.inflated:.6g})")
    return InteractionSpec(u_potential=u, v_potential=v, j_decay=j, u_bar=u_final, v_bar=v_final, d=d)


SITE_POTENTIALS = {
    'zero': ZeroPotential,
    'constant': ConstantPotential,
    'cosine': CosinePotential,
}

PAIR_POTENTIALS = {
    'zero': ZeroPairPotential,
    'cosine_difference': CosineDifferenceKernel,
}

DECAYS = {
    'zero': DecayFunction.zero,
    'nearest': DecayFunction.nearest,
    'cubic_log': DecayFunction.cubic_log,
}


def _build_named(table: Mapping[str, Callable], entry: Any, path: str):
    if isinstance(entry, str):
        entry = {'name': entry}
    if not isinstance(entry, Mapping) or 'name' not in entry:
        raise ConfigInvalid(f"{path}: expected a named built-in")
    params = {k: v for k, v in entry.items() if k != 'name'}
    factory = table.get(entry['name'])
    if factory is None:
        raise ConfigInvalid(f"{path}: unknown built-in '{entry['name']}' (known: {', '.join(sorted(table))})")
    try:
        return factory(**params)
    except TypeError as e:
        raise ConfigInvalid(f"{path}: bad parameters {params}: {e}") from e


def spec_from_descriptor(descriptor: Mapping[str, Any], d: Optional[int] = None) -> InteractionSpec:
    """
    Build an InteractionSpec from its JSON descriptor

    Args:
        descriptor: {potential_u, potential_v, decay_j, constants}; each
            potential is a built-in name or {"name": ..., params...}
        d: Torus dimension; defaults to descriptor["d"] or 1

    Raises:
        ConfigInvalid: unknown names or parameters, named by field
    """
    if not isinstance(descriptor, Mapping):
        raise ConfigInvalid("spec: expected an object")
    for key in ('potential_u', 'potential_v', 'decay_j'):
        if key not in descriptor:
            raise ConfigInvalid(f"spec.{key}: missing")
    d = int(d if d is not None else descriptor.get('d', 1))
    u = _build_named(SITE_POTENTIALS, descriptor['potential_u'], 'spec.potential_u')
    v = _build_named(PAIR_POTENTIALS, descriptor['potential_v'], 'spec.potential_v')
    j = _build_named(DECAYS, descriptor['decay_j'], 'spec.decay_j')
    constants = descriptor.get('constants') or {}
    return build_spec(u, v, j, d=d, u_bar=constants.get('u_bar'), v_bar=constants.get('v_bar'))


@dataclass(frozen=True)
class InvarianceReport:
    passed: bool
    max_deviation: float
    u_deviation: float
    v_deviation: float


def check_invariance(spec: InteractionSpec, g: GroupElement, samples: int, tol: float,
                     rng: np.random.Generator) -> InvarianceReport:
    """
    Largest change of U and V under g over random points and a regular grid

    The grid runs along the diagonal of the torus with `samples` points.
    """
    if g.d != spec.d:
        raise DimensionMismatch(f"Group element acts on d = {g.d}, spec has d = {spec.d}")
    grid = np.repeat((np.arange(samples) / samples)[:, None], spec.d, axis=1)
    x = np.concatenate([grid, rng.random((samples, spec.d))])
    xp = np.concatenate([rng.random((samples, spec.d)), rng.random((samples, spec.d))])
    gx, gxp = reduce_mod1(x + g.shift), reduce_mod1(xp + g.shift)
    u_dev = float(np.max(np.abs(spec.u_potential(gx) - spec.u_potential(x)), initial=0.0))
    v_dev = float(np.max(np.abs(spec.v_potential(gx, gxp) - spec.v_potential(x, xp)), initial=0.0))
    deviation = max(u_dev, v_dev)
    return InvarianceReport(passed=deviation < tol, max_deviation=deviation, u_deviation=u_dev, v_deviation=v_dev)


def time_integral(values: np.ndarray, beta: float) -> np.ndarray:
    """Trapezoid rule over the slice axis (last axis) on [0, beta]"""
    return integrate.trapezoid(values, dx=beta / (values.shape[-1] - 1), axis=-1)


def self_energy(loop: DiscretizedPath, spec: InteractionSpec) -> float:
    """Integral of U along the path over [0, beta]"""
    return float(time_integral(spec.u_potential(loop.slices), loop.beta))


def pair_energy(loop_i: DiscretizedPath, loop_j: DiscretizedPath, dist: int, spec: InteractionSpec) -> float:
    """J(dist) times the integral of V(omega_i(tau), omega_j(tau))"""
    if loop_i.beta != loop_j.beta or loop_i.L != loop_j.L:
        raise MismatchedPaths(f"Paths differ: beta {loop_i.beta}/{loop_j.beta}, L {loop_i.L}/{loop_j.L}")
    if dist < 1:
        raise ZeroDistance(f"Pair terms need distance >= 1, got {dist}")
    coupling = float(spec.J(dist))
    if coupling == 0.0:
        return 0.0
    return coupling * float(time_integral(spec.v_potential(loop_i.slices, loop_j.slices), loop_i.beta))


def site_terms(paths: np.ndarray, spec: InteractionSpec, beta: float) -> np.ndarray:
    """Self energies of a (n, L+1, d) path array"""
    if paths.shape[0] == 0:
        return np.zeros(0)
    return time_integral(spec.u_potential(paths), beta)


def coupling_matrix(geometry: 'DistanceOracle', rows: Sequence[int], cols: Sequence[int],
                    spec: InteractionSpec) -> np.ndarray:
    """J(d(i, j)) with zero wherever the vertices coincide"""
    if not len(rows) or not len(cols):
        return np.zeros((len(rows), len(cols)))
    dist = geometry.distance_matrix(list(rows), list(cols)).astype(float)
    weights = np.zeros_like(dist)
    off = dist > 0
    weights[off] = spec.J(dist[off])
    return weights


def cross_terms(paths_a: np.ndarray, paths_b: np.ndarray, weights: np.ndarray,
                spec: InteractionSpec, beta: float) -> np.ndarray:
    """
    Matrix of weights[a, b] times the integral of V(omega_a, omega_b)

    Only pairs with nonzero weight are integrated.
    """
    out = np.zeros(weights.shape)
    ia, ib = np.nonzero(weights)
    if ia.size:
        out[ia, ib] = weights[ia, ib] * time_integral(spec.v_potential(paths_a[ia], paths_b[ib]), beta)
    return out


def boundary_terms(paths: np.ndarray, points: np.ndarray, weights: np.ndarray,
                   spec: InteractionSpec, beta: float) -> np.ndarray:
    """weights[a, b] times the integral of V(omega_a(tau), x_b)"""
    out = np.zeros(weights.shape)
    ia, ib = np.nonzero(weights)
    if ia.size:
        fixed = np.broadcast_to(points[ib][:, None, :], paths[ia].shape)
        out[ia, ib] = weights[ia, ib] * time_integral(spec.v_potential(paths[ia], fixed), beta)
    return out


@dataclass(frozen=True)
class EnergyBreakdown:
    self_terms: Dict[int, float]
    pair_terms: Dict[Tuple[int, int], float]
    boundary_terms: Dict[Tuple[int, int], float] = field(default_factory=dict)
    total: float = 0.0

    def parts_sum(self) -> float:
        return float(sum(self.self_terms.values()) + sum(self.pair_terms.values())
                     + sum(self.boundary_terms.values()))


@dataclass(frozen=True)
class TruncatedEnergy:
    value: float
    tail_bound: float
    radius: Optional[int]
    breakdown: EnergyBreakdown


def _check_compatible(a: PathConfiguration, b: PathConfiguration):
    if len(a) and len(b) and (a.beta != b.beta or a.L != b.L):
        raise MismatchedPaths("Configurations differ in beta or L")


def config_energy(loops: PathConfiguration, geometry: 'DistanceOracle', spec: InteractionSpec) -> EnergyBreakdown:
    """
    Self terms plus all ordered pairs (i, i'), i != i', of the volume

    Each unordered pair contributes twice.
    """
    selfs = site_terms(loops.paths, spec, loops.beta)
    weights = coupling_matrix(geometry, loops.vertices, loops.vertices, spec)
    pairs = cross_terms(loops.paths, loops.paths, weights, spec, loops.beta)
    self_terms = {v: float(e) for v, e in zip(loops.vertices, selfs)}
    pair_terms = {(loops.vertices[a], loops.vertices[b]): float(pairs[a, b]) for a, b in zip(*np.nonzero(weights))}
    total = float(selfs.sum() + pairs.sum())
    return EnergyBreakdown(self_terms=self_terms, pair_terms=pair_terms, total=total)


def boundary_energy(loops: PathConfiguration, boundary: ClassicalBoundary, geometry: 'DistanceOracle',
                    spec: InteractionSpec, radius: Optional[int] = None) -> TruncatedEnergy:
    """
    config_energy plus the interaction of interior paths with fixed exterior points

    Exterior vertices farther than radius from every interior vertex are
    dropped; the tail bound is beta V-bar times the dropped couplings.

    Raises:
        OverlappingSupports
    """
    if loops.support & boundary.support:
        raise OverlappingSupports(f"Boundary overlaps the volume on {sorted(loops.support & boundary.support)}")
    inner = config_energy(loops, geometry, spec)
    weights = coupling_matrix(geometry, loops.vertices, boundary.vertices, spec)
    tail = 0.0
    if radius is not None and weights.size:
        dist = geometry.distance_matrix(list(loops.vertices), list(boundary.vertices))
        far = dist > radius
        tail = float(loops.beta * spec.v_bar * np.abs(weights[far]).sum())
        weights = np.where(far, 0.0, weights)
    terms = boundary_terms(loops.paths, boundary.points, weights, spec, loops.beta)
    breakdown = EnergyBreakdown(
        self_terms=inner.self_terms,
        pair_terms=inner.pair_terms,
        boundary_terms={(loops.vertices[a], boundary.vertices[b]): float(terms[a, b])
                        for a, b in zip(*np.nonzero(weights))},
        total=inner.total + float(terms.sum()),
    )
    return TruncatedEnergy(value=breakdown.total, tail_bound=tail, radius=radius, breakdown=breakdown)


def conditional_energy(inner: PathConfiguration, outer: PathConfiguration, geometry: 'DistanceOracle',
                       spec: InteractionSpec, boundary: Optional[ClassicalBoundary] = None) -> float:
    """
    h(inner v outer | boundary) - h(outer | boundary), summed term by term

    Raises:
        OverlappingSupports, MismatchedPaths
    """
    supports = [inner.support, outer.support, boundary.support if boundary is not None else frozenset()]
    for a in range(3):
        for b in range(a + 1, 3):
            if supports[a] & supports[b]:
                raise OverlappingSupports(f"Supports overlap on {sorted(supports[a] & supports[b])}")
    _check_compatible(inner, outer)
    if not len(inner):
        return 0.0
    beta = inner.beta
    total = float(site_terms(inner.paths, spec, beta).sum())
    weights = coupling_matrix(geometry, inner.vertices, inner.vertices, spec)
    total += float(cross_terms(inner.paths, inner.paths, weights, spec, beta).sum())
    if len(outer):
        weights = coupling_matrix(geometry, inner.vertices, outer.vertices, spec)
        total += float(cross_terms(inner.paths, outer.paths, weights, spec, beta).sum())
        total += float(cross_terms(outer.paths, inner.paths, weights.T, spec, beta).sum())
    if boundary is not None and len(boundary):
        weights = coupling_matrix(geometry, inner.vertices, boundary.vertices, spec)
        total += float(boundary_terms(inner.paths, boundary.points, weights, spec, beta).sum())
    return total


def coupling_sum(geometry: 'DistanceOracle', spec: InteractionSpec, vertices: Optional[Sequence[int]] = None) -> float:
    """max over j in vertices of the sum over all other vertices j' of J(d(j, j'))"""
    rows = list(range(geometry.vertex_count)) if vertices is None else list(vertices)
    if not rows:
        return 0.0
    dist = geometry.distance_matrix(rows).astype(float)
    weights = np.zeros_like(dist)
    off = dist > 0
    weights[off] = spec.J(dist[off])
    return float(weights.sum(axis=1).max())


def energy_bound(spec: InteractionSpec, beta: float, inner_count: int, coupling: float) -> float:
    """beta #inner (U-bar + 2 coupling V-bar), a bound on |conditional_energy|"""
    return float(beta * inner_count * (spec.u_bar + 2.0 * coupling * spec.v_bar))


def uniform_kernel_bound(spec: InteractionSpec, beta: float, window_count: int, coupling: float) -> float:
    """exp(2 energy_bound), dominating every reduced density matrix kernel value"""
    return math.exp(2.0 * energy_bound(spec, beta, window_count, coupling))

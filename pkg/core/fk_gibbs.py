"""
Finite-Volume Loop Gibbs Measures

Metropolis sampling of loop configurations, exact transfer-matrix oracles on
periodic grids, Monte Carlo reduced density matrix kernels and the
consistency diagnostics built on them.

Features:
- Single-vertex Metropolis updates: cyclic segment bridges and full loop redraws
- Independent chains on a thread pool with per-chain seeded streams
- Exact kernels, partition ratios and FK-DLR residuals by transfer matrices (d = 1)
- Importance-sampled kernel estimates with batch-means error bars
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from django.conf import settings

from .configurations import ClassicalBoundary, LoopConfiguration, PathConfiguration
from .exceptions import (BoundViolation, ConfigInvalid, DegenerateWeights, DimensionMismatch, EnergyCacheDrift,
                         GridMismatch, NotEnoughSamples, OverlappingSupports, TooLarge, WindowTooLarge)
from .interaction import (InteractionSpec, boundary_energy, config_energy, conditional_energy, coupling_matrix,
                          coupling_sum, energy_bound, time_integral, uniform_kernel_bound)
from .streams import derive_stream
from .torus_kernel import bridge_slices, diagonal_density, levy_fill, reduce_mod1, sample_windings, theta_1d

if TYPE_CHECKING:
    from .cdlt_graph import DistanceOracle

logger = logging.getLogger(__name__)

VertexSet = Union[int, Sequence[int]]


def _setting(name: str, default):
    return getattr(settings, name, default)


def _kernel_tol() -> float:
    return float(_setting('LORENTZFK_KERNEL_TOL', 1e-14))


def ball(geometry: 'DistanceOracle', n: int) -> Tuple[int, ...]:
    """Vertices of height at most n"""
    heights = geometry.triangulation.heights
    return tuple(int(v) for v in np.flatnonzero(heights <= n))


def resolve_vertices(geometry: 'DistanceOracle', vertices: VertexSet) -> Tuple[int, ...]:
    """An integer level means the ball of that height; sequences pass through"""
    if isinstance(vertices, (int, np.integer)):
        return ball(geometry, int(vertices))
    return tuple(int(v) for v in vertices)


def grid_points(G: int, w: int, d: int = 1) -> np.ndarray:
    """Product grid of M^w with spacing 1/G, shape (G^(w d), w, d), first vertex slowest"""
    axes = w * d
    index = np.indices((G,) * axes).reshape(axes, -1).T
    return (index / G).reshape(-1, w, d)


class EnergyContext:
    """
    Couplings of a fixed inner vertex set with an outer set and a classical boundary.

    Evaluates conditional energies of batches of inner path arrays against
    given outer paths; the pair structure is computed once.
    """

    def __init__(self, geometry: 'DistanceOracle', spec: InteractionSpec, inner: Sequence[int],
                 outer: Sequence[int] = (), boundary: Optional[ClassicalBoundary] = None):
        self.spec = spec
        self.inner = tuple(inner)
        self.outer = tuple(outer)
        if set(self.inner) & set(self.outer):
            raise OverlappingSupports(f"Inner and outer overlap on {sorted(set(self.inner) & set(self.outer))}")
        self.boundary = boundary if boundary is not None and len(boundary) else None
        if self.boundary is not None and self.boundary.support & (set(self.inner) | set(self.outer)):
            raise OverlappingSupports("Boundary overlaps the sampled vertices")

        w_inner = coupling_matrix(geometry, self.inner, self.inner, spec)
        w_outer = coupling_matrix(geometry, self.inner, self.outer, spec)
        self._inner_pairs = np.nonzero(w_inner)
        self._inner_weights = w_inner[self._inner_pairs]
        self._outer_pairs = np.nonzero(w_outer)
        self._outer_weights = w_outer[self._outer_pairs]
        if self.boundary is not None:
            w_bd = coupling_matrix(geometry, self.inner, self.boundary.vertices, spec)
            self._bd_pairs = np.nonzero(w_bd)
            self._bd_weights = w_bd[self._bd_pairs]
        else:
            self._bd_pairs = (np.zeros(0, dtype=int), np.zeros(0, dtype=int))
            self._bd_weights = np.zeros(0)

    def __call__(self, inner_paths: np.ndarray, outer_paths: Optional[np.ndarray], beta: float) -> np.ndarray:
        """
        Args:
            inner_paths: (B, #inner, L+1, d)
            outer_paths: (#outer, L+1, d), rows in the order of self.outer
            beta: Time length

        Returns:
            (B,) conditional energies
        """
        u, v = self.spec.u_potential, self.spec.v_potential
        total = time_integral(u(inner_paths), beta).sum(axis=-1)
        a, b = self._inner_pairs
        if a.size:
            total = total + (self._inner_weights * time_integral(v(inner_paths[:, a], inner_paths[:, b]), beta)).sum(-1)
        a, o = self._outer_pairs
        if a.size:
            fixed = outer_paths[o][None]
            both = time_integral(v(inner_paths[:, a], fixed), beta) + time_integral(v(fixed, inner_paths[:, a]), beta)
            total = total + (self._outer_weights * both).sum(-1)
        a, c = self._bd_pairs
        if a.size:
            points = np.broadcast_to(self.boundary.points[c][None, :, None, :], inner_paths[:, a].shape)
            total = total + (self._bd_weights * time_integral(v(inner_paths[:, a], points), beta)).sum(-1)
        return total


class GibbsSamplerState:
    """
    Metropolis chain over the loop configurations of a finite volume.

    Features:
    - Target density exp(-h(config | exterior loops, classical boundary)) w.r.t. free loops
    - Cached total energy, revalidated against conditional_energy periodically
    - Optional assertion of the energy bound on every proposal

    A state has exactly one writer; concurrent chains each own a state.
    """

    def __init__(self, configuration: LoopConfiguration, geometry: 'DistanceOracle', spec: InteractionSpec,
                 rng: np.random.Generator, boundary: Optional[ClassicalBoundary] = None,
                 exterior: Optional[LoopConfiguration] = None):
        self.vertices = configuration.vertices
        self.paths = np.array(configuration.paths)
        self.beta = configuration.beta
        self.rng = rng
        self.boundary = boundary
        self.exterior = exterior if exterior is not None and len(exterior) else None
        self.step = 0
        self.proposals = 0
        self.accepted = 0

        self.segment_probability = float(_setting('LORENTZFK_SEGMENT_PROBABILITY', 0.8))
        self.segment_fraction = float(_setting('LORENTZFK_SEGMENT_FRACTION', 0.25))
        self.revalidate_every = int(_setting('LORENTZFK_REVALIDATE_EVERY', 50))
        self.debug_bounds = bool(_setting('LORENTZFK_DEBUG_BOUNDS', False))
        self.bind(geometry, spec)

    def bind(self, geometry: 'DistanceOracle', spec: InteractionSpec):
        self.geometry = geometry
        self.spec = spec
        exterior_vertices = self.exterior.vertices if self.exterior is not None else ()
        self._contexts = []
        for r, vertex in enumerate(self.vertices):
            others = self.vertices[:r] + self.vertices[r + 1:] + exterior_vertices
            self._contexts.append(EnergyContext(geometry, spec, (vertex,), others, self.boundary))
        everything = self.vertices + exterior_vertices + (self.boundary.vertices if self.boundary else ())
        self.local_bound = energy_bound(spec, self.beta, 1, coupling_sum(geometry, spec, everything))
        self.energy = self.recompute_energy()

    @property
    def L(self) -> int:
        return self.paths.shape[1] - 1

    @property
    def d(self) -> int:
        return self.paths.shape[2]

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else 0.0

    @property
    def configuration(self) -> LoopConfiguration:
        return LoopConfiguration(self.vertices, self.paths.copy(), self.beta)

    def recompute_energy(self) -> float:
        exterior = self.exterior if self.exterior is not None else PathConfiguration.empty(self.beta, self.L, self.d)
        return conditional_energy(self.configuration, exterior, self.geometry, self.spec, self.boundary)

    def revalidate(self):
        fresh = self.recompute_energy()
        drift = abs(fresh - self.energy)
        if drift > 1e-8 * max(1.0, abs(fresh)):
            raise EnergyCacheDrift(f"Energy cache drifted by {drift:.3e} after {self.step} sweeps")
        self.energy = fresh

    def outer_paths(self, r: int) -> np.ndarray:
        rest = np.delete(self.paths, r, axis=0)
        if self.exterior is not None:
            rest = np.concatenate([rest, self.exterior.paths])
        return rest

    def local_energies(self, r: int, candidates: np.ndarray) -> np.ndarray:
        """Conditional energies of candidate paths (B, L+1, d) at vertex index r"""
        return self._contexts[r](candidates[:, None], self.outer_paths(r), self.beta)

    def propose_segment(self, path: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Redraw a cyclic run of slices as a bridge between its fixed ends"""
        L = self.L
        if L < 2:
            return self.propose_loop(path, rng)
        m = min(L, max(2, int(round(L * self.segment_fraction))))
        start = int(rng.integers(L))
        index = (start + np.arange(m + 1)) % L
        segment = bridge_slices(path[index[0]], path[index[-1]], m * self.beta / L, m, rng)
        proposal = path.copy()
        proposal[index[1:-1]] = segment[1:-1]
        proposal[L] = proposal[0]
        return proposal

    def propose_loop(self, path: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Fresh free loop at a uniform marked point"""
        x = rng.random(self.d)
        return bridge_slices(x, x, self.beta, self.L, rng)


def initial_loops(vertices: Sequence[int], beta: float, L: int, d: int, rng: np.random.Generator) -> LoopConfiguration:
    """Independent free loops at uniform marked points"""
    x = rng.random((len(vertices), d))
    return LoopConfiguration(tuple(vertices), bridge_slices(x, x, beta, L, rng), beta)


def metropolis_sweep(state: GibbsSamplerState, geometry: Optional['DistanceOracle'] = None,
                     spec: Optional[InteractionSpec] = None,
                     rng: Optional[np.random.Generator] = None) -> GibbsSamplerState:
    """
    One proposal per vertex, accepted with probability min(1, exp(-delta h))

    Passing a different geometry or spec rebinds the state first.
    """
    if (geometry is not None and geometry is not state.geometry) or (spec is not None and spec is not state.spec):
        state.bind(geometry or state.geometry, spec or state.spec)
    rng = rng or state.rng
    for r in range(len(state.vertices)):
        current = state.paths[r]
        if rng.random() < state.segment_probability:
            proposal = state.propose_segment(current, rng)
        else:
            proposal = state.propose_loop(current, rng)
        h_old, h_new = state.local_energies(r, np.stack([current, proposal]))
        if state.debug_bounds and abs(h_new) > state.local_bound * (1.0 + 1e-9) + 1e-12:
            raise BoundViolation(f"|h| = {abs(h_new):.6g} exceeds the energy bound {state.local_bound:.6g}")
        delta = float(h_new - h_old)
        u = rng.random()
        state.proposals += 1
        if delta <= 0.0 or u < math.exp(-delta):
            state.paths[r] = proposal
            state.energy += delta
            state.accepted += 1
    state.step += 1
    if state.revalidate_every and state.step % state.revalidate_every == 0:
        state.revalidate()
    logger.debug(f"Sweep {state.step}: energy {state.energy:.6g}, acceptance {state.acceptance_rate:.3f}")
    return state


@dataclass
class ChainResult:
    chain: int
    samples: List[Any]
    energies: np.ndarray
    acceptance_rate: float


def _run_single_chain(make_state: Callable[[np.random.Generator], GibbsSamplerState], rng: np.random.Generator,
                      chain: int, sweeps: int, burn_in: Optional[int], thin: int,
                      observe: Callable[[GibbsSamplerState], Any]) -> ChainResult:
    state = make_state(rng)
    if burn_in is None:
        burn_in = int(_setting('LORENTZFK_BURN_IN_FACTOR', 10)) * len(state.vertices)
    for _ in range(burn_in):
        metropolis_sweep(state)
    samples, energies = [], []
    for sweep in range(sweeps):
        metropolis_sweep(state)
        if (sweep + 1) % thin == 0:
            samples.append(observe(state))
            energies.append(state.energy)
    if state.acceptance_rate < 0.05:
        logger.warning(f"Chain {chain}: low acceptance rate {state.acceptance_rate:.3f}")
    return ChainResult(chain=chain, samples=samples, energies=np.array(energies), acceptance_rate=state.acceptance_rate)


def run_chains(make_state: Callable[[np.random.Generator], GibbsSamplerState], *, seed: int, stage: str,
               chains: int, sweeps: int, burn_in: Optional[int] = None, thin: int = 1,
               observe: Optional[Callable[[GibbsSamplerState], Any]] = None,
               workers: Optional[int] = None) -> List[ChainResult]:
    """
    Independent chains on a thread pool, merged in chain order

    Chain c draws from derive_stream(seed, stage, c), so results do not
    depend on the number of workers.

    Args:
        make_state: Builds a fresh state from the chain's generator
        seed: Run seed
        stage: Stage name keying the streams
        chains: Number of chains
        sweeps: Recorded sweeps per chain
        burn_in: Discarded sweeps; defaults to LORENTZFK_BURN_IN_FACTOR per vertex
        thin: Record every thin-th sweep
        observe: Snapshot taken from the state; defaults to the configuration
        workers: Thread cap; defaults to LORENTZFK_THREADS
    """
    observe = observe or (lambda state: state.configuration)
    workers = max(1, min(chains, workers or int(_setting('LORENTZFK_THREADS', 1) or 1)))
    logger.info(f"Running {chains} chain(s) of {sweeps} sweeps on {workers} worker(s) for stage '{stage}'")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_single_chain, make_state, derive_stream(seed, stage, c), c,
                               sweeps, burn_in, max(1, thin), observe)
                   for c in range(chains)]
        results = [f.result() for f in futures]
    logger.info(f"Stage '{stage}' chains done, acceptance "
                + ', '.join(f"{r.acceptance_rate:.3f}" for r in results))
    return results


@dataclass(frozen=True)
class BatchEstimate:
    mean: Any
    std_error: Any
    batches: int


def batch_means(values, batches: Optional[int] = None) -> BatchEstimate:
    """
    Mean and standard error over the leading axis by non-overlapping batches

    Raises:
        NotEnoughSamples: fewer than two values
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0] if values.ndim else 0
    if n < 2:
        raise NotEnoughSamples(f"Batch means need at least 2 values, got {n}")
    batches = min(int(batches or _setting('LORENTZFK_BATCHES', 32)), n)
    size = n // batches
    trimmed = values[n - size * batches:]
    means = trimmed.reshape((batches, size) + values.shape[1:]).mean(axis=1)
    if batches < 2:
        return BatchEstimate(means[0], np.zeros_like(means[0]), 1)
    return BatchEstimate(means.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(batches), batches)


@dataclass(frozen=True, eq=False)
class RdmKernelEstimate:
    """
    Reduced density matrix kernel F(x, y) on evaluation points of M^w.

    x_grid and y_grid have shape (P, w, d). On a full product grid the
    diagonal mean is the trace quadrature.
    """
    window: Tuple[int, ...]
    x_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    method: str
    beta: float
    L: int
    G: Optional[int] = None
    n: Optional[int] = None
    volume: Tuple[int, ...] = ()
    chains: Tuple[ChainResult, ...] = ()

    def trace(self) -> Tuple[float, float]:
        """Diagonal quadrature and its standard error"""
        if self.x_grid.shape != self.y_grid.shape or not np.array_equal(self.x_grid, self.y_grid):
            raise GridMismatch("Trace needs identical x and y grids")
        diagonal = np.diag(self.values)
        error = math.sqrt(float(np.sum(np.diag(self.std_errors) ** 2))) / diagonal.size
        return float(diagonal.mean()), error

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue of the symmetrized kernel matrix times the quadrature weight"""
        symmetric = 0.5 * (self.values + self.values.T)
        return float(np.linalg.eigvalsh(symmetric / self.values.shape[0]).min())

    def check_uniform_bound(self, bound: float):
        excess = self.values - (bound * (1.0 + 1e-9) + 3.0 * self.std_errors)
        if np.any(excess > 0):
            raise BoundViolation(f"Kernel value {self.values.max():.6g} exceeds the uniform bound {bound:.6g}")

    def to_frame(self, seed: Optional[int] = None) -> pd.DataFrame:
        """Rows (n, x_index, y_index, value, std_error, method, seed, L, G, beta), x-major"""
        px, py = self.values.shape
        xi, yi = np.meshgrid(np.arange(px), np.arange(py), indexing='ij')
        return pd.DataFrame({
            'n': self.n if self.n is not None else -1,
            'x_index': xi.ravel(),
            'y_index': yi.ravel(),
            'value': self.values.ravel(),
            'std_error': self.std_errors.ravel(),
            'method': self.method,
            'seed': seed if seed is not None else -1,
            'L': self.L,
            'G': self.G if self.G is not None else -1,
            'beta': self.beta,
        })


def check_grid_cost(L: int, m: int, G: int):
    """
    Refuse transfer-matrix work above LORENTZFK_BRUTE_FORCE_MAX_COST

    Raises:
        TooLarge
    """
    cost = float(L) * m * G * float(G) ** (2 * m)
    limit = float(_setting('LORENTZFK_BRUTE_FORCE_MAX_COST', 2e10))
    if cost > limit:
        raise TooLarge(f"Transfer-matrix cost {cost:.3g} for {m} vertices on G={G}, L={L} exceeds {limit:.3g}")


def _apply_kernel(block: np.ndarray, k1: np.ndarray, m: int) -> np.ndarray:
    """Apply the tensor product of m copies of k1 to the columns of block"""
    G = k1.shape[0]
    t = block.reshape((G,) * m + (block.shape[1],))
    for axis in range(m):
        t = np.moveaxis(np.tensordot(k1, t, axes=([1], [axis])), 0, axis)
    return t.reshape(block.shape)


class SliceEnergy:
    """
    Energy of one time slice over grid states of the inner vertices (d = 1).

    conditional(): inner site terms, ordered inner pairs, inner-outer pairs
    in both directions and inner-boundary terms. full() adds the terms that
    involve outer vertices only.
    """

    def __init__(self, geometry: 'DistanceOracle', spec: InteractionSpec, inner: Sequence[int],
                 outer: Sequence[int] = (), boundary: Optional[ClassicalBoundary] = None):
        self.spec = spec
        self.inner, self.outer = tuple(inner), tuple(outer)
        self.boundary = boundary if boundary is not None and len(boundary) else None
        self.w_inner = coupling_matrix(geometry, self.inner, self.inner, spec)
        self.w_cross = coupling_matrix(geometry, self.inner, self.outer, spec)
        self.w_outer = coupling_matrix(geometry, self.outer, self.outer, spec)
        bd = self.boundary.vertices if self.boundary is not None else ()
        self.w_inner_bd = coupling_matrix(geometry, self.inner, bd, spec)
        self.w_outer_bd = coupling_matrix(geometry, self.outer, bd, spec)

    def conditional(self, states: np.ndarray, outer_points: Optional[np.ndarray] = None) -> np.ndarray:
        """states (S, #inner, d), outer_points (#outer, d) at this slice"""
        u, v = self.spec.u_potential, self.spec.v_potential
        energy = u(states).sum(axis=1)
        for a, b in zip(*np.nonzero(self.w_inner)):
            energy += self.w_inner[a, b] * v(states[:, a], states[:, b])
        for a, o in zip(*np.nonzero(self.w_cross)):
            fixed = np.broadcast_to(outer_points[o], states[:, a].shape)
            energy += self.w_cross[a, o] * (v(states[:, a], fixed) + v(fixed, states[:, a]))
        for a, c in zip(*np.nonzero(self.w_inner_bd)):
            fixed = np.broadcast_to(self.boundary.points[c], states[:, a].shape)
            energy += self.w_inner_bd[a, c] * v(states[:, a], fixed)
        return energy

    def outer_only(self, outer_points: np.ndarray) -> float:
        u, v = self.spec.u_potential, self.spec.v_potential
        energy = float(u(outer_points).sum()) if len(self.outer) else 0.0
        for a, b in zip(*np.nonzero(self.w_outer)):
            energy += self.w_outer[a, b] * float(v(outer_points[a], outer_points[b]))
        for a, c in zip(*np.nonzero(self.w_outer_bd)):
            energy += self.w_outer_bd[a, c] * float(v(outer_points[a], self.boundary.points[c]))
        return energy

    def full(self, states: np.ndarray, outer_points: Optional[np.ndarray] = None) -> np.ndarray:
        extra = self.outer_only(outer_points) if self.outer else 0.0
        return self.conditional(states, outer_points) + extra


def _grid_kernel(G: int, tau: float, tol: float) -> Tuple[np.ndarray, np.ndarray]:
    line = np.arange(G) / G
    return line, theta_1d(line[None, :] - line[:, None], tau, tol)


def _log_loop_trace(slice_energies: Sequence[np.ndarray], k1: np.ndarray, m: int, tau: float) -> float:
    """
    log of the grid trace of prod_s (D_s K), K = k/G^m, D_s = exp(-tau E_s)

    Each slice carries trapezoid weight tau since the loop closes.
    """
    G = k1.shape[0]
    S = G ** m
    shift = min(float(np.min(e)) for e in slice_energies)
    factors = [np.exp(-tau * (e - shift)) for e in slice_energies]
    trace = 0.0
    batch = max(1, min(S, 4096))
    for start in range(0, S, batch):
        cols = np.arange(start, min(S, start + batch))
        block = np.zeros((S, cols.size))
        block[cols, np.arange(cols.size)] = 1.0
        for factor in reversed(factors):
            block = factor[:, None] * (_apply_kernel(block, k1, m) / S)
        trace += float(block[cols, np.arange(cols.size)].sum())
    return math.log(trace) - tau * len(slice_energies) * shift


def _resolve_window(geometry: 'DistanceOracle', window: VertexSet, volume: Optional[VertexSet]):
    window_v = resolve_vertices(geometry, window)
    volume_v = window_v if volume is None else resolve_vertices(geometry, volume)
    if not window_v:
        raise WindowTooLarge("The window is empty")
    if not set(window_v) <= set(volume_v):
        raise WindowTooLarge(f"Window {window_v} is not inside the volume {volume_v}")
    exterior = tuple(v for v in volume_v if v not in set(window_v))
    return window_v, exterior


def brute_force_rdmk(geometry: 'DistanceOracle', spec: InteractionSpec, beta: float, grid: int, L: int,
                     window: VertexSet, volume: Optional[VertexSet] = None,
                     boundary: Optional[ClassicalBoundary] = None, tol: Optional[float] = None) -> RdmKernelEstimate:
    """
    Exact kernel of the discretized model on a G-point grid (d = 1)

    The unnormalized kernel is D_h (K D)^(L-1) k D_h on the product grid of
    the whole volume; the exterior coordinates are traced out and the result
    divided by the full grid trace.

    Args:
        geometry: Distances on the triangulation
        spec: Interaction
        beta: Inverse temperature
        grid: Points per dimension G
        L: Time slices
        window: Window level n or explicit vertices
        volume: Volume level N or explicit vertices; defaults to the window
        boundary: Optional classical exterior configuration

    Raises:
        TooLarge, WindowTooLarge, DimensionMismatch
    """
    if spec.d != 1:
        raise DimensionMismatch("The transfer-matrix oracle supports d = 1 only")
    window_v, exterior = _resolve_window(geometry, window, volume)
    order = window_v + exterior
    m, w = len(order), len(window_v)
    check_grid_cost(L, m, grid)
    tol = tol or _kernel_tol()
    tau = beta / L

    _, k1 = _grid_kernel(grid, tau, tol)
    states = grid_points(grid, m)
    energy = SliceEnergy(geometry, spec, order, (), boundary).conditional(states)
    energy = energy - energy.min()
    full_factor = np.exp(-tau * energy)
    half_factor = np.exp(-0.5 * tau * energy)

    S, nz, nx = grid ** m, grid ** (m - w), grid ** w
    numerator = np.zeros((nx, nx))
    trace = 0.0
    for z in range(nz):
        cols = np.arange(nx) * nz + z
        block = np.zeros((S, nx))
        block[cols, np.arange(nx)] = half_factor[cols]
        for step in range(L):
            block = _apply_kernel(block, k1, m)
            if step < L - 1:
                block *= full_factor[:, None] / S
        block *= half_factor[:, None]
        sub = block[cols]
        numerator += sub
        trace += float(np.trace(sub))
    values = (numerator / nz) / (trace / S)

    points = grid_points(grid, w)
    estimate = RdmKernelEstimate(window=window_v, x_grid=points, y_grid=points, values=values,
                                 std_errors=np.zeros_like(values), method='oracle', beta=beta, L=L, G=grid,
                                 n=window if isinstance(window, (int, np.integer)) else None,
                                 volume=order)
    bound = uniform_kernel_bound(spec, beta, w, coupling_sum(geometry, spec, window_v))
    estimate.check_uniform_bound(bound)
    logger.debug(f"Brute-force kernel on {m} vertices, window {w}, G={grid}, L={L}")
    return estimate


def brute_force_partition_ratio(geometry: 'DistanceOracle', spec: InteractionSpec, beta: float, grid: int, L: int,
                                volume: VertexSet, boundary: Optional[ClassicalBoundary] = None,
                                tol: Optional[float] = None) -> float:
    """Grid value of Xi / Xi_free for the discretized loop model (d = 1)"""
    if spec.d != 1:
        raise DimensionMismatch("The transfer-matrix oracle supports d = 1 only")
    vertices = resolve_vertices(geometry, volume)
    m = len(vertices)
    check_grid_cost(L, m, grid)
    tau = beta / L
    _, k1 = _grid_kernel(grid, tau, tol or _kernel_tol())
    energy = SliceEnergy(geometry, spec, vertices, (), boundary).conditional(grid_points(grid, m))
    interacting = _log_loop_trace([energy] * L, k1, m, tau)
    free = _log_loop_trace([np.zeros_like(energy)] * L, k1, m, tau)
    return math.exp(interacting - free)


def fkdlr_residual(geometry: 'DistanceOracle', spec: InteractionSpec, beta: float, grid: int, L: int,
                   window: VertexSet, volume: Optional[VertexSet] = None,
                   boundary: Optional[ClassicalBoundary] = None, samples: int = 4,
                   rng: Optional[np.random.Generator] = None, tol: Optional[float] = None) -> float:
    """
    Largest gap between the conditioned joint density and the conditional Gibbs density

    For random inner and outer loops, the left side divides exp(-h) of the
    joint configuration by the inner grid integral of the joint weight; the
    right side divides exp(-conditional_energy) by the conditional
    partition function.

    Raises:
        TooLarge, WindowTooLarge, DimensionMismatch
    """
    if spec.d != 1:
        raise DimensionMismatch("The transfer-matrix oracle supports d = 1 only")
    window_v, exterior = _resolve_window(geometry, window, volume)
    check_grid_cost(L, len(window_v), grid)
    rng = rng or np.random.default_rng(0)
    tau = beta / L
    _, k1 = _grid_kernel(grid, tau, tol or _kernel_tol())
    states = grid_points(grid, len(window_v))
    slices = SliceEnergy(geometry, spec, window_v, exterior, boundary)
    residual = 0.0
    for _ in range(samples):
        inner = initial_loops(window_v, beta, L, 1, rng)
        outer = initial_loops(exterior, beta, L, 1, rng) if exterior else LoopConfiguration.empty(beta, L, 1)
        joint = inner.merge(outer)
        if boundary is not None and len(boundary):
            h_joint = boundary_energy(joint, boundary, geometry, spec).value
        else:
            h_joint = config_energy(joint, geometry, spec).total
        outer_at = [outer.paths[:, s] for s in range(L)]
        log_full = _log_loop_trace([slices.full(states, outer_at[s]) for s in range(L)], k1, len(window_v), tau)
        log_cond = _log_loop_trace([slices.conditional(states, outer_at[s]) for s in range(L)], k1,
                                   len(window_v), tau)
        h_cond = conditional_energy(inner, outer, geometry, spec, boundary)
        lhs = math.exp(-h_joint - log_full)
        rhs = math.exp(-h_cond - log_cond)
        residual = max(residual, abs(lhs - rhs))
    return residual


@dataclass(frozen=True)
class CompatibilityReport:
    deviation: float  # max |partial trace of the larger kernel - smaller kernel|
    max_z: float  # largest deviation in units of the combined standard error


def compatibility_check(larger: RdmKernelEstimate, smaller: RdmKernelEstimate) -> CompatibilityReport:
    """
    Trace the larger window's kernel over the extra vertices and compare

    Raises:
        GridMismatch: different grids, slices or beta, or windows not nested
    """
    if larger.G is None or larger.G != smaller.G or larger.L != smaller.L or larger.beta != smaller.beta:
        raise GridMismatch("Kernels must share G, L and beta on full product grids")
    if not set(smaller.window) <= set(larger.window):
        raise GridMismatch(f"Window {smaller.window} is not inside {larger.window}")
    G, w_big = larger.G, len(larger.window)
    if larger.values.shape != (G ** w_big, G ** w_big) or smaller.values.shape != (G ** len(smaller.window),) * 2:
        raise GridMismatch("Kernels are not on full product grids")

    keep = [larger.window.index(v) for v in smaller.window]
    drop = [a for a in range(w_big) if a not in keep]
    values = larger.values.reshape((G,) * (2 * w_big))
    errors = larger.std_errors.reshape((G,) * (2 * w_big)) ** 2
    for a in sorted(drop, reverse=True):
        values = np.diagonal(values, axis1=a, axis2=a + values.ndim // 2).mean(axis=-1)
        errors = np.diagonal(errors, axis1=a, axis2=a + errors.ndim // 2).sum(axis=-1) / G ** 2
    half = len(keep)
    order = np.argsort(np.argsort(keep))
    perm = list(order) + [half + i for i in order]
    traced = np.transpose(values, perm).reshape(G ** half, G ** half)
    traced_var = np.transpose(errors, perm).reshape(G ** half, G ** half)
    diff = np.abs(traced - smaller.values)
    sigma = np.sqrt(traced_var + smaller.std_errors ** 2)
    with np.errstate(divide='ignore', invalid='ignore'):
        z = np.where(sigma > 0, diff / sigma, np.where(diff > 0, np.inf, 0.0))
    return CompatibilityReport(deviation=float(diff.max()), max_z=float(z.max()))


def _free_bridges(x: np.ndarray, y: np.ndarray, zeta: np.ndarray, uniforms: np.ndarray, beta: float) -> np.ndarray:
    """
    Bridges x -> y as linear path plus a shared zero bridge

    x, y: (..., w, d); zeta: (M, w, L+1, d); uniforms: (M, w, d).
    Returns (..., M, w, L+1, d).
    """
    L = zeta.shape[-2] - 1
    x = x[..., None, :, :]
    y = y[..., None, :, :]
    displacement = sample_windings(y - x + np.zeros_like(uniforms), beta, uniforms=uniforms)
    fraction = (np.arange(L + 1) / L)[:, None]
    slices = reduce_mod1(x[..., None, :] + fraction * displacement[..., None, :] + zeta)
    slices[..., 0, :] = x
    slices[..., L, :] = reduce_mod1(y)
    return slices


def estimate_rdmk_mc(exterior_samples: Sequence[PathConfiguration], window: Sequence[int], x_points: np.ndarray,
                     y_points: np.ndarray, geometry: 'DistanceOracle', spec: InteractionSpec, beta: float, L: int,
                     rng: np.random.Generator, bridges: int = 64, boundary: Optional[ClassicalBoundary] = None,
                     volume: Optional[Sequence[int]] = None, n: Optional[int] = None,
                     G: Optional[int] = None) -> RdmKernelEstimate:
    """
    Monte Carlo kernel F(x, y) averaged over sampled exterior loops

    For each exterior sample e the kernel is
    prod p^beta(x_i, y_i) E_bridges[exp(-h)] / (p-bar^w E_free_loops[exp(-h)]),
    h the conditional energy of the window given e and the boundary; free
    bridges share their zero-bridge parts across all (x, y).

    Args:
        exterior_samples: Exterior loop configurations from the volume chain
        window: Window vertices
        x_points, y_points: Evaluation points of shape (P, w, d)
        bridges: Bridges per (x, y) pair and free loops per sample

    Raises:
        WindowTooLarge, NotEnoughSamples
    """
    window = tuple(window)
    if volume is not None and not set(window) <= set(volume):
        raise WindowTooLarge(f"Window {window} is not inside the volume")
    if len(exterior_samples) < 2:
        raise NotEnoughSamples(f"Need at least 2 exterior samples, got {len(exterior_samples)}")
    w, d = len(window), spec.d
    x_points = np.asarray(x_points, dtype=float).reshape(-1, w, d)
    y_points = np.asarray(y_points, dtype=float).reshape(-1, w, d)
    px, py = x_points.shape[0], y_points.shape[0]
    tol = _kernel_tol()
    free_weight = np.prod(theta_1d(y_points[None] - x_points[:, None], beta, tol), axis=(-2, -1))
    p_bar = diagonal_density(beta, d, tol) ** w

    outer_vertices = exterior_samples[0].vertices
    context = EnergyContext(geometry, spec, window, outer_vertices, boundary)
    per_sample = np.empty((len(exterior_samples), px, py))
    for s, exterior in enumerate(exterior_samples):
        if exterior.vertices != outer_vertices:
            raise ConfigInvalid("Exterior samples must share their vertex order")
        outer = exterior.paths if len(exterior) else None
        zeta = levy_fill(np.zeros((bridges, w, d)), np.zeros((bridges, w, d)), beta, L, rng)
        uniforms = rng.random((bridges, w, d))
        paths = _free_bridges(x_points[:, None], y_points[None, :], zeta, uniforms, beta)
        h_bridge = context(paths.reshape((-1, w, L + 1, d)), outer, beta).reshape(px, py, bridges)

        marked = rng.random((bridges, w, d))
        zeta_free = levy_fill(np.zeros((bridges, w, d)), np.zeros((bridges, w, d)), beta, L, rng)
        windings = sample_windings(np.zeros((bridges, w, d)), beta, rng)
        fraction = (np.arange(L + 1) / L)[:, None]
        loops = reduce_mod1(marked[..., None, :] + fraction * windings[..., None, :] + zeta_free)
        loops[..., L, :] = loops[..., 0, :]
        h_free = context(loops, outer, beta)

        shift = min(float(h_bridge.min()), float(h_free.min()))
        numerator = free_weight * np.exp(-(h_bridge - shift)).mean(axis=-1)
        denominator = p_bar * float(np.exp(-(h_free - shift)).mean())
        per_sample[s] = numerator / denominator

    estimate = batch_means(per_sample)
    result = RdmKernelEstimate(window=window, x_grid=x_points, y_grid=y_points, values=estimate.mean,
                               std_errors=estimate.std_error, method='mc', beta=beta, L=L, G=G, n=n,
                               volume=window + tuple(outer_vertices))
    bound = uniform_kernel_bound(spec, beta, w, coupling_sum(geometry, spec, window))
    result.check_uniform_bound(bound)
    return result


def mc_rdmk(geometry: 'DistanceOracle', spec: InteractionSpec, beta: float, L: int, grid: int,
            window: VertexSet, volume: Optional[VertexSet] = None, boundary: Optional[ClassicalBoundary] = None,
            *, seed: int, stage: str = 'mc-run', chains: int = 2, sweeps: int = 200, burn_in: Optional[int] = None,
            thin: int = 1, bridges: int = 64, workers: Optional[int] = None) -> RdmKernelEstimate:
    """
    Sample the volume, then estimate the window kernel on the G-point product grid

    With an empty exterior the exterior samples are empty placeholders and
    only the bridge averages fluctuate.
    """
    window_v, exterior = _resolve_window(geometry, window, volume)
    d = spec.d
    if exterior:
        volume_v = window_v + exterior

        def make_state(rng):
            return GibbsSamplerState(initial_loops(volume_v, beta, L, d, rng), geometry, spec, rng, boundary=boundary)

        def observe(state):
            return state.configuration.restrict(exterior)

        results = run_chains(make_state, seed=seed, stage=stage, chains=chains, sweeps=sweeps, burn_in=burn_in,
                             thin=thin, observe=observe, workers=workers)
        samples = [sample for result in results for sample in result.samples]
    else:
        results = []
        samples = [LoopConfiguration.empty(beta, L, d)] * max(2, chains * sweeps // max(1, thin))
    points = grid_points(grid, len(window_v), d)
    estimate = estimate_rdmk_mc(samples, window_v, points, points, geometry, spec, beta, L,
                                derive_stream(seed, f"{stage}:estimate"), bridges=bridges, boundary=boundary,
                                volume=window_v + exterior,
                                n=window if isinstance(window, (int, np.integer)) else None, G=grid)
    return replace(estimate, chains=tuple(results))


def chain_frame(results: Sequence[ChainResult], batches: Optional[int] = None) -> pd.DataFrame:
    """Per-chain batch means of the energy trace, rows sorted by (chain, batch)"""
    rows = []
    for result in sorted(results, key=lambda r: r.chain):
        energies = np.asarray(result.energies, dtype=float)
        if energies.size == 0:
            continue
        count = min(int(batches or _setting('LORENTZFK_BATCHES', 32)), energies.size)
        size = energies.size // count
        trimmed = energies[energies.size - size * count:].reshape(count, size)
        for batch, values in enumerate(trimmed):
            rows.append((result.chain, batch, float(values.mean()), result.acceptance_rate))
    return pd.DataFrame(rows, columns=['chain', 'batch', 'energy_mean', 'acceptance_rate'])


@dataclass(frozen=True)
class RatioEstimate:
    value: float
    std_error: float
    effective_sample_size: float
    log_value: float


def partition_ratio(volume: Sequence[int], spec: InteractionSpec, geometry: 'DistanceOracle', beta: float, L: int,
                    samples: int, rng: np.random.Generator, exterior: Optional[PathConfiguration] = None,
                    boundary: Optional[ClassicalBoundary] = None) -> RatioEstimate:
    """
    Xi / Xi_free as the free-loop average of exp(-h)

    With an exterior configuration or boundary the conditional energy is
    used, giving the conditional partition ratio.

    Raises:
        DegenerateWeights: effective sample size below LORENTZFK_MIN_ESS
    """
    volume = tuple(volume)
    d = spec.d
    outer_vertices = exterior.vertices if exterior is not None else ()
    context = EnergyContext(geometry, spec, volume, outer_vertices, boundary)
    x = rng.random((samples, len(volume), d))
    loops = bridge_slices(x, x, beta, L, rng)
    h = context(loops, exterior.paths if exterior is not None and len(exterior) else None, beta)
    shift = float(np.min(h))
    weights = np.exp(-(h - shift))
    ess = float(weights.sum() ** 2 / np.sum(weights ** 2))
    min_ess = float(_setting('LORENTZFK_MIN_ESS', 10))
    if ess < min_ess:
        raise DegenerateWeights(f"Effective sample size {ess:.2f} below {min_ess:g}")
    scale = math.exp(-shift)
    mean = float(weights.mean())
    std = float(weights.std(ddof=1)) if samples > 1 else 0.0
    return RatioEstimate(value=scale * mean, std_error=scale * std / math.sqrt(samples),
                         effective_sample_size=ess, log_value=math.log(mean) - shift)


def partition_lower_bound(beta: float, d: int, vertex_count: int, bound_constant: float,
                          tol: Optional[float] = None) -> float:
    """exp(-beta K #V) p-bar^#V, a floor for the partition function"""
    p_bar = diagonal_density(beta, d, tol or _kernel_tol())
    return math.exp(-beta * bound_constant * vertex_count) * p_bar ** vertex_count

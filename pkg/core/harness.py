"""
Experiment Harness

Runs the lorentzfk subcommands as sequences of timed stages over a
validated ExperimentConfig, emits CSV/JSON artifacts and records a
RunManifest for every run, failed runs included.

Features:
- Stage runner with wall times and the failing stage recorded
- Artifacts written under a ".partial" suffix until their stage completes
- Git-style content hashes of every artifact
- Manifests mirrored into the database when its tables exist
"""

import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from django.conf import settings
from django.db import DatabaseError

from .cdlt_graph import (DistanceOracle, Triangulation, chain_triangulation, growth_constant, j_layer_sum,
                         layer_statistics_frame, tree_to_triangulation, triangulation_to_tree)
from .configurations import ClassicalBoundary
from .exceptions import ConfigInvalid, IoFailure, OracleMismatch
from .experiment_config import BoundaryConfig, ExperimentConfig
from .fk_gibbs import (GibbsSamplerState, brute_force_rdmk, chain_frame, compatibility_check,
                       fkdlr_residual, initial_loops, mc_rdmk, resolve_vertices, run_chains)
from .gw_forest import (RootedPlanarTree, sample_gw_layer_sizes, sample_gw_tree, sample_sb_layer_sizes,
                        sample_sb_tree)
from .interaction import DecayFunction, coupling_sum, uniform_kernel_bound
from .mw_verifier import (TunedSchedule, big_q, certified_constant, convexity_check, invariance_gap,
                          lipschitz_violations, phi_decay_fit, phi_series, tuned_multipliers)
from .streams import derive_stream

logger = logging.getLogger(__name__)

PARTIAL_SUFFIX = '.partial'
MANIFEST_NAME = 'manifest.json'


def git_blob_hash(data: bytes) -> str:
    """Content hash as computed by `git hash-object`"""
    return hashlib.sha1(b'blob %d\x00' % len(data) + data).hexdigest()


def to_jsonable(value: Any) -> Any:
    """Plain Python containers and scalars for json.dumps"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, pd.DataFrame):
        return to_jsonable(value.to_dict(orient='records'))
    return value


class ArtifactWriter:
    """
    Writes artifacts into one output directory.

    Files are written as <name>.partial and renamed by commit(), which the
    runner calls when the current stage completes.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.hashes: Dict[str, str] = {}
        self._pending: List[Tuple[Path, Path]] = []

    def _write(self, path: Path, data: bytes):
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'wb') as handle:
                handle.write(data)
        except OSError as e:
            raise IoFailure(f"Cannot write {path}: {e}") from e

    def write_bytes(self, name: str, data: bytes) -> Path:
        target = self.directory / name
        partial = target.with_name(target.name + PARTIAL_SUFFIX)
        self._write(partial, data)
        self._pending.append((partial, target))
        self.hashes[name] = git_blob_hash(data)
        return target

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode('utf-8'))

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        return self.write_text(name, frame.to_csv(index=False, float_format='%.17g', lineterminator='\n'))

    def write_json(self, name: str, payload: Any) -> Path:
        return self.write_text(name, json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + '\n')

    def commit(self):
        for partial, target in self._pending:
            try:
                os.replace(partial, target)
            except OSError as e:
                raise IoFailure(f"Cannot finalize {target}: {e}") from e
        self._pending.clear()

    def write_now(self, name: str, text: str) -> Path:
        """Atomic write outside the stage protocol; not hashed"""
        target = self.directory / name
        partial = target.with_name(target.name + PARTIAL_SUFFIX)
        self._write(partial, text.encode('utf-8'))
        try:
            os.replace(partial, target)
        except OSError as e:
            raise IoFailure(f"Cannot finalize {target}: {e}") from e
        return target


def emit(writer: ArtifactWriter, name: str, results: Any, fmt: str) -> Path:
    """
    Write results as <name>.csv or <name>.json

    CSV takes a DataFrame or a list of flat records; numbers carry 17
    significant digits and rows keep their given order.
    """
    if fmt == 'csv':
        frame = results if isinstance(results, pd.DataFrame) else pd.DataFrame(to_jsonable(results))
        return writer.write_frame(f"{name}.csv", frame)
    if fmt == 'json':
        return writer.write_json(f"{name}.json", results)
    raise ConfigInvalid(f"Unknown format '{fmt}'")


@dataclass
class StageTiming:
    name: str
    position: int
    wall_time: float
    status: str = 'completed'


@dataclass
class RunManifest:
    subcommand: str
    seed: int
    workers: int
    config: Dict[str, Any]
    config_hash: str
    tool_version: str
    stages: List[StageTiming] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    status: str = 'processing'
    failure_stage: str = ''
    error: str = ''
    exit_code: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def sample_geometry(config: ExperimentConfig, rng: np.random.Generator) -> Tuple[RootedPlanarTree, Triangulation]:
    """One tree and its triangulation as the geometry section describes"""
    geometry = config.geometry
    if geometry.kind == 'chain':
        triangulation = chain_triangulation(geometry.height)
        return triangulation_to_tree(triangulation), triangulation
    if geometry.kind == 'sb':
        tree = sample_sb_tree(config.offspring, geometry.height, rng)
    else:
        tree = sample_gw_tree(config.offspring, geometry.height, rng)
    return tree, tree_to_triangulation(tree)


def resolve_boundary(boundary: Optional[BoundaryConfig], geometry: DistanceOracle,
                     volume: Sequence[int]) -> Optional[ClassicalBoundary]:
    """Fixed vertices, or the level just above the highest volume vertex"""
    if boundary is None:
        return None
    if boundary.shell:
        heights = np.asarray(geometry.triangulation.heights)
        top = int(heights[list(volume)].max()) + 1
        vertices = tuple(int(v) for v in np.flatnonzero(heights == top))
    else:
        vertices = boundary.vertices
    return ClassicalBoundary.uniform(vertices, boundary.point)


class ExperimentRunner:
    """
    Runs one subcommand over a validated config.

    Every stage draws from derive_stream(seed, stage name), so stages never
    share randomness and the declared worker count does not change results.
    """

    def __init__(self, config: ExperimentConfig, subcommand: str, workers: Optional[int] = None):
        self.config = config
        self.subcommand = subcommand
        self.workers = int(workers or config.mc.workers or getattr(settings, 'LORENTZFK_THREADS', 1) or 1)
        self.writer = ArtifactWriter(config.output_dir)
        self.manifest = RunManifest(subcommand=subcommand, seed=config.seed, workers=self.workers,
                                    config=config.raw, config_hash=config.config_hash,
                                    tool_version=getattr(settings, 'LORENTZFK_VERSION', ''))
        self.summary: Dict[str, Any] = {}

    @contextmanager
    def stage(self, name: str):
        position = len(self.manifest.stages)
        start = time.perf_counter()
        logger.info(f"[{self.subcommand}] Stage '{name}' started")
        try:
            yield derive_stream(self.config.seed, f"{self.subcommand}:{name}")
            self.writer.commit()
        except BaseException:
            elapsed = time.perf_counter() - start
            self.manifest.stages.append(StageTiming(name, position, elapsed, 'failed'))
            self.manifest.failure_stage = self.manifest.failure_stage or name
            raise
        elapsed = time.perf_counter() - start
        self.manifest.stages.append(StageTiming(name, position, elapsed))
        logger.info(f"[{self.subcommand}] Stage '{name}' completed in {elapsed:.2f}s")

    def emit(self, name: str, results: Any, formats: Optional[Sequence[str]] = None):
        for fmt in formats or self.config.output.formats:
            emit(self.writer, name, results, fmt)

    def run(self) -> RunManifest:
        """
        Execute the subcommand and write manifest.json

        Raises:
            LorentzFKError: after the manifest has been written
        """
        handler = getattr(self, '_run_' + self.subcommand.replace('-', '_'))
        logger.info(f"Running {self.subcommand} with seed {self.config.seed} on {self.workers} worker(s)")
        try:
            handler()
        except Exception as e:
            self.manifest.status = 'failed'
            self.manifest.error = str(e)
            self.manifest.exit_code = getattr(e, 'exit_code', 1)
            logger.error(f"{self.subcommand} failed in stage '{self.manifest.failure_stage}': {e}")
            self._finalize(raise_io=False)
            raise
        self.manifest.status = 'completed'
        self._finalize(raise_io=True)
        return self.manifest

    def _finalize(self, raise_io: bool):
        self.manifest.outputs = dict(sorted(self.writer.hashes.items()))
        try:
            text = json.dumps(to_jsonable(self.manifest.to_dict()), indent=2, sort_keys=True) + '\n'
            self.writer.write_now(MANIFEST_NAME, text)
        except IoFailure as e:
            logger.error(f"Could not write the run manifest: {e}")
            if raise_io:
                self.manifest.status = 'failed'
                self.manifest.exit_code = e.exit_code
                self._persist()
                raise
        self._persist()

    def _persist(self):
        from .models import ExperimentRun, StageRecord

        try:
            run = ExperimentRun.objects.create(
                subcommand=self.subcommand, seed=self.config.seed, workers=self.workers,
                config=to_jsonable(self.config.raw), config_hash=self.config.config_hash,
                tool_version=self.manifest.tool_version, output_dir=str(self.writer.directory),
                output_hashes=self.manifest.outputs, status=self.manifest.status,
                failure_stage=self.manifest.failure_stage, error_message=self.manifest.error,
                exit_code=self.manifest.exit_code)
            StageRecord.objects.bulk_create([
                StageRecord(run=run, name=s.name, position=s.position, wall_time=s.wall_time, status=s.status)
                for s in self.manifest.stages
            ])
        except DatabaseError as e:
            logger.warning(f"Run manifest not stored in the database: {e}")

    # Shared building blocks

    def _geometry(self) -> Tuple[RootedPlanarTree, Triangulation, DistanceOracle]:
        with self.stage('geometry') as rng:
            tree, triangulation = sample_geometry(self.config, rng)
            self.writer.write_text('geometry/triangulation.txt', triangulation.to_text())
        logger.info(f"Geometry of height {triangulation.height} with {triangulation.vertex_count} vertices")
        return tree, triangulation, DistanceOracle(triangulation)

    def _window_and_boundary(self, oracle: DistanceOracle):
        window = self.config.oracle.window
        volume = self.config.oracle.volume if self.config.oracle.volume is not None else window
        volume_v = resolve_vertices(oracle, volume)
        boundary = resolve_boundary(self.config.oracle.boundary, oracle, volume_v)
        return window, volume, volume_v, boundary

    # Subcommands

    def _run_sample_cdlt(self):
        geometry = self.config.geometry
        rows = []
        with self.stage('sample') as rng:
            for s in range(geometry.samples):
                tree, triangulation = sample_geometry(self.config, rng)
                self.writer.write_text(f"trees/tree_{s:04d}.txt", tree.to_text())
                self.writer.write_text(f"triangulations/cdlt_{s:04d}.txt", triangulation.to_text())
                rows.append({'sample_id': s, 'height': triangulation.height,
                             'vertex_count': triangulation.vertex_count,
                             'edge_count': len(triangulation.edges),
                             'triangle_count': len(triangulation.triangles)})
            self.emit('samples', rows)
        logger.info(f"Sampled {geometry.samples} triangulation(s)")

    def _run_geometry_stats(self):
        geometry = self.config.geometry
        J = self.config.spec.j_decay if self.config.spec is not None else DecayFunction.cubic_log()
        with self.stage('layers') as rng:
            if geometry.kind == 'chain':
                layers = np.ones((geometry.samples, geometry.height + 1), dtype=np.int64)
            elif geometry.kind == 'sb':
                layers = sample_sb_layer_sizes(self.config.offspring, geometry.height, rng, geometry.samples)
            else:
                layers = sample_gw_layer_sizes(self.config.offspring, geometry.height, rng, geometry.samples)
            self.emit('layers', layer_statistics_frame(layers), ['csv'])

            increments = np.diff(layers.astype(float), axis=1)
            count = max(1, layers.shape[0])
            std = increments.std(axis=0, ddof=1) if layers.shape[0] > 1 else np.zeros(increments.shape[1])
            recursion = pd.DataFrame({
                'level': np.arange(1, layers.shape[1]),
                'mean_layer': layers[:, 1:].mean(axis=0),
                'mean_increment': increments.mean(axis=0),
                'std_error': std / math.sqrt(count),
                'offspring_variance': self.config.offspring.variance,
            })
            self.emit('recursion', recursion)

        with self.stage('growth'):
            growth = [growth_constant(row, geometry.epsilon) for row in layers]
            # the same samples cut at half height, for the stability of the percentile
            half = [growth_constant(row[:geometry.height // 2 + 1], geometry.epsilon) for row in layers]
            self.emit('growth', pd.DataFrame({
                'sample_id': np.arange(len(growth)),
                'growth_constant': growth,
                'growth_constant_half': half,
            }))
            p99, p99_half = float(np.percentile(growth, 99)), float(np.percentile(half, 99))

        with self.stage('j-sums'):
            sums = [j_layer_sum(row, J, geometry.epsilon) for row in layers]
            frame = pd.DataFrame({
                'sample_id': np.arange(len(sums)),
                'value': [s.value for s in sums],
                'tail_bound': [s.tail_bound for s in sums],
                'upper': [s.upper for s in sums],
                'truncation': [s.truncation for s in sums],
            })
            self.emit('j_sums', frame)
            self.summary = {
                'samples': int(layers.shape[0]),
                'height': geometry.height,
                'growth_constant_p99': p99,
                'growth_constant_p99_half': p99_half,
                'growth_p99_change': abs(p99 - p99_half) / p99_half if p99_half > 0 else None,
                'j_sum_max': float(frame['upper'].max()),
            }
            self.emit('summary', self.summary, ['json'])

    def _run_mc_run(self):
        config = self.config
        quantum, mc = config.quantum, config.mc
        _, _, oracle = self._geometry()
        window, volume, _, boundary = self._window_and_boundary(oracle)
        with self.stage('mc'):
            estimate = mc_rdmk(oracle, config.spec, quantum.beta, quantum.L, quantum.G, window, volume, boundary,
                               seed=config.seed, stage='mc-run', chains=mc.chains, sweeps=mc.sweeps,
                               burn_in=mc.burn_in, thin=mc.thin, bridges=mc.bridges, workers=self.workers)
            self.emit('rdmk', estimate.to_frame(config.seed), ['csv'])
            self.emit('chains', chain_frame(estimate.chains), ['csv'])
            trace, trace_error = estimate.trace()
            bound = uniform_kernel_bound(config.spec, quantum.beta, len(estimate.window),
                                         coupling_sum(oracle, config.spec, estimate.window))
            self.summary = {
                'window': list(estimate.window),
                'volume': list(estimate.volume),
                'trace': trace,
                'trace_std_error': trace_error,
                'min_eigenvalue': estimate.min_eigenvalue(),
                'max_value': float(estimate.values.max()),
                'uniform_bound': bound,
            }
            self.emit('summary', self.summary, ['json'])

    def _run_oracle_check(self):
        config = self.config
        quantum, mc, checks = config.quantum, config.mc, config.oracle
        spec, beta, L, G = config.spec, quantum.beta, quantum.L, quantum.G
        _, _, oracle = self._geometry()
        window, volume, volume_v, boundary = self._window_and_boundary(oracle)
        window_v = resolve_vertices(oracle, window)
        comparisons = []

        def record(name, value, threshold, passed):
            comparisons.append({'check': name, 'value': float(value), 'threshold': float(threshold),
                                'passed': bool(passed)})
            logger.info(f"Check {name}: {value:.3e} vs {threshold:.3e} {'ok' if passed else 'FAILED'}")

        with self.stage('brute-force'):
            exact = brute_force_rdmk(oracle, spec, beta, G, L, window, volume, boundary)
            self.emit('rdmk_oracle', exact.to_frame(config.seed), ['csv'])

        with self.stage('mc'):
            estimate = mc_rdmk(oracle, spec, beta, L, G, window, volume, boundary, seed=config.seed,
                               stage='oracle-check', chains=mc.chains, sweeps=mc.sweeps, burn_in=mc.burn_in,
                               thin=mc.thin, bridges=mc.bridges, workers=self.workers)
            self.emit('rdmk_mc', estimate.to_frame(config.seed), ['csv'])
            diff = np.abs(estimate.values - exact.values)
            tolerance = checks.sigma * estimate.std_errors + checks.relative * np.abs(exact.values)
            worst = float(np.max(diff - tolerance))
            record('mc_vs_oracle', float(diff.max()), float(tolerance.flat[np.argmax(diff - tolerance)]), worst <= 0)

        with self.stage('fkdlr') as rng:
            residual = fkdlr_residual(oracle, spec, beta, G, L, window, volume, boundary,
                                      samples=checks.fkdlr_samples, rng=rng)
            record('fkdlr_residual', residual, checks.fkdlr_tol, residual < checks.fkdlr_tol)

        if set(window_v) != set(volume_v):
            with self.stage('compatibility'):
                full = brute_force_rdmk(oracle, spec, beta, G, L, volume_v, volume_v, boundary)
                report = compatibility_check(full, exact)
                record('compatibility_oracle', report.deviation, checks.compatibility_tol,
                       report.deviation < checks.compatibility_tol)
                full_mc = mc_rdmk(oracle, spec, beta, L, G, volume_v, volume_v, boundary, seed=config.seed,
                                  stage='oracle-check:full', chains=mc.chains, sweeps=mc.sweeps,
                                  burn_in=mc.burn_in, thin=mc.thin, bridges=mc.bridges, workers=self.workers)
                report_mc = compatibility_check(full_mc, estimate)
                record('compatibility_mc_z', report_mc.max_z, checks.compatibility_z,
                       report_mc.max_z <= checks.compatibility_z)

        with self.stage('report'):
            bound = uniform_kernel_bound(spec, beta, len(window_v), coupling_sum(oracle, spec, window_v))
            record('uniform_bound', float(exact.values.max()), bound, exact.values.max() <= bound * (1 + 1e-9))
            self.summary = {'comparisons': comparisons, 'passed': all(c['passed'] for c in comparisons)}
            self.emit('comparisons', comparisons)
            self.emit('summary', self.summary, ['json'])

        failed = [c['check'] for c in comparisons if not c['passed']]
        if failed:
            raise OracleMismatch(f"Oracle comparisons failed: {', '.join(failed)}")

    def _run_mw_verify(self):
        config = self.config
        quantum, schedule_cfg, checks, mc = config.quantum, config.schedule, config.oracle, config.mc
        spec = config.spec
        g = quantum.group_element
        _, _, oracle = self._geometry()
        schedule = TunedSchedule(g, schedule_cfg.r_bar, schedule_cfg.n_primes[0], schedule_cfg.n,
                                 schedule_cfg.k_mode)

        with self.stage('taylor') as rng:
            constant = certified_constant(spec, g, quantum.beta, rng, pairs=schedule_cfg.taylor_pairs)
        logger.info(f"Certified constant beta V-bar C_taylor = {constant:.6g}")

        records = []
        with self.stage('phi'):
            for n_prime in schedule_cfg.n_primes:
                tuned = schedule.with_n_prime(n_prime)
                window_phi = phi_series(tuned, oracle, spec.J)
                tuned_phi = phi_series(tuned, oracle, spec.J, pairs='tuned')
                records.append({
                    'n_prime': n_prime,
                    'phi': window_phi.value,
                    'phi_tail': window_phi.tail_bound,
                    'phi_tuned': tuned_phi.upper,
                    'phi_q_product': window_phi.value * big_q(n_prime - schedule.r_bar),
                    'q_margin': schedule_cfg.a * math.exp(-constant * tuned_phi.upper / 2.0),
                    'lipschitz_violations': lipschitz_violations(tuned, oracle),
                })
            fit = None
            if len(schedule_cfg.n_primes) >= 5:
                fit = phi_decay_fit(schedule, schedule_cfg.n_primes, oracle, spec.J)
            else:
                logger.warning(f"Phi decay fit skipped: {len(schedule_cfg.n_primes)} values of n' (need 5)")

        with self.stage('convexity'):
            for record in records:
                tuned = schedule.with_n_prime(record['n_prime'])
                moved = tuple(int(v) for v in np.flatnonzero(tuned_multipliers(tuned, oracle) > 0))
                samples = self._convexity_samples(oracle, moved, record['n_prime'])
                report = convexity_check(samples, tuned, oracle, spec, schedule_cfg.a, constant)
                record['satisfaction_fraction'] = report.fraction
                record['convexity_violations'] = report.violations
                record['min_margin'] = report.min_margin if samples else float('nan')
                record['certified'] = report.certified

        gap_records = []
        if checks.volumes:
            with self.stage('invariance-gap'):
                def boundary_for(N):
                    return resolve_boundary(checks.boundary, oracle, resolve_vertices(oracle, N))

                curve = invariance_gap(oracle, spec, g, schedule.n, checks.volumes, quantum.beta, quantum.G,
                                       quantum.L, boundary_for=boundary_for, method=checks.gap_method,
                                       rng=derive_stream(config.seed, 'mw-verify:ratio-gap'),
                                       window_samples=checks.window_samples, ratio_samples=checks.ratio_samples,
                                       seed=config.seed,
                                       mc_options={'chains': mc.chains, 'sweeps': mc.sweeps, 'burn_in': mc.burn_in,
                                                   'thin': mc.thin, 'bridges': mc.bridges, 'workers': self.workers})
                gap_records = [asdict(r) for r in curve.records]

        # the gap does not depend on n'; every row carries the value at the largest volume
        final = max(gap_records, key=lambda r: r['N']) if gap_records else {}
        for record in records:
            record['gap_volume'] = final.get('N')
            record['gap_kernel'] = final.get('gap_kernel')
            record['gap_ratio'] = final.get('gap_ratio')

        with self.stage('report'):
            self.emit('verifier', records)
            if gap_records:
                self.emit('invariance_gap', gap_records)
            self.summary = {
                'constant': constant,
                'records': records,
                'invariance_gap': gap_records,
                'phi_decay': asdict(fit) if fit is not None else None,
                'phi_decay_passed': fit.passed if fit is not None else None,
            }
            self.emit('report', self.summary, ['json'])

    def _convexity_samples(self, oracle: DistanceOracle, vertices: Tuple[int, ...], n_prime: int):
        """Gibbs samples of the moved vertices, free exterior"""
        config = self.config
        count = config.schedule.convexity_samples
        if not count or not vertices:
            return []
        quantum, mc = config.quantum, config.mc
        chains = max(1, min(mc.chains, count))
        sweeps = max(1, math.ceil(count / chains)) * mc.thin

        def make_state(rng):
            return GibbsSamplerState(initial_loops(vertices, quantum.beta, quantum.L, quantum.d, rng), oracle,
                                     config.spec, rng)

        results = run_chains(make_state, seed=config.seed, stage=f"mw-verify:convexity:{n_prime}", chains=chains,
                             sweeps=sweeps, burn_in=mc.burn_in, thin=mc.thin, workers=self.workers)
        samples = [sample for result in results for sample in result.samples]
        return samples[:count]

"""
Experiment Configuration

JSON experiment documents parsed into a tree of dataclasses. Every field is
checked before any computation starts, and the first failing field is
named by its dotted path in the raised ConfigInvalid.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigInvalid, LorentzFKError, NonpositiveBeta
from .gw_forest import OffspringDistribution, law_from_descriptor
from .interaction import InteractionSpec, spec_from_descriptor
from .torus_kernel import GroupElement

logger = logging.getLogger(__name__)

SUBCOMMANDS = ('sample-cdlt', 'geometry-stats', 'mc-run', 'oracle-check', 'mw-verify')
GEOMETRY_KINDS = ('sb', 'gw', 'chain')
OUTPUT_FORMATS = ('csv', 'json')
GAP_METHODS = ('oracle', 'mc')

# Sections each subcommand needs beyond seed, offspring and geometry
REQUIRED_SECTIONS = {
    'sample-cdlt': (),
    'geometry-stats': (),
    'mc-run': ('spec', 'quantum'),
    'oracle-check': ('spec', 'quantum'),
    'mw-verify': ('spec', 'quantum', 'schedule'),
}


def _section(data: Mapping, key: str, required: bool = True) -> Mapping:
    value = data.get(key)
    if value is None:
        if required:
            raise ConfigInvalid(f"{key}: missing")
        return {}
    if not isinstance(value, Mapping):
        raise ConfigInvalid(f"{key}: expected an object")
    return value


def _int(data: Mapping, key: str, path: str, default: Any = ..., minimum: Optional[int] = None) -> Optional[int]:
    if key not in data or data[key] is None:
        if default is ...:
            raise ConfigInvalid(f"{path}.{key}: missing")
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigInvalid(f"{path}.{key}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigInvalid(f"{path}.{key}: must be >= {minimum}, got {value}")
    return int(value)


def _float(data: Mapping, key: str, path: str, default: Any = ...) -> float:
    if key not in data or data[key] is None:
        if default is ...:
            raise ConfigInvalid(f"{path}.{key}: missing")
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise ConfigInvalid(f"{path}.{key}: expected a finite number, got {value!r}")
    return float(value)


def _choice(data: Mapping, key: str, path: str, choices: Sequence[str], default: str) -> str:
    value = data.get(key, default)
    if value not in choices:
        raise ConfigInvalid(f"{path}.{key}: must be one of {', '.join(choices)}, got {value!r}")
    return value


def _int_list(data: Mapping, key: str, path: str, default: Any = ...) -> List[int]:
    if key not in data or data[key] is None:
        if default is ...:
            raise ConfigInvalid(f"{path}.{key}: missing")
        return list(default)
    values = data[key]
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigInvalid(f"{path}.{key}: expected a non-empty list of integers")
    for value in values:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{path}.{key}: expected integers, got {value!r}")
    return [int(v) for v in values]


def _vertex_set(value: Any, path: str):
    """An integer level or an explicit vertex list"""
    if value is None:
        return None
    if isinstance(value, bool):
        raise ConfigInvalid(f"{path}: expected a level or a vertex list")
    if isinstance(value, int):
        if value < 0:
            raise ConfigInvalid(f"{path}: level must be >= 0, got {value}")
        return value
    if isinstance(value, (list, tuple)) and value and all(isinstance(v, int) and not isinstance(v, bool)
                                                          for v in value):
        return tuple(value)
    raise ConfigInvalid(f"{path}: expected a level or a non-empty vertex list")


@dataclass(frozen=True)
class GeometryConfig:
    height: int
    epsilon: float = 0.25
    samples: int = 1
    kind: str = 'sb'


@dataclass(frozen=True)
class QuantumConfig:
    beta: float
    L: int
    G: int
    d: int = 1
    d_prime: int = 1
    theta: Tuple[float, ...] = (0.0,)
    matrix_a: Tuple[Tuple[float, ...], ...] = ((1.0,),)

    @property
    def group_element(self) -> GroupElement:
        return GroupElement(np.array(self.theta), np.array(self.matrix_a))


@dataclass(frozen=True)
class ScheduleConfig:
    r_bar: int
    n_primes: Tuple[int, ...]
    n: int = 0
    a: float = 1.1
    k_mode: str = 'distance'
    convexity_samples: int = 64
    taylor_pairs: int = 200


@dataclass(frozen=True)
class McConfig:
    sweeps: int = 200
    burn_in: Optional[int] = None
    chains: int = 2
    thin: int = 1
    bridges: int = 64
    workers: Optional[int] = None


@dataclass(frozen=True)
class OutputConfig:
    directory: str = 'runs'
    formats: Tuple[str, ...] = OUTPUT_FORMATS


@dataclass(frozen=True)
class BoundaryConfig:
    """Classical boundary at fixed vertices, or on the shell just above the volume"""
    point: Tuple[float, ...]
    vertices: Optional[Tuple[int, ...]] = None
    shell: bool = False


@dataclass(frozen=True)
class OracleConfig:
    window: Any = 0
    volume: Any = None
    volumes: Tuple[int, ...] = ()
    boundary: Optional[BoundaryConfig] = None
    fkdlr_samples: int = 4
    sigma: float = 3.0
    relative: float = 0.02
    fkdlr_tol: float = 1e-9
    compatibility_tol: float = 1e-8
    compatibility_z: float = 4.0
    gap_method: str = 'oracle'
    window_samples: int = 4
    ratio_samples: int = 256


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A validated experiment document.

    raw keeps the parsed document with overrides applied; it is echoed in
    the run manifest and hashed into config_hash.
    """
    seed: int
    offspring: OffspringDistribution
    geometry: GeometryConfig
    spec: Optional[InteractionSpec]
    quantum: Optional[QuantumConfig]
    schedule: Optional[ScheduleConfig]
    mc: McConfig
    output: OutputConfig
    oracle: OracleConfig
    raw: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @property
    def output_dir(self) -> Path:
        return Path(self.output.directory)

    @classmethod
    def from_file(cls, path, subcommand: str, seed: Optional[int] = None,
                  output_dir: Optional[str] = None) -> 'ExperimentConfig':
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                data = json.load(handle)
        except OSError as e:
            raise ConfigInvalid(f"config: cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"config: {path} is not valid JSON: {e}") from e
        return cls.from_dict(data, subcommand, seed=seed, output_dir=output_dir)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], subcommand: str, seed: Optional[int] = None,
                  output_dir: Optional[str] = None) -> 'ExperimentConfig':
        """
        Validate a parsed document for one subcommand

        Only the seed and the output directory may be overridden.

        Raises:
            ConfigInvalid: naming the first failing field
        """
        if subcommand not in SUBCOMMANDS:
            raise ConfigInvalid(f"subcommand: must be one of {', '.join(SUBCOMMANDS)}, got {subcommand!r}")
        if not isinstance(data, Mapping):
            raise ConfigInvalid("config: expected a JSON object")
        raw = json.loads(json.dumps(data))
        if seed is not None:
            raw['seed'] = seed
        if output_dir is not None:
            raw.setdefault('output', {})
            if not isinstance(raw['output'], dict):
                raise ConfigInvalid("output: expected an object")
            raw['output']['directory'] = str(output_dir)

        if 'seed' not in raw or raw['seed'] is None:
            raise ConfigInvalid("seed: missing")
        seed_value = raw['seed']
        if isinstance(seed_value, bool) or not isinstance(seed_value, int) or not 0 <= seed_value < 2 ** 64:
            raise ConfigInvalid(f"seed: expected a 64-bit unsigned integer, got {seed_value!r}")

        offspring = _parse_offspring(_section(raw, 'offspring'))
        geometry = _parse_geometry(_section(raw, 'geometry'))
        needed = REQUIRED_SECTIONS[subcommand]
        spec_data = _section(raw, 'spec', required='spec' in needed)
        quantum = _parse_quantum(_section(raw, 'quantum', required='quantum' in needed)) \
            if raw.get('quantum') is not None or 'quantum' in needed else None
        spec = _parse_spec(spec_data, quantum.d if quantum else 1) if spec_data else None
        schedule = _parse_schedule(_section(raw, 'schedule', required='schedule' in needed), geometry) \
            if raw.get('schedule') is not None or 'schedule' in needed else None
        mc = _parse_mc(_section(raw, 'mc', required=False))
        output = _parse_output(_section(raw, 'output', required=False))
        oracle = _parse_oracle(_section(raw, 'oracle', required=False), quantum)

        config = cls(seed=int(seed_value), offspring=offspring, geometry=geometry, spec=spec, quantum=quantum,
                     schedule=schedule, mc=mc, output=output, oracle=oracle, raw=raw)
        _cross_check(config, subcommand)
        logger.debug(f"Validated {subcommand} config {config.config_hash[:12]}")
        return config


def _parse_offspring(data: Mapping) -> OffspringDistribution:
    try:
        return law_from_descriptor(data)
    except LorentzFKError as e:
        raise type(e)(f"offspring: {e}") from e
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise ConfigInvalid(f"offspring: {e}") from e


def _parse_geometry(data: Mapping) -> GeometryConfig:
    height = _int(data, 'height', 'geometry', minimum=1)
    epsilon = _float(data, 'epsilon', 'geometry', default=0.25)
    if not 0.0 < epsilon < 1.0:
        raise ConfigInvalid(f"geometry.epsilon: must lie in (0, 1), got {epsilon}")
    samples = _int(data, 'samples', 'geometry', default=1, minimum=1)
    kind = _choice(data, 'kind', 'geometry', GEOMETRY_KINDS, 'sb')
    return GeometryConfig(height=height, epsilon=epsilon, samples=samples, kind=kind)


def _parse_quantum(data: Mapping) -> QuantumConfig:
    beta = _float(data, 'beta', 'quantum')
    if not beta > 0:
        raise NonpositiveBeta(f"quantum.beta: must be positive, got {beta}")
    L = _int(data, 'L', 'quantum', minimum=1)
    G = _int(data, 'G', 'quantum', minimum=2)
    d = _int(data, 'd', 'quantum', default=1, minimum=1)
    d_prime = _int(data, 'd_prime', 'quantum', default=d, minimum=1)
    if d_prime > d:
        raise ConfigInvalid(f"quantum.d_prime: must be <= d = {d}, got {d_prime}")

    theta = data.get('theta', [0.0] * d_prime)
    if isinstance(theta, (int, float)) and not isinstance(theta, bool):
        theta = [theta] * d_prime
    if not isinstance(theta, (list, tuple)) or len(theta) != d_prime:
        raise ConfigInvalid(f"quantum.theta: expected {d_prime} numbers")
    matrix_a = data.get('matrix_a')
    if matrix_a is None:
        matrix_a = np.eye(d_prime, d).tolist()
    try:
        theta_arr = np.asarray(theta, dtype=float)
        a_arr = np.asarray(matrix_a, dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(f"quantum.matrix_a: {e}") from e
    if a_arr.shape != (d_prime, d):
        raise ConfigInvalid(f"quantum.matrix_a: expected shape ({d_prime}, {d}), got {a_arr.shape}")
    quantum = QuantumConfig(beta=beta, L=L, G=G, d=d, d_prime=d_prime, theta=tuple(theta_arr.tolist()),
                            matrix_a=tuple(tuple(row) for row in a_arr.tolist()))
    try:
        quantum.group_element
    except LorentzFKError as e:
        raise type(e)(f"quantum.matrix_a: {e}") from e
    return quantum


def _parse_spec(data: Mapping, d: int) -> InteractionSpec:
    try:
        return spec_from_descriptor(data, d=d)
    except LorentzFKError as e:
        message = str(e)
        raise type(e)(message if message.startswith('spec') else f"spec: {message}") from e


def _parse_schedule(data: Mapping, geometry: GeometryConfig) -> ScheduleConfig:
    r_bar = _int(data, 'r_bar', 'schedule', minimum=1)
    n_primes = _int_list(data, 'n_primes', 'schedule')
    n = _int(data, 'n', 'schedule', default=0, minimum=0)
    a = _float(data, 'a', 'schedule', default=1.1)
    if not a > 1:
        raise ConfigInvalid(f"schedule.a: must exceed 1, got {a}")
    k_mode = _choice(data, 'k_mode', 'schedule', ('distance', 'height'), 'distance')
    if not n < r_bar < min(n_primes):
        raise ConfigInvalid(f"schedule.r_bar: need n < r_bar < min(n_primes), got {n}, {r_bar}, {min(n_primes)}")
    if min(n_primes) > geometry.height:
        raise ConfigInvalid(f"schedule.n_primes: min(n_primes) = {min(n_primes)} exceeds geometry.height "
                            f"= {geometry.height}")
    return ScheduleConfig(r_bar=r_bar, n_primes=tuple(sorted(set(n_primes))), n=n, a=a, k_mode=k_mode,
                          convexity_samples=_int(data, 'convexity_samples', 'schedule', default=64, minimum=0),
                          taylor_pairs=_int(data, 'taylor_pairs', 'schedule', default=200, minimum=1))


def _parse_mc(data: Mapping) -> McConfig:
    return McConfig(sweeps=_int(data, 'sweeps', 'mc', default=200, minimum=1),
                    burn_in=_int(data, 'burn_in', 'mc', default=None, minimum=0),
                    chains=_int(data, 'chains', 'mc', default=2, minimum=1),
                    thin=_int(data, 'thin', 'mc', default=1, minimum=1),
                    bridges=_int(data, 'bridges', 'mc', default=64, minimum=2),
                    workers=_int(data, 'workers', 'mc', default=None, minimum=1))


def _parse_output(data: Mapping) -> OutputConfig:
    directory = data.get('directory', 'runs')
    if not isinstance(directory, str) or not directory:
        raise ConfigInvalid("output.directory: expected a non-empty path")
    formats = data.get('formats', list(OUTPUT_FORMATS))
    if isinstance(formats, str):
        formats = [formats]
    if not isinstance(formats, (list, tuple)) or not formats or any(f not in OUTPUT_FORMATS for f in formats):
        raise ConfigInvalid(f"output.formats: expected a subset of {', '.join(OUTPUT_FORMATS)}")
    return OutputConfig(directory=directory, formats=tuple(dict.fromkeys(formats)))


def _parse_boundary(data: Any, quantum: Optional[QuantumConfig]) -> Optional[BoundaryConfig]:
    if data is None:
        return None
    if not isinstance(data, Mapping):
        raise ConfigInvalid("oracle.boundary: expected an object")
    d = quantum.d if quantum else 1
    point = data.get('point', [0.0] * d)
    if isinstance(point, (int, float)) and not isinstance(point, bool):
        point = [point]
    if not isinstance(point, (list, tuple)) or len(point) != d:
        raise ConfigInvalid(f"oracle.boundary.point: expected {d} coordinates")
    shell = bool(data.get('shell', False))
    vertices = data.get('vertices')
    if shell == (vertices is not None):
        raise ConfigInvalid("oracle.boundary: give exactly one of 'vertices' and 'shell'")
    if vertices is not None:
        vertices = _vertex_set(list(vertices) if isinstance(vertices, (list, tuple)) else vertices,
                               'oracle.boundary.vertices')
        if isinstance(vertices, int):
            raise ConfigInvalid("oracle.boundary.vertices: expected a vertex list")
    return BoundaryConfig(point=tuple(float(p) for p in point), vertices=vertices, shell=shell)


def _parse_oracle(data: Mapping, quantum: Optional[QuantumConfig]) -> OracleConfig:
    window = _vertex_set(data.get('window', 0), 'oracle.window')
    volume = _vertex_set(data.get('volume'), 'oracle.volume')
    volumes = _int_list(data, 'volumes', 'oracle', default=())
    sigma = _float(data, 'sigma', 'oracle', default=3.0)
    relative = _float(data, 'relative', 'oracle', default=0.02)
    fkdlr_tol = _float(data, 'fkdlr_tol', 'oracle', default=1e-9)
    compatibility_tol = _float(data, 'compatibility_tol', 'oracle', default=1e-8)
    compatibility_z = _float(data, 'compatibility_z', 'oracle', default=4.0)
    for key, value in (('sigma', sigma), ('relative', relative), ('fkdlr_tol', fkdlr_tol),
                       ('compatibility_tol', compatibility_tol), ('compatibility_z', compatibility_z)):
        if not value > 0:
            raise ConfigInvalid(f"oracle.{key}: must be positive, got {value}")
    return OracleConfig(window=window, volume=volume, volumes=tuple(volumes),
                        boundary=_parse_boundary(data.get('boundary'), quantum),
                        fkdlr_samples=_int(data, 'fkdlr_samples', 'oracle', default=4, minimum=1),
                        sigma=sigma, relative=relative, fkdlr_tol=fkdlr_tol, compatibility_tol=compatibility_tol,
                        compatibility_z=compatibility_z,
                        gap_method=_choice(data, 'gap_method', 'oracle', GAP_METHODS, 'oracle'),
                        window_samples=_int(data, 'window_samples', 'oracle', default=4, minimum=1),
                        ratio_samples=_int(data, 'ratio_samples', 'oracle', default=256, minimum=2))


def _cross_check(config: ExperimentConfig, subcommand: str):
    quantum, oracle = config.quantum, config.oracle
    if config.spec is not None and quantum is not None and config.spec.d != quantum.d:
        raise ConfigInvalid(f"spec.d: {config.spec.d} differs from quantum.d = {quantum.d}")
    if subcommand == 'oracle-check' and quantum.d != 1:
        raise ConfigInvalid(f"quantum.d: the exact oracle supports d = 1, got {quantum.d}")
    if isinstance(oracle.window, int) and isinstance(oracle.volume, int) and oracle.window > oracle.volume:
        raise ConfigInvalid(f"oracle.window: level {oracle.window} exceeds oracle.volume {oracle.volume}")
    if subcommand == 'mw-verify':
        schedule = config.schedule
        if oracle.volumes:
            if min(oracle.volumes) < schedule.n:
                raise ConfigInvalid(f"oracle.volumes: every volume must contain the window level {schedule.n}")
            steps = quantum.group_element.shift * quantum.G
            if quantum.d != 1 or not np.allclose(steps, np.round(steps), atol=1e-9):
                raise ConfigInvalid("quantum.theta: the invariance gap needs d = 1 and a shift on the 1/G grid")

"""
Path and loop configurations over finite vertex sets, and classical
boundary configurations over exterior vertices.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np

from .exceptions import ConfigInvalid, DimensionMismatch, MismatchedPaths, OverlappingSupports, UnknownVertex
from .torus_kernel import DiscretizedPath, reduce_mod1


def _check_unique(vertices: Tuple[int, ...]):
    if len(set(vertices)) != len(vertices):
        raise ConfigInvalid(f"Repeated vertex in support {vertices}")


@dataclass(frozen=True, eq=False)
class PathConfiguration:
    """
    One discretized path per vertex, all of time length beta on L steps.

    paths has shape (#vertices, L + 1, d); row r belongs to vertices[r].
    """
    vertices: Tuple[int, ...]
    paths: np.ndarray
    beta: float

    def __post_init__(self):
        vertices = tuple(int(v) for v in self.vertices)
        paths = np.asarray(self.paths, dtype=float)
        if paths.ndim != 3 or paths.shape[0] != len(vertices):
            raise DimensionMismatch(f"Expected paths of shape ({len(vertices)}, L+1, d), got {paths.shape}")
        if paths.shape[1] < 2:
            raise MismatchedPaths(f"Paths need at least two slices, got {paths.shape[1]}")
        if not self.beta > 0:
            raise ConfigInvalid(f"beta must be positive, got {self.beta}")
        _check_unique(vertices)
        paths.setflags(write=False)
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'paths', paths)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def L(self) -> int:
        return self.paths.shape[1] - 1

    @property
    def d(self) -> int:
        return self.paths.shape[2]

    @property
    def support(self) -> frozenset:
        return frozenset(self.vertices)

    def index(self, vertex: int) -> int:
        try:
            return self.vertices.index(int(vertex))
        except ValueError:
            raise UnknownVertex(f"Vertex {vertex} is not in the configuration") from None

    def path(self, vertex: int) -> DiscretizedPath:
        return DiscretizedPath(self.paths[self.index(vertex)], self.beta, is_loop=isinstance(self, LoopConfiguration))

    def as_dict(self) -> Dict[int, DiscretizedPath]:
        return {v: self.path(v) for v in self.vertices}

    def _check_compatible(self, other: 'PathConfiguration'):
        if len(self) and len(other) and (self.beta != other.beta or self.L != other.L or self.d != other.d):
            raise MismatchedPaths("Configurations differ in beta, L or d")

    def merge(self, other: 'PathConfiguration') -> 'PathConfiguration':
        """Union of two disjoint configurations, self first"""
        if self.support & other.support:
            raise OverlappingSupports(f"Supports overlap on {sorted(self.support & other.support)}")
        self._check_compatible(other)
        if not len(other):
            return self
        if not len(self):
            return other if type(self) is type(other) else PathConfiguration(other.vertices, other.paths, other.beta)
        cls = LoopConfiguration if isinstance(self, LoopConfiguration) and isinstance(other, LoopConfiguration) \
            else PathConfiguration
        return cls(self.vertices + other.vertices, np.concatenate([self.paths, other.paths]), self.beta)

    def restrict(self, vertices: Iterable[int]) -> 'PathConfiguration':
        keep = [self.index(v) for v in vertices]
        return type(self)(tuple(self.vertices[r] for r in keep), self.paths[keep], self.beta)

    def shifted(self, shifts: np.ndarray) -> 'PathConfiguration':
        """Per-vertex rigid shift; shifts has shape (#vertices, d)"""
        shifts = np.asarray(shifts, dtype=float).reshape(len(self), 1, self.d)
        return type(self)(self.vertices, reduce_mod1(self.paths + shifts), self.beta)

    @classmethod
    def empty(cls, beta: float, L: int, d: int) -> 'PathConfiguration':
        return cls((), np.zeros((0, L + 1, d)), beta)

    @classmethod
    def from_paths(cls, paths: Mapping[int, DiscretizedPath]) -> 'PathConfiguration':
        if not paths:
            raise ConfigInvalid("from_paths needs at least one path")
        items = sorted(paths.items())
        first = items[0][1]
        for _, p in items:
            if p.beta != first.beta or p.L != first.L or p.d != first.d:
                raise MismatchedPaths("Paths differ in beta, L or d")
        return cls(tuple(v for v, _ in items), np.stack([p.slices for _, p in items]), first.beta)


class LoopConfiguration(PathConfiguration):
    """PathConfiguration whose paths are closed: first slice equals last slice"""

    def __post_init__(self):
        super().__post_init__()
        if not np.array_equal(self.paths[:, 0], self.paths[:, -1]):
            raise ConfigInvalid("Loop configuration contains an open path")


@dataclass(frozen=True, eq=False)
class ClassicalBoundary:
    """Fixed points x^c(i') in M for exterior vertices i'"""
    vertices: Tuple[int, ...]
    points: np.ndarray

    def __post_init__(self):
        vertices = tuple(int(v) for v in self.vertices)
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(len(vertices), -1) if vertices else points.reshape(0, 1)
        if points.shape[0] != len(vertices):
            raise DimensionMismatch(f"{len(vertices)} boundary vertices but {points.shape[0]} points")
        _check_unique(vertices)
        points = reduce_mod1(points)
        points.setflags(write=False)
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'points', points)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def support(self) -> frozenset:
        return frozenset(self.vertices)

    @classmethod
    def empty(cls, d: int = 1) -> 'ClassicalBoundary':
        return cls((), np.zeros((0, d)))

    @classmethod
    def uniform(cls, vertices: Sequence[int], point: Sequence[float]) -> 'ClassicalBoundary':
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls(tuple(vertices), np.tile(point, (len(vertices), 1)))

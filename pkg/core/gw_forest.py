"""
Critical Galton-Watson Forests

This module samples critical Galton-Watson trees and their size-biased
single-spine companions, and exposes the layer statistics that the
triangulation and verifier layers consume.

Features:
- Exact criticality checks for finite laws and closed-form built-ins
- Level-order planar trees with an optional spine
- Layer-count samplers that skip building explicit trees
- Canonical "CDLT-TREE v1" text serialization
- Exhaustive enumeration of small planar trees
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from itertools import product
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import InfiniteVariance, MalformedTree, NotAProbability, NotCritical

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-12
MEAN_TOLERANCE = 1e-9
TREE_HEADER = 'CDLT-TREE v1'

# Closed-form laws are tabulated until the remaining mass drops below this
CLOSED_FORM_TAIL = 1e-17
CLOSED_FORM_MAX_K = 4096


@dataclass(frozen=True)
class ClosedFormLaw:
    """Infinite-support offspring law given by its pmf and analytic moments"""
    pmf: Callable[[int], float]
    mean: float
    second_moment: Optional[float]
    name: str = 'closed-form'


class _TabulatedLaw:
    """Inverse-CDF sampling over a finite table"""

    probs: Mapping[int, float]

    @cached_property
    def support(self) -> np.ndarray:
        return np.array(sorted(k for k, p in self.probs.items() if p > 0), dtype=np.int64)

    @cached_property
    def _cdf(self) -> np.ndarray:
        weights = np.array([float(self.probs[int(k)]) for k in self.support])
        cdf = np.cumsum(weights)
        return cdf / cdf[-1]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """
        Draw offspring counts

        Args:
            rng: Seeded generator
            size: Number of draws

        Returns:
            int64 array of counts
        """
        if size == 0:
            return np.zeros(0, dtype=np.int64)
        index = np.searchsorted(self._cdf, rng.random(size), side='right')
        return self.support[np.minimum(index, self.support.size - 1)]

    def sample_sums(self, rng: np.random.Generator, counts) -> np.ndarray:
        """Per entry, the total offspring of counts[i] independent parents"""
        counts = np.asarray(counts, dtype=np.int64)
        weights = np.diff(self._cdf, prepend=0.0)
        return rng.multinomial(counts, weights) @ self.support


@dataclass(frozen=True)
class OffspringDistribution(_TabulatedLaw):
    probs: Mapping[int, float]
    mean: float
    variance: float
    name: str = 'finite'

    def sample_sums(self, rng: np.random.Generator, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.int64)
        if self.name == 'geometric':
            # sum of n geometric(1/2) draws is negative binomial(n, 1/2)
            return np.where(counts > 0, rng.negative_binomial(np.maximum(counts, 1), 0.5), 0)
        if self.name == 'binary':
            return 2 * rng.binomial(counts, 0.5)
        if self.name == 'unit':
            return counts.copy()
        return super().sample_sums(rng, counts)

    def descriptor(self) -> Dict:
        if self.name in ('geometric', 'binary', 'unit'):
            return {'name': self.name}
        return {'name': 'finite', 'probs': {str(k): float(p) for k, p in sorted(self.probs.items())}}


@dataclass(frozen=True)
class SizeBiasedDistribution(_TabulatedLaw):
    probs: Mapping[int, float]
    mean: float


def _tabulate(law: ClosedFormLaw) -> Dict[int, float]:
    table = {}
    remaining = 1.0
    for k in range(CLOSED_FORM_MAX_K):
        p = law.pmf(k)
        table[k] = p
        remaining -= p
        if remaining < CLOSED_FORM_TAIL and k > 0:
            break
    return table


def validate_critical(probs: Union[Mapping[int, float], ClosedFormLaw]) -> OffspringDistribution:
    """
    Validate a critical offspring law and compute its variance

    Finite maps are checked directly; closed forms supply mean and second
    moment analytically and are tabulated for sampling.

    Args:
        probs: Map k -> p_k, or a ClosedFormLaw

    Returns:
        OffspringDistribution with mean and variance

    Raises:
        NotAProbability: negative mass or total mass not 1
        NotCritical: mean differs from 1
        InfiniteVariance: closed form without a finite second moment
    """
    if isinstance(probs, ClosedFormLaw):
        if probs.second_moment is None or not math.isfinite(probs.second_moment):
            raise InfiniteVariance(f"Offspring law '{probs.name}' has no finite second moment")
        table = _tabulate(probs)
        mean = probs.mean
        second = probs.second_moment
        name = probs.name
    else:
        table = {}
        for k, p in probs.items():
            k = int(k)
            if k < 0:
                raise NotAProbability(f"Offspring count {k} is negative")
            if p < 0:
                raise NotAProbability(f"p_{k} = {p} is negative")
            table[k] = p
        if not table:
            raise NotAProbability("Offspring law is empty")
        mean = math.fsum(k * p for k, p in table.items())
        second = math.fsum(k * k * p for k, p in table.items())
        name = 'finite'

    total = math.fsum(float(p) for p in table.values())
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise NotAProbability(f"Offspring probabilities sum to {total!r}, not 1")
    if abs(mean - 1.0) > MEAN_TOLERANCE:
        raise NotCritical(f"Offspring mean is {mean!r}; a critical law needs mean 1")

    variance = float(second) - float(mean) ** 2
    return OffspringDistribution(probs=table, mean=float(mean), variance=max(variance, 0.0), name=name)


def size_bias(dist: OffspringDistribution) -> SizeBiasedDistribution:
    """Size-biased companion p~_k = k p_k; its mean is sigma^2 + 1"""
    biased = {k: k * p for k, p in dist.probs.items() if k > 0 and p > 0}
    return SizeBiasedDistribution(probs=biased, mean=dist.variance + 1.0)


def geometric_law() -> OffspringDistribution:
    """p_k = 2^-(k+1), mean 1, variance 2"""
    return validate_critical(ClosedFormLaw(pmf=lambda k: 2.0 ** -(k + 1), mean=1.0, second_moment=3.0,
                                           name='geometric'))


def binary_law() -> OffspringDistribution:
    """p_0 = p_2 = 1/2, variance 1"""
    dist = validate_critical({0: 0.5, 2: 0.5})
    return OffspringDistribution(probs=dist.probs, mean=dist.mean, variance=dist.variance, name='binary')


def unit_law() -> OffspringDistribution:
    dist = validate_critical({1: 1.0})
    return OffspringDistribution(probs=dist.probs, mean=dist.mean, variance=dist.variance, name='unit')


BUILTIN_LAWS = {
    'geometric': geometric_law,
    'binary': binary_law,
    'unit': unit_law,
}


def law_from_descriptor(descriptor: Mapping) -> OffspringDistribution:
    """
    Build a law from a config descriptor

    Args:
        descriptor: {'name': 'geometric' | 'binary' | 'unit'} or
            {'name': 'finite', 'probs': {'0': p0, ...}}; probabilities may be
            given as fraction strings such as '1/4'
    """
    name = descriptor.get('name')
    if name in BUILTIN_LAWS:
        return BUILTIN_LAWS[name]()
    if name == 'finite':
        raw = descriptor.get('probs') or {}
        probs = {}
        for k, p in raw.items():
            probs[int(k)] = Fraction(p) if isinstance(p, str) else p
        dist = validate_critical(probs)
        return OffspringDistribution(probs={k: float(p) for k, p in dist.probs.items()},
                                     mean=dist.mean, variance=dist.variance)
    raise NotAProbability(f"Unknown offspring law '{name}'")


@dataclass(frozen=True, eq=False)
class RootedPlanarTree:
    """
    Planar rooted tree stored in level order.

    Vertices are numbered level by level; within a level, children of an
    earlier vertex come first and siblings keep their planar order. Vertex 0
    is the root.
    """
    parents: np.ndarray
    heights: np.ndarray
    spine: Optional[Tuple[int, ...]] = None
    _children: List[List[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        heights = np.asarray(self.heights, dtype=np.int64)
        if parents.ndim != 1 or parents.shape != heights.shape or parents.size == 0:
            raise MalformedTree("parents and heights must be equal-length nonempty arrays")
        if parents[0] != -1 or heights[0] != 0 or np.count_nonzero(parents < 0) != 1:
            raise MalformedTree("Exactly one root at index 0 and height 0 is required")
        rest = np.arange(1, parents.size)
        if np.any(parents[1:] >= rest):
            raise MalformedTree("Vertices must be in level order (parent before child)")
        if np.any(heights[parents[1:]] != heights[1:] - 1):
            raise MalformedTree("Parent height must equal child height - 1")
        if np.any(np.diff(heights) < 0):
            raise MalformedTree("Heights must be nondecreasing in level order")
        same_level = heights[2:] == heights[1:-1]
        if np.any(np.diff(parents[1:])[same_level] < 0):
            raise MalformedTree("Siblings of earlier parents must come first within a level")

        parents.setflags(write=False)
        heights.setflags(write=False)
        object.__setattr__(self, 'parents', parents)
        object.__setattr__(self, 'heights', heights)

        children = [[] for _ in range(parents.size)]
        for v in range(1, parents.size):
            children[parents[v]].append(v)
        object.__setattr__(self, '_children', children)

        if self.spine is not None:
            spine = tuple(int(v) for v in self.spine)
            if not spine or spine[0] != 0 or len(spine) != self.height + 1:
                raise MalformedTree("Spine must run from the root to the top level")
            for a, b in zip(spine, spine[1:]):
                if parents[b] != a:
                    raise MalformedTree(f"Spine step {a} -> {b} is not a tree edge")
            object.__setattr__(self, 'spine', spine)

    @property
    def vertex_count(self) -> int:
        return int(self.parents.size)

    @property
    def height(self) -> int:
        return int(self.heights[-1])

    @property
    def children(self) -> List[List[int]]:
        return self._children

    def level(self, h: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.heights, [h, h + 1])
        return np.arange(lo, hi)

    def layer_sizes(self) -> List[int]:
        return layer_sizes(self)

    def __eq__(self, other):
        if not isinstance(other, RootedPlanarTree):
            return NotImplemented
        return (np.array_equal(self.parents, other.parents)
                and np.array_equal(self.heights, other.heights)
                and self.spine == other.spine)

    __hash__ = None

    @classmethod
    def from_children(cls, children: Sequence[Sequence[int]], root: int = 0,
                      spine: Optional[Sequence[int]] = None) -> 'RootedPlanarTree':
        """
        Build a tree from planar child lists under any labelling

        Args:
            children: children[v] lists v's children in planar order
            root: Label of the root
            spine: Optional spine in the same labelling

        Returns:
            Tree renumbered to level order
        """
        order = [root]
        new_label = {root: 0}
        parents = [-1]
        heights = [0]
        head = 0
        while head < len(order):
            v = order[head]
            for c in children[v]:
                if c in new_label:
                    raise MalformedTree(f"Vertex {c} is reached twice")
                new_label[c] = len(order)
                order.append(c)
                parents.append(new_label[v])
                heights.append(heights[new_label[v]] + 1)
            head += 1
        mapped_spine = None if spine is None else tuple(new_label[v] for v in spine)
        return cls(parents=np.array(parents), heights=np.array(heights), spine=mapped_spine)

    def dfs_order(self) -> List[int]:
        order = []
        stack = [0]
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(reversed(self._children[v]))
        return order

    def to_text(self) -> str:
        """Canonical CDLT-TREE v1 text: DFS preorder, children in planar order"""
        order = self.dfs_order()
        label = {v: i for i, v in enumerate(order)}
        lines = [TREE_HEADER]
        for v in order:
            parent = -1 if v == 0 else label[int(self.parents[v])]
            lines.append(f"{label[v]} {int(self.heights[v])} {parent}")
        if self.spine is not None:
            lines.append('spine ' + ' '.join(str(label[v]) for v in self.spine))
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'RootedPlanarTree':
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines or lines[0].strip() != TREE_HEADER:
            raise MalformedTree(f"Missing '{TREE_HEADER}' header")
        records = []
        spine = None
        for line in lines[1:]:
            parts = line.split()
            if parts[0] == 'spine':
                spine = [int(p) for p in parts[1:]]
                continue
            if len(parts) != 3:
                raise MalformedTree(f"Bad tree record: {line!r}")
            records.append(tuple(int(p) for p in parts))
        n = len(records)
        children = [[] for _ in range(n)]
        heights = {}
        root = None
        for index, height, parent in records:
            if not 0 <= index < n or index in heights:
                raise MalformedTree(f"Bad vertex index {index}")
            heights[index] = height
            if parent == -1:
                if root is not None:
                    raise MalformedTree("More than one root")
                root = index
            else:
                if not 0 <= parent < n:
                    raise MalformedTree(f"Unknown parent {parent}")
                children[parent].append(index)
        if root is None:
            raise MalformedTree("No root record")
        if heights[root] != 0:
            raise MalformedTree("Root must have height 0")
        for index, height, parent in records:
            if parent != -1 and height != heights[parent] + 1:
                raise MalformedTree(f"Vertex {index} has inconsistent height {height}")
        tree = cls.from_children(children, root=root, spine=spine)
        if tree.vertex_count != n:
            raise MalformedTree("Records do not form a single tree")
        return tree


def layer_sizes(tree: RootedPlanarTree) -> List[int]:
    """k_0..k_N, the number of vertices per height"""
    return np.bincount(tree.heights).astype(int).tolist()


def _grow(dist: OffspringDistribution, rng: np.random.Generator, levels: int,
          sb: Optional[SizeBiasedDistribution]) -> RootedPlanarTree:
    parents = [np.array([-1], dtype=np.int64)]
    heights = [np.array([0], dtype=np.int64)]
    level = np.array([0], dtype=np.int64)
    next_index = 1
    spine = [0] if sb is not None else None

    for h in range(levels):
        counts = dist.sample(rng, level.size)
        if sb is not None:
            spine_pos = int(spine[-1] - level[0])
            counts[spine_pos] = sb.sample(rng, 1)[0]
            offset = int(counts[:spine_pos].sum()) + int(rng.integers(counts[spine_pos]))
            spine.append(next_index + offset)
        total = int(counts.sum())
        if total == 0:
            break
        parents.append(np.repeat(level, counts))
        heights.append(np.full(total, h + 1, dtype=np.int64))
        level = np.arange(next_index, next_index + total, dtype=np.int64)
        next_index += total

    return RootedPlanarTree(parents=np.concatenate(parents), heights=np.concatenate(heights),
                            spine=None if spine is None else tuple(spine))


def sample_gw_tree(dist: OffspringDistribution, max_height: int,
                   rng: np.random.Generator) -> RootedPlanarTree:
    """
    Critical GW tree truncated at max_height

    The tree may die out early, in which case its height is below max_height.
    """
    if max_height < 0:
        raise MalformedTree(f"max_height must be >= 0, got {max_height}")
    return _grow(dist, rng, max_height, None)


def sample_sb_tree(dist: OffspringDistribution, height: int,
                   rng: np.random.Generator) -> RootedPlanarTree:
    """
    Size-biased single-spine tree of exactly the given height

    Spine vertices draw from the size-biased law and pass the spine to a
    uniformly chosen child; every other vertex draws from dist, so each
    non-spine child roots an independent GW bush cut at the top level.

    Args:
        dist: Critical offspring law
        height: N >= 1
        rng: Seeded generator

    Returns:
        RootedPlanarTree with its spine recorded
    """
    if height < 1:
        raise MalformedTree(f"Size-biased trees need height >= 1, got {height}")
    return _grow(dist, rng, height, size_bias(dist))


def sample_gw_layer_sizes(dist: OffspringDistribution, max_height: int, rng: np.random.Generator,
                          size: int) -> np.ndarray:
    """Layer counts of `size` independent GW trees, shape (size, max_height + 1)"""
    return _layer_counts(dist, None, max_height, rng, size)


def sample_sb_layer_sizes(dist: OffspringDistribution, height: int, rng: np.random.Generator,
                          size: int) -> np.ndarray:
    """Layer counts of `size` independent size-biased trees, shape (size, height + 1)"""
    return _layer_counts(dist, size_bias(dist), height, rng, size)


def _layer_counts(dist: OffspringDistribution, sb: Optional[SizeBiasedDistribution], height: int,
                  rng: np.random.Generator, size: int) -> np.ndarray:
    out = np.zeros((size, height + 1), dtype=np.int64)
    k = np.ones(size, dtype=np.int64)
    out[:, 0] = k
    for n in range(1, height + 1):
        plain = k - 1 if sb is not None else k
        k = np.asarray(dist.sample_sums(rng, plain), dtype=np.int64)
        if sb is not None:
            k += sb.sample(rng, size)
        out[:, n] = k
    return out


def enumerate_trees(max_height: int, max_children: int = 2) -> Iterator[RootedPlanarTree]:
    """
    Every planar tree of height <= max_height with at most max_children per vertex

    Trees are yielded in a fixed order; height <= 4 with binary branching
    gives 33673 trees.
    """
    shapes = [[()]]
    for _ in range(max_height):
        previous = shapes[-1]
        level = [()]
        for c in range(1, max_children + 1):
            level.extend(product(previous, repeat=c))
        shapes.append(level)

    for shape in shapes[max_height]:
        children = []
        stack = [(shape, 0)]
        children.append([])
        while stack:
            node, label = stack.pop()
            for sub in node:
                children.append([])
                child = len(children) - 1
                children[label].append(child)
                stack.append((sub, child))
        yield RootedPlanarTree.from_children(children)

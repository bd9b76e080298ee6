"""
Causal Triangulations from Planar Trees

Builds the causal Lorentzian triangulation parametrized by a rooted planar
tree, recovers the tree from the triangulation, and answers graph-distance
queries together with the geometric growth bounds used by the verifier.

Features:
- Tree <-> triangulation maps with face enumeration per strip
- BFS distance oracle with a lock-guarded LRU row cache
- Growth constant and J-weighted layer sums with explicit tail bounds
- CDLT-GRAPH v1 text format and layer-statistics tables
"""

import logging
import math
import threading
import warnings
from collections import Counter, OrderedDict
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from django.conf import settings
from scipy import integrate, sparse
from scipy.sparse import csgraph

from .exceptions import ConfigInvalid, EmptyInput, MalformedTree, NotATriangulation, UnknownVertex
from .gw_forest import RootedPlanarTree
from .interaction import check_decay, decay_majorant

logger = logging.getLogger(__name__)

GRAPH_HEADER = 'CDLT-GRAPH v1'
EDGE_TAGS = ('circle', 'tree', 'fan')
SHELL_EXPLICIT_TERMS = 256
# ln of the radius where the shell integrand must already have vanished
SHELL_LOG_RADIUS = 100.0


class Edge(NamedTuple):
    u: int
    v: int
    tag: str


class Triangle(NamedTuple):
    vertices: Tuple[int, int, int]
    kind: str  # 'up' has its horizontal edge below, 'down' above
    strip: int


@dataclass(frozen=True, eq=False)
class Triangulation:
    """
    Rooted causal triangulation of height N.

    layers[l] lists the level-l vertices in cyclic order, cut at the anchor:
    level l+1 starts with the first child of the first level-l vertex that
    has children. Edges form a multiset (degenerate levels repeat pairs).
    """
    layers: Tuple[Tuple[int, ...], ...]
    edges: Tuple[Edge, ...]
    triangles: Tuple[Triangle, ...]
    root_vertex: int = 0
    root_edge: Tuple[int, int] = (0, 0)

    @property
    def height(self) -> int:
        return len(self.layers) - 1

    @property
    def vertex_count(self) -> int:
        return sum(len(layer) for layer in self.layers)

    def layer_sizes(self) -> List[int]:
        return [len(layer) for layer in self.layers]

    @cached_property
    def heights(self) -> np.ndarray:
        heights = np.empty(self.vertex_count, dtype=np.int64)
        for level, layer in enumerate(self.layers):
            heights[list(layer)] = level
        return heights

    def strip_triangle_counts(self) -> List[int]:
        counts = Counter(t.strip for t in self.triangles)
        return [counts.get(level, 0) for level in range(self.height)]

    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric 0/1 adjacency; self-loops of degenerate levels are dropped"""
        pairs = np.array([(e.u, e.v) for e in self.edges if e.u != e.v], dtype=np.int64).reshape(-1, 2)
        n = self.vertex_count
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        graph = sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
        graph.data[:] = 1.0
        return graph

    def to_text(self) -> str:
        lines = [GRAPH_HEADER, f"root {self.root_vertex} {self.root_edge[0]} {self.root_edge[1]}",
                 f"levels {len(self.layers)}"]
        for level, layer in enumerate(self.layers):
            lines.append(f"level {level} " + ' '.join(str(v) for v in layer))
        lines.append(f"edges {len(self.edges)}")
        lines.extend(f"{e.u} {e.v} {e.tag}" for e in self.edges)
        lines.append(f"triangles {len(self.triangles)}")
        lines.extend(f"{a} {b} {c} {t.kind} {t.strip}" for t in self.triangles for a, b, c in [t.vertices])
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'Triangulation':
        lines = iter(line for line in text.splitlines() if line.strip())
        try:
            if next(lines).strip() != GRAPH_HEADER:
                raise NotATriangulation(f"Missing '{GRAPH_HEADER}' header")
            _, root, r0, r1 = next(lines).split()
            level_count = int(next(lines).split()[1])
            layers = []
            for _ in range(level_count):
                parts = next(lines).split()
                layers.append(tuple(int(v) for v in parts[2:]))
            edge_count = int(next(lines).split()[1])
            edges = []
            for _ in range(edge_count):
                u, v, tag = next(lines).split()
                edges.append(Edge(int(u), int(v), tag))
            triangle_count = int(next(lines).split()[1])
            triangles = []
            for _ in range(triangle_count):
                a, b, c, kind, strip = next(lines).split()
                triangles.append(Triangle((int(a), int(b), int(c)), kind, int(strip)))
        except (StopIteration, ValueError, IndexError) as e:
            raise NotATriangulation(f"Truncated or malformed CDLT-GRAPH text: {e}") from e
        return cls(layers=tuple(layers), edges=tuple(edges), triangles=tuple(triangles),
                   root_vertex=int(root), root_edge=(int(r0), int(r1)))


def _strip_arcs(parent_positions: np.ndarray, lower_size: int) -> List[List[int]]:
    """
    Down-arc positions for each upper vertex of one strip.

    Upper vertex i fans from its parent to the parent of its cyclic
    successor; the last vertex wraps around, and a single-parent level
    gives it the whole circle.
    """
    arcs = []
    upper_size = parent_positions.size
    for i in range(upper_size):
        start = int(parent_positions[i])
        if i + 1 < upper_size:
            length = int(parent_positions[i + 1]) - start
        else:
            length = lower_size - (start - int(parent_positions[0]))
        arcs.append([(start + t) % lower_size for t in range(length + 1)])
    return arcs


def tree_to_triangulation(tree: RootedPlanarTree) -> Triangulation:
    """
    Triangulation parametrized by a planar tree

    Vertex ids are the tree's level-order indices. Each vertex keeps its
    parent as leftmost downward (tree) edge and fans rightward up to the
    parent of its cyclic successor.

    Raises:
        MalformedTree: more than one vertex at height 0
    """
    sizes = tree.layer_sizes()
    if sizes[0] != 1:
        raise MalformedTree(f"A rooted triangulation needs k_0 = 1, got {sizes[0]}")

    layers = tuple(tuple(int(v) for v in tree.level(h)) for h in range(len(sizes)))
    edges: List[Edge] = []
    triangles: List[Triangle] = []

    for layer in layers:
        k = len(layer)
        for i in range(k):
            edges.append(Edge(layer[i], layer[(i + 1) % k], 'circle'))

    for level in range(len(layers) - 1):
        lower, upper = layers[level], layers[level + 1]
        positions = np.array([tree.parents[u] for u in upper], dtype=np.int64) - lower[0]
        arcs = _strip_arcs(positions, len(lower))
        for i, (u, arc) in enumerate(zip(upper, arcs)):
            edges.append(Edge(u, lower[arc[0]], 'tree'))
            edges.extend(Edge(u, lower[a], 'fan') for a in arc[1:])
            for a, b in zip(arc, arc[1:]):
                triangles.append(Triangle((lower[a], lower[b], u), 'up', level))
            previous = upper[i - 1]
            triangles.append(Triangle((previous, u, lower[arc[0]]), 'down', level))

    root = layers[0][0]
    return Triangulation(layers=layers, edges=tuple(edges), triangles=tuple(triangles),
                         root_vertex=root, root_edge=(root, root))


def triangulation_to_tree(tri: Triangulation) -> RootedPlanarTree:
    """
    Recover the planar tree by keeping each vertex's leftmost downward edge

    The leftmost downward edge of u ends at the apex of the down-triangle
    sitting on the upper edge from u's cyclic predecessor to u.

    Raises:
        NotATriangulation: missing faces, broken arc contiguity or bad anchoring
    """
    apex = {}
    for t in tri.triangles:
        if t.kind == 'down':
            a, b, c = t.vertices
            apex[(t.strip, a, b)] = c

    heights = tri.heights
    down_neighbours: Dict[int, List[int]] = {}
    for e in tri.edges:
        if e.u == e.v:
            continue
        hu, hv = heights[e.u], heights[e.v]
        if hu == hv + 1:
            down_neighbours.setdefault(e.u, []).append(e.v)
        elif hv == hu + 1:
            down_neighbours.setdefault(e.v, []).append(e.u)
        elif hu != hv:
            raise NotATriangulation(f"Edge {e.u}-{e.v} skips a level")

    children: Dict[int, List[int]] = {v: [] for layer in tri.layers for v in layer}
    for level in range(tri.height):
        lower, upper = tri.layers[level], tri.layers[level + 1]
        position = {v: i for i, v in enumerate(lower)}
        parents = []
        for i, u in enumerate(upper):
            key = (level, upper[i - 1], u)
            if key not in apex:
                raise NotATriangulation(f"No down-triangle below the upper edge {upper[i - 1]}-{u}")
            parents.append(position[apex[key]])
        parents = np.array(parents, dtype=np.int64)
        if np.any(np.diff(parents) < 0):
            raise NotATriangulation(f"Level {level + 1} is not anchored at its first child")

        for u, arc in zip(upper, _strip_arcs(parents, len(lower))):
            observed = sorted(position[w] for w in down_neighbours.get(u, []))
            if not observed:
                raise NotATriangulation(f"Vertex {u} has no downward edge")
            if observed != sorted(arc):
                raise NotATriangulation(f"Downward neighbours of {u} do not form the expected arc")
        for u, p in zip(upper, parents):
            children[lower[p]].append(u)

    labels = sorted(children)
    index = {v: i for i, v in enumerate(labels)}
    child_lists = [[index[c] for c in children[v]] for v in labels]
    return RootedPlanarTree.from_children(child_lists, root=index[tri.root_vertex])


def chain_triangulation(height: int) -> Triangulation:
    """k_l = 1 on every level"""
    tree = RootedPlanarTree(parents=np.arange(-1, height), heights=np.arange(height + 1))
    return tree_to_triangulation(tree)


class DistanceOracle:
    """
    Graph distances on a triangulation.

    Features:
    - BFS rows computed with scipy's unweighted shortest paths
    - Bounded LRU cache of rows, guarded by a lock for concurrent readers
    """

    def __init__(self, triangulation: Triangulation, cache_size: Optional[int] = None):
        self.triangulation = triangulation
        self.cache_size = cache_size or getattr(settings, 'LORENTZFK_BFS_CACHE_SIZE', 4096)
        self._graph = triangulation.adjacency()
        self._rows: 'OrderedDict[int, np.ndarray]' = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def vertex_count(self) -> int:
        return self.triangulation.vertex_count

    @property
    def root(self) -> int:
        return self.triangulation.root_vertex

    def _check(self, vertex: int) -> int:
        vertex = int(vertex)
        if not 0 <= vertex < self.vertex_count:
            raise UnknownVertex(f"Vertex {vertex} is not in the triangulation")
        return vertex

    def distances_from(self, source: int) -> np.ndarray:
        """Read-only BFS row of distances from source"""
        source = self._check(source)
        with self._lock:
            row = self._rows.get(source)
            if row is not None:
                self._rows.move_to_end(source)
                self.hits += 1
                return row
        dist = csgraph.shortest_path(self._graph, method='D', unweighted=True, indices=source)
        if not np.all(np.isfinite(dist)):
            raise NotATriangulation("Triangulation graph is not connected")
        row = dist.astype(np.int64)
        row.setflags(write=False)
        with self._lock:
            self.misses += 1
            self._rows[source] = row
            while len(self._rows) > self.cache_size:
                self._rows.popitem(last=False)
        return row

    def distance(self, i: int, j: int) -> int:
        j = self._check(j)
        return int(self.distances_from(i)[j])

    def distance_matrix(self, rows: Optional[Sequence[int]] = None,
                        cols: Optional[Sequence[int]] = None) -> np.ndarray:
        rows = range(self.vertex_count) if rows is None else rows
        matrix = np.stack([self.distances_from(r) for r in rows]) if len(rows) else \
            np.zeros((0, self.vertex_count), dtype=np.int64)
        if cols is not None:
            matrix = matrix[:, [self._check(c) for c in cols]]
        return matrix


def graph_distance(oracle: DistanceOracle, i: int, j: int) -> int:
    """BFS distance between two vertices; self-loops are ignored"""
    return oracle.distance(i, j)


def growth_constant(layers: Sequence[int], epsilon: float) -> float:
    """
    C = max over i >= 2 of k_i / (i (ln i)^(1/2 + epsilon))

    Returns 0.0 when there is no level at height 2 or above.
    """
    k = np.asarray(layers, dtype=float)
    if k.size == 0:
        raise EmptyInput("growth_constant needs at least one layer")
    if not 0.0 < epsilon < 1.0:
        raise ConfigInvalid(f"epsilon must lie in (0, 1), got {epsilon}")
    if k.size <= 2:
        return 0.0
    i = np.arange(2, k.size, dtype=float)
    return float(np.max(k[2:] / (i * np.log(i) ** (0.5 + epsilon))))


@dataclass(frozen=True)
class TruncatedSum:
    value: float  # the explicit partial sum
    tail_bound: float  # bound on everything beyond the truncation
    truncation: int

    @property
    def upper(self) -> float:
        return self.value + self.tail_bound


def j_layer_sum(layers: Sequence[int], J: Callable, epsilon: float = 0.25,
                layer_majorant: Optional[Callable[[float], float]] = None) -> TruncatedSum:
    """
    Sum of k_i J(i) over i >= 1 with a bound on the unseen tail

    Beyond the last observed level, k_i is majorized by layer_majorant, or by
    C i (ln i)^(1/2 + epsilon) with C from growth_constant, and J by
    (1/(x ln x))^3; both products decrease, so the tail sum is bounded by
    the integral from the truncation level.

    Args:
        layers: k_0..k_N with N >= 1
        J: Vectorized decay function
        epsilon: Growth exponent slack
        layer_majorant: Optional bound on k_x for x > N

    Returns:
        TruncatedSum

    Raises:
        InadmissibleJ: J is unbounded, increasing or above the majorant
    """
    check_decay(J)
    k = np.asarray(layers, dtype=float)
    if k.size < 2:
        raise EmptyInput("j_layer_sum needs layers k_0 and k_1 at least")
    n = k.size - 1
    i = np.arange(1, k.size, dtype=float)
    value = float(np.sum(k[1:] * np.asarray(J(i), dtype=float)))

    if layer_majorant is None:
        c = growth_constant(layers, epsilon)

        def layer_majorant(x):
            return c * x * math.log(x) ** (0.5 + epsilon)

    def tail_term(x):
        return layer_majorant(x) * float(decay_majorant(x))

    start = max(n, 2)
    tail = sum(tail_term(float(m)) for m in range(n + 1, start + 1))
    integral, _ = integrate.quad(tail_term, start, np.inf, limit=200)
    return TruncatedSum(value=value, tail_bound=float(tail + integral), truncation=n)


@dataclass(frozen=True)
class MomentResult:
    value: float  # max_j of the sum over d <= truncate
    tail: float  # max_j of the remainder beyond truncate in the finite graph
    truncate: Optional[int]
    volume_tail: float = 0.0  # majorant of the remainder beyond the radius in infinite volume

    @property
    def upper(self) -> float:
        return self.value + max(self.tail, self.volume_tail)


def _shell_tail(c: float, J: Callable, radius: int, epsilon: float) -> float:
    """
    Bound on the sum over r > radius of s(r) J(r) r^2 with s(r) = c r (ln r)^(1/2 + epsilon)

    Terms up to SHELL_EXPLICIT_TERMS past the radius are summed; the rest is
    integrated in u = ln x up to 2 SHELL_LOG_RADIUS. Returns inf when the
    integrand has not vanished by SHELL_LOG_RADIUS.
    """
    if c <= 0.0:
        return 0.0
    power = 0.5 + epsilon

    def term(x):
        j = float(np.asarray(J(np.asarray([x], dtype=float)), dtype=float)[0])
        if j == 0.0:
            return 0.0
        return c * x ** 3 * math.log(x) ** power * j

    start = max(radius, 1) + 1
    stop = start + SHELL_EXPLICIT_TERMS
    explicit = sum(term(float(r)) for r in range(start, stop))

    def in_log(u):
        return term(math.exp(u)) * math.exp(u)

    if not in_log(SHELL_LOG_RADIUS) < 1.0:
        return math.inf
    with warnings.catch_warnings():
        warnings.simplefilter('error', integrate.IntegrationWarning)
        try:
            integral, _ = integrate.quad(in_log, math.log(stop - 1), 2 * SHELL_LOG_RADIUS, limit=200)
        except integrate.IntegrationWarning:
            return math.inf
    return float(explicit + integral)


def interaction_moment(oracle: DistanceOracle, J: Callable, truncate: Optional[int] = None,
                       epsilon: float = 0.25) -> MomentResult:
    """
    max over j of the sum over j' of J(d(j,j')) d(j,j')^2

    Beyond the radius (truncate, or the graph diameter) the number of vertices
    at distance r is majorized by C r (ln r)^(1/2 + epsilon) with C from the
    triangulation's growth constant, which bounds the infinite-volume remainder.

    Args:
        oracle: Distances on a finite triangulation
        J: Vectorized decay function
        truncate: Radius of the explicit sum; None sums everything
        epsilon: Growth exponent slack

    Returns:
        MomentResult with the finite and infinite-volume remainders reported separately
    """
    check_decay(J)
    dist = oracle.distance_matrix().astype(float)
    weights = np.zeros_like(dist)
    off = dist > 0
    weights[off] = np.asarray(J(dist[off]), dtype=float) * dist[off] ** 2
    c = growth_constant(oracle.triangulation.layer_sizes(), epsilon)
    if truncate is None:
        radius = int(dist.max(initial=0.0))
        return MomentResult(value=float(weights.sum(axis=1).max(initial=0.0)), tail=0.0, truncate=None,
                            volume_tail=_shell_tail(c, J, radius, epsilon))
    inside = dist <= truncate
    value = float(np.where(inside, weights, 0.0).sum(axis=1).max(initial=0.0))
    tail = float(np.where(inside, 0.0, weights).sum(axis=1).max(initial=0.0))
    return MomentResult(value=value, tail=tail, truncate=int(truncate),
                        volume_tail=_shell_tail(c, J, int(truncate), epsilon))


def layer_statistics_frame(samples: Iterable[Sequence[int]]) -> pd.DataFrame:
    """Long-format table with columns (sample_id, level, k_level)"""
    rows = [(sample_id, level, int(k))
            for sample_id, layers in enumerate(samples)
            for level, k in enumerate(layers)]
    return pd.DataFrame(rows, columns=['sample_id', 'level', 'k_level'])

"""
Tests for the tree <-> triangulation maps and the distance oracle
"""

import math
import unittest

import numpy as np

from core.cdlt_graph import (DistanceOracle, Triangulation, chain_triangulation, growth_constant,
                             interaction_moment, j_layer_sum, layer_statistics_frame, triangulation_to_tree,
                             tree_to_triangulation)
from core.exceptions import ConfigInvalid, EmptyInput, InadmissibleJ, NotATriangulation, UnknownVertex
from core.gw_forest import (RootedPlanarTree, enumerate_trees, geometric_law, sample_sb_layer_sizes,
                            sample_sb_tree)
from core.interaction import DecayFunction
from core.streams import derive_stream


class TestTreeTriangulationMaps(unittest.TestCase):
    """Test the bijection between planar trees and triangulations"""

    def test_roundtrip_over_all_small_trees(self):
        """Test the roundtrip and strip counts on every tree of height <= 4 with support {0, 1, 2}"""
        count = 0
        for tree in enumerate_trees(4):
            tri = tree_to_triangulation(tree)
            self.assertEqual(triangulation_to_tree(tri), tree)
            k = tree.layer_sizes()
            self.assertEqual(tri.strip_triangle_counts(), [k[l] + k[l + 1] for l in range(len(k) - 1)])
            count += 1
        self.assertEqual(count, 33673)

    def test_roundtrip_sampled_trees(self):
        """Test the roundtrip on size-biased geometric trees"""
        rng = derive_stream(7, 'test')
        for _ in range(10):
            tree = sample_sb_tree(geometric_law(), 8, rng)
            tri = tree_to_triangulation(tree)
            recovered = triangulation_to_tree(tri)
            self.assertEqual(recovered.layer_sizes(), tree.layer_sizes())
            self.assertTrue(np.array_equal(recovered.parents, tree.parents))

    def test_strip_triangle_counts(self):
        """Test that strip l holds k_l + k_(l+1) triangles"""
        tree = sample_sb_tree(geometric_law(), 6, derive_stream(8, 'test'))
        tri = tree_to_triangulation(tree)
        k = tri.layer_sizes()
        expected = [k[l] + k[l + 1] for l in range(tri.height)]
        self.assertEqual(tri.strip_triangle_counts(), expected)

    def test_vertex_ids_follow_level_order(self):
        """Test that triangulation layers list the tree's level-order ids"""
        tree = RootedPlanarTree.from_children([[1, 2], [3], [4, 5], [], [], []])
        tri = tree_to_triangulation(tree)
        self.assertEqual(tri.layers, ((0,), (1, 2), (3, 4, 5)))

    def test_text_roundtrip(self):
        """Test that CDLT-GRAPH text restores layers, edges and faces"""
        tree = sample_sb_tree(geometric_law(), 5, derive_stream(9, 'test'))
        tri = tree_to_triangulation(tree)
        restored = Triangulation.from_text(tri.to_text())
        self.assertEqual(restored.layers, tri.layers)
        self.assertEqual(restored.edges, tri.edges)
        self.assertEqual(restored.triangles, tri.triangles)

    def test_truncated_text_rejected(self):
        """Test that truncated graph text raises NotATriangulation"""
        text = chain_triangulation(3).to_text()
        with self.assertRaises(NotATriangulation):
            Triangulation.from_text(text[:len(text) // 2])

    def test_missing_face_rejected(self):
        """Test that dropping a down-triangle breaks the inverse map"""
        tri = tree_to_triangulation(RootedPlanarTree.from_children([[1, 2], [], []]))
        faces = tuple(t for t in tri.triangles if t.kind != 'down')
        broken = Triangulation(layers=tri.layers, edges=tri.edges, triangles=faces,
                               root_vertex=tri.root_vertex, root_edge=tri.root_edge)
        with self.assertRaises(NotATriangulation):
            triangulation_to_tree(broken)


class TestDistanceOracle(unittest.TestCase):
    """Test BFS distances"""

    def test_chain_distances(self):
        """Test that d(i, j) = |i - j| on the chain with k_l = 1"""
        oracle = DistanceOracle(chain_triangulation(10))
        for i in (0, 3, 10):
            for j in (0, 5, 9):
                self.assertEqual(oracle.distance(i, j), abs(i - j))

    def test_level_difference_is_lower_bound(self):
        """Test that distances dominate the height difference"""
        tri = tree_to_triangulation(sample_sb_tree(geometric_law(), 6, derive_stream(10, 'test')))
        oracle = DistanceOracle(tri)
        dist = oracle.distance_matrix()
        heights = tri.heights
        self.assertTrue(np.all(dist >= np.abs(heights[:, None] - heights[None, :])))
        self.assertTrue(np.array_equal(dist, dist.T))

    def test_same_level_neighbours(self):
        """Test that consecutive vertices on a level are adjacent"""
        tri = tree_to_triangulation(RootedPlanarTree.from_children([[1, 2, 3], [], [], []]))
        oracle = DistanceOracle(tri)
        self.assertEqual(oracle.distance(1, 2), 1)
        self.assertEqual(oracle.distance(1, 3), 1)

    def test_rows_are_cached(self):
        """Test that repeated queries hit the row cache"""
        oracle = DistanceOracle(chain_triangulation(4), cache_size=2)
        oracle.distances_from(0)
        oracle.distances_from(0)
        self.assertEqual((oracle.hits, oracle.misses), (1, 1))

    def test_unknown_vertex(self):
        """Test that out-of-range vertices raise UnknownVertex"""
        oracle = DistanceOracle(chain_triangulation(2))
        with self.assertRaises(UnknownVertex):
            oracle.distance(0, 3)


class TestGrowthAndSums(unittest.TestCase):
    """Test growth constants, J-weighted sums and moments"""

    def test_growth_constant_of_chain(self):
        """Test C = max 1 / (i (ln i)^0.75) over i >= 2 for constant layers"""
        c = growth_constant([1] * 6, 0.25)
        self.assertAlmostEqual(c, 1.0 / (2 * math.log(2) ** 0.75))

    def test_growth_constant_short_input(self):
        """Test that fewer than three layers give C = 0"""
        self.assertEqual(growth_constant([1, 3], 0.25), 0.0)

    def test_growth_constant_validation(self):
        """Test the empty and epsilon checks"""
        with self.assertRaises(EmptyInput):
            growth_constant([], 0.25)
        with self.assertRaises(ConfigInvalid):
            growth_constant([1, 1, 1], 1.5)

    def test_nearest_neighbour_sum(self):
        """Test that nearest-neighbour J picks out k_1 with no tail"""
        total = j_layer_sum([1, 4, 9, 16], DecayFunction.nearest(1.0))
        self.assertEqual(total.value, 4.0)
        self.assertGreaterEqual(total.tail_bound, 0.0)
        self.assertEqual(total.truncation, 3)

    def test_tail_bound_covers_longer_sum(self):
        """Test that the bound from a truncated chain covers the full chain sum"""
        J = DecayFunction.cubic_log()
        short = j_layer_sum([1] * 11, J)
        full = j_layer_sum([1] * 201, J)
        self.assertLessEqual(full.value, short.upper + 1e-12)

    def test_inadmissible_decay(self):
        """Test that an increasing J is refused"""
        with self.assertRaises(InadmissibleJ):
            j_layer_sum([1, 1, 1], lambda r: np.asarray(r, dtype=float))

    def test_moment_on_chain(self):
        """Test the nearest-neighbour moment on the chain is 2 at interior vertices"""
        oracle = DistanceOracle(chain_triangulation(5))
        moment = interaction_moment(oracle, DecayFunction.nearest(1.0))
        self.assertEqual(moment.value, 2.0)
        self.assertEqual(moment.tail, 0.0)
        self.assertEqual(moment.volume_tail, 0.0)

    def test_volume_tail_covers_infinite_chain(self):
        """Test that the shell majorant covers the two-sided infinite chain beyond the radius"""
        J = lambda r: np.exp(-3.0 * np.asarray(r, dtype=float))  # noqa: E731
        oracle = DistanceOracle(chain_triangulation(12))
        moment = interaction_moment(oracle, J, truncate=2)
        r = np.arange(3, 60, dtype=float)
        remainder = float(np.sum(2.0 * np.exp(-3.0 * r) * r ** 2))
        self.assertTrue(math.isfinite(moment.volume_tail))
        self.assertGreaterEqual(moment.volume_tail, remainder)
        self.assertGreaterEqual(moment.upper, moment.value + remainder)

    def test_volume_tail_diverges_for_borderline_decay(self):
        """Test that J at the admissible majorant gives an infinite second-moment tail"""
        oracle = DistanceOracle(chain_triangulation(6))
        moment = interaction_moment(oracle, DecayFunction.cubic_log(), truncate=3)
        self.assertTrue(math.isfinite(moment.value))
        self.assertEqual(moment.volume_tail, math.inf)

    def test_growth_percentile_stable_in_height(self):
        """Test that the 99th percentile of C moves by less than 20% from height 1000 to 2000"""
        layers = sample_sb_layer_sizes(geometric_law(), 2000, derive_stream(31, 'test'), 1000)
        short = np.percentile([growth_constant(row[:1001], 0.25) for row in layers], 99)
        full = np.percentile([growth_constant(row, 0.25) for row in layers], 99)
        self.assertTrue(np.isfinite(short) and np.isfinite(full))
        self.assertLess(abs(full - short) / short, 0.2)

    def test_layer_statistics_frame(self):
        """Test the long-format layer table"""
        frame = layer_statistics_frame([[1, 2], [1, 1, 3]])
        self.assertEqual(list(frame.columns), ['sample_id', 'level', 'k_level'])
        self.assertEqual(len(frame), 5)
        self.assertEqual(frame['k_level'].sum(), 8)


if __name__ == '__main__':
    unittest.main()

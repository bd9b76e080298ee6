"""
Unit tests for critical Galton-Watson laws and planar tree samplers
Tests law validation, size biasing, samplers and the tree text format
"""

import math
import unittest

import numpy as np

from core.exceptions import ConfigInvalid, MalformedTree, NotAProbability, NotCritical
from core.gw_forest import (RootedPlanarTree, binary_law, enumerate_trees, geometric_law, law_from_descriptor,
                            sample_gw_layer_sizes, sample_gw_tree, sample_sb_layer_sizes, sample_sb_tree,
                            size_bias, unit_law, validate_critical)
from core.streams import derive_stream


class TestOffspringLaws(unittest.TestCase):
    """Test validation of critical offspring laws"""

    def test_unit_law_has_zero_variance(self):
        """Test that the deterministic unit law has mean 1 and variance 0"""
        dist = validate_critical({1: 1.0})
        self.assertEqual(dist.mean, 1.0)
        self.assertEqual(dist.variance, 0.0)

    def test_geometric_law_moments(self):
        """Test that p_k = 2^-(k+1) has mean 1 and variance 2"""
        dist = geometric_law()
        self.assertAlmostEqual(dist.mean, 1.0, places=12)
        self.assertAlmostEqual(dist.variance, 2.0, places=12)
        self.assertAlmostEqual(sum(dist.probs.values()), 1.0, places=12)

    def test_subcritical_law_rejected(self):
        """Test that a law with mean 0.7 raises NotCritical"""
        with self.assertRaises(NotCritical):
            validate_critical({0: 0.3, 1: 0.7})

    def test_negative_or_unnormalized_mass_rejected(self):
        """Test that negative or non-unit mass raises NotAProbability"""
        with self.assertRaises(NotAProbability):
            validate_critical({0: -0.5, 2: 0.75, 1: 0.75})
        with self.assertRaises(NotAProbability):
            validate_critical({1: 0.9})

    def test_validation_errors_are_value_errors(self):
        """Test that validation failures can be caught as ValueError"""
        with self.assertRaises(ValueError):
            validate_critical({0: 0.3, 1: 0.7})
        self.assertTrue(issubclass(NotCritical, ConfigInvalid))

    def test_descriptor_with_fraction_strings(self):
        """Test that finite descriptors accept fraction strings"""
        dist = law_from_descriptor({'name': 'finite', 'probs': {'0': '1/4', '1': '1/2', '2': '1/4'}})
        self.assertAlmostEqual(dist.variance, 0.5)

    def test_unknown_descriptor_rejected(self):
        """Test that an unknown law name is rejected"""
        with self.assertRaises(NotAProbability):
            law_from_descriptor({'name': 'poisson'})


class TestSizeBias(unittest.TestCase):
    """Test the size-biased companion law"""

    def test_unit_law_is_fixed(self):
        """Test that size biasing the unit law gives the unit law"""
        biased = size_bias(unit_law())
        self.assertEqual(dict(biased.probs), {1: 1.0})

    def test_binary_law_always_branches(self):
        """Test that the binary law biases to p~_2 = 1"""
        biased = size_bias(binary_law())
        self.assertEqual(dict(biased.probs), {2: 1.0})

    def test_geometric_mean_is_three(self):
        """Test that the biased geometric law has mean sigma^2 + 1 = 3"""
        biased = size_bias(geometric_law())
        self.assertAlmostEqual(biased.mean, 3.0)
        tabulated = sum(k * p for k, p in biased.probs.items())
        self.assertAlmostEqual(tabulated, 3.0, places=9)


class TestTreeSamplers(unittest.TestCase):
    """Test GW and size-biased tree samplers"""

    def test_unit_law_gives_chain(self):
        """Test that the unit law grows a chain of max_height + 1 vertices"""
        tree = sample_gw_tree(unit_law(), 5, derive_stream(1, 'test'))
        self.assertEqual(tree.vertex_count, 6)
        self.assertEqual(tree.layer_sizes(), [1] * 6)

    def test_sb_unit_law_gives_spine_chain(self):
        """Test that a size-biased tree of the unit law is its own spine"""
        tree = sample_sb_tree(unit_law(), 7, derive_stream(1, 'test'))
        self.assertEqual(tree.layer_sizes(), [1] * 8)
        self.assertEqual(tree.spine, tuple(range(8)))

    def test_sb_tree_reaches_exact_height(self):
        """Test that size-biased trees have exactly the requested height"""
        rng = derive_stream(3, 'test')
        for _ in range(20):
            tree = sample_sb_tree(geometric_law(), 6, rng)
            self.assertEqual(tree.height, 6)
            self.assertEqual(sum(tree.layer_sizes()), tree.vertex_count)

    def test_binary_spine_branches_twice(self):
        """Test that every binary spine vertex has exactly two children"""
        tree = sample_sb_tree(binary_law(), 8, derive_stream(5, 'test'))
        for v in tree.spine[:-1]:
            self.assertEqual(len(tree.children[v]), 2)

    def test_extinction_matches_generating_function(self):
        """Test that P(extinct by height 3) matches q_(h+1) = 0.5 + 0.5 q_h^2"""
        q = 0.0
        for _ in range(3):
            q = 0.5 + 0.5 * q * q
        self.assertAlmostEqual(q, 0.6953125)
        layers = sample_gw_layer_sizes(binary_law(), 3, derive_stream(11, 'test'), 100000)
        empirical = float(np.mean(layers[:, 3] == 0))
        sigma = math.sqrt(q * (1 - q) / layers.shape[0])
        self.assertLess(abs(empirical - q), 4 * sigma)

    def test_gw_mean_offspring_is_one(self):
        """Test that GW layers keep mean size one at every level"""
        layers = sample_gw_layer_sizes(geometric_law(), 5, derive_stream(12, 'test'), 50000)
        for n in range(1, 6):
            mean = layers[:, n].mean()
            error = layers[:, n].std(ddof=1) / math.sqrt(layers.shape[0])
            self.assertLess(abs(mean - 1.0), 4 * error)

    def test_sb_layer_recursion(self):
        """Test that E(k_n | k_(n-1)) - k_(n-1) equals sigma^2 for size-biased trees"""
        for dist in (geometric_law(), binary_law()):
            layers = sample_sb_layer_sizes(dist, 50, derive_stream(13, 'test', int(dist.variance)), 100000)
            for n in (5, 20, 50):
                increments = (layers[:, n] - layers[:, n - 1]).astype(float)
                error = increments.std(ddof=1) / math.sqrt(increments.size)
                self.assertLess(abs(increments.mean() - dist.variance), 3 * error)

    def test_sb_layer_recursion_finite_law(self):
        """Test the recursion for a tabulated law drawn through multinomial sums"""
        dist = validate_critical({0: 0.25, 1: 0.5, 2: 0.25})
        layers = sample_sb_layer_sizes(dist, 20, derive_stream(14, 'test'), 50000)
        increments = (layers[:, 20] - layers[:, 19]).astype(float)
        error = increments.std(ddof=1) / math.sqrt(increments.size)
        self.assertLess(abs(increments.mean() - 0.5), 4 * error)

    def test_sample_sums_of_builtin_laws(self):
        """Test that closed-form offspring sums have mean n and variance n sigma^2"""
        rng = derive_stream(15, 'test')
        counts = np.full(200000, 7)
        for dist in (geometric_law(), binary_law(), unit_law()):
            sums = dist.sample_sums(rng, counts).astype(float)
            self.assertLess(abs(sums.mean() - 7.0), 5 * math.sqrt(7 * dist.variance / counts.size) + 1e-12)
            self.assertAlmostEqual(sums.var() / (7 * max(dist.variance, 1.0)), 1.0 if dist.variance else 0.0,
                                   delta=0.02)
        self.assertEqual(geometric_law().sample_sums(rng, [0, 0]).tolist(), [0, 0])

    def test_same_stream_same_tree(self):
        """Test that samplers are deterministic for a given stream"""
        a = sample_sb_tree(geometric_law(), 10, derive_stream(99, 'sample'))
        b = sample_sb_tree(geometric_law(), 10, derive_stream(99, 'sample'))
        self.assertEqual(a, b)


class TestRootedPlanarTree(unittest.TestCase):
    """Test tree construction, layers and the text format"""

    def test_layer_sizes(self):
        """Test layer counts of a chain and of a star"""
        chain = RootedPlanarTree.from_children([[1], [2], [3], []])
        self.assertEqual(chain.layer_sizes(), [1, 1, 1, 1])
        star = RootedPlanarTree.from_children([[1, 2, 3], [], [], []])
        self.assertEqual(star.layer_sizes(), [1, 3])

    def test_level_order_enforced(self):
        """Test that parents after children are rejected"""
        with self.assertRaises(MalformedTree):
            RootedPlanarTree(parents=np.array([-1, 2, 0]), heights=np.array([0, 2, 1]))

    def test_text_roundtrip_with_spine(self):
        """Test that the CDLT-TREE text restores a sampled tree and its spine"""
        tree = sample_sb_tree(geometric_law(), 6, derive_stream(21, 'test'))
        self.assertEqual(RootedPlanarTree.from_text(tree.to_text()), tree)

    def test_text_requires_header(self):
        """Test that text without the header is rejected"""
        with self.assertRaises(MalformedTree):
            RootedPlanarTree.from_text("0 0 -1\n")

    def test_enumeration_counts(self):
        """Test the number of binary planar trees of height at most h"""
        counts = [sum(1 for _ in enumerate_trees(h)) for h in range(4)]
        self.assertEqual(counts, [1, 3, 13, 183])

    def test_enumerated_trees_are_distinct(self):
        """Test that enumeration yields each tree once"""
        texts = {tree.to_text() for tree in enumerate_trees(3)}
        self.assertEqual(len(texts), 183)


if __name__ == '__main__':
    unittest.main()

"""
Tests for potentials, certified bounds and path energies
"""

import math
import unittest

import numpy as np

from core.cdlt_graph import DistanceOracle, chain_triangulation
from core.configurations import ClassicalBoundary, LoopConfiguration, PathConfiguration
from core.exceptions import ConfigInvalid, InadmissibleJ, MismatchedPaths, OverlappingSupports, ZeroDistance
from core.interaction import (ConstantPotential, CosineDifferenceKernel, CosinePotential, DecayFunction,
                              ZeroPairPotential, ZeroPotential, boundary_energy, build_spec, check_invariance,
                              conditional_energy, config_energy, coupling_sum, energy_bound, pair_energy,
                              self_energy, spec_from_descriptor)
from core.streams import derive_stream
from core.torus_kernel import DiscretizedPath, GroupElement, sample_loop


def random_loops(vertices, beta, L, seed):
    rng = derive_stream(seed, 'loops')
    paths = [sample_loop(rng.random(1), beta, L, rng).slices for _ in vertices]
    return LoopConfiguration(tuple(vertices), np.stack(paths), beta)


class TestSpecs(unittest.TestCase):
    """Test spec assembly and invariance checks"""

    def test_closed_form_bounds(self):
        """Test that built-in potentials report their closed-form bounds"""
        spec = build_spec(CosinePotential(0.5), CosineDifferenceKernel(0.1), DecayFunction.nearest())
        self.assertAlmostEqual(spec.u_bar, 0.5 * 2 * math.pi)
        self.assertAlmostEqual(spec.v_bar, 0.1 * 4 * math.pi ** 2)

    def test_explicit_bounds_win(self):
        """Test that constants in the descriptor override certified bounds"""
        spec = spec_from_descriptor({'potential_u': 'zero', 'potential_v': 'zero', 'decay_j': 'zero',
                                     'constants': {'u_bar': 2.0, 'v_bar': 3.0}})
        self.assertEqual((spec.u_bar, spec.v_bar), (2.0, 3.0))

    def test_unknown_builtin_names_field(self):
        """Test that unknown potentials are reported by field path"""
        with self.assertRaisesRegex(ConfigInvalid, 'spec.potential_u'):
            spec_from_descriptor({'potential_u': 'quartic', 'potential_v': 'zero', 'decay_j': 'zero'})

    def test_bad_decay_rejected(self):
        """Test that a slowly decaying J is inadmissible"""
        with self.assertRaises(InadmissibleJ):
            build_spec(ZeroPotential(), ZeroPairPotential(), lambda r: 1.0 / (1.0 + np.asarray(r)))

    def test_cosine_site_potential_breaks_symmetry(self):
        """Test that a shift of 0.3 moves cos(2 pi x) by up to 2 sin(0.3 pi)"""
        spec = build_spec(CosinePotential(1.0), ZeroPairPotential(), DecayFunction.zero())
        report = check_invariance(spec, GroupElement.translation(0.3), 2000, 1e-9, derive_stream(1, 'inv'))
        self.assertFalse(report.passed)
        self.assertAlmostEqual(report.max_deviation, 2 * math.sin(0.3 * math.pi), delta=1e-2)

    def test_difference_kernel_is_invariant(self):
        """Test that V(x - x') with constant U passes the check"""
        spec = build_spec(ConstantPotential(1.0), CosineDifferenceKernel(1.0), DecayFunction.nearest())
        report = check_invariance(spec, GroupElement.translation(0.37), 200, 1e-9, derive_stream(2, 'inv'))
        self.assertTrue(report.passed)


class TestEnergies(unittest.TestCase):
    """Test self, pair, boundary and conditional energies"""

    def setUp(self):
        self.geometry = DistanceOracle(chain_triangulation(5))
        self.spec = build_spec(CosinePotential(0.7), CosineDifferenceKernel(0.4), DecayFunction.cubic_log())

    def test_constant_self_energy(self):
        """Test that a constant U integrates to c beta"""
        spec = build_spec(ConstantPotential(1.5), ZeroPairPotential(), DecayFunction.zero())
        loop = sample_loop(0.2, 2.0, 8, derive_stream(3, 'loops'))
        self.assertAlmostEqual(self_energy(loop, spec), 3.0)

    def test_pair_energy_of_parallel_paths(self):
        """Test that identical paths give J(d) a beta under cos(x - x')"""
        spec = build_spec(ZeroPotential(), CosineDifferenceKernel(0.4), DecayFunction.nearest(2.0))
        loop = sample_loop(0.6, 1.5, 4, derive_stream(4, 'loops'))
        self.assertAlmostEqual(pair_energy(loop, loop, 1, spec), 2.0 * 0.4 * 1.5)
        self.assertEqual(pair_energy(loop, loop, 2, spec), 0.0)

    def test_pair_energy_validation(self):
        """Test distance and path compatibility checks"""
        a = DiscretizedPath(np.zeros((5, 1)), 1.0)
        b = DiscretizedPath(np.zeros((3, 1)), 1.0)
        with self.assertRaises(ZeroDistance):
            pair_energy(a, a, 0, self.spec)
        with self.assertRaises(MismatchedPaths):
            pair_energy(a, b, 1, self.spec)

    def test_ordered_pairs_counted_twice(self):
        """Test that each neighbouring pair contributes in both orders"""
        spec = build_spec(ZeroPotential(), CosineDifferenceKernel(1.0), DecayFunction.nearest(1.0))
        loops = LoopConfiguration((0, 1), np.full((2, 3, 1), 0.25), 1.0)
        breakdown = config_energy(loops, self.geometry, spec)
        self.assertEqual(set(breakdown.pair_terms), {(0, 1), (1, 0)})
        self.assertAlmostEqual(breakdown.total, 2.0)
        self.assertAlmostEqual(breakdown.parts_sum(), breakdown.total)

    def test_conditional_energy_identity(self):
        """Test h(inner | outer, boundary) = h(inner v outer | boundary) - h(outer | boundary)"""
        inner = random_loops((0, 1), 1.0, 8, 5)
        outer = random_loops((2, 3), 1.0, 8, 6)
        boundary = ClassicalBoundary.uniform((4, 5), [0.2])
        joint = boundary_energy(inner.merge(outer), boundary, self.geometry, self.spec).value
        alone = boundary_energy(outer, boundary, self.geometry, self.spec).value
        conditional = conditional_energy(inner, outer, self.geometry, self.spec, boundary)
        self.assertAlmostEqual(conditional, joint - alone, places=10)

    def test_conditional_energy_bound(self):
        """Test that the conditional energy respects beta #inner (U-bar + 2 sum J V-bar)"""
        inner = random_loops((1, 2), 1.0, 8, 7)
        outer = random_loops((0, 3), 1.0, 8, 8)
        value = conditional_energy(inner, outer, self.geometry, self.spec)
        bound = energy_bound(self.spec, 1.0, 2, coupling_sum(self.geometry, self.spec))
        self.assertLessEqual(abs(value), bound)

    def test_empty_inner_is_zero(self):
        """Test that an empty inner configuration has zero energy"""
        empty = PathConfiguration.empty(1.0, 8, 1)
        outer = random_loops((0,), 1.0, 8, 9)
        self.assertEqual(conditional_energy(empty, outer, self.geometry, self.spec), 0.0)

    def test_overlapping_supports_rejected(self):
        """Test that inner and outer may not share vertices"""
        inner = random_loops((0, 1), 1.0, 4, 10)
        outer = random_loops((1, 2), 1.0, 4, 11)
        with self.assertRaises(OverlappingSupports):
            conditional_energy(inner, outer, self.geometry, self.spec)

    def test_truncation_tail_covers_dropped_terms(self):
        """Test that dropping far boundary vertices stays within the reported tail"""
        loops = random_loops((0, 1), 1.0, 8, 12)
        boundary = ClassicalBoundary.uniform((3, 4, 5), [0.7])
        full = boundary_energy(loops, boundary, self.geometry, self.spec)
        truncated = boundary_energy(loops, boundary, self.geometry, self.spec, radius=2)
        self.assertGreater(truncated.tail_bound, 0.0)
        self.assertLessEqual(abs(full.value - truncated.value), truncated.tail_bound + 1e-12)


if __name__ == '__main__':
    unittest.main()

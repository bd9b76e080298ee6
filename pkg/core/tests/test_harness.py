"""
Tests for experiment configs, artifact writing, the stage runner and the lorentzfk command
"""

import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings

from core.exceptions import ConfigInvalid, IoFailure, NonpositiveBeta, TooLarge
from core.experiment_config import ExperimentConfig
from core.harness import ArtifactWriter, ExperimentRunner, emit, git_blob_hash
from core.models import ExperimentRun


def base_config(**sections):
    config = {
        'seed': 2024,
        'offspring': {'name': 'geometric'},
        'geometry': {'height': 3, 'kind': 'chain'},
    }
    config.update(sections)
    return config


SPEC = {'potential_u': {'name': 'cosine', 'amplitude': 0.5}, 'potential_v': 'zero', 'decay_j': 'zero'}
QUANTUM = {'beta': 0.2, 'L': 2, 'G': 4, 'theta': 0.25}


class TestExperimentConfig(unittest.TestCase):
    """Test validation of experiment documents"""

    def test_empty_config_names_seed(self):
        """Test that an empty document fails on the seed"""
        with self.assertRaisesRegex(ConfigInvalid, '^seed: missing'):
            ExperimentConfig.from_dict({}, 'sample-cdlt')

    def test_missing_field_is_named(self):
        """Test that the first failing field is reported by its dotted path"""
        data = base_config(geometry={'kind': 'chain'})
        with self.assertRaisesRegex(ConfigInvalid, r'geometry\.height: missing'):
            ExperimentConfig.from_dict(data, 'sample-cdlt')

    def test_sections_required_per_subcommand(self):
        """Test that mc-run needs an interaction spec"""
        with self.assertRaisesRegex(ConfigInvalid, '^spec: missing'):
            ExperimentConfig.from_dict(base_config(), 'mc-run')

    def test_nonpositive_beta(self):
        """Test that beta <= 0 raises NonpositiveBeta"""
        data = base_config(spec=SPEC, quantum=dict(QUANTUM, beta=0.0))
        with self.assertRaises(NonpositiveBeta):
            ExperimentConfig.from_dict(data, 'mc-run')

    def test_offspring_errors_are_prefixed(self):
        """Test that a subcritical law is reported under offspring"""
        data = base_config(offspring={'name': 'finite', 'probs': {'0': 0.5, '1': 0.5}})
        with self.assertRaisesRegex(ConfigInvalid, '^offspring: '):
            ExperimentConfig.from_dict(data, 'sample-cdlt')

    def test_schedule_ordering(self):
        """Test that n < r_bar < min(n') <= height is enforced"""
        data = base_config(spec=SPEC, quantum=QUANTUM, schedule={'r_bar': 2, 'n_primes': [5]})
        with self.assertRaisesRegex(ConfigInvalid, r'schedule\.n_primes'):
            ExperimentConfig.from_dict(data, 'mw-verify')

    def test_boundary_needs_exactly_one_source(self):
        """Test that a boundary gives either vertices or shell"""
        data = base_config(spec=SPEC, quantum=QUANTUM, oracle={'boundary': {'point': 0.1}})
        with self.assertRaisesRegex(ConfigInvalid, r'oracle\.boundary'):
            ExperimentConfig.from_dict(data, 'oracle-check')

    def test_overrides_change_hash(self):
        """Test that seed overrides are part of the hashed document"""
        a = ExperimentConfig.from_dict(base_config(), 'sample-cdlt')
        b = ExperimentConfig.from_dict(base_config(), 'sample-cdlt', seed=7)
        self.assertEqual(b.seed, 7)
        self.assertEqual(b.raw['seed'], 7)
        self.assertNotEqual(a.config_hash, b.config_hash)
        self.assertEqual(a.config_hash, ExperimentConfig.from_dict(base_config(), 'sample-cdlt').config_hash)


class TestArtifacts(unittest.TestCase):
    """Test partial writes, hashes and formats"""

    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.directory, ignore_errors=True)

    def test_git_blob_hash(self):
        """Test agreement with git hash-object"""
        self.assertEqual(git_blob_hash(b''), 'e69de29bb2d1d6434b8b29ae775ad8c2e48c5391')
        self.assertEqual(git_blob_hash(b'hello\n'), 'ce013625030ba8dba906f756967f9e9ca394464a')

    def test_partial_until_commit(self):
        """Test that artifacts keep the .partial suffix until the stage commits"""
        writer = ArtifactWriter(self.directory)
        writer.write_text('a/b.txt', 'hello\n')
        self.assertTrue((self.directory / 'a' / 'b.txt.partial').exists())
        self.assertFalse((self.directory / 'a' / 'b.txt').exists())
        writer.commit()
        self.assertEqual((self.directory / 'a' / 'b.txt').read_text(), 'hello\n')
        self.assertEqual(writer.hashes['a/b.txt'], 'ce013625030ba8dba906f756967f9e9ca394464a')

    def test_json_floats_roundtrip(self):
        """Test that JSON artifacts restore floats exactly"""
        writer = ArtifactWriter(self.directory)
        emit(writer, 'values', {'x': 0.1 + 0.2, 'small': 1e-300}, 'json')
        writer.commit()
        restored = json.loads((self.directory / 'values.json').read_text())
        self.assertEqual(restored['x'], 0.1 + 0.2)
        self.assertEqual(restored['small'], 1e-300)

    def test_csv_keeps_row_order(self):
        """Test that CSV rows keep their order and carry 17 digits"""
        writer = ArtifactWriter(self.directory)
        emit(writer, 'rows', [{'k': 2, 'v': 1 / 3}, {'k': 1, 'v': 2 / 3}], 'csv')
        writer.commit()
        frame = pd.read_csv(self.directory / 'rows.csv')
        self.assertEqual(frame['k'].tolist(), [2, 1])
        self.assertAlmostEqual(frame['v'].iloc[0], 1 / 3, places=15)

    def test_unknown_format_is_config_error(self):
        """Test that an unsupported output format raises ConfigInvalid with exit code 2"""
        writer = ArtifactWriter(self.directory)
        with self.assertRaises(ConfigInvalid) as context:
            emit(writer, 'rows', [{'k': 1}], 'parquet')
        self.assertEqual(context.exception.exit_code, 2)
        self.assertFalse(list(self.directory.iterdir()))

    @patch('core.harness.os.replace', side_effect=OSError('disk full'))
    def test_commit_failure_is_io_failure(self, mock_replace):
        """Test that a failed rename surfaces as IoFailure with exit code 5"""
        writer = ArtifactWriter(self.directory)
        writer.write_text('out.txt', 'x\n')
        with self.assertRaises(IoFailure) as context:
            writer.commit()
        self.assertEqual(context.exception.exit_code, 5)
        mock_replace.assert_called_once()


class TestExperimentRunner(TestCase):
    """Test subcommands end to end through the stage runner"""

    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.directory, ignore_errors=True)

    def run_subcommand(self, subcommand, data, name='run', seed=None):
        config = ExperimentConfig.from_dict(data, subcommand, seed=seed, output_dir=str(self.directory / name))
        return ExperimentRunner(config, subcommand).run()

    def test_sample_cdlt_unit_law(self):
        """Test that the unit law yields chain trees and triangulations"""
        data = base_config(offspring={'name': 'unit'}, geometry={'height': 4, 'kind': 'sb', 'samples': 2})
        manifest = self.run_subcommand('sample-cdlt', data)
        out = self.directory / 'run'
        self.assertEqual(manifest.status, 'completed')
        self.assertTrue((out / 'trees' / 'tree_0001.txt').exists())
        self.assertTrue((out / 'triangulations' / 'cdlt_0000.txt').read_text().startswith('CDLT-GRAPH v1'))
        samples = json.loads((out / 'samples.json').read_text())
        self.assertEqual([s['vertex_count'] for s in samples], [5, 5])
        self.assertFalse(list(out.rglob('*.partial')))

    def test_same_seed_same_hashes(self):
        """Test that artifacts are byte-identical for the same seed"""
        data = base_config(geometry={'height': 6, 'kind': 'sb', 'samples': 3})
        first = self.run_subcommand('sample-cdlt', data, name='first')
        second = self.run_subcommand('sample-cdlt', data, name='second')
        other = self.run_subcommand('sample-cdlt', data, name='other', seed=99)
        self.assertEqual(first.outputs, second.outputs)
        self.assertNotEqual(first.outputs, other.outputs)

    def test_manifest_persisted(self):
        """Test that completed runs are mirrored into the database"""
        self.run_subcommand('sample-cdlt', base_config())
        run = ExperimentRun.objects.get()
        self.assertEqual(run.status, 'completed')
        self.assertEqual(run.stages.count(), 1)
        self.assertEqual(run.stages.first().name, 'sample')

    def test_geometry_stats_on_chain(self):
        """Test layer statistics of constant layers"""
        data = base_config(geometry={'height': 5, 'kind': 'chain', 'samples': 2})
        self.run_subcommand('geometry-stats', data)
        out = self.directory / 'run'
        recursion = pd.read_csv(out / 'recursion.csv')
        self.assertEqual(recursion['mean_increment'].tolist(), [0.0] * 5)
        layers = pd.read_csv(out / 'layers.csv')
        self.assertEqual(len(layers), 12)
        summary = json.loads((out / 'summary.json').read_text())
        self.assertEqual(summary['samples'], 2)
        self.assertEqual(summary['growth_constant_p99_half'], summary['growth_constant_p99'])
        self.assertEqual(summary['growth_p99_change'], 0.0)
        growth = pd.read_csv(out / 'growth.csv')
        self.assertIn('growth_constant_half', growth.columns)

    def test_mc_run_outputs(self):
        """Test the kernel table and summary of a small Monte Carlo run"""
        data = base_config(spec=SPEC, quantum=QUANTUM, oracle={'window': 0, 'volume': 1},
                           mc={'sweeps': 20, 'chains': 2, 'bridges': 8})
        manifest = self.run_subcommand('mc-run', data)
        out = self.directory / 'run'
        rdmk = pd.read_csv(out / 'rdmk.csv')
        self.assertEqual(len(rdmk), 16)
        self.assertEqual(set(rdmk['method']), {'mc'})
        chains = pd.read_csv(out / 'chains.csv')
        self.assertEqual(sorted(set(chains['chain'])), [0, 1])
        summary = json.loads((out / 'summary.json').read_text())
        self.assertEqual(summary['volume'], [0, 1])
        self.assertEqual([s.name for s in manifest.stages], ['geometry', 'mc'])

    def test_oracle_check_passes(self):
        """Test the oracle comparisons on a lone vertex"""
        data = base_config(spec=SPEC, quantum=QUANTUM, oracle={'window': 0, 'sigma': 5.0, 'relative': 0.05},
                           mc={'sweeps': 50, 'chains': 2, 'bridges': 64})
        manifest = self.run_subcommand('oracle-check', data)
        summary = json.loads((self.directory / 'run' / 'summary.json').read_text())
        self.assertTrue(summary['passed'])
        self.assertEqual({c['check'] for c in summary['comparisons']},
                         {'mc_vs_oracle', 'fkdlr_residual', 'uniform_bound'})
        self.assertNotIn('compatibility', [s.name for s in manifest.stages])

    @override_settings(LORENTZFK_BRUTE_FORCE_MAX_COST=1.0)
    def test_manifest_written_on_failure(self):
        """Test that a refused workload still leaves a manifest naming the stage"""
        data = base_config(spec=SPEC, quantum=QUANTUM)
        with self.assertRaises(TooLarge):
            self.run_subcommand('oracle-check', data)
        manifest = json.loads((self.directory / 'run' / 'manifest.json').read_text())
        self.assertEqual(manifest['status'], 'failed')
        self.assertEqual(manifest['failure_stage'], 'brute-force')
        self.assertEqual(manifest['exit_code'], 3)
        self.assertEqual(ExperimentRun.objects.get().status, 'failed')

    def test_mw_verify_report(self):
        """Test the verifier records on a chain with a shell boundary"""
        data = base_config(
            geometry={'height': 8, 'kind': 'chain'},
            spec={'potential_u': 'zero', 'potential_v': {'name': 'cosine_difference', 'amplitude': 0.3},
                  'decay_j': 'nearest'},
            quantum=QUANTUM,
            schedule={'r_bar': 2, 'n_primes': [4, 6], 'convexity_samples': 4, 'taylor_pairs': 10},
            oracle={'volumes': [0, 1], 'boundary': {'shell': True, 'point': 0.1}, 'ratio_samples': 16,
                    'window_samples': 1},
            mc={'sweeps': 4, 'burn_in': 2, 'chains': 2},
        )
        manifest = self.run_subcommand('mw-verify', data)
        out = self.directory / 'run'
        verifier = pd.read_csv(out / 'verifier.csv')
        self.assertEqual(verifier['n_prime'].tolist(), [4, 6])
        self.assertEqual(verifier['lipschitz_violations'].tolist(), [0, 0])
        self.assertTrue((verifier['convexity_violations'] >= 0).all())
        gaps = pd.read_csv(out / 'invariance_gap.csv')
        self.assertEqual(gaps['N'].tolist(), [0, 1])
        self.assertEqual(verifier['gap_volume'].tolist(), [1, 1])
        for column in ('gap_kernel', 'gap_ratio'):
            np.testing.assert_array_equal(verifier[column].to_numpy(), np.repeat(gaps[column].iloc[-1], 2))
        report = json.loads((out / 'report.json').read_text())
        self.assertIsNone(report['phi_decay'])
        self.assertEqual(report['records'][0]['gap_volume'], report['invariance_gap'][-1]['N'])
        self.assertEqual([s.name for s in manifest.stages],
                         ['geometry', 'taylor', 'phi', 'convexity', 'invariance-gap', 'report'])


class TestLorentzFKCommand(TestCase):
    """Test the management command surface"""

    def setUp(self):
        self.directory = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.directory, ignore_errors=True)

    def write_config(self, data):
        path = self.directory / 'config.json'
        path.write_text(json.dumps(data))
        return str(path)

    def test_config_error_exit_code(self):
        """Test that invalid configs exit with code 2"""
        path = self.write_config({})
        with self.assertRaises(CommandError) as context:
            call_command('lorentzfk', 'sample-cdlt', config=path, output_dir=str(self.directory / 'out'))
        self.assertEqual(context.exception.returncode, 2)

    def test_unreadable_config(self):
        """Test that a missing file is a config error"""
        with self.assertRaises(CommandError) as context:
            call_command('lorentzfk', 'sample-cdlt', config=str(self.directory / 'absent.json'))
        self.assertEqual(context.exception.returncode, 2)

    def test_successful_run(self):
        """Test a complete sample-cdlt run through the command"""
        path = self.write_config(base_config())
        call_command('lorentzfk', 'sample-cdlt', config=path, seed=5, output_dir=str(self.directory / 'out'))
        manifest = json.loads((self.directory / 'out' / 'manifest.json').read_text())
        self.assertEqual(manifest['seed'], 5)
        self.assertEqual(manifest['status'], 'completed')
        self.assertIn('samples.csv', manifest['outputs'])


if __name__ == '__main__':
    unittest.main()

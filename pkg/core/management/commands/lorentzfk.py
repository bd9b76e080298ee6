from django.core.management.base import BaseCommand, CommandError
from core.exceptions import LorentzFKError
from core.experiment_config import SUBCOMMANDS, ExperimentConfig
from core.harness import ExperimentRunner
import logging

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Run a lorentzfk experiment stage: sample-cdlt, geometry-stats, mc-run, oracle-check or mw-verify'

    def add_arguments(self, parser):
        parser.add_argument(
            'subcommand',
            choices=SUBCOMMANDS,
            help='Experiment to run',
        )
        parser.add_argument(
            '--config',
            required=True,
            help='Path to the JSON experiment config',
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=None,
            help='Override the config seed',
        )
        parser.add_argument(
            '--output-dir',
            default=None,
            help='Override output.directory of the config',
        )

    def handle(self, *args, **options):
        subcommand = options['subcommand']
        try:
            config = ExperimentConfig.from_file(options['config'], subcommand, seed=options['seed'],
                                                output_dir=options['output_dir'])
            self.stdout.write(f'Running {subcommand} (seed {config.seed}) into {config.output_dir}')
            manifest = ExperimentRunner(config, subcommand).run()
        except LorentzFKError as e:
            logger.error(f'{subcommand} failed: {e}')
            self.stderr.write(self.style.ERROR(f'✗ {type(e).__name__}: {e}'))
            raise CommandError(str(e), returncode=e.exit_code)

        for stage in manifest.stages:
            self.stdout.write(f'  {stage.name.ljust(16)} {stage.wall_time:8.2f}s')
        self.stdout.write(self.style.SUCCESS(f'✓ {subcommand} completed, {len(manifest.outputs)} artifact(s) written'))

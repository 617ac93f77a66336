"""
Shared plumbing for the iQuery management commands.

Every command subclasses IQueryCommand and implements run(**options).
IQueryError subclasses become CommandError with the matching exit code.
Malformed flag values exit with 2, unreadable or unwritable files with 1.
"""
import logging
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from apps.core.checkpoint import load_network
from apps.core.config import merge_overrides, parse_config_file
from apps.core.exceptions import IQueryError
from apps.core.forms import CorpusConfigForm, ModelConfigForm, TrainConfigForm, build_configs
from apps.synthdata.corpus import Corpus

logger = logging.getLogger('apps.core.commands')

CONFIG_FORMS = (CorpusConfigForm, ModelConfigForm, TrainConfigForm)


class IQueryCommand(BaseCommand):
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument('--config', help='key=value run configuration file')
        parser.add_argument('--seed', type=int, help='master seed (overrides the config file)')
        parser.add_argument('--workers', type=int, help=f'thread pool size (default {settings.WORKERS})')

    def handle(self, *args, **options):
        try:
            self.run(**options)
        except IQueryError as exc:
            logger.debug('command failed', exc_info=True)
            raise CommandError(str(exc), returncode=exc.exit_code) from exc
        except ValidationError as exc:
            raise CommandError(' '.join(exc.messages), returncode=2) from exc
        except OSError as exc:
            raise CommandError(f"I/O error: {exc}", returncode=1) from exc

    def run(self, **options):
        raise NotImplementedError

    # ── Helpers ──────────────────────────────────────────────────────────────

    def configs(self, options, **overrides):
        """(CorpusConfig, ModelConfig, TrainConfig) from --config plus flag overrides."""
        entries = parse_config_file(options['config']) if options.get('config') else {}
        entries = merge_overrides(entries, seed=options.get('seed'), **overrides)
        return build_configs(entries, *CONFIG_FORMS)

    def seed(self, options) -> int:
        """--seed, else the seed of a validated --config, else settings.SEED."""
        if options.get('seed') is not None:
            return options['seed']
        if options.get('config'):
            return self.configs(options)[2].seed
        return settings.SEED

    def corpus(self, options) -> Corpus:
        return Corpus.load(options.get('corpus') or settings.CORPUS_ROOT)

    def network(self, options):
        net, checkpoint = load_network(options['checkpoint'])
        self.stdout.write(f"loaded {options['checkpoint']} ({net.parameter_count()} parameters)")
        return net, checkpoint

    def out_dir(self, options, default: str) -> Path:
        path = Path(options.get('out') or settings.ARTIFACT_ROOT / default)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def success(self, message: str):
        self.stdout.write(self.style.SUCCESS(message))

"""
management command: gen_corpus

Renders the synthetic instrument corpus (WAV clips, activity sidecars,
manifest.tsv) into --out.

Usage:
    python manage.py gen_corpus --seed 7 --out corpus/
    python manage.py gen_corpus --config configs/desk.conf --force
"""
from pathlib import Path

from django.conf import settings

from apps.core.management.base import IQueryCommand
from apps.synthdata.corpus import gen_corpus


class Command(IQueryCommand):
    help = 'Generate the synthetic multi-instrument corpus'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--out', help=f'corpus directory (default {settings.CORPUS_ROOT})')
        parser.add_argument('--force', action='store_true', help='overwrite a non-empty directory')

    def run(self, **options):
        corpus_config, _, _ = self.configs(options)
        out = Path(options['out'] or settings.CORPUS_ROOT)
        corpus = gen_corpus(corpus_config, out, force=options['force'], workers=options['workers'])
        self.success(f'gen_corpus: {len(corpus)} clips, {corpus_config.n_classes} classes → {out}')

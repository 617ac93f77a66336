"""
management command: ablate

Trains each named variant under the same seed and budget and writes
ablation.tsv with median/mean SDR, SIR and SAR per variant. Ordering
checks (random < visual, self_audio ≤ motion_self_audio) are reported in
the footer; a failed check is flagged but does not change the exit code.

Usage:
    python manage.py ablate --config configs/desk.conf --variants visual,random --out runs/ablation
"""
from apps.core.forms import CsvField
from apps.core.management.base import IQueryCommand
from apps.training.ablation import VARIANTS, ablate


class Command(IQueryCommand):
    help = 'Run the ablation variants and compare held-out separation quality'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--variants', default=','.join(VARIANTS),
                            help=f"comma-separated subset of {', '.join(VARIANTS)}")
        parser.add_argument('--corpus', help='corpus directory (default CORPUS_ROOT)')
        parser.add_argument('--mixtures', type=int, default=32, help='test mixtures per variant')
        parser.add_argument('--out', help='run directory (default ARTIFACT_ROOT/ablation)')

    def run(self, **options):
        _, model_config, train_config = self.configs(options)
        variants = CsvField(cast=str).clean(options['variants'])
        out = self.out_dir(options, 'ablation')
        report = ablate(self.corpus(options), model_config, train_config, variants, out_dir=out,
                        eval_mixtures=options['mixtures'], workers=options['workers'])
        for row in report.rows:
            self.stdout.write(f'{row.variant:>20}  median SDR {row.median_sdr:6.2f} dB')
        for text, ok in report.checks:
            if ok:
                self.stdout.write(f'check {text}: ok')
            else:
                self.stderr.write(f'check {text}: FAILED')
        self.success(f'ablate: {len(report.rows)} variants → {out / "ablation.tsv"}')

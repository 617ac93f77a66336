"""
management command: train

Mix-and-Separate training on the corpus train split. Writes best.iqry,
last.iqry and metrics.tsv into --out.

Usage:
    python manage.py train --config configs/desk.conf --corpus corpus/ --out runs/desk
"""
from apps.core.io import atomic_write
from apps.core.management.base import IQueryCommand
from apps.training.engine import train


class Command(IQueryCommand):
    help = 'Train the separator with Mix-and-Separate'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--corpus', help='corpus directory (default CORPUS_ROOT)')
        parser.add_argument('--out', help='run directory (default ARTIFACT_ROOT/train)')
        parser.add_argument('--epochs', type=int, help='override the configured epoch count')

    def run(self, **options):
        _, model_config, train_config = self.configs(options, epochs=options['epochs'])
        corpus = self.corpus(options)
        out = self.out_dir(options, 'train')
        with atomic_write(out / 'run.conf') as handle:
            handle.write(model_config.to_text())
            handle.write(train_config.to_text())
        run = train(corpus, model_config, train_config, out_dir=out, workers=options['workers'])
        self.success(f'train: best epoch {run.best_epoch} (val SDR {run.best_val_sdr:.2f} dB) → '
                     f'{run.checkpoint_path}')

"""
management command: finetune

Audio-prompt fine-tuning of a pre-trained checkpoint on held-out classes:
one new query column per class, everything else frozen. Writes the
prompted checkpoints (best.iqry, last.iqry), metrics.tsv and
finetune_report.tsv with before/after SDR per new class.

Usage:
    python manage.py finetune --checkpoint runs/holdout/best.iqry --classes 7 --out runs/prompt7
"""
from apps.core.config import merge_overrides, parse_config_text
from apps.core.forms import CsvField, TrainConfigForm
from apps.core.management.base import IQueryCommand
from apps.training.config import TrainConfig
from apps.training.finetune import finetune_prompt


class Command(IQueryCommand):
    help = 'Extend a trained separator to new classes with audio prompts'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True, help='pre-trained network')
        parser.add_argument('--classes', required=True, help='comma-separated new class ids')
        parser.add_argument('--corpus', help='corpus directory (default CORPUS_ROOT)')
        parser.add_argument('--epochs', type=int, help='override the fine-tuning epoch count')
        parser.add_argument('--mixtures', type=int, default=16, help='evaluation mixtures before and after')
        parser.add_argument('--out', help='run directory (default ARTIFACT_ROOT/finetune)')

    def train_config(self, options, checkpoint):
        """--config when given, else the checkpoint's own training settings; flags win."""
        if options['config']:
            return self.configs(options, epochs=options['epochs'])[2]
        base = checkpoint.train_text if checkpoint.train_text.strip() else TrainConfig().to_text()
        entries = merge_overrides(parse_config_text(base), seed=options['seed'], epochs=options['epochs'])
        return TrainConfigForm(entries).build()

    def run(self, **options):
        net, checkpoint = self.network(options)
        config = self.train_config(options, checkpoint)
        classes = CsvField(cast=int).clean(options['classes'])
        result = finetune_prompt(net, self.corpus(options), classes, config, out_dir=self.out_dir(options, 'finetune'),
                                 eval_mixtures=options['mixtures'], workers=options['workers'])
        for class_id, column in zip(result.classes, result.columns):
            self.stdout.write(f'class {class_id} → column {column}: SDR gain {result.improvement(class_id):+.2f} dB')
        self.success(f'finetune: {result.trainable_parameters} trainable parameters '
                     f'({100 * result.trainable_fraction:.3f}% of the transformer), '
                     f'frozen weights unchanged: {result.frozen_unchanged}')

"""
management command: separate

Separates one mixture WAV. Each source is named by --object-class (its
detected object class) and optionally --activity (a .meta sidecar holding
its observed motion track; a silent track is used when absent).

Writes per source i: source_<i>.wav, mask_<i>.pgm and mask_<i>.csv. CSV
rows are frequency bins from lowest to highest; the PGM shows the lowest
bin at the bottom.

Usage:
    python manage.py separate --checkpoint runs/desk/best.iqry --mix mix.wav \
        --object-class 0 --object-class 3 --out separated/
"""
import numpy as np
from django.conf import settings

from apps.core.exceptions import UsageError
from apps.core.io import read_wav, write_pgm, write_table, write_wav
from apps.core.management.base import IQueryCommand
from apps.separator.inference import SourceCue, separate_mixture
from apps.synthdata.corpus import read_meta

OBJECT_JITTER = 0.0


def write_mask_csv(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    header = ('bin', *(f't{t}' for t in range(values.shape[1])))
    write_table(path, header, [(f, *(repr(float(v)) for v in row)) for f, row in enumerate(values)],
                delimiter=',')


class Command(IQueryCommand):
    help = 'Separate a mixture into one waveform per named source'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--mix', required=True, help='mono 16-bit WAV at SAMPLE_RATE')
        parser.add_argument('--object-class', dest='object_classes', type=int, action='append', required=True,
                            help='object class of one source; repeat per source')
        parser.add_argument('--activity', dest='activities', action='append', default=[],
                            help='.meta sidecar with the motion track of one source, in --object-class order')
        parser.add_argument('--corpus', help='corpus whose feature bank names the classes (default CORPUS_ROOT)')
        parser.add_argument('--out', help='output directory (default ARTIFACT_ROOT/separated)')

    def cues(self, options, corpus) -> list[SourceCue]:
        classes, activities = options['object_classes'], options['activities']
        if activities and len(activities) != len(classes):
            raise UsageError(f"{len(activities)} --activity files for {len(classes)} --object-class sources")
        silent = np.zeros((settings.ACTIVITY_DIM, settings.ACTIVITY_FRAMES))
        cues = []
        for i, class_id in enumerate(classes):
            track = read_meta(activities[i])['activity'] if activities else silent
            cues.append(SourceCue(corpus.object_bank.feature(class_id, 0, sigma=OBJECT_JITTER),
                                  corpus.motion_lift(track), class_id))
        return cues

    def run(self, **options):
        corpus = self.corpus(options)
        cues = self.cues(options, corpus)
        net, _ = self.network(options)
        mixture = read_wav(options['mix'], expected_rate=settings.SAMPLE_RATE)
        seed = self.seed(options)
        result = separate_mixture(net, mixture, cues, seed=seed)
        out = self.out_dir(options, 'separated')
        for i, (wave, mask) in enumerate(zip(result.waveforms, result.source_masks)):
            write_wav(out / f'source_{i}.wav', wave)
            write_pgm(out / f'mask_{i}.pgm', mask.values)
            write_mask_csv(out / f'mask_{i}.csv', mask.values)
        self.success(f'separate: {len(result.waveforms)} sources (query columns {result.query_indices}) → {out}')

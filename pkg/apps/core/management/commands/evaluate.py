"""
management command: evaluate

Scores seeded K-mixtures from a corpus split with BSS-eval and writes
evaluation.tsv (one row per source and variant, summary footer).
Without --checkpoint only the mixture and oracle references are scored.
With --expect the medians are compared against a previously written
evaluation.tsv and the command exits 4 if any drifts beyond --tolerance dB.

Usage:
    python manage.py evaluate --checkpoint runs/desk/best.iqry --corpus corpus/ --mixtures 50
    python manage.py evaluate --config configs/smoke.conf --checkpoint runs/smoke/best.iqry \
        --corpus corpus-smoke/ --expect runs/smoke-golden/evaluation.tsv
"""
from apps.bsseval.evaluation import MIXTURE, MODEL, ORACLE, REGRESSION_TOLERANCE, evaluate_set, read_summary
from apps.bsseval.metrics import FILTER_LEN
from apps.core.exceptions import RegressionError, UsageError
from apps.core.forms import CsvField
from apps.core.management.base import IQueryCommand

REPORT_FILE = 'evaluation.tsv'


class Command(IQueryCommand):
    help = 'Evaluate separation quality (SDR/SIR/SAR) on a corpus split'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', help='trained network; omit to score only the references')
        parser.add_argument('--corpus', help='corpus directory (default CORPUS_ROOT)')
        parser.add_argument('--split', default='test', choices=('train', 'val', 'test'))
        parser.add_argument('--k', type=int, default=2, help='sources per mixture')
        parser.add_argument('--mixtures', type=int, default=20)
        parser.add_argument('--variants', help=f'comma-separated subset of {MODEL},{MIXTURE},{ORACLE}')
        parser.add_argument('--filter-len', dest='filter_len', type=int, default=FILTER_LEN)
        parser.add_argument('--out', help='report directory (default ARTIFACT_ROOT/evaluate)')
        parser.add_argument('--expect', help='recorded evaluation.tsv whose medians this run must reproduce')
        parser.add_argument('--tolerance', type=float, default=REGRESSION_TOLERANCE, help='allowed median drift in dB')

    def run(self, **options):
        net = self.network(options)[0] if options['checkpoint'] else None
        variants = CsvField(cast=str).clean(options['variants']) or None
        unknown = set(variants or ()) - {MODEL, MIXTURE, ORACLE}
        if unknown:
            raise UsageError(f"unknown variants {sorted(unknown)}")
        expected = read_summary(options['expect']) if options['expect'] else None
        seed = self.seed(options)
        corpus = self.corpus(options)
        classes = None
        if net is not None:
            classes = [c for c in corpus.class_ids(options['split']) if c in net.queries.query_map()]
        report = evaluate_set(net, corpus, options['split'], k=options['k'], n_mixtures=options['mixtures'],
                              seed=seed, variants=variants, classes=classes,
                              filter_len=options['filter_len'], workers=options['workers'])
        out = self.out_dir(options, 'evaluate')
        report.write(out / REPORT_FILE)
        for line in report.footer_lines():
            self.stdout.write(line)
        if expected is not None:
            problems = report.drift(expected, options['tolerance'])
            for problem in problems:
                self.stderr.write(problem)
            if problems:
                raise RegressionError(f"{len(problems)} summary values drifted from {options['expect']}")
            self.stdout.write(f"matches {options['expect']} within {options['tolerance']} dB")
        self.success(f'evaluate: {len(report.rows)} rows → {out / REPORT_FILE}')

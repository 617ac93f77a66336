"""
management command: inspect

Decodes seeded test mixtures with a trained network and exports
  query_pca.csv     2-D PCA coordinates of every source's decoded query embedding
  mask_energy.tsv   per-class mask energy, with intra/inter-class cosine in the footer

Usage:
    python manage.py inspect --checkpoint runs/desk/best.iqry --mixtures 40 --out runs/desk/inspect
"""

from apps.core.management.base import IQueryCommand
from apps.separator.inspection import inspect_queries


class Command(IQueryCommand):
    help = 'Export query-embedding PCA coordinates and mask statistics'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--corpus', help='corpus directory (default CORPUS_ROOT)')
        parser.add_argument('--split', default='test', choices=('train', 'val', 'test'))
        parser.add_argument('--k', type=int, default=2)
        parser.add_argument('--mixtures', type=int, default=20)
        parser.add_argument('--out', help='output directory (default ARTIFACT_ROOT/inspect)')

    def run(self, **options):
        net, _ = self.network(options)
        seed = self.seed(options)
        report = inspect_queries(net, self.corpus(options), options['split'], k=options['k'],
                                 n_mixtures=options['mixtures'], seed=seed)
        out = self.out_dir(options, 'inspect')
        report.write(out)
        self.stdout.write(f'intra-class cosine {report.intra_cosine:.3f}, inter-class {report.inter_cosine:.3f}')
        self.success(f'inspect: {len(report.samples)} embeddings → {out}')

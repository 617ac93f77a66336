"""
Query-embedding inspection: decode seeded mixtures, collect the decoded
query embedding of every source's assigned column, project them to 2-D
with PCA and measure how tightly they cluster by class.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from apps.core.io import write_table
from apps.core.seeding import derive_seed, spawn_seeds
from apps.separator.exceptions import InputError
from apps.separator.inference import network_features
from apps.separator.queries import assign_queries
from apps.synthdata.sampler import MixSampler
from apps.tensorcore.tensor import no_grad

logger = logging.getLogger(__name__)

PCA_HEADER = ('clip_id', 'class', 'column', 'pc1', 'pc2')
ENERGY_HEADER = ('class', 'count', 'mean_energy', 'std_energy', 'mean_mask')


@dataclass(frozen=True)
class EmbeddingSample:
    clip_id: str
    class_id: int
    column: int
    embedding: np.ndarray           # C
    mask_energy: float              # Σ mask² / (F·T)
    mask_mean: float


@dataclass
class InspectionReport:
    samples: list = field(default_factory=list)
    coordinates: np.ndarray = None  # samples × 2
    explained: tuple = ()
    intra_cosine: float = float('nan')
    inter_cosine: float = float('nan')

    @property
    def separation(self) -> float:
        return self.intra_cosine - self.inter_cosine

    def energy_rows(self) -> list[tuple]:
        grouped = defaultdict(list)
        for s in self.samples:
            grouped[s.class_id].append(s)
        rows = []
        for class_id in sorted(grouped):
            energies = np.array([s.mask_energy for s in grouped[class_id]])
            means = np.array([s.mask_mean for s in grouped[class_id]])
            rows.append((class_id, len(energies), f'{energies.mean():.6f}', f'{energies.std():.6f}',
                         f'{means.mean():.6f}'))
        return rows

    def write(self, out_dir) -> None:
        rows = [(s.clip_id, s.class_id, s.column, f'{x:.6f}', f'{y:.6f}')
                for s, (x, y) in zip(self.samples, self.coordinates)]
        footer = [f'explained_variance={self.explained[0]:.6f},{self.explained[1]:.6f}']
        write_table(out_dir / 'query_pca.csv', PCA_HEADER, rows, delimiter=',', footer=footer)
        write_table(out_dir / 'mask_energy.tsv', ENERGY_HEADER, self.energy_rows(), footer=[
            f'intra_cosine={self.intra_cosine:.6f}',
            f'inter_cosine={self.inter_cosine:.6f}',
            f'separation={self.separation:.6f}',
        ])


def pca_2d(points: np.ndarray):
    """
    Centered projection on the two leading principal axes via SVD. Axis
    signs are fixed so the largest-magnitude loading of each axis is
    positive, which keeps the output deterministic.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise InputError(f"PCA needs at least two points, got shape {points.shape}")
    centered = points - points.mean(axis=0)
    _, singular, axes = np.linalg.svd(centered, full_matrices=False)
    axes = axes[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], points.shape[1]))])
        singular = np.concatenate([singular, np.zeros(2)])
    flip = np.sign(axes[np.arange(2), np.argmax(np.abs(axes), axis=1)])
    axes = axes * np.where(flip == 0, 1.0, flip)[:, None]
    total = float(np.sum(singular ** 2))
    explained = tuple(float(s ** 2 / total) if total else 0.0 for s in singular[:2])
    return centered @ axes.T, explained


def cosine_separation(embeddings: np.ndarray, labels) -> tuple[float, float]:
    """(mean intra-class, mean inter-class) cosine similarity over distinct pairs."""
    x = np.asarray(embeddings, dtype=np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    sim = x @ x.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra, inter = sim[same & off_diag], sim[~same]
    return (float(intra.mean()) if intra.size else float('nan'),
            float(inter.mean()) if inter.size else float('nan'))


def collect_embeddings(net, corpus, split: str = 'test', k: int = 2, n_mixtures: int = 20,
                       seed: int = 0) -> list[EmbeddingSample]:
    sampler = MixSampler(corpus, split, k=k, classes=[c for c in corpus.class_ids(split)
                                                     if c in net.queries.query_map()])
    samples = []
    for mixture_seed in spawn_seeds(seed, n_mixtures):
        sample = sampler.sample(mixture_seed)
        indices = assign_queries(net.queries, sample.class_ids, net.config.assignment,
                                 np.random.default_rng(derive_seed(mixture_seed, 31)))
        _, features = network_features(sample.mixture)
        with no_grad():
            out = net(features, list(sample.object_features), list(sample.motion_features), indices,
                      columns=indices)
        embeddings = np.asarray(out.query_embeddings.data, dtype=np.float64)
        masks = np.asarray(out.masks.data, dtype=np.float64)
        for row, (clip, column) in enumerate(zip(sample.clips, indices)):
            samples.append(EmbeddingSample(clip.clip_id, clip.class_id, column, embeddings[column],
                                           float(np.mean(masks[row] ** 2)), float(np.mean(masks[row]))))
    return samples


def inspect_queries(net, corpus, split: str = 'test', k: int = 2, n_mixtures: int = 20,
                    seed: int = 0) -> InspectionReport:
    samples = collect_embeddings(net, corpus, split, k, n_mixtures, seed)
    matrix = np.stack([s.embedding for s in samples])
    coordinates, explained = pca_2d(matrix)
    intra, inter = cosine_separation(matrix, [s.class_id for s in samples])
    logger.info('query embeddings: intra-class cosine %.3f, inter-class %.3f over %d sources',
                intra, inter, len(samples))
    return InspectionReport(samples, coordinates, explained, intra, inter)

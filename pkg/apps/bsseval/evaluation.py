"""
Held-out evaluation: draw K-mixtures from a split, separate them and score
every source against its clean reference.

Three variants are scored per source:
  model     the network's separated waveform
  mixture   the mixture itself used as the estimate (lower reference)
  oracle    the ideal ratio mask applied to the mixture (upper reference)
"""
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from apps.bsseval.exceptions import InputError
from apps.bsseval.metrics import FILTER_LEN, bss_eval_sources
from apps.core.io import write_table
from apps.core.seeding import derive_seed, spawn_seeds
from apps.dsp.engine import ground_truth_masks, reconstruct, stft
from apps.separator.inference import SourceCue, model_forward
from apps.synthdata.sampler import MixSampler

logger = logging.getLogger(__name__)

MODEL = 'model'
MIXTURE = 'mixture'
ORACLE = 'oracle'
REPORT_HEADER = ('clip_id', 'class', 'sdr', 'sir', 'sar', 'variant')
REGRESSION_METRICS = ('median_sdr', 'median_sir', 'median_sar')
REGRESSION_TOLERANCE = 0.1     # dB


@dataclass(frozen=True)
class ScoreRow:
    clip_id: str
    class_id: int
    sdr: float
    sir: float
    sar: float
    variant: str

    def as_row(self) -> tuple:
        return (self.clip_id, self.class_id, f'{self.sdr:.4f}', f'{self.sir:.4f}', f'{self.sar:.4f}', self.variant)


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)

    def variants(self) -> list[str]:
        return sorted({r.variant for r in self.rows})

    def select(self, variant: str = None, class_id: int = None) -> list[ScoreRow]:
        return [r for r in self.rows
                if (variant is None or r.variant == variant) and (class_id is None or r.class_id == class_id)]

    def median(self, metric: str = 'sdr', variant: str = MODEL, class_id: int = None) -> float:
        values = [getattr(r, metric) for r in self.select(variant, class_id)]
        return float(np.median(values)) if values else float('nan')

    def mean(self, metric: str = 'sdr', variant: str = MODEL, class_id: int = None) -> float:
        values = [getattr(r, metric) for r in self.select(variant, class_id)]
        return float(np.mean(values)) if values else float('nan')

    def summary(self) -> dict:
        """{(variant, class_id or 'all'): {'median_sdr': ..., 'mean_sdr': ..., ...}}"""
        groups = defaultdict(list)
        for row in self.rows:
            groups[(row.variant, 'all')].append(row)
            groups[(row.variant, row.class_id)].append(row)
        table = {}
        for key, rows in groups.items():
            stats = {'count': len(rows)}
            for metric in ('sdr', 'sir', 'sar'):
                values = [getattr(r, metric) for r in rows]
                stats[f'median_{metric}'] = float(np.median(values))
                stats[f'mean_{metric}'] = float(np.mean(values))
            table[key] = stats
        return table

    def footer_lines(self) -> list[str]:
        lines = []
        for (variant, class_id), stats in sorted(self.summary().items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
            lines.append(
                f"variant={variant} class={class_id} n={stats['count']} "
                f"median_sdr={stats['median_sdr']:.4f} median_sir={stats['median_sir']:.4f} "
                f"median_sar={stats['median_sar']:.4f} mean_sdr={stats['mean_sdr']:.4f} "
                f"mean_sir={stats['mean_sir']:.4f} mean_sar={stats['mean_sar']:.4f}"
            )
        return lines

    def write(self, path) -> None:
        write_table(path, REPORT_HEADER, [r.as_row() for r in self.rows], footer=self.footer_lines())

    def drift(self, expected: dict, tolerance: float = REGRESSION_TOLERANCE) -> list[str]:
        """
        Differences against a recorded summary (see read_summary): groups
        missing on either side, and medians further than `tolerance` dB apart.
        """
        actual = {(variant, str(class_id)): stats for (variant, class_id), stats in self.summary().items()}
        problems = [f'{v} class={c}: not in the recorded report' for v, c in sorted(set(actual) - set(expected))]
        for key in sorted(expected):
            if key not in actual:
                problems.append(f'{key[0]} class={key[1]}: missing from this run')
                continue
            for metric in REGRESSION_METRICS:
                delta = actual[key][metric] - expected[key][metric]
                if not abs(delta) <= tolerance:
                    problems.append(f'{key[0]} class={key[1]} {metric}: {actual[key][metric]:.4f} vs recorded '
                                    f'{expected[key][metric]:.4f} ({delta:+.4f} dB)')
        return problems


def read_summary(path) -> dict:
    """{(variant, class): {metric: value}} from the footer of a written evaluation.tsv."""
    try:
        with open(path, encoding='utf-8') as handle:
            footer = [line[1:].split() for line in handle if line.startswith('#')]
    except OSError as exc:
        raise InputError(f"cannot read recorded report {path}: {exc}") from exc
    summary = {}
    for fields in footer:
        values = dict(f.split('=', 1) for f in fields if '=' in f)
        if 'variant' not in values or 'class' not in values:
            continue
        try:
            summary[(values['variant'], values['class'])] = {m: float(values[m]) for m in REGRESSION_METRICS}
        except (KeyError, ValueError) as exc:
            raise InputError(f"malformed summary line in {path}: {' '.join(fields)}") from exc
    if not summary:
        raise InputError(f"{path} has no summary footer")
    return summary


# ── Per-mixture work ──────────────────────────────────────────────────────────

def _estimates(sample, net, variants, seed: int) -> dict:
    """{variant: [waveform per source]} for one mixture; runs on the calling thread."""
    sources = [clip.wave for clip in sample.clips]
    estimates = {}
    if MIXTURE in variants:
        estimates[MIXTURE] = [sample.mixture] * sample.k
    if ORACLE in variants:
        spec = stft(sample.mixture)
        estimates[ORACLE] = [reconstruct(spec, mask, len(sample.mixture))
                             for mask in ground_truth_masks(sources, spec)]
    if MODEL in variants:
        cues = [SourceCue(o, m, c) for o, m, c in
                zip(sample.object_features, sample.motion_features, sample.class_ids)]
        result = model_forward(net, sample.mixture, cues, rng=np.random.default_rng(derive_seed(seed, 31)))
        estimates[MODEL] = result.waveforms
    return estimates


def _score(sample, estimates: dict, filter_len: int) -> list[ScoreRow]:
    references = [clip.wave for clip in sample.clips]
    rows = []
    for variant, waves in estimates.items():
        for clip, score in zip(sample.clips, bss_eval_sources(references, waves, filter_len)):
            rows.append(ScoreRow(clip.clip_id, clip.class_id, score.sdr, score.sir, score.sar, variant))
    return rows


def evaluate_set(net, corpus, split: str = 'test', k: int = 2, n_mixtures: int = 20, seed: int = 0,
                 variants=None, classes=None, filter_len: int = FILTER_LEN, workers: int = None,
                 anchors=None) -> EvaluationReport:
    """
    Score `n_mixtures` seeded K-mixtures drawn from `split`. With `anchors`
    every mixture contains one of those classes.

    Separation runs on the calling thread in mixture order; BSS-eval
    scoring is spread over a thread pool. Rows come back in draw order, so
    the report is a pure function of (weights, corpus, split, seed).

    Raises:
      InputError: the split (restricted to `classes`) holds no clips, or the
      model variant is requested without a network.
    """
    variants = tuple(variants or ((MODEL, MIXTURE, ORACLE) if net is not None else (MIXTURE, ORACLE)))
    if MODEL in variants and net is None:
        raise InputError("the model variant needs a network")
    if not corpus.records(split, classes):
        raise InputError(f"split '{split}' of {corpus.root} has no clips")
    sampler = MixSampler(corpus, split, k=k, classes=classes, anchors=anchors)
    workers = workers or settings.WORKERS

    report = EvaluationReport()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = []
        for mixture_seed in spawn_seeds(seed, n_mixtures):
            sample = sampler.sample(mixture_seed)
            futures.append(pool.submit(_score, sample, _estimates(sample, net, variants, mixture_seed), filter_len))
        for future in futures:
            report.rows.extend(future.result())
    for variant in variants:
        logger.info('%s: median SDR %.2f dB over %d sources', variant, report.median('sdr', variant),
                    len(report.select(variant)))
    return report

"""
Ablation runs: train each named variant under the same seed and budget and
compare held-out SDR/SIR/SAR medians.

Variants override the base model/train configs:
  visual, random                        query assignment policy
  motion_self_audio, self_motion_audio,
  dual_stream, self_audio               decoder layout
  contrastive                           contrastive loss with the HTL ramp
  wo_lrn                                contrastive, no learnable query projection
  wo_adpt                               contrastive, fixed weight instead of the ramp
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from apps.bsseval.evaluation import MODEL, evaluate_set
from apps.core.io import write_table
from apps.core.seeding import derive_seed
from apps.separator.config import Assignment, DecoderLayout
from apps.training.engine import train
from apps.training.exceptions import ConfigError

logger = logging.getLogger(__name__)

VARIANTS = {
    'visual': ({'assignment': Assignment.VISUAL}, {}),
    'random': ({'assignment': Assignment.RANDOM}, {}),
    'motion_self_audio': ({'layout': DecoderLayout.MOTION_SELF_AUDIO}, {}),
    'self_motion_audio': ({'layout': DecoderLayout.SELF_MOTION_AUDIO}, {}),
    'dual_stream': ({'layout': DecoderLayout.DUAL_STREAM}, {}),
    'self_audio': ({'layout': DecoderLayout.SELF_AUDIO}, {}),
    'contrastive': ({}, {'contrastive': True}),
    'wo_lrn': ({}, {'contrastive': True, 'learnable_projection': False}),
    'wo_adpt': ({}, {'contrastive': True, 'adaptive': False}),
}

# (lower, higher, strict): the first variant's median SDR must stay below the second's.
ORDER_CHECKS = (
    ('random', 'visual', True),
    ('self_audio', 'motion_self_audio', False),
)

REPORT_HEADER = ('variant', 'median_sdr', 'median_sir', 'median_sar', 'mean_sdr', 'mean_sir', 'mean_sar')


@dataclass(frozen=True)
class AblationRow:
    variant: str
    median_sdr: float
    median_sir: float
    median_sar: float
    mean_sdr: float
    mean_sir: float
    mean_sar: float

    def as_row(self) -> tuple:
        return (self.variant, *(f'{getattr(self, name):.4f}' for name in REPORT_HEADER[1:]))


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)      # (description, passed)

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.checks)

    def write(self, path) -> None:
        footer = [f"check {text}: {'ok' if ok else 'FAILED'}" for text, ok in self.checks]
        write_table(path, REPORT_HEADER, [r.as_row() for r in self.rows], footer=footer)


def variant_configs(name: str, model_config, train_config):
    try:
        model_overrides, train_overrides = VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation variant '{name}' (known: {', '.join(VARIANTS)})") from None
    return replace(model_config, **model_overrides), replace(train_config, **train_overrides)


def order_checks(rows: dict) -> list[tuple]:
    checks = []
    for lower, higher, strict in ORDER_CHECKS:
        if lower not in rows or higher not in rows:
            continue
        a, b = rows[lower].median_sdr, rows[higher].median_sdr
        passed = a < b if strict else a <= b
        text = f"{lower} {'<' if strict else '<='} {higher} ({a:.2f} vs {b:.2f} dB)"
        if not passed:
            logger.warning('ablation ordering failed: %s', text)
        checks.append((text, passed))
    return checks


def ablate(corpus, model_config, train_config, variants, out_dir=None, eval_mixtures: int = 32,
           workers: int = None) -> AblationReport:
    """
    Train and evaluate every variant in `variants`. Variants that resolve
    to the same configs share one run, so their rows are identical.
    """
    variants = list(variants)
    resolved = {name: variant_configs(name, model_config, train_config) for name in variants}
    cache, rows = {}, {}
    for name in variants:
        key = resolved[name]
        if key not in cache:
            variant_dir = Path(out_dir) / name if out_dir is not None else None
            logger.info('ablation variant %s', name)
            run = train(corpus, key[0], key[1], out_dir=variant_dir, workers=workers)
            report = evaluate_set(run.net, corpus, 'test', k=key[1].k, n_mixtures=eval_mixtures,
                                  seed=derive_seed(key[1].seed, 99), variants=(MODEL,),
                                  classes=[c for c in corpus.class_ids('test') if c not in key[1].exclude_classes],
                                  workers=workers)
            cache[key] = report
        report = cache[key]
        rows[name] = AblationRow(name, *(report.median(m, MODEL) for m in ('sdr', 'sir', 'sar')),
                                 *(report.mean(m, MODEL) for m in ('sdr', 'sir', 'sar')))
    result = AblationReport(rows=[rows[name] for name in variants], checks=order_checks(rows))
    if out_dir is not None:
        result.write(Path(out_dir) / 'ablation.tsv')
    return result

"""
Mix-and-Separate training.

Every step draws `batch` seeded K-mixtures from the train split, predicts
the masks of the assigned queries, and accumulates gradients of

  L_verify = w_sep·L_sep + w_contras·L_contras

before one AdamW step on the transformer side (queries, positional
embeddings, decoder, mask head) and one Adam step on the U-Net and the
contrastive projection. Mixture preparation runs ahead on worker threads;
results are consumed in draw order so runs are reproducible.

Public API:
  Trainer(corpus, model_config, train_config, out_dir=None, net=None)
  trainer.fit() → TrainingRun
  train(corpus, model_config, train_config, out_dir) → TrainingRun
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.conf import settings

from apps.bsseval.evaluation import MODEL, evaluate_set
from apps.core.checkpoint import save_checkpoint
from apps.core.io import write_json
from apps.core.seeding import derive_seed, generator
from apps.dsp.engine import ground_truth_masks
from apps.separator.config import Assignment
from apps.separator.inference import network_features
from apps.separator.network import IQueryNet
from apps.separator.queries import assign_queries
from apps.synthdata.sampler import MixSampler, prefetch
from apps.tensorcore import ops
from apps.tensorcore.optim import Adam, AdamW, MultiStepSchedule
from apps.tensorcore.tensor import backward
from apps.training.config import TrainConfig
from apps.training.exceptions import ConfigError, NumericError
from apps.training.losses import (
    ContrastiveProjection, LossReport, htl_weights, loss_contrastive, loss_sep, verify_loss,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ('epoch', 'step', 'L_sep', 'L_contras', 'w_contras', 'val_SDR')
BEST_CHECKPOINT = 'best.iqry'
LAST_CHECKPOINT = 'last.iqry'
METRICS_FILE = 'metrics.tsv'
NAN_DUMP = 'numeric_failure.json'
PREFETCH_DEPTH = 8


@dataclass(frozen=True, eq=False)
class PreparedMixture:
    """Everything a training step needs from one mixture, as plain arrays."""
    seed: int
    class_ids: list
    features: np.ndarray
    object_features: np.ndarray
    motion_features: tuple
    targets: list


@dataclass
class EpochRecord:
    epoch: int
    step: int
    l_sep: float
    l_contras: float
    w_contras: float
    val_sdr: float

    def as_row(self) -> tuple:
        return (self.epoch, self.step, f'{self.l_sep:.6f}', f'{self.l_contras:.6f}', f'{self.w_contras:.4f}',
                '' if math.isnan(self.val_sdr) else f'{self.val_sdr:.4f}')


@dataclass
class TrainingRun:
    net: IQueryNet
    projection: ContrastiveProjection = None
    history: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    best_epoch: int = None
    best_val_sdr: float = float('nan')
    checkpoint_path: Path = None


class Trainer:
    def __init__(self, corpus, model_config, train_config: TrainConfig, out_dir=None, net: IQueryNet = None,
                 workers: int = None, anchors=None):
        self.corpus = corpus
        self.anchors = tuple(anchors or ())
        self.config = train_config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.workers = workers or settings.WORKERS
        self.net = net if net is not None else IQueryNet(model_config, seed=derive_seed(train_config.seed, 1))
        self.classes = [c for c in corpus.class_ids('train') if c not in set(train_config.exclude_classes)]
        unnamed = [c for c in self.classes if c not in self.net.queries.query_map()]
        if unnamed and self.net.config.assignment == Assignment.VISUAL:
            raise ConfigError(f"classes {unnamed} have no query among {self.net.queries.columns} columns")
        self.sampler = MixSampler(corpus, 'train', k=train_config.k, classes=self.classes,
                                  jitter=train_config.object_jitter, anchors=self.anchors)

        self.projection = None
        if train_config.contrastive:
            self.projection = ContrastiveProjection(self.net.config.channels, self.net.config.embed_dim,
                                                    generator(train_config.seed, 2),
                                                    learnable=train_config.learnable_projection)
        other = self.net.unet_parameters() + (self.projection.parameters() if self.projection else [])
        self.transformer_opt = AdamW(self.net.transformer_parameters(), lr=train_config.lr_transformer,
                                     weight_decay=train_config.weight_decay)
        self.other_opt = Adam(other, lr=train_config.lr_other)
        self.schedules = {
            'transformer': (self.transformer_opt, MultiStepSchedule(train_config.lr_transformer,
                                                                    train_config.lr_transformer_milestones,
                                                                    train_config.lr_gamma)),
            'other': (self.other_opt, MultiStepSchedule(train_config.lr_other, train_config.lr_other_milestones,
                                                        train_config.lr_gamma)),
        }

    @property
    def optimizers(self) -> dict:
        return {name: opt for name, (opt, _) in self.schedules.items()}

    # ── Data ─────────────────────────────────────────────────────────────────

    def mixture_seed(self, epoch: int, step: int, item: int) -> int:
        return derive_seed(self.config.seed, 11, epoch, step, item)

    def prepare(self, seed: int) -> PreparedMixture:
        sample = self.sampler.sample(seed)
        spec, features = network_features(sample.mixture)
        targets = [m.values for m in ground_truth_masks([c.wave for c in sample.clips], spec)]
        return PreparedMixture(seed, sample.class_ids, features, sample.object_features,
                               sample.motion_features, targets)

    # ── Steps ────────────────────────────────────────────────────────────────

    def sample_losses(self, item: PreparedMixture, epoch: int):
        """(L_sep, L_contras or None) for one mixture, as graph-connected Tensors."""
        rng = generator(item.seed, 12)
        indices = assign_queries(self.net.queries, item.class_ids, self.net.config.assignment, rng)
        objects, motions = list(item.object_features), list(item.motion_features)
        out = self.net(item.features, objects, motions, indices, columns=indices, detach_unassigned=True)
        l_sep = loss_sep(out.masks, item.targets, range(len(indices)))
        l_contras = None
        if self.projection is not None and htl_weights(epoch, self.config)[1] > 0:
            # contrastive negatives span every query column: decoded again without the cut
            query_embeddings = self.net.decode(objects, motions, indices, out.audio_features)
            l_contras = loss_contrastive(out.audio_embeddings, out.masks, query_embeddings, indices,
                                         self.projection, self.config.temperature)
        return l_sep, l_contras

    def train_step(self, items, epoch: int, step: int) -> LossReport:
        w_sep, w_contras = htl_weights(epoch, self.config)
        for opt in self.optimizers.values():
            opt.zero_grad()
        total_sep = total_con = 0.0
        for item in items:
            l_sep, l_contras = self.sample_losses(item, epoch)
            loss = ops.mul(verify_loss(l_sep, l_contras, w_sep, w_contras), 1.0 / len(items))
            value = loss.item()
            if not np.isfinite(value):
                self._numeric_abort(epoch, step, item, l_sep, l_contras)
            backward(loss)
            total_sep += l_sep.item()
            total_con += l_contras.item() if l_contras is not None else 0.0
        for opt in self.optimizers.values():
            opt.step()
        return LossReport.build(epoch, step, total_sep / len(items), total_con / len(items), w_sep, w_contras)

    def _numeric_abort(self, epoch, step, item, l_sep, l_contras):
        dump = {
            'epoch': epoch, 'step': step, 'mixture_seed': item.seed, 'class_ids': item.class_ids,
            'l_sep': l_sep.item(), 'l_contras': l_contras.item() if l_contras is not None else None,
            'lr': {name: opt.lr for name, opt in self.optimizers.items()},
        }
        if self.out_dir is not None:
            write_json(self.out_dir / NAN_DUMP, dump)
        logger.error('non-finite loss at epoch %d step %d, mixture seed %d', epoch, step, item.seed)
        raise NumericError(f"non-finite loss at epoch {epoch} step {step} (mixture seed {item.seed})")

    # ── Epochs ───────────────────────────────────────────────────────────────

    def validate(self) -> float:
        if not self.config.val_mixtures:
            return float('nan')
        classes = [c for c in self.corpus.class_ids('val') if c in set(self.classes)]
        report = evaluate_set(self.net, self.corpus, 'val', k=self.config.k, n_mixtures=self.config.val_mixtures,
                              seed=derive_seed(self.config.seed, 77), variants=(MODEL,), classes=classes,
                              workers=self.workers, anchors=self.anchors)
        return report.median('sdr', MODEL)

    def _write_metrics(self, record: EpochRecord, first: bool):
        if self.out_dir is None:
            return
        with open(self.out_dir / METRICS_FILE, 'w' if first else 'a', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle, delimiter='\t', lineterminator='\n')
            if first:
                writer.writerow(METRICS_HEADER)
            writer.writerow(record.as_row())

    def run_epoch(self, epoch: int, run: TrainingRun) -> EpochRecord:
        for opt, schedule in self.schedules.values():
            schedule.apply(opt, epoch)
        batch = self.config.batch
        seeds = [self.mixture_seed(epoch, step, i)
                 for step in range(self.config.steps_per_epoch) for i in range(batch)]
        prepared = prefetch(self.prepare, seeds, depth=PREFETCH_DEPTH, workers=self.workers)
        reports = []
        for step in range(self.config.steps_per_epoch):
            items = [next(prepared) for _ in range(batch)]
            reports.append(self.train_step(items, epoch, step))
        prepared.close()
        run.reports.extend(reports)
        record = EpochRecord(
            epoch=epoch,
            step=(epoch + 1) * self.config.steps_per_epoch,
            l_sep=float(np.mean([r.l_sep for r in reports])),
            l_contras=float(np.mean([r.l_contras for r in reports])),
            w_contras=reports[-1].w_contras,
            val_sdr=self.validate(),
        )
        logger.info('epoch %d: L_sep %.4f L_contras %.4f w_contras %.3f lr %.2g/%.2g val SDR %.2f dB',
                    epoch, record.l_sep, record.l_contras, record.w_contras, self.transformer_opt.lr,
                    self.other_opt.lr, record.val_sdr)
        return record

    def fit(self) -> TrainingRun:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        run = TrainingRun(net=self.net, projection=self.projection)
        best_state, best_sdr = None, -math.inf
        validating = self.config.val_mixtures > 0
        for epoch in range(self.config.epochs):
            record = self.run_epoch(epoch, run)
            run.history.append(record)
            self._write_metrics(record, first=epoch == 0)
            if replaces_best(record.val_sdr, best_sdr, validating, best_state is not None):
                run.best_epoch, run.best_val_sdr = epoch, record.val_sdr
                best_sdr = -math.inf if math.isnan(record.val_sdr) else record.val_sdr
                best_state = self.net.state_dict()
                if self.out_dir is not None:
                    run.checkpoint_path = self.out_dir / BEST_CHECKPOINT
                    self.save(run.checkpoint_path, epoch, record.val_sdr)
        if self.out_dir is not None:
            self.save(self.out_dir / LAST_CHECKPOINT, self.config.epochs - 1, run.history[-1].val_sdr)
        self.net.load_state_dict(best_state)
        logger.info('best epoch %d (val SDR %.2f dB)', run.best_epoch, run.best_val_sdr)
        return run

    def save(self, path, epoch: int, val_sdr: float):
        extra = {'epoch': epoch, 'val_sdr': None if math.isnan(val_sdr) else val_sdr, 'seed': self.config.seed,
                 'corpus_seed': self.corpus.seed}
        save_checkpoint(path, self.net, self.config, self.optimizers, extra)


def replaces_best(val_sdr: float, best_sdr: float, validating: bool, have_best: bool) -> bool:
    """
    Without validation the latest epoch is kept. With it, a NaN SDR only
    fills an empty slot and never outranks a finite one.
    """
    if not validating or not have_best:
        return True
    return not math.isnan(val_sdr) and val_sdr > best_sdr


def train(corpus, model_config, train_config: TrainConfig, out_dir=None, net: IQueryNet = None,
          workers: int = None, anchors=None) -> TrainingRun:
    return Trainer(corpus, model_config, train_config, out_dir, net, workers, anchors).fit()

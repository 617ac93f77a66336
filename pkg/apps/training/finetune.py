"""
Audio-prompt fine-tuning: extend a pre-trained network to classes it never
saw by appending one query column per class and training only the query
bank on mixtures that contain a new class.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from apps.bsseval.evaluation import MODEL, EvaluationReport, evaluate_set
from apps.core.io import write_table
from apps.core.seeding import derive_seed
from apps.training.config import TrainConfig
from apps.training.engine import TrainingRun, train
from apps.training.exceptions import InputError

logger = logging.getLogger(__name__)

REPORT_HEADER = ('class', 'stage', 'median_sdr', 'median_sir', 'median_sar', 'mean_sdr', 'count')


@dataclass
class FinetuneResult:
    net: object
    classes: list
    columns: list
    before: EvaluationReport
    after: EvaluationReport
    trainable_parameters: int
    trainable_fraction: float
    frozen_unchanged: bool
    run: TrainingRun = None

    def improvement(self, class_id: int) -> float:
        return self.after.median('sdr', MODEL, class_id) - self.before.median('sdr', MODEL, class_id)

    def rows(self) -> list[tuple]:
        rows = []
        for class_id in self.classes:
            for stage, report in (('before', self.before), ('after', self.after)):
                rows.append((class_id, stage,
                             f"{report.median('sdr', MODEL, class_id):.4f}",
                             f"{report.median('sir', MODEL, class_id):.4f}",
                             f"{report.median('sar', MODEL, class_id):.4f}",
                             f"{report.mean('sdr', MODEL, class_id):.4f}",
                             len(report.select(MODEL, class_id))))
        return rows

    def write(self, path) -> None:
        footer = [
            f'trainable_parameters={self.trainable_parameters}',
            f'trainable_fraction={self.trainable_fraction:.6f}',
            f'frozen_unchanged={self.frozen_unchanged}',
            *(f'class={c} column={col} sdr_gain={self.improvement(c):.4f}' for c, col in zip(self.classes, self.columns)),
        ]
        write_table(path, REPORT_HEADER, self.rows(), footer=footer)


def _evaluate_new(net, corpus, classes, k, n_mixtures, seed, workers) -> EvaluationReport:
    return evaluate_set(net, corpus, 'test', k=k, n_mixtures=n_mixtures, seed=derive_seed(seed, 88),
                        variants=(MODEL,), anchors=classes, workers=workers)


def finetune_prompt(net, corpus, new_classes, train_config: TrainConfig, out_dir=None, eval_mixtures: int = 16,
                    workers: int = None) -> FinetuneResult:
    """
    Append a prompt per class in `new_classes`, freeze everything else and
    train on mixtures anchored on the new classes. New-class SDR on the test
    split is measured with the freshly initialized prompts (before) and with
    the trained ones (after).

    Raises:
      InputError: a new class collides with a class the bank already names,
      or the corpus has no clips of it.
    """
    new_classes = [int(c) for c in new_classes]
    taken = [c for c in new_classes if c in net.queries.query_map()]
    if taken:
        raise InputError(f"classes {taken} already own queries; prompts need held-out classes")
    absent = [c for c in new_classes if c not in corpus.class_ids('train')]
    if absent:
        raise InputError(f"corpus {corpus.root} has no training clips of classes {absent}")

    if not net.finetuning:
        net.enter_finetune()
    columns = net.add_audio_prompt(new_classes, seed=train_config.seed)
    frozen = {name: p.data.copy() for name, p in net.named_parameters() if not p.trainable}

    config = replace(train_config, contrastive=False, exclude_classes=())
    before = _evaluate_new(net, corpus, new_classes, config.k, eval_mixtures, config.seed, workers)
    run = train(corpus, net.config, config, out_dir=out_dir, net=net, workers=workers, anchors=new_classes)
    after = _evaluate_new(net, corpus, new_classes, config.k, eval_mixtures, config.seed, workers)

    params = dict(net.named_parameters())
    unchanged = all(np.array_equal(params[name].data, data) for name, data in frozen.items())
    result = FinetuneResult(
        net=net, classes=new_classes, columns=columns, before=before, after=after,
        trainable_parameters=net.parameter_count(trainable_only=True),
        trainable_fraction=net.trainable_fraction(), frozen_unchanged=unchanged, run=run,
    )
    for class_id in new_classes:
        logger.info('class %d: median SDR %.2f → %.2f dB', class_id,
                    before.median('sdr', MODEL, class_id), after.median('sdr', MODEL, class_id))
    if out_dir is not None:
        result.write(Path(out_dir) / 'finetune_report.tsv')
    return result

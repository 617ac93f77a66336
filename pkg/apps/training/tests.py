import math
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, override_settings

from apps.core.checkpoint import read_checkpoint
from apps.core.exceptions import ConfigError, InputError, NumericError, UsageError
from apps.core.io import read_table
from apps.separator.config import ModelConfig
from apps.separator.network import IQueryNet
from apps.synthdata.config import CorpusConfig
from apps.synthdata.corpus import Corpus, gen_corpus
from apps.tensorcore.tensor import Tensor, backward, default_dtype
from apps.tensorcore.testing import gradient_check
from apps.training.ablation import AblationRow, ablate, order_checks, variant_configs
from apps.training.config import TrainConfig
from apps.training.engine import METRICS_HEADER, Trainer, replaces_best, train
from apps.training.finetune import finetune_prompt
from apps.training.losses import (
    ContrastiveProjection, LossReport, contrastive_from_embeddings, htl_weights, loss_contrastive, loss_sep,
    verify_loss,
)


class Float64Mixin:
    def setUp(self):
        self._dtype = default_dtype(np.float64)
        self._dtype.__enter__()

    def tearDown(self):
        self._dtype.__exit__(None, None, None)


def _tiny_model(n_queries=3, **overrides):
    values = dict(n_queries=n_queries, channels=16, embed_dim=4, heads=2, unet_depth=3, base_channels=2,
                  mask_hidden=16, ffn_mult=2)
    values.update(overrides)
    return ModelConfig(**values)


def _tiny_train(**overrides):
    values = dict(epochs=1, batch=1, steps_per_epoch=2, val_mixtures=1, lr_transformer_milestones=(),
                  lr_other_milestones=(), seed=3)
    values.update(overrides)
    return TrainConfig(**values)


class SeparationLossTests(Float64Mixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        rng = np.random.default_rng(0)
        self.gt = rng.uniform(0.0, 0.9, (2, 4, 5))
        self.pred = Tensor(rng.uniform(0.0, 1.0, (3, 4, 5)), requires_grad=True)

    def test_exact_prediction(self):
        pred = Tensor(np.stack([self.gt[1], np.zeros((4, 5)), self.gt[0]]))
        self.assertEqual(loss_sep(pred, list(self.gt), [2, 0]).item(), 0.0)

    def test_constant_offset(self):
        pred = Tensor(self.gt + 0.1)
        self.assertAlmostEqual(loss_sep(pred, list(self.gt), [0, 1]).item(), 0.2, places=12)

    def test_matches_elementwise_loop(self):
        expected = 0.0
        for source, index in enumerate([2, 0]):
            total = 0.0
            for f in range(4):
                for t in range(5):
                    total += abs(self.pred.data[index, f, t] - self.gt[source, f, t])
            expected += total / 20
        self.assertAlmostEqual(loss_sep(self.pred, list(self.gt), [2, 0]).item(), expected, delta=1e-6)

    def test_unassigned_rows_receive_no_gradient(self):
        loss_sep(self.pred, list(self.gt), [2, 0]).backward()
        self.assertFalse(np.any(self.pred.grad[1]))
        self.assertTrue(np.any(self.pred.grad[0]))

    def test_no_assigned_queries(self):
        with self.assertRaises(UsageError):
            loss_sep(self.pred, [], [])


class ContrastiveLossTests(Float64Mixin, SimpleTestCase):
    def test_equal_similarities_give_log_n(self):
        pooled = Tensor(np.array([[1.0, 2.0], [0.5, -1.0]]))
        queries = Tensor(np.tile([[0.3, 0.7]], (5, 1)))
        loss = contrastive_from_embeddings(pooled, queries, [0, 3], 0.07)
        self.assertAlmostEqual(loss.item(), np.log(5), places=9)

    def test_saturated_match(self):
        pooled = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        queries = Tensor(np.array([[2.0, 0.0], [-3.0, 0.0]]))
        self.assertLess(contrastive_from_embeddings(pooled, queries, [0, 1], 0.07).item(), 1e-6)

    def test_matches_direct_cross_entropy(self):
        rng = np.random.default_rng(4)
        pooled, queries = rng.standard_normal((3, 6)), rng.standard_normal((5, 6))
        assigned = [4, 0, 2]
        unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)
        logits = unit(pooled) @ unit(queries).T / 0.07
        expected = np.mean([np.log(np.exp(row).sum()) - row[j] for row, j in zip(logits, assigned)])
        loss = contrastive_from_embeddings(Tensor(pooled), Tensor(queries), assigned, 0.07)
        self.assertAlmostEqual(loss.item(), expected, delta=1e-6)

    def test_full_loss_gradients(self):
        rng = np.random.default_rng(5)
        audio = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
        masks = Tensor(rng.uniform(0.1, 0.9, (2, 3, 3)), requires_grad=True)
        queries = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
        projection = ContrastiveProjection(8, 4, rng)
        err = gradient_check(lambda: loss_contrastive(audio, masks, queries, [1, 2], projection, 0.5),
                             [audio, masks, queries, projection.linear.weight])
        self.assertLess(err, 1e-4)

    def test_truncating_projection(self):
        projection = ContrastiveProjection(8, 4, np.random.default_rng(0), learnable=False)
        self.assertEqual(projection.parameters(), [])
        rows = Tensor(np.arange(16.0).reshape(2, 8))
        np.testing.assert_array_equal(projection(rows).data, [[0, 1, 2, 3], [8, 9, 10, 11]])

    def test_temperature_must_be_positive(self):
        x = Tensor(np.ones((1, 2)))
        with self.assertRaises(ConfigError):
            loss_contrastive(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((1, 2, 2))), x, [0],
                             ContrastiveProjection(2, 2, np.random.default_rng(0)), temperature=0.0)


class ScheduleTests(SimpleTestCase):
    def setUp(self):
        self.config = TrainConfig(contrastive=True)

    def test_ramp(self):
        self.assertEqual(htl_weights(0, self.config), (1.0, 0.0))
        self.assertEqual(htl_weights(23, self.config), (1.0, 0.0))
        self.assertAlmostEqual(htl_weights(32, self.config)[1], 0.05)
        self.assertAlmostEqual(htl_weights(40, self.config)[1], 0.1)
        self.assertAlmostEqual(htl_weights(79, self.config)[1], 0.1)

    def test_fixed_weight_without_ramp(self):
        self.assertEqual(htl_weights(0, TrainConfig(contrastive=True, adaptive=False)), (1.0, 0.1))

    def test_contrastive_off(self):
        self.assertEqual(htl_weights(60, TrainConfig()), (1.0, 0.0))

    def test_loss_report_identity(self):
        report = LossReport.build(3, 10, 0.4, 1.7, 1.0, 0.05)
        self.assertTrue(report.consistent())
        combined = verify_loss(Tensor(np.array(0.4)), Tensor(np.array(1.7)), 1.0, 0.05)
        self.assertAlmostEqual(combined.item(), report.l_verify, delta=1e-6)


class TrainConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = TrainConfig()
        self.assertEqual((config.epochs, config.batch, config.k), (80, 4, 2))
        self.assertEqual(config.lr_other_milestones, (30, 50))

    def test_milestones_inside_run(self):
        with self.assertRaises(ConfigError):
            TrainConfig(epochs=40)
        TrainConfig(epochs=40, lr_transformer_milestones=(30,), lr_other_milestones=(15, 25))

    def test_invalid_values(self):
        for kwargs in ({'temperature': 0.0}, {'k': 5}, {'lr_other': 0.0}, {'batch': 0}):
            with self.assertRaises(ConfigError):
                TrainConfig(**kwargs)

    def test_text_lists(self):
        self.assertIn('lr_other_milestones=30,50\n', TrainConfig().to_text())
        self.assertIn('exclude_classes=\n', TrainConfig().to_text())


class _CorpusCase(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        gen_corpus(CorpusConfig(n_classes=3, clips_per_class=10, seed=5, seconds=0.5), cls.tmp / 'corpus')
        cls.corpus = Corpus.load(cls.tmp / 'corpus')

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()


@override_settings(FEATURE_DIM=16)
class TrainerTests(_CorpusCase):
    def test_learning_rate_schedule(self):
        trainer = Trainer(self.corpus, _tiny_model(), TrainConfig())
        schedule = trainer.schedules['transformer'][1]
        self.assertAlmostEqual(schedule.lr_at(59), 1e-4)
        self.assertAlmostEqual(schedule.lr_at(60), 1e-5)
        other = trainer.schedules['other'][1]
        self.assertAlmostEqual(other.lr_at(30), 1e-5)
        self.assertAlmostEqual(other.lr_at(50), 1e-6)

    def test_optimizer_groups(self):
        trainer = Trainer(self.corpus, _tiny_model(), TrainConfig(contrastive=True))
        transformer = {p.name for p in trainer.transformer_opt.params}
        other = {p.name for p in trainer.other_opt.params}
        self.assertIn('queries.weight', transformer)
        self.assertTrue(all(n.startswith(('unet.', 'contrast.')) for n in other))
        self.assertIn('contrast.linear.weight', other)
        self.assertTrue(trainer.transformer_opt.decoupled)

    def test_same_seed_same_curves(self):
        first = train(self.corpus, _tiny_model(), _tiny_train(), workers=2)
        second = train(self.corpus, _tiny_model(), _tiny_train(), workers=1)
        self.assertEqual([r.l_sep for r in first.reports], [r.l_sep for r in second.reports])
        self.assertEqual(first.history[0].val_sdr, second.history[0].val_sdr)

    def test_artifacts(self):
        out = self.tmp / 'run'
        run = train(self.corpus, _tiny_model(), _tiny_train(epochs=2), out_dir=out)
        rows = read_table(out / 'metrics.tsv')
        self.assertEqual(tuple(rows[0]), METRICS_HEADER)
        self.assertEqual([r['epoch'] for r in rows], ['0', '1'])
        self.assertTrue((out / 'best.iqry').is_file())
        checkpoint = read_checkpoint(out / 'last.iqry')
        self.assertEqual(set(checkpoint.optimizers), {'transformer', 'other'})
        self.assertIn(run.best_epoch, (0, 1))

    def test_contrastive_reports_are_consistent(self):
        config = _tiny_train(contrastive=True, adaptive=False, val_mixtures=0)
        run = train(self.corpus, _tiny_model(), config)
        self.assertTrue(all(r.consistent() for r in run.reports))
        self.assertTrue(all(r.l_contras > 0 and r.w_contras == 0.1 for r in run.reports))

    def test_fixed_batch_loss_falls(self):
        trainer = Trainer(self.corpus, _tiny_model(), _tiny_train(lr_transformer=3e-3, lr_other=3e-3))
        item = trainer.prepare(trainer.mixture_seed(0, 0, 0))
        losses = [trainer.train_step([item], 0, step).l_sep for step in range(20)]
        self.assertLess(min(losses[-5:]), losses[0])

    def test_non_finite_loss_aborts(self):
        net = IQueryNet(_tiny_model(), seed=0)
        net.queries.weight.data[:] = np.nan
        out = self.tmp / 'nan'
        with self.assertRaises(NumericError) as ctx:
            train(self.corpus, net.config, _tiny_train(), out_dir=out, net=net)
        self.assertEqual(ctx.exception.exit_code, 3)
        self.assertTrue((out / 'numeric_failure.json').is_file())

    def test_nan_validation_never_becomes_best(self):
        trainer = Trainer(self.corpus, _tiny_model(), _tiny_train(epochs=4, steps_per_epoch=1))
        with mock.patch.object(trainer, 'validate', side_effect=[math.nan, 2.0, math.nan, 1.0]):
            run = trainer.fit()
        self.assertEqual((run.best_epoch, run.best_val_sdr), (1, 2.0))

    def test_best_epoch_rule(self):
        self.assertTrue(replaces_best(math.nan, -math.inf, True, False))
        self.assertFalse(replaces_best(math.nan, -math.inf, True, True))
        self.assertTrue(replaces_best(-5.0, -math.inf, True, True))
        self.assertFalse(replaces_best(1.0, 2.0, True, True))
        self.assertTrue(replaces_best(math.nan, 2.0, False, True))

    def _query_gradient(self, config, loss_index):
        trainer = Trainer(self.corpus, _tiny_model(n_queries=5), config)
        item = trainer.prepare(trainer.mixture_seed(0, 0, 0))
        backward(trainer.sample_losses(item, 0)[loss_index])
        assigned = [trainer.net.queries.column_for(c) for c in item.class_ids]
        unassigned = [j for j in range(5) if j not in assigned]
        return trainer.net.queries.weight.grad, assigned, unassigned

    def test_separation_loss_leaves_unassigned_queries_untouched(self):
        grad, assigned, unassigned = self._query_gradient(_tiny_train(), 0)
        self.assertEqual(len(unassigned), 3)
        self.assertFalse(np.any(grad[:, unassigned]))
        self.assertTrue(np.all(np.any(grad[:, assigned], axis=0)))

    def test_contrastive_loss_reaches_every_query(self):
        grad, _, unassigned = self._query_gradient(_tiny_train(contrastive=True, adaptive=False), 1)
        self.assertTrue(np.all(np.any(grad[:, unassigned], axis=0)))

    def test_unnamed_classes_rejected(self):
        with self.assertRaises(ConfigError):
            Trainer(self.corpus, _tiny_model(n_queries=2), TrainConfig())
        Trainer(self.corpus, _tiny_model(n_queries=2), TrainConfig(exclude_classes=(2,)))


@override_settings(FEATURE_DIM=16)
class FinetuneTests(_CorpusCase):
    def test_only_queries_change(self):
        net = IQueryNet(_tiny_model(n_queries=2), seed=0)
        result = finetune_prompt(net, self.corpus, [2], _tiny_train(), eval_mixtures=2)
        self.assertTrue(result.frozen_unchanged)
        self.assertEqual(result.columns, [2])
        self.assertEqual(result.trainable_parameters, 16 * 3)
        self.assertEqual(net.queries.query_map()[2], 2)
        self.assertEqual(len(result.rows()), 2)
        self.assertIn(2, {r.class_id for r in result.after.rows})

    def test_collision(self):
        net = IQueryNet(_tiny_model(n_queries=2), seed=0)
        with self.assertRaises(InputError):
            finetune_prompt(net, self.corpus, [1], _tiny_train())


@override_settings(FEATURE_DIM=16)
class AblationTests(_CorpusCase):
    def test_unknown_variant(self):
        with self.assertRaises(ConfigError):
            variant_configs('transformer_xl', _tiny_model(), _tiny_train())

    def test_variant_overrides(self):
        model, config = variant_configs('wo_lrn', _tiny_model(), _tiny_train())
        self.assertTrue(config.contrastive)
        self.assertFalse(config.learnable_projection)
        model, _ = variant_configs('random', _tiny_model(), _tiny_train())
        self.assertEqual(model.assignment, 'random')

    def test_order_checks_flag_failures(self):
        def row(name, sdr):
            return AblationRow(name, sdr, 0.0, 0.0, sdr, 0.0, 0.0)

        checks = order_checks({'random': row('random', 5.0), 'visual': row('visual', 3.0),
                               'self_audio': row('self_audio', 2.0),
                               'motion_self_audio': row('motion_self_audio', 2.0)})
        self.assertEqual([ok for _, ok in checks], [False, True])

    def test_one_row_per_variant(self):
        out = self.tmp / 'ablation'
        report = ablate(self.corpus, _tiny_model(), _tiny_train(steps_per_epoch=1, val_mixtures=0),
                        ['visual', 'motion_self_audio'], out_dir=out, eval_mixtures=1)
        self.assertEqual([r.variant for r in report.rows], ['visual', 'motion_self_audio'])
        self.assertEqual(report.rows[0].median_sdr, report.rows[1].median_sdr)
        self.assertEqual(len(read_table(out / 'ablation.tsv')), 2)


class VerifyLossTests(SimpleTestCase):
    def test_contrastive_term_skipped_at_zero_weight(self):
        l_sep = Tensor(np.array(0.5, dtype=np.float32))
        self.assertEqual(verify_loss(l_sep, None, 1.0, 0.0).item(), 0.5)
        self.assertEqual(verify_loss(l_sep, Tensor(np.array(9.0, dtype=np.float32)), 1.0, 0.0).item(), 0.5)

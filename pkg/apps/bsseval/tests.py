import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, override_settings

from apps.bsseval import metrics
from apps.bsseval.evaluation import MIXTURE, MODEL, ORACLE, EvaluationReport, ScoreRow, evaluate_set
from apps.core.exceptions import DimensionError, InputError
from apps.core.io import read_table
from apps.dsp.signals import Waveform
from apps.separator.config import ModelConfig
from apps.separator.network import IQueryNet
from apps.synthdata.config import CorpusConfig
from apps.synthdata.corpus import Corpus, gen_corpus


def _tone(cycles, n=4096, phase=0.0):
    return np.sin(2 * np.pi * cycles * np.arange(n) / n + phase)


def _sdr_of(estimate, references, target=0, filter_len=32):
    return metrics.scores(metrics.decompose(estimate, references, target, filter_len)).sdr


class DecomposeTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.refs = [rng.standard_normal(4096), rng.standard_normal(4096)]

    def test_self_projection(self):
        parts = metrics.decompose(self.refs[0], self.refs, 0)
        self.assertLess(np.max(np.abs(parts.e_interf)), 1e-8)
        self.assertLess(np.max(np.abs(parts.e_artif)), 1e-8)
        self.assertEqual(metrics.scores(parts).sdr, metrics.DB_CAP)

    def test_scaled_self_is_absorbed(self):
        parts = metrics.decompose(3.5 * self.refs[1], self.refs, 1, filter_len=64)
        np.testing.assert_allclose(parts.s_target[:4096], 3.5 * self.refs[1], atol=1e-8)
        self.assertEqual(metrics.scores(parts).sdr, metrics.DB_CAP)

    def test_orthogonal_sum_single_tap(self):
        s1, s2 = _tone(5), _tone(11)
        parts = metrics.decompose(s1 + s2, [s1, s2], 0, filter_len=1)
        np.testing.assert_allclose(parts.s_target, s1, atol=1e-9)
        np.testing.assert_allclose(parts.e_interf, s2, atol=1e-9)
        result = metrics.scores(parts)
        self.assertAlmostEqual(result.sdr, 0.0, delta=1e-6)
        self.assertAlmostEqual(result.sir, 0.0, delta=1e-6)
        self.assertEqual(result.sar, metrics.DB_CAP)

    def test_single_tap_matches_vector_projection(self):
        rng = np.random.default_rng(3)
        estimate = rng.standard_normal(4096)
        parts = metrics.decompose(estimate, self.refs, 0, filter_len=1)
        r = self.refs[0]
        np.testing.assert_allclose(parts.s_target, (estimate @ r) / (r @ r) * r, atol=1e-9)

    def test_parts_sum_to_padded_estimate(self):
        estimate = 0.7 * self.refs[0] + 0.2 * self.refs[1] + 0.1 * np.random.default_rng(4).standard_normal(4096)
        parts = metrics.decompose(estimate, self.refs, 0, filter_len=16)
        padded = np.concatenate([estimate, np.zeros(15)])
        self.assertLess(np.max(np.abs(parts.estimate - padded)), 1e-10)

    def test_agrees_with_dense_oracle(self):
        rng = np.random.default_rng(5)
        estimate = 0.8 * self.refs[0] + 0.3 * self.refs[1] + 0.2 * rng.standard_normal(4096)
        for target in (0, 1):
            fast = metrics.scores(metrics.decompose(estimate, self.refs, target, filter_len=128))
            dense = metrics.scores(metrics.decompose_dense(estimate, self.refs, target, filter_len=128))
            for a, b in zip(fast.as_row(), dense.as_row()):
                self.assertAlmostEqual(a, b, delta=1e-6)

    def test_sdr_falls_with_noise(self):
        noise = np.random.default_rng(6).standard_normal(4096)
        values = [_sdr_of(self.refs[0] + level * noise, self.refs) for level in np.geomspace(1e-3, 3.0, 10)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])), values)

    def test_singular_gram_is_flagged(self):
        parts = metrics.decompose(self.refs[0], [self.refs[0], np.zeros(4096)], 0, filter_len=8)
        self.assertTrue(parts.regularized)
        self.assertTrue(np.all(np.isfinite(parts.e_artif)))

    def test_waveform_inputs(self):
        refs = [Waveform(r) for r in self.refs]
        self.assertEqual(_sdr_of(refs[0], refs), metrics.DB_CAP)

    def test_length_mismatch(self):
        with self.assertRaises(DimensionError):
            metrics.decompose(np.ones(100), self.refs, 0)

    def test_bad_target(self):
        with self.assertRaises(InputError):
            metrics.decompose(self.refs[0], self.refs, 2)


class ScoresTests(SimpleTestCase):
    def test_equal_interference(self):
        s = _tone(3, 512)
        result = metrics.scores(metrics.Decomposition(s, s.copy(), np.zeros(512)))
        self.assertAlmostEqual(result.sdr, 0.0, places=9)
        self.assertAlmostEqual(result.sir, 0.0, places=9)
        self.assertEqual(result.sar, 100.0)

    def test_zero_estimate(self):
        zero = np.zeros(4096)
        refs = [np.random.default_rng(1).standard_normal(4096), np.random.default_rng(2).standard_normal(4096)]
        result = metrics.scores(metrics.decompose(zero, refs, 0, filter_len=8))
        self.assertEqual(result.sdr, -100.0)

    def test_random_decomposition_matches_formulas(self):
        rng = np.random.default_rng(7)
        s, i, a = rng.standard_normal((3, 1000))
        result = metrics.scores(metrics.Decomposition(s, i, a))
        energy = lambda x: np.sum(x ** 2)
        self.assertAlmostEqual(result.sdr, 10 * np.log10(energy(s) / energy(i + a)), delta=1e-9)
        self.assertAlmostEqual(result.sir, 10 * np.log10(energy(s) / energy(i)), delta=1e-9)
        self.assertAlmostEqual(result.sar, 10 * np.log10(energy(s + i) / energy(a)), delta=1e-9)

    def test_bss_eval_sources(self):
        s1, s2 = _tone(5), _tone(11)
        results = metrics.bss_eval_sources([s1, s2], [s1, s2], filter_len=4)
        self.assertEqual([r.sdr for r in results], [100.0, 100.0])
        with self.assertRaises(InputError):
            metrics.bss_eval_sources([s1, s2], [s1], filter_len=4)


class ReportTests(SimpleTestCase):
    def test_summary_and_footer(self):
        report = EvaluationReport([
            ScoreRow('c00_0001', 0, 1.0, 2.0, 3.0, MODEL),
            ScoreRow('c01_0001', 1, 3.0, 4.0, 5.0, MODEL),
            ScoreRow('c00_0001', 0, 0.0, 0.0, 100.0, MIXTURE),
        ])
        self.assertEqual(report.median('sdr', MODEL), 2.0)
        self.assertEqual(report.summary()[(MODEL, 0)]['mean_sar'], 3.0)
        self.assertEqual(report.summary()[(MIXTURE, 'all')]['count'], 1)
        self.assertEqual(len(report.footer_lines()), 5)


@override_settings(FEATURE_DIM=16)
class EvaluateSetTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        root = Path(cls._tmp.name) / 'corpus'
        gen_corpus(CorpusConfig(n_classes=3, clips_per_class=10, seed=5, seconds=0.5), root)
        cls.corpus = Corpus.load(root)
        cls.net = IQueryNet(ModelConfig(n_queries=3, channels=16, embed_dim=4, heads=2, unet_depth=3,
                                        base_channels=2, mask_hidden=16, ffn_mult=2), seed=0)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def test_oracle_rows_present_and_deterministic(self):
        first = evaluate_set(self.net, self.corpus, 'test', n_mixtures=2, seed=3, filter_len=32, workers=2)
        second = evaluate_set(self.net, self.corpus, 'test', n_mixtures=2, seed=3, filter_len=32, workers=1)
        self.assertEqual(first.variants(), sorted([MODEL, MIXTURE, ORACLE]))
        self.assertEqual(len(first.select(ORACLE)), 4)
        self.assertEqual(first.rows, second.rows)
        self.assertGreater(first.median('sdr', ORACLE), first.median('sdr', MIXTURE))

    def test_report_file(self):
        report = evaluate_set(None, self.corpus, 'val', n_mixtures=1, seed=1, filter_len=8)
        path = Path(self._tmp.name) / 'report.tsv'
        report.write(path)
        rows = read_table(path)
        self.assertEqual(list(rows[0]), ['clip_id', 'class', 'sdr', 'sir', 'sar', 'variant'])
        self.assertEqual({r['variant'] for r in rows}, {MIXTURE, ORACLE})
        self.assertIn('# variant=oracle class=all', path.read_text())

    def test_empty_split(self):
        with self.assertRaises(InputError):
            evaluate_set(None, self.corpus, 'test', classes=[9])

import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import ConfigError, DimensionError, InputError
from apps.dsp.signals import Waveform
from apps.synthdata.config import CorpusConfig
from apps.synthdata.corpus import Corpus, gen_corpus, read_meta
from apps.synthdata.features import MotionLift, ObjectFeatureBank
from apps.synthdata.instruments import (
    ENVELOPE_ROW, ONSET_ROW, Clip, InstrumentClass, make_instrument_bank, render_clip, spectral_centroid,
)
from apps.synthdata.sampler import MixSampler, mix, prefetch

SR = 11025


def _clip(samples, class_id):
    return Clip(wave=Waveform(np.asarray(samples, dtype=np.float64)), class_id=class_id,
                activity=np.zeros((16, 64)))


class RenderClipTests(SimpleTestCase):
    def setUp(self):
        self.bank = make_instrument_bank(4, seed=11)

    def test_same_seed_is_bit_identical(self):
        a = render_clip(self.bank[0], seed=123, seconds=1.0)
        b = render_clip(self.bank[0], seed=123, seconds=1.0)
        self.assertEqual(a.wave.samples.tobytes(), b.wave.samples.tobytes())
        self.assertEqual(a.activity.tobytes(), b.activity.tobytes())

    def test_different_seeds_differ(self):
        a = render_clip(self.bank[0], seed=1, seconds=1.0)
        b = render_clip(self.bank[0], seed=2, seconds=1.0)
        self.assertFalse(np.array_equal(a.wave.samples, b.wave.samples))

    def test_peak_normalized(self):
        clip = render_clip(self.bank[1], seed=5)
        self.assertEqual(len(clip.wave), 6 * SR)
        self.assertAlmostEqual(float(np.max(np.abs(clip.wave.samples))), 0.5, places=12)

    def test_zero_density_is_silent(self):
        quiet = InstrumentClass(0, harmonics=(1.0,), f0_range=(220.0, 220.0), onset_density=0.0)
        clip = render_clip(quiet, seed=9, seconds=1.0)
        self.assertFalse(np.any(clip.wave.samples))
        self.assertFalse(np.any(clip.activity))

    def test_activity_track_counts_notes(self):
        clip = render_clip(self.bank[2], seed=3)
        self.assertEqual(clip.activity.shape, (16, 64))
        self.assertEqual(int(clip.activity[ONSET_ROW].sum()), len(clip.notes))

    def test_disjoint_bands_have_distant_centroids(self):
        low = InstrumentClass(0, harmonics=(1.0, 0.5, 0.25), f0_range=(200.0, 220.0))
        high = InstrumentClass(1, harmonics=(1.0,), f0_range=(2000.0, 2200.0))
        gap = spectral_centroid(render_clip(high, 4).wave) - spectral_centroid(render_clip(low, 4).wave)
        self.assertGreater(gap, 500.0)

    def test_bank_is_deterministic_and_separated(self):
        again = make_instrument_bank(4, seed=11)
        self.assertEqual(self.bank, again)
        centroids = [inst.nominal_centroid() for inst in self.bank]
        for i in range(4):
            for j in range(i + 1, 4):
                self.assertGreaterEqual(abs(centroids[i] - centroids[j]), 150.0)

    def test_invalid_class(self):
        with self.assertRaises(ConfigError):
            InstrumentClass(0, harmonics=(1.0,), f0_range=(300.0, 100.0))


class MixTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.x = _clip(rng.uniform(-0.5, 0.5, 2048), 0)
        self.y = _clip(rng.uniform(-0.5, 0.5, 2048), 1)

    def test_zero_clip_is_identity(self):
        out = mix([self.x, _clip(np.zeros(2048), 3)])
        np.testing.assert_array_equal(out.mixture.samples, self.x.wave.samples)

    def test_commutative(self):
        self.assertEqual(mix([self.x, self.y]).mixture.samples.tobytes(),
                         mix([self.y, self.x]).mixture.samples.tobytes())

    def test_exact_sum_and_energy_bound(self):
        out = mix([self.x, self.y])
        np.testing.assert_array_equal(out.mixture.samples, self.x.wave.samples + self.y.wave.samples)
        bound = (np.sqrt(self.x.wave.energy()) + np.sqrt(self.y.wave.energy())) ** 2
        self.assertLessEqual(out.mixture.energy(), bound)

    def test_rejections(self):
        with self.assertRaises(InputError):
            mix([self.x, _clip(np.zeros(2048), 0)])
        with self.assertRaises(InputError):
            mix([self.x, _clip(np.zeros(1024), 2)])
        with self.assertRaises(InputError):
            mix([self.x])


class FeatureTests(SimpleTestCase):
    def setUp(self):
        self.bank = ObjectFeatureBank(8, seed=21)

    def test_bases_unit_norm_and_spread(self):
        np.testing.assert_allclose(np.linalg.norm(self.bank.bases, axis=1), 1.0, atol=1e-6)
        cosines = self.bank.bases @ self.bank.bases.T
        off_diagonal = cosines[~np.eye(8, dtype=bool)]
        self.assertTrue(np.all(np.abs(off_diagonal) < 0.3))

    def test_zero_jitter_identical(self):
        np.testing.assert_array_equal(self.bank.feature(3, seed=1, sigma=0.0), self.bank.feature(3, seed=2, sigma=0.0))

    def test_jitter_is_seeded(self):
        np.testing.assert_array_equal(self.bank.feature(3, seed=5), self.bank.feature(3, seed=5))
        self.assertFalse(np.array_equal(self.bank.feature(3, seed=5), self.bank.feature(3, seed=6)))

    def test_unknown_class(self):
        with self.assertRaises(InputError):
            self.bank.feature(8, seed=0)

    def test_jitter_std_per_component(self):
        offsets = np.stack([self.bank.feature(2, seed=s) - self.bank.base(2) for s in range(40)])
        self.assertAlmostEqual(float(offsets.std()), 0.1, delta=0.005)
        self.assertAlmostEqual(float(offsets.mean()), 0.0, delta=0.005)

    def test_jittered_features_stay_nearest_their_class(self):
        x = np.stack([self.bank.feature(c, seed=100 * c + i) for c in range(8) for i in range(20)])
        predicted = np.argmax(x @ self.bank.bases.T, axis=1)
        self.assertGreaterEqual(np.mean(predicted == np.repeat(np.arange(8), 20)), 0.99)

    def test_motion_lift_is_linear(self):
        lift = MotionLift(seed=4)
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((16, 64)), rng.standard_normal((16, 64))
        self.assertFalse(np.any(lift(np.zeros((16, 64)))))
        np.testing.assert_allclose(lift(a + b), lift(a) + lift(b), atol=1e-6)
        self.assertEqual(lift(a).shape, (256, 64))

    def test_motion_lift_shape_checked(self):
        with self.assertRaises(DimensionError):
            MotionLift(seed=4)(np.zeros((8, 64)))

    def test_onset_frames_stand_out(self):
        sparse = InstrumentClass(0, harmonics=(1.0, 0.5), f0_range=(300.0, 400.0),
                                 onset_density=1.0, attack=0.005, decay=0.1)
        clip = render_clip(sparse, seed=8)
        lifted = np.linalg.norm(MotionLift(seed=4)(clip.activity), axis=0)
        onset = clip.activity[ONSET_ROW] > 0
        silent = ~onset & (clip.activity[ENVELOPE_ROW] < 0.01)
        self.assertTrue(onset.any() and silent.any())
        self.assertGreater(lifted[onset].min(), 2 * lifted[silent].mean())


class CorpusTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = CorpusConfig(n_classes=3, clips_per_class=10, seed=5, seconds=0.5)

    def tearDown(self):
        self._tmp.cleanup()

    def test_split_arithmetic(self):
        counts = CorpusConfig(clips_per_class=100).split_counts()
        self.assertEqual(counts, {'train': 80, 'val': 10, 'test': 10})

    def test_invalid_fractions(self):
        with self.assertRaises(ConfigError):
            CorpusConfig(split_fractions=(0.5, 0.2, 0.2))

    def test_manifests_byte_identical(self):
        gen_corpus(self.config, self.tmp / 'a', workers=2)
        gen_corpus(self.config, self.tmp / 'b', workers=3)
        manifest_a = (self.tmp / 'a' / 'manifest.tsv').read_bytes()
        self.assertEqual(manifest_a, (self.tmp / 'b' / 'manifest.tsv').read_bytes())
        wav = 'train/1/c01_0000.wav'
        self.assertEqual((self.tmp / 'a' / wav).read_bytes(), (self.tmp / 'b' / wav).read_bytes())

    def test_refuses_non_empty_directory(self):
        target = self.tmp / 'c'
        target.mkdir()
        (target / 'stray.txt').write_text('x')
        with self.assertRaises(InputError):
            gen_corpus(self.config, target)
        gen_corpus(self.config, target, force=True)
        self.assertTrue((target / 'manifest.tsv').is_file())

    def test_force_drops_clips_of_a_larger_corpus(self):
        target = self.tmp / 'd'
        gen_corpus(self.config, target)
        (target / 'notes.txt').write_text('kept')
        smaller = CorpusConfig(n_classes=2, clips_per_class=5, seed=5, seconds=0.5)
        gen_corpus(smaller, target, force=True)
        self.assertEqual(len(list(target.rglob('*.wav'))), 10)
        self.assertEqual(len(list(target.rglob('*.meta'))), 10)
        self.assertFalse((target / 'train' / '2').exists())
        self.assertEqual((target / 'notes.txt').read_text(), 'kept')
        self.assertEqual(len(Corpus.load(target).records('train')), 8)

    def test_load_round_trip(self):
        gen_corpus(self.config, self.tmp / 'd')
        corpus = Corpus.load(self.tmp / 'd')
        self.assertEqual((corpus.seed, corpus.n_classes, len(corpus)), (5, 3, 30))
        self.assertEqual(len(corpus.records('train')), 24)
        self.assertEqual(corpus.class_ids('val'), [0, 1, 2])
        record = corpus.records('test', classes=[2])[0]
        clip = corpus.load_clip(record)
        bank = make_instrument_bank(3, seed=5)
        rendered = render_clip(bank[2], record.seed, seconds=0.5)
        self.assertLessEqual(np.max(np.abs(clip.wave.samples - rendered.wave.samples)), 1.0 / 32768)
        np.testing.assert_array_equal(clip.activity, rendered.activity)

    def test_missing_manifest(self):
        with self.assertRaises(InputError):
            Corpus.load(self.tmp)

    def test_malformed_meta(self):
        path = self.tmp / 'bad.meta'
        path.write_text('class_id=1\nseed=2\nd_act=2\nt_prime=2\nactivity=1.0,2.0\n')
        with self.assertRaises(DimensionError):
            read_meta(path)
        path.write_text('class_id=1\nno equals sign here\n')
        with self.assertRaises(InputError):
            read_meta(path)


class SamplerTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.corpus = gen_corpus(CorpusConfig(n_classes=3, clips_per_class=5, seed=2, seconds=0.5),
                                Path(cls._tmp.name) / 'corpus')

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def test_draws_distinct_classes_deterministically(self):
        sampler = MixSampler(self.corpus, 'train', k=2)
        a, b = sampler.sample(17), sampler.sample(17)
        self.assertEqual(len(set(a.class_ids)), 2)
        self.assertEqual(a.class_ids, b.class_ids)
        np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)

    def test_features_attached(self):
        sample = MixSampler(self.corpus, 'train', k=3).sample(1)
        self.assertEqual(sample.object_features.shape, (3, 256))
        self.assertEqual([m.shape for m in sample.motion_features], [(256, 64)] * 3)

    def test_too_few_classes(self):
        with self.assertRaises(ConfigError):
            MixSampler(self.corpus, 'train', k=2, classes=[0])
        with self.assertRaises(ConfigError):
            MixSampler(self.corpus, 'train', k=5)

    def test_anchor_class_in_every_mixture(self):
        sampler = MixSampler(self.corpus, 'train', k=2, anchors=[1])
        for seed in range(8):
            class_ids = sampler.sample(seed).class_ids
            self.assertEqual(class_ids[0], 1)
            self.assertNotIn(1, class_ids[1:])

    def test_anchor_needs_clips_and_partners(self):
        with self.assertRaises(ConfigError):
            MixSampler(self.corpus, 'train', k=2, anchors=[7])
        with self.assertRaises(ConfigError):
            MixSampler(self.corpus, 'train', k=3, classes=[0, 1], anchors=[0])

    def test_prefetch_preserves_order(self):
        self.assertEqual(list(prefetch(lambda x: x * x, range(10), depth=3, workers=4)),
                         [x * x for x in range(10)])

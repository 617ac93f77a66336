from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from apps.core.exceptions import DimensionError, InputError, UsageError
from apps.dsp import engine
from apps.dsp.signals import Grid, MagSpectrogram, Mask, Waveform

SR = 11025
CLIP = 6 * SR


def _sine(freq, seconds=2.0, amplitude=1.0, phase=0.0):
    t = np.arange(int(seconds * SR)) / SR
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t + phase))


def _relative_l2(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


class StftTests(SimpleTestCase):
    def test_six_second_clip_geometry(self):
        spec = engine.stft(Waveform(np.random.default_rng(0).standard_normal(CLIP)))
        self.assertEqual(spec.bins.shape, (512, 256))
        self.assertEqual(spec.valid_frames, 256)

    def test_short_input_padded_to_fixed_frames(self):
        spec = engine.stft(Waveform(np.ones(4096)))
        self.assertEqual(spec.frames, 256)
        self.assertEqual(spec.valid_frames, 4096 // 256 + 1)
        self.assertFalse(np.any(spec.bins[:, spec.valid_frames:]))

    def test_too_short_input(self):
        with self.assertRaises(InputError):
            engine.stft(Waveform(np.ones(1000)))

    def test_zero_input(self):
        spec = engine.stft(Waveform(np.zeros(CLIP)))
        self.assertFalse(np.any(spec.bins))

    def test_bin_centered_sine_concentrates_energy(self):
        k = 40
        spec = engine.stft(_sine(k * SR / 1022), n_frames=None)
        frame = np.abs(spec.bins[:, spec.frames // 2]) ** 2
        self.assertEqual(int(np.argmax(frame)), k)
        self.assertGreaterEqual(frame[k - 1:k + 2].sum() / frame.sum(), 0.95)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal(CLIP), rng.standard_normal(CLIP)
        combined = engine.stft(Waveform(2.5 * x - 0.75 * y)).bins
        separate = 2.5 * engine.stft(Waveform(x)).bins - 0.75 * engine.stft(Waveform(y)).bins
        self.assertLess(_relative_l2(combined, separate), 1e-6)


class IstftTests(SimpleTestCase):
    def test_round_trip_noise_ten_seeds(self):
        for seed in range(10):
            x = np.random.default_rng(seed).standard_normal(CLIP)
            back = engine.istft(engine.stft(Waveform(x), n_frames=None))
            self.assertLess(_relative_l2(back.samples, x), 1e-10, f'seed {seed}')

    def test_round_trip_at_32_bit(self):
        for seed in range(10):
            x = np.random.default_rng(seed).standard_normal(CLIP).astype(np.float32)
            spec = engine.stft(Waveform(x), n_frames=None)
            stored = replace(spec, bins=spec.bins.astype(np.complex64))
            back = engine.istft(stored).samples.astype(np.float32)
            self.assertLess(_relative_l2(back.astype(np.float64), x.astype(np.float64)), 1e-6, f'seed {seed}')

    def test_round_trip_on_covered_region_after_crop(self):
        x = np.random.default_rng(3).standard_normal(CLIP)
        spec = engine.stft(Waveform(x))
        back = engine.istft(spec).samples
        covered = (spec.frames - 1) * spec.hop + spec.n_fft // 2
        self.assertLess(_relative_l2(back[:covered], x[:covered]), 1e-10)
        self.assertFalse(np.any(back[covered + spec.n_fft // 2:]))

    def test_round_trip_with_padding_frames(self):
        x = np.random.default_rng(4).standard_normal(5000)
        back = engine.istft(engine.stft(Waveform(x)))
        self.assertEqual(len(back), 5000)
        self.assertLess(_relative_l2(back.samples, x), 1e-10)

    def test_zero_spectrogram_gives_silence(self):
        spec = engine.stft(Waveform(np.zeros(CLIP)))
        self.assertFalse(np.any(engine.istft(spec).samples))


class LogResampleTests(SimpleTestCase):
    def test_constant_preserved(self):
        out = engine.log_resample(MagSpectrogram(np.full((512, 8), 3.0)))
        self.assertEqual(out.shape, (256, 8))
        np.testing.assert_allclose(out.values, 3.0)
        back = engine.log_resample_inverse(out)
        np.testing.assert_allclose(back.values, 3.0)

    def test_zeros(self):
        out = engine.log_resample(MagSpectrogram(np.zeros((512, 4))))
        self.assertFalse(np.any(out.values))

    def test_smooth_bump_round_trip(self):
        bins = np.arange(512.0)
        bump = np.exp(-0.5 * ((bins - 150.0) / 40.0) ** 2)
        mag = MagSpectrogram(np.tile(bump[:, None], (1, 3)))
        back = engine.log_resample_inverse(engine.log_resample(mag))
        self.assertLess(_relative_l2(back.values, mag.values), 0.05)

    def test_wrong_grid(self):
        with self.assertRaises(UsageError):
            engine.log_resample(MagSpectrogram(np.zeros((256, 4)), Grid.LOGFREQ))
        with self.assertRaises(UsageError):
            engine.log_resample_inverse(MagSpectrogram(np.zeros((512, 4))))

    def test_logfreq_grid_has_256_rows(self):
        with self.assertRaises(DimensionError):
            MagSpectrogram(np.zeros((512, 4)), Grid.LOGFREQ)


class MaskTests(SimpleTestCase):
    def test_single_source_mask_is_one_where_active(self):
        mag = MagSpectrogram(np.array([[0.0, 1e-9, 2.0], [5.0, 0.3, 0.0]]))
        mask = engine.ratio_mask_gt(mag, mag)
        np.testing.assert_array_equal(mask.values, [[0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])

    def test_identical_sources_split_evenly(self):
        wave = _sine(440.0)
        mixture = Waveform(wave.samples + wave.samples)
        masks = engine.ground_truth_masks([wave, wave], engine.stft(mixture, n_frames=None))
        mixture_log = engine.log_resample(engine.stft(mixture, n_frames=None).magnitude())
        active = mixture_log.values > engine.EPS_DIV
        for mask in masks:
            np.testing.assert_allclose(mask.values[active], 0.5, atol=1e-9)

    def test_disjoint_band_sines_give_indicator_masks(self):
        low, high = _sine(300.0), _sine(2500.0, amplitude=0.7)
        mixture = Waveform(low.samples + high.samples)
        spec = engine.stft(mixture, n_frames=None)
        mask_low, mask_high = engine.ground_truth_masks([low, high], spec)
        low_log = engine.log_resample(engine.stft(low, n_frames=None).magnitude()).values
        high_log = engine.log_resample(engine.stft(high, n_frames=None).magnitude()).values
        mixture_log = engine.log_resample(spec.magnitude()).values
        active = mixture_log > 1e-3 * mixture_log.max()
        self.assertLess(np.abs(mask_low.values - (low_log > high_log))[active].mean(), 0.05)
        self.assertLess(np.abs(mask_high.values - (high_log > low_log))[active].mean(), 0.05)

    def test_masks_bounded(self):
        rng = np.random.default_rng(0)
        mask = engine.ratio_mask_gt(MagSpectrogram(rng.uniform(0, 5, (256, 16)), Grid.LOGFREQ),
                                    MagSpectrogram(rng.uniform(0, 1, (256, 16)), Grid.LOGFREQ))
        self.assertTrue(np.all((mask.values >= 0) & (mask.values <= 1)))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            engine.ratio_mask_gt(MagSpectrogram(np.ones((512, 3))), MagSpectrogram(np.ones((512, 4))))
        with self.assertRaises(DimensionError):
            engine.apply_mask(MagSpectrogram(np.ones((256, 3)), Grid.LOGFREQ), Mask.full(1.0, 4))

    def test_apply_ones_and_zeros(self):
        mixture = MagSpectrogram(np.random.default_rng(1).uniform(0, 2, (256, 8)), Grid.LOGFREQ)
        np.testing.assert_array_equal(engine.apply_mask(mixture, Mask.full(1.0, 8)).values, mixture.values)
        self.assertFalse(np.any(engine.apply_mask(mixture, Mask.full(0.0, 8)).values))

    def test_ground_truth_mask_recovers_min(self):
        rng = np.random.default_rng(2)
        source = MagSpectrogram(rng.uniform(0, 2, (256, 8)), Grid.LOGFREQ)
        mixture = MagSpectrogram(rng.uniform(0, 2, (256, 8)), Grid.LOGFREQ)
        out = engine.apply_mask(mixture, engine.ratio_mask_gt(source, mixture))
        np.testing.assert_allclose(out.values, np.minimum(source.values, mixture.values), rtol=1e-12)

    def test_unclamped_mask_reproduces_additive_source(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0, 1, (512, 10)), rng.uniform(0, 1, (512, 10))
        a[0, :3] = 0.0
        b[0, :3] = 0.0
        source, mixture = MagSpectrogram(a), MagSpectrogram(a + b)
        out = engine.apply_mask(mixture, engine.ratio_mask_gt(source, mixture, clamp=False))
        active = mixture.values > engine.EPS_DIV
        np.testing.assert_allclose(out.values[active], a[active], rtol=1e-12)
        self.assertTrue(np.all(out.values >= 0))


class ReconstructTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        self.mixture = Waveform(rng.standard_normal(3 * SR))
        self.spec = engine.stft(self.mixture, n_frames=None)

    def test_all_ones_mask_returns_mixture(self):
        out = engine.reconstruct(self.spec, Mask.full(1.0, self.spec.frames))
        self.assertLess(_relative_l2(out.samples, self.mixture.samples), 1e-10)

    def test_zero_mask_is_silent(self):
        out = engine.reconstruct(self.spec, Mask.full(0.0, self.spec.frames))
        self.assertFalse(np.any(out.samples))

    def test_mask_geometry_checked(self):
        with self.assertRaises(DimensionError):
            engine.reconstruct(self.spec, Mask.full(1.0, self.spec.frames + 1))
        with self.assertRaises(UsageError):
            engine.reconstruct(self.spec, Mask.full(1.0, self.spec.frames, Grid.LINEAR, rows=512))

    def test_ideal_ratio_mask_separates_two_tones(self):
        t = np.arange(3 * SR) / SR
        low = Waveform(0.4 * np.sin(2 * np.pi * 330 * t) + 0.2 * np.sin(2 * np.pi * 660 * t))
        high = Waveform(0.3 * np.sin(2 * np.pi * 1870 * t) + 0.15 * np.sin(2 * np.pi * 3740 * t))
        mixture = Waveform(low.samples + high.samples)
        spec = engine.stft(mixture, n_frames=None)
        for wave, mask in zip((low, high), engine.ground_truth_masks([low, high], spec)):
            estimate = engine.reconstruct(spec, mask).samples
            error = wave.samples - estimate
            sdr = 10 * np.log10(wave.energy() / np.dot(error, error))
            self.assertGreaterEqual(sdr, 10.0)


class WaveformTests(SimpleTestCase):
    def test_non_finite_rejected(self):
        with self.assertRaises(InputError):
            Waveform(np.array([0.0, np.nan]))

    def test_sample_rate_positive(self):
        with self.assertRaises(InputError):
            Waveform(np.zeros(4), sample_rate=0)

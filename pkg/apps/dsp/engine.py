"""
Spectral engine: waveform ↔ time-frequency conversion and ratio masking.

Public API:
  stft(wave, n_frames=SPEC_FRAMES)
  istft(spec, out_len=None)
  log_resample(mag) / log_resample_inverse(mag)
  ratio_mask_gt(source_mag, mixture_mag, clamp=True)
  apply_mask(mixture_mag, mask)
  reconstruct(mixture_spec, mask, out_len=None)
  analyse(wave)                   → (ComplexSpectrogram, log-frequency MagSpectrogram)
  ground_truth_masks(sources, mixture_spec)
"""
from functools import lru_cache

import numpy as np
from django.conf import settings
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from apps.dsp.exceptions import DimensionError, InputError, UsageError
from apps.dsp.signals import ComplexSpectrogram, Grid, LOGFREQ_BINS, MagSpectrogram, Mask, Waveform

EPS_DIV = 1e-8
# Overlap-add normalizer below this is treated as uncovered and zero-filled.
NORM_FLOOR = 1e-10

_KEEP_NATURAL = object()


def _geometry():
    return getattr(settings, 'N_FFT', 1022), getattr(settings, 'HOP_LENGTH', 256)


@lru_cache(maxsize=4)
def _window(n_fft: int) -> np.ndarray:
    window = get_window('hann', n_fft, fftbins=True)
    window.setflags(write=False)
    return window


# ── STFT / iSTFT ──────────────────────────────────────────────────────────────

def stft(wave: Waveform, n_frames=_KEEP_NATURAL) -> ComplexSpectrogram:
    """
    Center-padded (reflect, n_fft/2 each side) Hann STFT, one rfft per hop.

    The frame count is cropped or zero-padded to `n_frames` (settings
    SPEC_FRAMES by default); pass None to keep the natural count.

    Raises:
      InputError: input shorter than one window.
    """
    n_fft, hop = _geometry()
    if n_frames is _KEEP_NATURAL:
        n_frames = getattr(settings, 'SPEC_FRAMES', 256)
    x = wave.samples
    if x.size < n_fft:
        raise InputError(f"waveform of {x.size} samples is shorter than the {n_fft}-sample window")

    pad = n_fft // 2
    padded = np.pad(x, pad, mode='reflect')
    frames = sliding_window_view(padded, n_fft)[::hop]
    bins = np.fft.rfft(frames * _window(n_fft), axis=-1).T
    natural = bins.shape[1]

    if n_frames is not None:
        if natural >= n_frames:
            bins = bins[:, :n_frames]
        else:
            bins = np.pad(bins, ((0, 0), (0, n_frames - natural)))
    return ComplexSpectrogram(bins, n_fft=n_fft, hop=hop, length=x.size,
                              valid_frames=natural, sample_rate=wave.sample_rate)


def istft(spec: ComplexSpectrogram, out_len: int = None) -> Waveform:
    """
    Weighted overlap-add inverse of stft(). Only the valid (non-padding)
    frames contribute; samples no frame covers come back as zeros.
    """
    n_fft, hop = spec.n_fft, spec.hop
    out_len = spec.length if out_len is None else out_len
    window = _window(n_fft)
    pad = n_fft // 2
    used = spec.valid_frames

    frames = np.fft.irfft(spec.bins[:, :used].T, n=n_fft, axis=-1) * window
    total = max((used - 1) * hop + n_fft, out_len + 2 * pad) if used else out_len + 2 * pad
    signal = np.zeros(total)
    norm = np.zeros(total)
    if used:
        index = np.arange(used)[:, None] * hop + np.arange(n_fft)
        np.add.at(signal, index, frames)
        np.add.at(norm, index, np.broadcast_to(window * window, frames.shape))

    signal, norm = signal[pad:pad + out_len], norm[pad:pad + out_len]
    covered = norm > NORM_FLOOR
    out = np.zeros(out_len)
    out[covered] = signal[covered] / norm[covered]
    return Waveform(out, spec.sample_rate)


# ── Log-frequency resampling ──────────────────────────────────────────────────

def _interp_matrix(targets: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Row i holds the linear-interpolation weights of targets[i] over knots (ends clamped)."""
    basis = np.eye(knots.size)
    return np.stack([np.interp(targets, knots, column) for column in basis], axis=1)


@lru_cache(maxsize=4)
def resample_matrices(n_linear: int, n_log: int = LOGFREQ_BINS):
    """
    (forward n_log×n_linear, inverse n_linear×n_log). Log bin centers are
    geometrically spaced from linear bin 1 to bin n_linear − 1.
    """
    linear = np.arange(n_linear, dtype=np.float64)
    centers = np.geomspace(1.0, n_linear - 1, n_log)
    forward = _interp_matrix(centers, linear)
    inverse = _interp_matrix(linear, centers)
    forward.setflags(write=False)
    inverse.setflags(write=False)
    return forward, inverse


def log_resample(mag: MagSpectrogram) -> MagSpectrogram:
    if mag.grid != Grid.LINEAR:
        raise UsageError(f"log_resample expects a linear grid, got {mag.grid}")
    forward, _ = resample_matrices(mag.shape[0])
    return MagSpectrogram(np.maximum(forward @ mag.values, 0.0), Grid.LOGFREQ)


def log_resample_inverse(mag, n_linear: int = None):
    """
    Interpolate a log-frequency grid back to the linear one. Accepts a
    MagSpectrogram or a Mask and returns the same kind.
    """
    if mag.grid != Grid.LOGFREQ:
        raise UsageError(f"log_resample_inverse expects a log-frequency grid, got {mag.grid}")
    n_linear = n_linear or _geometry()[0] // 2 + 1
    _, inverse = resample_matrices(n_linear)
    values = inverse @ mag.values
    if isinstance(mag, Mask):
        return Mask(values, Grid.LINEAR)
    return MagSpectrogram(np.maximum(values, 0.0), Grid.LINEAR)


# ── Masks ─────────────────────────────────────────────────────────────────────

def _check_pair(a, b, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what} shape mismatch", a.shape, b.shape)
    if a.grid != b.grid:
        raise UsageError(f"{what} grid mismatch: {a.grid} vs {b.grid}")


def ratio_mask_gt(source: MagSpectrogram, mixture: MagSpectrogram, clamp: bool = True) -> Mask:
    """
    M = S_i / S_mix where S_mix > EPS_DIV, else 0; clamped to [0, 1] unless
    clamp=False.
    """
    _check_pair(source, mixture, 'ratio mask')
    active = mixture.values > EPS_DIV
    ratio = np.divide(source.values, mixture.values, out=np.zeros(mixture.shape), where=active)
    if clamp:
        ratio = np.clip(ratio, 0.0, 1.0)
    return Mask(ratio, mixture.grid)


def apply_mask(mixture: MagSpectrogram, mask: Mask) -> MagSpectrogram:
    _check_pair(mixture, mask, 'apply_mask')
    return MagSpectrogram(mixture.values * np.maximum(mask.values, 0.0), mixture.grid)


def reconstruct(mixture_spec: ComplexSpectrogram, mask: Mask, out_len: int = None) -> Waveform:
    """
    Map a log-frequency mask back to linear bins, scale the mixture
    magnitude, keep the mixture phase and invert.

    Raises:
      UsageError: mask not on the log-frequency grid.
      DimensionError: mask frame count differs from the spectrogram's.
    """
    if mask.grid != Grid.LOGFREQ:
        raise UsageError(f"reconstruct expects a log-frequency mask, got {mask.grid}")
    if mask.shape != (LOGFREQ_BINS, mixture_spec.frames):
        raise DimensionError("mask does not match the mixture spectrogram",
                             mask.shape, (LOGFREQ_BINS, mixture_spec.frames))
    linear = log_resample_inverse(mask, n_linear=mixture_spec.bins.shape[0])
    gain = np.maximum(linear.values, 0.0)
    # |S|·g·e^{i∠S} = S·g for real nonnegative g.
    masked = ComplexSpectrogram(mixture_spec.bins * gain, n_fft=mixture_spec.n_fft, hop=mixture_spec.hop,
                                length=mixture_spec.length, valid_frames=mixture_spec.valid_frames,
                                sample_rate=mixture_spec.sample_rate)
    return istft(masked, out_len)


# ── Pipelines ─────────────────────────────────────────────────────────────────

def analyse(wave: Waveform, n_frames=_KEEP_NATURAL):
    """Mixture front end: complex spectrogram plus its log-frequency magnitude."""
    spec = stft(wave, n_frames)
    return spec, log_resample(spec.magnitude())


def ground_truth_masks(sources, mixture_spec: ComplexSpectrogram):
    """
    Clamped ratio masks on the log-frequency grid, one per source waveform.
    Source magnitudes are taken before mixing.
    """
    mixture_log = log_resample(mixture_spec.magnitude())
    masks = []
    for wave in sources:
        if len(wave) != mixture_spec.length:
            raise InputError(f"source length {len(wave)} differs from mixture length {mixture_spec.length}")
        source_log = log_resample(stft(wave, mixture_spec.frames).magnitude())
        masks.append(ratio_mask_gt(source_log, mixture_log))
    return masks

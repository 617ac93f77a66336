"""
Signal containers passed between the DSP, data and model layers.

All arrays are held as float64 (complex128 for spectra) regardless of the
tensor engine's dtype; the network casts on entry.
"""
from dataclasses import dataclass, field

import numpy as np
from django.db import models

from apps.dsp.exceptions import DimensionError, InputError

DEFAULT_SAMPLE_RATE = 11025
LOGFREQ_BINS = 256


class Grid(models.TextChoices):
    LINEAR = 'linear', 'Linear frequency'
    LOGFREQ = 'logfreq', 'Log frequency'


@dataclass(frozen=True)
class Waveform:
    """Mono signal. Invariants: finite samples, sample_rate > 0."""
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InputError("waveform contains non-finite samples")
        object.__setattr__(self, 'samples', samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


@dataclass(frozen=True)
class ComplexSpectrogram:
    """
    n_fft/2 + 1 bins × frames. `length` is the sample count of the analysed
    signal; frames at index ≥ valid_frames are zero padding added to reach
    the fixed frame count and carry no signal.
    """
    bins: np.ndarray
    n_fft: int
    hop: int
    length: int
    valid_frames: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[0] != self.n_fft // 2 + 1:
            raise DimensionError(f"spectrogram must have {self.n_fft // 2 + 1} bins", bins.shape)
        object.__setattr__(self, 'bins', bins)
        object.__setattr__(self, 'valid_frames', min(self.valid_frames, bins.shape[1]))

    @property
    def frames(self) -> int:
        return self.bins.shape[1]

    def magnitude(self) -> 'MagSpectrogram':
        return MagSpectrogram(np.abs(self.bins), Grid.LINEAR)


@dataclass(frozen=True)
class MagSpectrogram:
    """Nonnegative magnitudes; log-frequency grids always have 256 rows."""
    values: np.ndarray
    grid: Grid = Grid.LINEAR

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError("magnitude spectrogram must be 2-D", values.shape)
        if self.grid == Grid.LOGFREQ and values.shape[0] != LOGFREQ_BINS:
            raise DimensionError(f"log-frequency grid must have {LOGFREQ_BINS} rows", values.shape)
        if np.any(values < 0):
            raise InputError("magnitudes must be nonnegative")
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'grid', Grid(self.grid))

    @property
    def shape(self):
        return self.values.shape

    def log1p(self) -> np.ndarray:
        """Compressed network input log(1 + S); masking uses the linear values."""
        return np.log1p(self.values)


@dataclass(frozen=True)
class Mask:
    """Per-cell gain on a spectrogram grid (log-frequency by default)."""
    values: np.ndarray
    grid: Grid = field(default=Grid.LOGFREQ)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError("mask must be 2-D", values.shape)
        if not np.all(np.isfinite(values)):
            raise InputError("mask contains non-finite values")
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'grid', Grid(self.grid))

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def full(cls, value: float, frames: int, grid: Grid = Grid.LOGFREQ, rows: int = LOGFREQ_BINS):
        return cls(np.full((rows, frames), float(value)), grid)

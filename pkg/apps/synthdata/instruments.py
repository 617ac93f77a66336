"""
Parametric instrument classes and clip rendering.

Each class is an additive-synthesis recipe (harmonic profile, pitch range,
vibrato, note density, attack/decay). A clip is a monophonic note sequence
drawn from a per-clip seed; its activity track is computed from the same
note events, so the motion surrogate never looks at rendered audio.

Public API:
  InstrumentClass, Clip, NoteEvent
  make_instrument_bank(n_classes, seed)
  render_clip(instrument, seed, clip_id='')
  spectral_centroid(wave)
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from apps.core.seeding import generator
from apps.dsp.signals import Waveform
from apps.synthdata.exceptions import ConfigError

logger = logging.getLogger(__name__)

PEAK_LEVEL = 0.5
N_HARMONICS = 12
MIN_CENTROID_GAP_HZ = 150.0
MAX_BANK_ATTEMPTS = 200

# Activity-track layout: onset row, envelope row, then a soft one-hot of log-f0.
ONSET_ROW = 0
ENVELOPE_ROW = 1
PITCH_ROWS = slice(2, None)
PITCH_LOW_HZ = 55.0
PITCH_HIGH_HZ = 1760.0
PITCH_SOFTNESS = 0.5


@dataclass(frozen=True)
class InstrumentClass:
    class_id: int
    harmonics: tuple                    # relative amplitude of harmonics 1..H
    f0_range: tuple                     # (low, high) Hz
    vibrato_rate: float = 5.0           # Hz
    vibrato_depth: float = 0.005        # fraction of f0
    onset_density: float = 2.0          # notes per second
    attack: float = 0.02                # seconds
    decay: float = 0.4                  # seconds

    def __post_init__(self):
        low, high = self.f0_range
        if not 0 < low <= high:
            raise ConfigError(f"class {self.class_id}: invalid f0 range {self.f0_range}")
        if self.onset_density < 0 or self.attack <= 0 or self.decay <= 0:
            raise ConfigError(f"class {self.class_id}: density, attack and decay must be positive")

    def nominal_centroid(self) -> float:
        """Power-weighted harmonic centroid at the geometric mean of the pitch range."""
        amps = np.asarray(self.harmonics, dtype=np.float64)
        f0 = np.sqrt(self.f0_range[0] * self.f0_range[1])
        order = np.arange(1, amps.size + 1)
        power = amps ** 2
        return float(np.sum(power * order * f0) / max(np.sum(power), 1e-12))


@dataclass(frozen=True)
class NoteEvent:
    onset: int          # sample index
    end: int
    f0: float
    amplitude: float


@dataclass(frozen=True, eq=False)
class Clip:
    wave: Waveform
    class_id: int
    activity: np.ndarray        # ACTIVITY_DIM × ACTIVITY_FRAMES
    clip_id: str = ''
    seed: int = 0
    notes: tuple = field(default=(), compare=False, repr=False)


def _draw_instrument(rng: np.random.Generator, class_id: int) -> InstrumentClass:
    center = float(np.exp(rng.uniform(np.log(110.0), np.log(880.0))))
    spread = float(rng.uniform(1.2, 2.0))
    rolloff = rng.uniform(0.4, 2.2)
    formant = rng.integers(1, N_HARMONICS + 1)
    order = np.arange(1, N_HARMONICS + 1)
    profile = order ** -rolloff * (1.0 + 2.0 * np.exp(-0.5 * ((order - formant) / 1.5) ** 2))
    profile /= profile.max()
    return InstrumentClass(
        class_id=class_id,
        harmonics=tuple(float(a) for a in profile),
        f0_range=(center / np.sqrt(spread), center * np.sqrt(spread)),
        vibrato_rate=float(rng.uniform(3.0, 7.0)),
        vibrato_depth=float(rng.uniform(0.0, 0.01)),
        onset_density=float(rng.uniform(1.0, 3.0)),
        attack=float(rng.uniform(0.005, 0.08)),
        decay=float(rng.uniform(0.15, 0.8)),
    )


def make_instrument_bank(n_classes: int, seed: int) -> list[InstrumentClass]:
    """
    n_classes instruments whose nominal centroids are pairwise at least
    MIN_CENTROID_GAP_HZ apart; a class violating the gap is redrawn.

    Raises:
      ConfigError: the gap cannot be met within MAX_BANK_ATTEMPTS draws.
    """
    rng = generator(seed, 101)
    bank = []
    for class_id in range(n_classes):
        for attempt in range(MAX_BANK_ATTEMPTS):
            candidate = _draw_instrument(rng, class_id)
            centroid = candidate.nominal_centroid()
            if all(abs(centroid - other.nominal_centroid()) >= MIN_CENTROID_GAP_HZ for other in bank):
                break
            logger.debug('class %d draw %d rejected (centroid %.0f Hz)', class_id, attempt, centroid)
        else:
            raise ConfigError(f"could not place {n_classes} classes {MIN_CENTROID_GAP_HZ:.0f} Hz apart")
        bank.append(candidate)
    return bank


# ── Rendering ─────────────────────────────────────────────────────────────────

def _note_events(instrument: InstrumentClass, rng: np.random.Generator, n_samples: int, sample_rate: int):
    if instrument.onset_density <= 0:
        return []
    duration = n_samples / sample_rate
    onsets, t = [], float(rng.exponential(0.5 / instrument.onset_density))
    while t < duration:
        onsets.append(int(t * sample_rate))
        t += float(rng.exponential(1.0 / instrument.onset_density)) + 0.05
    low, high = instrument.f0_range
    events = []
    for i, start in enumerate(onsets):
        end = onsets[i + 1] if i + 1 < len(onsets) else n_samples
        f0 = float(np.exp(rng.uniform(np.log(low), np.log(high))))
        events.append(NoteEvent(start, end, f0, float(rng.uniform(0.6, 1.0))))
    return events


def _envelope(instrument: InstrumentClass, length: int, sample_rate: int) -> np.ndarray:
    t = np.arange(length) / sample_rate
    return (1.0 - np.exp(-t / instrument.attack)) * np.exp(-t / instrument.decay)


def _render_note(instrument: InstrumentClass, note: NoteEvent, sample_rate: int) -> np.ndarray:
    length = note.end - note.onset
    t = np.arange(length) / sample_rate
    freq = note.f0 * (1.0 + instrument.vibrato_depth * np.sin(2 * np.pi * instrument.vibrato_rate * t))
    phase = 2 * np.pi * np.cumsum(freq) / sample_rate
    amps = np.asarray(instrument.harmonics)
    order = np.arange(1, amps.size + 1)
    audible = order * note.f0 * (1 + instrument.vibrato_depth) < 0.95 * sample_rate / 2
    partials = np.sin(np.outer(order[audible], phase))
    tone = amps[audible] @ partials
    return note.amplitude * _envelope(instrument, length, sample_rate) * tone


def activity_track(instrument: InstrumentClass, notes, n_samples: int, sample_rate: int,
                   dims: int = None, frames: int = None) -> np.ndarray:
    """dims × frames track of onsets, envelope and log-f0 derived from note events."""
    dims = dims or getattr(settings, 'ACTIVITY_DIM', 16)
    frames = frames or getattr(settings, 'ACTIVITY_FRAMES', 64)
    track = np.zeros((dims, frames))
    edges = np.linspace(0, n_samples, frames + 1).astype(int)
    pitch_bins = dims - 2
    for note in notes:
        frame = min(int(np.searchsorted(edges, note.onset, side='right')) - 1, frames - 1)
        track[ONSET_ROW, frame] += 1.0
        env = np.zeros(n_samples)
        env[note.onset:note.end] = note.amplitude * _envelope(instrument, note.end - note.onset, sample_rate)
        frame_env = np.add.reduceat(env, edges[:-1]) / np.diff(edges)
        track[ENVELOPE_ROW] += frame_env
        position = (np.log(note.f0) - np.log(PITCH_LOW_HZ)) / (np.log(PITCH_HIGH_HZ) - np.log(PITCH_LOW_HZ))
        position = np.clip(position, 0.0, 1.0) * (pitch_bins - 1)
        bump = np.exp(-0.5 * ((np.arange(pitch_bins) - position) / PITCH_SOFTNESS) ** 2)
        track[PITCH_ROWS] += np.outer(bump / bump.sum(), frame_env)
    return track


def render_clip(instrument: InstrumentClass, seed: int, clip_id: str = '',
                seconds: float = None, sample_rate: int = None) -> Clip:
    """
    Deterministic in (instrument, seed): same inputs give bit-identical clips.
    Waveforms are peak-normalized to PEAK_LEVEL; a note-free clip is silent.
    """
    sample_rate = sample_rate or getattr(settings, 'SAMPLE_RATE', 11025)
    seconds = seconds or getattr(settings, 'CLIP_SECONDS', 6)
    n_samples = int(round(seconds * sample_rate))
    rng = np.random.default_rng(seed)
    notes = _note_events(instrument, rng, n_samples, sample_rate)

    samples = np.zeros(n_samples)
    for note in notes:
        samples[note.onset:note.end] += _render_note(instrument, note, sample_rate)
    peak = np.max(np.abs(samples)) if n_samples else 0.0
    if peak > 0:
        samples *= PEAK_LEVEL / peak

    return Clip(
        wave=Waveform(samples, sample_rate),
        class_id=instrument.class_id,
        activity=activity_track(instrument, notes, n_samples, sample_rate),
        clip_id=clip_id,
        seed=int(seed),
        notes=tuple(notes),
    )


def spectral_centroid(wave: Waveform) -> float:
    """Power-weighted mean frequency of the whole clip, in Hz."""
    power = np.abs(np.fft.rfft(wave.samples)) ** 2
    freqs = np.fft.rfftfreq(wave.samples.size, d=1.0 / wave.sample_rate)
    total = power.sum()
    return float((power * freqs).sum() / total) if total > 0 else 0.0

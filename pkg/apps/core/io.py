"""
Artifact I/O: WAV, PGM mask images, TSV/CSV reports and JSON dumps.

Every writer goes through atomic_write(): data lands in a temporary file in
the destination directory and is renamed over the target only on success.
"""
import csv
import io
import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from django.core.serializers.json import DjangoJSONEncoder
from PIL import Image
from scipy.io import wavfile

from apps.core.exceptions import InputError
from apps.dsp.signals import Waveform

PCM_SCALE = 32768.0


@contextmanager
def atomic_write(path, mode: str = 'w', encoding: str = 'utf-8'):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    kwargs = {} if 'b' in mode else {'encoding': encoding, 'newline': ''}
    try:
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ── WAV ───────────────────────────────────────────────────────────────────────

def write_wav(path, wave: Waveform) -> None:
    """16-bit signed PCM, mono."""
    pcm = np.clip(np.round(wave.samples * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1).astype('<i2')
    buffer = io.BytesIO()
    wavfile.write(buffer, int(wave.sample_rate), pcm)
    with atomic_write(path, 'wb') as handle:
        handle.write(buffer.getvalue())


def read_wav(path, expected_rate: int = None) -> Waveform:
    """
    Raises:
      InputError: missing/unreadable file, multi-channel data or a sample
      rate different from expected_rate.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if np.issubdtype(data.dtype, np.integer):
        samples = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, rate)


# ── Images ────────────────────────────────────────────────────────────────────

def write_pgm(path, values: np.ndarray) -> None:
    """
    Binary PGM (P5) of a [0, 1] array, first row at the bottom so low
    frequencies sit at the bottom of the image.
    """
    pixels = np.round(np.clip(np.flipud(np.asarray(values, dtype=np.float64)), 0.0, 1.0) * 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format='PPM')
    with atomic_write(path, 'wb') as handle:
        handle.write(buffer.getvalue())


# ── Tables ────────────────────────────────────────────────────────────────────

def write_table(path, header, rows, delimiter: str = '\t', footer=()) -> None:
    """Header row, data rows, then `# ...` footer lines (TSV by default)."""
    with atomic_write(path) as handle:
        writer = csv.writer(handle, delimiter=delimiter, lineterminator='\n')
        writer.writerow(header)
        writer.writerows(rows)
        for line in footer:
            handle.write(f'# {line}\n')


def read_table(path, delimiter: str = '\t'):
    """Rows as dicts keyed by the header; `#` lines are skipped."""
    try:
        with open(path, encoding='utf-8', newline='') as handle:
            lines = [line for line in handle if not line.startswith('#')]
    except OSError as exc:
        raise InputError(f"cannot read table {path}: {exc}") from exc
    return list(csv.DictReader(lines, delimiter=delimiter))


def write_json(path, payload) -> None:
    with atomic_write(path) as handle:
        json.dump(payload, handle, cls=NumpyJSONEncoder, indent=2, sort_keys=True)


class NumpyJSONEncoder(DjangoJSONEncoder):
    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, Path):
            return str(o)
        return super().default(o)

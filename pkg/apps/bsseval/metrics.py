"""
BSS-eval source metrics.

The estimate is split into a target part, an interference part and an
artifact part by least-squares projection onto the spans of L-tap filtered
references; SDR/SIR/SAR are energy ratios of those parts. Signals are
compared at length n + L - 1 (the estimate is zero padded), so the three
parts always sum back to the padded estimate.

Public API:
  decompose(estimate, references, target_index, filter_len=512) → Decomposition
  decompose_dense(...)                  dense least-squares oracle, same contract
  scores(decomposition) → BssScores
  bss_eval_sources(references, estimates, filter_len=512) → [BssScores]
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.signal import fftconvolve

from apps.bsseval.exceptions import DimensionError, InputError
from apps.dsp.signals import Waveform

logger = logging.getLogger(__name__)

FILTER_LEN = 512
DB_CAP = 100.0
RIDGE = 1e-10


@dataclass(frozen=True, eq=False)
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    regularized: bool = False       # Gram system needed the ridge

    @property
    def estimate(self) -> np.ndarray:
        return self.s_target + self.e_interf + self.e_artif


@dataclass(frozen=True)
class BssScores:
    sdr: float
    sir: float
    sar: float

    def as_row(self) -> tuple:
        return (self.sdr, self.sir, self.sar)


# ── Inputs ────────────────────────────────────────────────────────────────────

def _samples(signal) -> np.ndarray:
    if isinstance(signal, Waveform):
        return signal.samples
    return np.asarray(signal, dtype=np.float64).reshape(-1)


def _prepare(estimate, references, target_index: int, filter_len: int):
    estimate = _samples(estimate)
    refs = np.stack([_samples(r) for r in references]) if len(references) else np.empty((0, 0))
    if refs.shape[0] == 0:
        raise InputError("at least one reference is needed")
    if refs.shape[1] != estimate.size:
        raise DimensionError("estimate and references differ in length", estimate.shape, refs.shape)
    if not 0 <= target_index < refs.shape[0]:
        raise InputError(f"target index {target_index} outside {refs.shape[0]} references")
    if filter_len < 1:
        raise InputError(f"filter length must be positive, got {filter_len}")
    padded = np.concatenate([estimate, np.zeros(filter_len - 1)])
    return padded, refs


# ── Projection ────────────────────────────────────────────────────────────────

def _solve(gram: np.ndarray, rhs: np.ndarray):
    """Solve the normal equations; fall back to a ridge when they are singular."""
    with warnings.catch_warnings():
        warnings.simplefilter('error', linalg.LinAlgWarning)
        try:
            return linalg.solve(gram, rhs, assume_a='sym'), False
        except (linalg.LinAlgError, linalg.LinAlgWarning):
            pass
    scale = max(float(np.trace(gram)) / gram.shape[0], 1.0)
    logger.warning('singular Gram system of size %d, adding a %.0e ridge', gram.shape[0], RIDGE)
    regularized = gram + RIDGE * scale * np.eye(gram.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', linalg.LinAlgWarning)
        return linalg.solve(regularized, rhs, assume_a='sym'), True


def _project(refs: np.ndarray, padded: np.ndarray, filter_len: int):
    """
    Least-squares projection of the padded estimate onto the span of every
    shifted copy (0..L-1 samples) of the references.

    The Gram matrix is block Toeplitz: block (i, j) holds the
    cross-correlations of references i and j at lags -(L-1)..(L-1), all
    obtained from one set of FFTs.
    """
    count, n = refs.shape
    size = n + filter_len - 1
    n_fft = int(2 ** np.ceil(np.log2(size)))
    spectra = np.fft.rfft(refs, n_fft, axis=1)
    estimate_spectrum = np.fft.rfft(padded, n_fft)

    gram = np.zeros((count * filter_len, count * filter_len))
    for i in range(count):
        for j in range(i, count):
            # corr[lag] = Σ_t r_i[t]·r_j[t + lag], negative lags wrapped to the end.
            corr = np.fft.irfft(np.conj(spectra[i]) * spectra[j], n_fft)
            block = linalg.toeplitz(corr[:filter_len], np.concatenate([corr[:1], corr[:-filter_len:-1]]))
            gram[i * filter_len:(i + 1) * filter_len, j * filter_len:(j + 1) * filter_len] = block
            gram[j * filter_len:(j + 1) * filter_len, i * filter_len:(i + 1) * filter_len] = block.T

    rhs = np.concatenate([
        np.fft.irfft(np.conj(spectra[i]) * estimate_spectrum, n_fft)[:filter_len] for i in range(count)
    ])
    coefficients, regularized = _solve(gram, rhs)
    projection = np.zeros(size)
    for i in range(count):
        projection += fftconvolve(refs[i], coefficients[i * filter_len:(i + 1) * filter_len])[:size]
    return projection, regularized


def decompose(estimate, references, target_index: int, filter_len: int = FILTER_LEN) -> Decomposition:
    """
    Split `estimate` into target, interference and artifact parts relative
    to references[target_index].

    Raises:
      InputError: no references, target index out of range, bad filter length.
      DimensionError: estimate and references differ in length.
    """
    padded, refs = _prepare(estimate, references, target_index, filter_len)
    target, flag_target = _project(refs[target_index:target_index + 1], padded, filter_len)
    combined, flag_all = _project(refs, padded, filter_len)
    return Decomposition(s_target=target, e_interf=combined - target, e_artif=padded - combined,
                         regularized=flag_target or flag_all)


def _convolution_matrix(ref: np.ndarray, filter_len: int) -> np.ndarray:
    size = ref.size + filter_len - 1
    matrix = np.zeros((size, filter_len))
    for shift in range(filter_len):
        matrix[shift:shift + ref.size, shift] = ref
    return matrix


def decompose_dense(estimate, references, target_index: int, filter_len: int = FILTER_LEN) -> Decomposition:
    """Same decomposition from explicit convolution matrices and numpy lstsq; slow, used as an oracle."""
    padded, refs = _prepare(estimate, references, target_index, filter_len)
    own = _convolution_matrix(refs[target_index], filter_len)
    every = np.hstack([_convolution_matrix(r, filter_len) for r in refs])
    target = own @ np.linalg.lstsq(own, padded, rcond=None)[0]
    combined = every @ np.linalg.lstsq(every, padded, rcond=None)[0]
    return Decomposition(s_target=target, e_interf=combined - target, e_artif=padded - combined)


# ── Scores ────────────────────────────────────────────────────────────────────

def _ratio_db(numerator: float, denominator: float) -> float:
    if numerator <= 0.0:
        return -DB_CAP
    if denominator <= 0.0:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(numerator / denominator), -DB_CAP, DB_CAP))


def _energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def scores(decomposition: Decomposition) -> BssScores:
    s, i, a = decomposition.s_target, decomposition.e_interf, decomposition.e_artif
    return BssScores(
        sdr=_ratio_db(_energy(s), _energy(i + a)),
        sir=_ratio_db(_energy(s), _energy(i)),
        sar=_ratio_db(_energy(s + i), _energy(a)),
    )


def bss_eval_sources(references, estimates, filter_len: int = FILTER_LEN) -> list[BssScores]:
    """Scores of estimates[j] against references[j] for every source j."""
    references, estimates = list(references), list(estimates)
    if len(references) != len(estimates):
        raise InputError(f"{len(estimates)} estimates for {len(references)} references")
    return [scores(decompose(est, references, j, filter_len)) for j, est in enumerate(estimates)]

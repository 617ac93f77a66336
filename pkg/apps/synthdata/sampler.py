"""
Mix-and-Separate sampling: K clips of distinct classes summed into one
mixture, plus the surrogate visual features of each source.
"""
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from apps.dsp.signals import Waveform
from apps.synthdata.exceptions import ConfigError, InputError

logger = logging.getLogger(__name__)

MIN_SOURCES = 2
MAX_SOURCES = 4
MAX_DRAW_RETRIES = 100


@dataclass(frozen=True, eq=False)
class MixSample:
    clips: tuple
    mixture: Waveform
    object_features: np.ndarray = None      # K × C_O
    motion_features: tuple = None           # K arrays of C_M × T′
    seed: int = None

    @property
    def class_ids(self) -> list[int]:
        return [clip.class_id for clip in self.clips]

    @property
    def k(self) -> int:
        return len(self.clips)


def mix(clips) -> MixSample:
    """
    Exact sample-wise sum, no renormalization.

    Raises:
      InputError: fewer than 2 or more than 4 clips, repeated classes, or
      clips of different length or sample rate.
    """
    clips = tuple(clips)
    if not MIN_SOURCES <= len(clips) <= MAX_SOURCES:
        raise InputError(f"a mixture needs {MIN_SOURCES}..{MAX_SOURCES} clips, got {len(clips)}")
    classes = [c.class_id for c in clips]
    if len(set(classes)) != len(classes):
        raise InputError(f"mixture classes must be distinct, got {classes}")
    lengths = {len(c.wave) for c in clips}
    rates = {c.wave.sample_rate for c in clips}
    if len(lengths) != 1 or len(rates) != 1:
        raise InputError(f"clip lengths/rates differ: {sorted(lengths)} samples, {sorted(rates)} Hz")
    total = np.zeros(lengths.pop())
    for clip in clips:
        total = total + clip.wave.samples
    return MixSample(clips=clips, mixture=Waveform(total, rates.pop()))


class MixSampler:
    """
    Draws K-source mixtures from one split of a Corpus. Draws are pure
    functions of the per-sample seed; a draw that repeats a class is
    retried with the same generator. With `anchors`, every mixture holds
    one clip of an anchor class plus K-1 clips of other classes.
    """

    def __init__(self, corpus, split: str, k: int = 2, classes=None, jitter: float = None, anchors=None):
        self.corpus = corpus
        self.k = k
        self.jitter = jitter
        self.records = corpus.records(split, classes)
        self.anchors = tuple(anchors or ())
        self.anchor_records = [r for r in self.records if r.class_id in self.anchors]
        self.other_records = [r for r in self.records if r.class_id not in self.anchors]
        available = {r.class_id for r in self.records}
        if self.anchors and not self.anchor_records:
            raise ConfigError(f"split '{split}' has no clips of anchor classes {list(self.anchors)}")
        if not MIN_SOURCES <= k <= MAX_SOURCES:
            raise ConfigError(f"k must be in {MIN_SOURCES}..{MAX_SOURCES}, got {k}")
        if len(available) < k:
            raise ConfigError(f"split '{split}' has {len(available)} classes, need at least {k}")
        if self.anchors and len({r.class_id for r in self.other_records}) < k - 1:
            raise ConfigError(f"split '{split}' needs {k - 1} non-anchor classes besides {list(self.anchors)}")

    def _choose(self, rng: np.random.Generator):
        for _ in range(MAX_DRAW_RETRIES):
            if self.anchors:
                anchor = self.anchor_records[int(rng.integers(len(self.anchor_records)))]
                picks = rng.choice(len(self.other_records), size=self.k - 1, replace=False)
                chosen = [anchor] + [self.other_records[i] for i in picks]
            else:
                picks = rng.choice(len(self.records), size=self.k, replace=False)
                chosen = [self.records[i] for i in picks]
            if len({r.class_id for r in chosen}) == self.k:
                return chosen
        raise InputError(f"could not draw {self.k} distinct classes in {MAX_DRAW_RETRIES} attempts")

    def sample(self, seed: int) -> MixSample:
        rng = np.random.default_rng(seed)
        records = self._choose(rng)
        clips = [self.corpus.load_clip(r) for r in records]
        return self.attach_features(mix(clips), seed)

    def attach_features(self, sample: MixSample, seed: int = None) -> MixSample:
        bank, lift = self.corpus.object_bank, self.corpus.motion_lift
        kwargs = {} if self.jitter is None else {'sigma': self.jitter}
        objects = np.stack([bank.feature(c.class_id, c.seed, **kwargs) for c in sample.clips])
        motions = tuple(lift(c.activity) for c in sample.clips)
        return replace(sample, object_features=objects, motion_features=motions, seed=seed)


def prefetch(fn, items, depth: int = 4, workers: int = 2):
    """
    Yield fn(item) for each item in order, computing up to `depth` results
    ahead on a thread pool.
    """
    items = iter(items)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= depth:
                break
        while pending:
            result = pending.popleft().result()
            for item in items:
                pending.append(pool.submit(fn, item))
                break
            yield result

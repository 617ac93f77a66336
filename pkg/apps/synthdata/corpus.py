"""
On-disk synthetic corpus.

Layout:
  <root>/<split>/<class_id>/<clip_id>.wav    16-bit mono PCM
  <root>/<split>/<class_id>/<clip_id>.meta   key=value: class_id, seed, d_act, t_prime, activity
  <root>/manifest.tsv                        one row per clip, `# key=value` footer

Public API:
  gen_corpus(config, out_dir, force=False, workers=None) → Corpus
  Corpus.load(root), corpus.records(split, classes=None), corpus.load_clip(record)
  write_meta(path, clip), read_meta(path)
"""
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from django.conf import settings

from apps.core.config import parse_config_file, parse_config_text
from apps.core.io import atomic_write, read_table, read_wav, write_table, write_wav
from apps.core.seeding import spawn_seeds
from apps.synthdata.config import SPLITS, CorpusConfig
from apps.synthdata.exceptions import ConfigError, DimensionError, InputError
from apps.synthdata.features import MotionLift, ObjectFeatureBank
from apps.synthdata.instruments import Clip, make_instrument_bank, render_clip

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.tsv'
MANIFEST_HEADER = ('split', 'class_id', 'clip_id', 'seed', 'path')


@dataclass(frozen=True)
class ClipRecord:
    split: str
    class_id: int
    clip_id: str
    seed: int
    path: str           # WAV path relative to the corpus root

    @property
    def meta_path(self) -> str:
        return str(Path(self.path).with_suffix('.meta'))


# ── Sidecar metadata ──────────────────────────────────────────────────────────

def write_meta(path, clip: Clip) -> None:
    d_act, t_prime = clip.activity.shape
    values = ','.join(repr(float(x)) for x in clip.activity.reshape(-1))
    with atomic_write(path) as handle:
        handle.write(f'class_id={clip.class_id}\nseed={clip.seed}\nd_act={d_act}\nt_prime={t_prime}\n')
        handle.write(f'activity={values}\n')


def read_meta(path) -> dict:
    """Returns {'class_id', 'seed', 'activity'}; the track is d_act × t_prime."""
    try:
        entries = {key: value for key, (value, _) in parse_config_file(path).items()}
        d_act, t_prime = int(entries['d_act']), int(entries['t_prime'])
        raw = entries.get('activity', '')
        activity = np.array([float(x) for x in raw.split(',')] if raw else [], dtype=np.float64)
        class_id, seed = int(entries['class_id']), int(entries['seed'])
    except (KeyError, ValueError, ConfigError) as exc:
        raise InputError(f"malformed clip metadata {path}: {exc}") from exc
    if activity.size != d_act * t_prime:
        raise DimensionError(f"{path}: activity track size {activity.size}", (d_act, t_prime))
    return {'class_id': class_id, 'seed': seed, 'activity': activity.reshape(d_act, t_prime)}


# ── Corpus ────────────────────────────────────────────────────────────────────

class Corpus:
    def __init__(self, root, seed: int, n_classes: int, records):
        self.root = Path(root)
        self.seed = seed
        self.n_classes = n_classes
        self._records = list(records)

    def __len__(self):
        return len(self._records)

    @classmethod
    def load(cls, root) -> 'Corpus':
        """
        Raises:
          InputError: missing or malformed manifest.
        """
        root = Path(root)
        manifest = root / MANIFEST
        if not manifest.is_file():
            raise InputError(f"no corpus manifest at {manifest}")
        with open(manifest, encoding='utf-8') as handle:
            footer = '\n'.join(line[2:] for line in handle if line.startswith('# '))
        try:
            params = {k: v for k, (v, _) in parse_config_text(footer).items()}
            seed, n_classes = int(params['seed']), int(params['n_classes'])
            records = [
                ClipRecord(row['split'], int(row['class_id']), row['clip_id'], int(row['seed']), row['path'])
                for row in read_table(manifest)
            ]
        except (KeyError, ValueError, TypeError, ConfigError) as exc:
            raise InputError(f"malformed corpus manifest {manifest}: {exc}") from exc
        return cls(root, seed, n_classes, records)

    def records(self, split: str = None, classes=None) -> list[ClipRecord]:
        wanted = None if classes is None else set(classes)
        return [r for r in self._records
                if (split is None or r.split == split) and (wanted is None or r.class_id in wanted)]

    def class_ids(self, split: str = None) -> list[int]:
        return sorted({r.class_id for r in self.records(split)})

    def load_clip(self, record: ClipRecord) -> Clip:
        wave = read_wav(self.root / record.path, expected_rate=getattr(settings, 'SAMPLE_RATE', 11025))
        meta = read_meta(self.root / record.meta_path)
        if meta['class_id'] != record.class_id:
            raise InputError(f"{record.meta_path}: class {meta['class_id']} disagrees with manifest")
        return Clip(wave=wave, class_id=record.class_id, activity=meta['activity'],
                    clip_id=record.clip_id, seed=record.seed)

    @cached_property
    def object_bank(self) -> ObjectFeatureBank:
        return ObjectFeatureBank(self.n_classes, self.seed)

    @cached_property
    def motion_lift(self) -> MotionLift:
        return MotionLift(self.seed)


# ── Generation ────────────────────────────────────────────────────────────────

def _plan(config: CorpusConfig):
    counts = config.split_counts()
    seeds = spawn_seeds(config.seed, config.n_classes * config.clips_per_class)
    plan = []
    for class_id in range(config.n_classes):
        index = 0
        for split in SPLITS:
            for _ in range(counts[split]):
                clip_id = f'c{class_id:02d}_{index:04d}'
                seed = seeds[class_id * config.clips_per_class + index]
                path = f'{split}/{class_id}/{clip_id}.wav'
                plan.append(ClipRecord(split, class_id, clip_id, seed, path))
                index += 1
    return plan


def _clear_corpus(root: Path):
    for split in SPLITS:
        if (root / split).is_dir():
            shutil.rmtree(root / split)
    (root / MANIFEST).unlink(missing_ok=True)
    logger.info('cleared the previous corpus in %s', root)


def gen_corpus(config: CorpusConfig, out_dir, force: bool = False, workers: int = None) -> Corpus:
    """
    Render and write every clip of `config` under out_dir. Deterministic in
    config: identical configs give byte-identical manifests and WAVs. With
    force the split directories and manifest of an earlier corpus are
    removed first; other files are left alone.

    Raises:
      InputError: out_dir exists and is not empty, unless force is set.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise InputError(f"{out_dir} is not empty (use --force to overwrite)")
        _clear_corpus(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    bank = make_instrument_bank(config.n_classes, config.seed)
    plan = _plan(config)
    workers = workers or getattr(settings, 'WORKERS', 4)

    def render(record: ClipRecord):
        clip = render_clip(bank[record.class_id], record.seed, record.clip_id, seconds=config.seconds)
        write_wav(out_dir / record.path, clip.wave)
        write_meta(out_dir / record.meta_path, clip)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(render, plan))

    footer = [
        f'seed={config.seed}',
        f'n_classes={config.n_classes}',
        f'clips_per_class={config.clips_per_class}',
        'split_fractions=' + ','.join(repr(float(f)) for f in config.split_fractions),
    ]
    rows = [(r.split, r.class_id, r.clip_id, r.seed, r.path) for r in plan]
    write_table(out_dir / MANIFEST, MANIFEST_HEADER, rows, footer=footer)
    logger.info('corpus: %d clips across %d classes written to %s', len(plan), config.n_classes, out_dir)
    return Corpus(out_dir, config.seed, config.n_classes, plan)

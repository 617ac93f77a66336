"""
Surrogate visual features standing in for the frozen detector and video
encoder: one object embedding per class and a fixed linear lift of the
activity track into motion tokens.
"""
import numpy as np
from django.conf import settings

from apps.core.seeding import derive_seed, generator
from apps.synthdata.exceptions import ConfigError, DimensionError, InputError

MAX_COSINE = 0.3
OBJECT_JITTER = 0.1
MAX_REDRAWS = 1000


def _feature_dim():
    return getattr(settings, 'FEATURE_DIM', 256)


class ObjectFeatureBank:
    """
    Unit-norm base embedding per class. Any vector whose cosine with an
    earlier one reaches MAX_COSINE is redrawn.
    """

    def __init__(self, n_classes: int, seed: int, dim: int = None):
        self.dim = dim or _feature_dim()
        self.seed = seed
        rng = generator(seed, 202)
        bases = []
        for class_id in range(n_classes):
            for _ in range(MAX_REDRAWS):
                v = rng.standard_normal(self.dim)
                v /= np.linalg.norm(v)
                if all(abs(float(v @ b)) < MAX_COSINE for b in bases):
                    break
            else:
                raise ConfigError(f"cannot draw {n_classes} embeddings with cosine < {MAX_COSINE} in {self.dim} dims")
            bases.append(v)
        self.bases = np.stack(bases) if bases else np.zeros((0, self.dim))

    @property
    def n_classes(self) -> int:
        return self.bases.shape[0]

    def base(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.n_classes:
            raise InputError(f"unknown class {class_id} (bank has {self.n_classes})")
        return self.bases[class_id]

    def feature(self, class_id: int, seed: int, sigma: float = OBJECT_JITTER) -> np.ndarray:
        """Base embedding plus per-clip Gaussian jitter with per-component std σ."""
        base = self.base(class_id)
        if sigma == 0:
            return base.copy()
        z = np.random.default_rng(derive_seed(seed, 303)).standard_normal(self.dim)
        return base + sigma * z


def surrogate_object_feature(bank: ObjectFeatureBank, class_id: int, seed: int,
                             sigma: float = OBJECT_JITTER) -> np.ndarray:
    return bank.feature(class_id, seed, sigma)


class MotionLift:
    """Seeded linear map from activity tracks (d_act × T′) to motion tokens (dim × T′)."""

    def __init__(self, seed: int, activity_dim: int = None, dim: int = None):
        self.activity_dim = activity_dim or getattr(settings, 'ACTIVITY_DIM', 16)
        self.dim = dim or _feature_dim()
        rng = generator(seed, 404)
        self.matrix = rng.standard_normal((self.dim, self.activity_dim)) / np.sqrt(self.activity_dim)

    def __call__(self, track: np.ndarray) -> np.ndarray:
        track = np.asarray(track, dtype=np.float64)
        if track.ndim != 2 or track.shape[0] != self.activity_dim:
            raise DimensionError("activity track must be d_act × T'", track.shape, (self.activity_dim, -1))
        return self.matrix @ track


def surrogate_motion_feature(lift: MotionLift, track: np.ndarray) -> np.ndarray:
    return lift(track)

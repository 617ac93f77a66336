from dataclasses import dataclass

from apps.synthdata.exceptions import ConfigError

SPLITS = ('train', 'val', 'test')


@dataclass(frozen=True)
class CorpusConfig:
    n_classes: int = 8
    clips_per_class: int = 50
    seed: int = 7
    split_fractions: tuple = (0.8, 0.1, 0.1)
    seconds: float = 6.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.clips_per_class < 1:
            raise ConfigError(f"clips_per_class must be positive, got {self.clips_per_class}")
        if len(self.split_fractions) != len(SPLITS):
            raise ConfigError(f"split_fractions needs {len(SPLITS)} values (train, val, test)")
        if any(f < 0 for f in self.split_fractions) or abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise ConfigError(f"split_fractions must be nonnegative and sum to 1, got {self.split_fractions}")
        if self.seconds <= 0:
            raise ConfigError("clip length must be positive")

    def split_counts(self) -> dict:
        """Clips per class in each split; test takes the rounding remainder."""
        train = int(round(self.clips_per_class * self.split_fractions[0]))
        val = min(int(round(self.clips_per_class * self.split_fractions[1])), self.clips_per_class - train)
        return {'train': train, 'val': val, 'test': self.clips_per_class - train - val}

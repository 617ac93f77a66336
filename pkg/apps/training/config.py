from dataclasses import asdict, dataclass, fields

from apps.training.exceptions import ConfigError


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings. Defaults follow the full schedule (80 epochs,
    transformer lr ×0.1 at 60, other lr ×0.1 at 30 and 50); configs/desk.conf
    holds the shortened desk-scale run.
    """
    epochs: int = 80
    batch: int = 4
    steps_per_epoch: int = 50
    k: int = 2
    lr_transformer: float = 1e-4
    lr_transformer_milestones: tuple = (60,)
    lr_other: float = 1e-4
    lr_other_milestones: tuple = (30, 50)
    lr_gamma: float = 0.1
    weight_decay: float = 1e-4
    object_jitter: float = 0.1
    contrastive: bool = False
    learnable_projection: bool = True
    adaptive: bool = True
    htl_start: int = 24
    htl_ramp: int = 16
    htl_lambda: float = 0.1
    temperature: float = 0.07
    val_mixtures: int = 8
    exclude_classes: tuple = ()
    seed: int = 7

    def __post_init__(self):
        for name in ('epochs', 'batch', 'steps_per_epoch'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 2 <= self.k <= 4:
            raise ConfigError(f"k must be in 2..4, got {self.k}")
        for name in ('lr_transformer', 'lr_other', 'lr_gamma'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ('lr_transformer_milestones', 'lr_other_milestones'):
            milestones = getattr(self, name)
            if any(not 0 < m < self.epochs for m in milestones) or list(milestones) != sorted(milestones):
                raise ConfigError(f"{name} {tuple(milestones)} must be increasing and inside 1..{self.epochs - 1}")
        if self.weight_decay < 0 or self.object_jitter < 0 or self.htl_lambda < 0:
            raise ConfigError("weight_decay, object_jitter and htl_lambda must be nonnegative")
        if self.htl_start < 0 or self.htl_ramp < 0:
            raise ConfigError("htl_start and htl_ramp must be nonnegative")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.val_mixtures < 0:
            raise ConfigError("val_mixtures must be nonnegative")

    @property
    def mixtures_per_epoch(self) -> int:
        return self.batch * self.steps_per_epoch

    def to_text(self) -> str:
        """key=value lines, readable back through TrainConfigForm."""
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ','.join(str(v) for v in value)
            lines.append(f'{key}={value}\n')
        return ''.join(lines)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

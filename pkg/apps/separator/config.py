from dataclasses import asdict, dataclass, fields

from django.db import models

from apps.separator.exceptions import ConfigError


class DecoderLayout(models.TextChoices):
    MOTION_SELF_AUDIO = 'motion_self_audio', 'Motion layer, then self + audio layers'
    SELF_MOTION_AUDIO = 'self_motion_audio', 'Self, motion and audio in every layer'
    DUAL_STREAM = 'dual_stream', 'Motion and audio cross-attention in parallel'
    SELF_AUDIO = 'self_audio', 'No motion attention'


class Assignment(models.TextChoices):
    VISUAL = 'visual', 'Query of the detected class'
    RANDOM = 'random', 'Uniformly drawn query'


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyper-parameters. `channels` is the shared width of queries,
    object features, motion features and audio tokens.
    """
    n_queries: int = 8
    channels: int = 256
    embed_dim: int = 32
    heads: int = 8
    unet_depth: int = 5
    base_channels: int = 32
    layout: str = DecoderLayout.MOTION_SELF_AUDIO
    assignment: str = Assignment.VISUAL
    freq_bins: int = 256
    frames: int = 256
    motion_frames: int = 64
    mask_hidden: int = 256
    ffn_mult: int = 4

    def __post_init__(self):
        if self.n_queries < 1:
            raise ConfigError(f"n_queries must be positive, got {self.n_queries}")
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.unet_depth < 3:
            raise ConfigError(f"unet_depth must be at least 3, got {self.unet_depth}")
        stride = 2 ** self.unet_depth
        if self.freq_bins % stride or self.frames % stride:
            raise ConfigError(f"spectrogram {self.freq_bins}×{self.frames} not divisible by stride {stride}")
        if self.layout not in DecoderLayout.values:
            raise ConfigError(f"unknown decoder layout '{self.layout}'")
        if self.assignment not in Assignment.values:
            raise ConfigError(f"unknown assignment policy '{self.assignment}'")
        for name in ('embed_dim', 'base_channels', 'motion_frames', 'mask_hidden', 'ffn_mult'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def stride(self) -> int:
        return 2 ** self.unet_depth

    @property
    def audio_tokens(self) -> int:
        return (self.freq_bins // self.stride) * (self.frames // self.stride)

    def to_text(self) -> str:
        """key=value lines, readable back through ModelConfigForm."""
        return ''.join(f'{k}={v}\n' for k, v in asdict(self).items())

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

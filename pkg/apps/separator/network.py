"""
The query-based separation network.

Public API:
  IQueryNet(config, seed)
  net.encode_audio(features)                       → (F_A, ε_A)
  net(features, object_features, motion_features, query_indices, columns=None,
      detach_unassigned=False)                     → NetOutput
  net.enter_finetune(), net.add_audio_prompt(class_ids, seed)
  MaskHead, predict_masks(mask_embeddings, audio_embeddings)
"""
import logging
from dataclasses import dataclass

import numpy as np

from apps.core.seeding import generator
from apps.separator.config import ModelConfig
from apps.separator.decoder import MotionKeys, QueryDecoder
from apps.separator.exceptions import DimensionError, InputError, UsageError
from apps.separator.queries import QueryBank, visually_name
from apps.separator.unet import AudioUNet
from apps.tensorcore import ops
from apps.tensorcore.nn import Linear, Module
from apps.tensorcore.tensor import Parameter, Tensor, as_tensor, get_default_dtype

logger = logging.getLogger(__name__)

POS_INIT_STD = 0.02


class MaskHead(Module):
    """Per-query MLP C → hidden → hidden → C_ε with relu, shared across queries."""

    def __init__(self, channels: int, hidden: int, embed_dim: int, rng):
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, embed_dim, rng)

    def forward(self, query_embeddings: Tensor) -> Tensor:
        """N×C rows → C_ε×N mask embeddings."""
        h = ops.relu(self.fc1(query_embeddings))
        h = ops.relu(self.fc2(h))
        return ops.transpose(self.fc3(h))


def predict_masks(mask_embeddings: Tensor, audio_embeddings: Tensor) -> Tensor:
    """
    masks[i, f, t] = sigmoid(Σ_c ε_mask[c, i] · ε_A[c, f, t]) for C_ε×N
    mask embeddings and C_ε×F×T audio embeddings → N×F×T.
    """
    mask_embeddings, audio_embeddings = as_tensor(mask_embeddings), as_tensor(audio_embeddings)
    if mask_embeddings.ndim != 2 or audio_embeddings.ndim != 3 or \
            mask_embeddings.shape[0] != audio_embeddings.shape[0]:
        raise DimensionError("mask and audio embedding channels differ", mask_embeddings.shape, audio_embeddings.shape)
    channels, freq, frames = audio_embeddings.shape
    logits = ops.matmul(ops.transpose(mask_embeddings), ops.reshape(audio_embeddings, (channels, freq * frames)))
    return ops.sigmoid(ops.reshape(logits, (mask_embeddings.shape[1], freq, frames)))


@dataclass
class NetOutput:
    masks: Tensor                   # len(columns) × F × T
    columns: list                   # query column of each mask row
    query_embeddings: Tensor        # columns_total × C   (ε_Q as rows)
    mask_embeddings: Tensor         # C_ε × len(columns)
    audio_features: Tensor          # C_A × F/S × T/S
    audio_embeddings: Tensor        # C_ε × F × T


class IQueryNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = generator(seed, 505)
        self.config = config
        self.unet = AudioUNet(config.unet_depth, config.base_channels, config.channels, config.embed_dim, rng)
        self.queries = QueryBank(config.channels, config.n_queries, rng)
        self.audio_pos = Parameter(rng.normal(0.0, POS_INIT_STD, (config.audio_tokens, config.channels)))
        self.motion_pos = Parameter(rng.normal(0.0, POS_INIT_STD, (config.motion_frames, config.channels)))
        self.decoder = QueryDecoder(config, rng)
        self.mask_head = MaskHead(config.channels, config.mask_hidden, config.embed_dim, rng)
        self._finetune = False
        self.assign_names()

    # ── Groups used by the optimizers ────────────────────────────────────────

    def transformer_parameters(self):
        """Queries, positional embeddings, decoder and mask head."""
        return [p for name, p in self.named_parameters() if not name.startswith('unet.')]

    def unet_parameters(self):
        return self.unet.parameters()

    # ── Forward ──────────────────────────────────────────────────────────────

    def encode_audio(self, features):
        """log1p log-frequency magnitude (F×T or 1×F×T) → (F_A, ε_A)."""
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=get_default_dtype()))
        expected = (self.config.freq_bins, self.config.frames)
        if tuple(features.shape[-2:]) != expected:
            raise DimensionError("network input geometry", features.shape, expected)
        return self.unet(features)

    def _motion_tokens(self, motion_feature) -> Tensor:
        motion = np.asarray(motion_feature, dtype=get_default_dtype())
        if motion.ndim != 2 or motion.shape[0] != self.config.channels:
            raise DimensionError("motion feature must be C_M × T'", motion.shape, (self.config.channels, -1))
        length = motion.shape[1]
        if not 1 <= length <= self.config.motion_frames:
            raise DimensionError(f"motion length must be 1..{self.config.motion_frames}", motion.shape)
        return ops.add(motion.T, ops.take(self.motion_pos, np.arange(length)))

    def decode(self, object_features, motion_features, query_indices, audio_features: Tensor,
               detach_unassigned: bool = False) -> Tensor:
        """Visual naming plus the transformer decoder; returns ε_Q as columns × C rows."""
        if len(object_features) != len(query_indices) or len(motion_features) != len(query_indices):
            raise InputError("need one object feature, motion feature and query index per source")
        named = visually_name(self.queries, list(zip(query_indices, object_features)), detach_unassigned)
        tokens = ops.add(ops.transpose(ops.reshape(audio_features, (audio_features.shape[0], -1))), self.audio_pos)
        motion = MotionKeys([self._motion_tokens(m) for m in motion_features],
                            {q: k for k, q in enumerate(query_indices)})
        return self.decoder(ops.transpose(named), motion, tokens)

    def forward(self, features, object_features, motion_features, query_indices, columns=None,
                detach_unassigned: bool = False) -> NetOutput:
        """
        All query columns are decoded together; `columns` selects which of
        them get a mask. detach_unassigned cuts every path from the output
        back to the unassigned query columns (training).
        """
        audio_features, audio_embeddings = self.encode_audio(features)
        query_embeddings = self.decode(object_features, motion_features, query_indices, audio_features,
                                       detach_unassigned)
        columns = list(range(self.queries.columns)) if columns is None else list(columns)
        selected = query_embeddings if columns == list(range(self.queries.columns)) \
            else ops.take(query_embeddings, columns)
        mask_embeddings = self.mask_head(selected)
        masks = predict_masks(mask_embeddings, audio_embeddings)
        return NetOutput(masks, columns, query_embeddings, mask_embeddings, audio_features, audio_embeddings)

    # ── Prompt fine-tuning ───────────────────────────────────────────────────

    @property
    def finetuning(self) -> bool:
        return self._finetune

    def enter_finetune(self):
        """Freeze everything except the query bank."""
        self._finetune = True
        self.freeze()
        self.queries.weight.trainable = True
        return self

    def add_audio_prompt(self, class_ids, seed: int = 0) -> list[int]:
        """
        Append one prompt column per new class. Afterwards only Q is
        trainable: C_Q·(N + P) parameters.

        Raises:
          UsageError: the network is not in fine-tune mode.
        """
        if not self._finetune:
            raise UsageError("audio prompts can only be added in fine-tune mode")
        columns = self.queries.append_prompts(class_ids, generator(seed, 606))
        self.queries.weight.trainable = True
        logger.info('prompted classes %s at columns %s; %d trainable of %d transformer parameters (%.3f%%)',
                    list(class_ids), columns, self.parameter_count(trainable_only=True),
                    self.transformer_parameter_count(), 100.0 * self.trainable_fraction())
        return columns

    def transformer_parameter_count(self) -> int:
        return int(sum(p.size for p in self.transformer_parameters()))

    def trainable_fraction(self) -> float:
        """Trainable share of the transformer parameters (queries, embeddings, decoder, head)."""
        total = self.transformer_parameter_count()
        trainable = sum(p.size for p in self.transformer_parameters() if p.trainable)
        return trainable / total if total else 0.0

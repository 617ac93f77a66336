"""
Query decoder. Queries are carried as N×C token rows; every sublayer is
pre-norm with a residual connection.

Layouts:
  motion_self_audio  1 × [motion-cross, FFN], then 3 × [self, audio-cross, FFN]
  self_motion_audio  4 × [self, motion-cross, audio-cross, FFN]
  dual_stream        4 × [self, motion-cross + audio-cross in parallel, FFN]
  self_audio         3 × [self, audio-cross, FFN]

Motion cross-attention uses per-query key sets: a query assigned to source k
attends to that source's motion tokens, an unassigned query to the
concatenated tokens of every source.
"""
import numpy as np

from apps.separator.config import DecoderLayout, ModelConfig
from apps.separator.exceptions import ConfigError, DimensionError, UsageError
from apps.tensorcore import ops
from apps.tensorcore.nn import FeedForward, LayerNorm, Module, MultiheadAttention
from apps.tensorcore.tensor import Tensor


class MotionKeys:
    """Motion token sets (T′×C each) and the source each query column attends to."""

    def __init__(self, per_source, query_sources):
        self.per_source = list(per_source)
        self.query_sources = dict(query_sources)      # query column → source index
        for column, source in self.query_sources.items():
            if not 0 <= source < len(self.per_source):
                raise DimensionError(f"query {column} points at source {source} of {len(self.per_source)}")

    def groups(self, n_queries: int):
        """[(source index or None, query columns)] in first-seen order."""
        grouped = {}
        for column in range(n_queries):
            grouped.setdefault(self.query_sources.get(column), []).append(column)
        return list(grouped.items())

    def keys_for(self, source):
        if source is not None:
            return self.per_source[source]
        if len(self.per_source) == 1:
            return self.per_source[0]
        return ops.concat(self.per_source, axis=0)


class SelfAttentionSublayer(Module):
    def __init__(self, channels: int, heads: int, rng):
        self.norm = LayerNorm(channels)
        self.attn = MultiheadAttention(channels, heads, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        return ops.add(x, self.attn(h, h, h))


class CrossAttentionSublayer(Module):
    """Residual update from attending to a fixed memory; returns only the update."""

    def __init__(self, channels: int, heads: int, rng):
        self.norm = LayerNorm(channels)
        self.attn = MultiheadAttention(channels, heads, rng)

    def forward(self, x: Tensor, memory: Tensor) -> Tensor:
        return self.attn(self.norm(x), memory, memory)


class MotionCrossSublayer(CrossAttentionSublayer):
    def forward(self, x: Tensor, motion: MotionKeys) -> Tensor:
        h = self.norm(x)
        groups = motion.groups(x.shape[0])
        if len(groups) == 1:
            return self.attn(h, motion.keys_for(groups[0][0]), motion.keys_for(groups[0][0]))
        pieces, order = [], []
        for source, columns in groups:
            keys = motion.keys_for(source)
            pieces.append(self.attn(ops.take(h, columns), keys, keys))
            order.extend(columns)
        return ops.take(ops.concat(pieces, axis=0), np.argsort(order))


class FeedForwardSublayer(Module):
    def __init__(self, channels: int, hidden: int, rng):
        self.norm = LayerNorm(channels)
        self.ffn = FeedForward(channels, hidden, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.ffn(self.norm(x)))


class DecoderLayer(Module):
    """
    One decoder layer assembled from the flags: self-attention first, then
    motion and/or audio cross-attention (chained, or summed when parallel),
    then the FFN.
    """

    def __init__(self, channels: int, heads: int, hidden: int, rng,
                 self_attn: bool, motion: bool, audio: bool, parallel: bool = False):
        self.self_attn = SelfAttentionSublayer(channels, heads, rng) if self_attn else None
        self.motion = MotionCrossSublayer(channels, heads, rng) if motion else None
        self.audio = CrossAttentionSublayer(channels, heads, rng) if audio else None
        self.ffn = FeedForwardSublayer(channels, hidden, rng)
        self._parallel = parallel

    def forward(self, x: Tensor, motion: MotionKeys, audio: Tensor) -> Tensor:
        if self.self_attn is not None:
            x = self.self_attn(x)
        if self._parallel:
            x = ops.add(x, ops.add(self.motion(x, motion), self.audio(x, audio)))
        else:
            if self.motion is not None:
                x = ops.add(x, self.motion(x, motion))
            if self.audio is not None:
                x = ops.add(x, self.audio(x, audio))
        return self.ffn(x)

    @property
    def uses_motion(self) -> bool:
        return self.motion is not None


def _layer_plan(layout: str):
    if layout == DecoderLayout.MOTION_SELF_AUDIO:
        return [dict(self_attn=False, motion=True, audio=False)] + [dict(self_attn=True, motion=False, audio=True)] * 3
    if layout == DecoderLayout.SELF_MOTION_AUDIO:
        return [dict(self_attn=True, motion=True, audio=True)] * 4
    if layout == DecoderLayout.DUAL_STREAM:
        return [dict(self_attn=True, motion=True, audio=True, parallel=True)] * 4
    if layout == DecoderLayout.SELF_AUDIO:
        return [dict(self_attn=True, motion=False, audio=True)] * 3
    raise ConfigError(f"unknown decoder layout '{layout}'")


class QueryDecoder(Module):
    def __init__(self, config: ModelConfig, rng):
        hidden = config.ffn_mult * config.channels
        self.layers = [DecoderLayer(config.channels, config.heads, hidden, rng, **flags)
                       for flags in _layer_plan(config.layout)]
        self.norm = LayerNorm(config.channels)

    @property
    def uses_motion(self) -> bool:
        return any(layer.uses_motion for layer in self.layers)

    def forward(self, queries: Tensor, motion: MotionKeys, audio: Tensor) -> Tensor:
        """queries N×C, audio tokens L×C → decoded query embeddings N×C."""
        if self.uses_motion and (motion is None or not motion.per_source):
            raise UsageError("this decoder layout needs at least one motion sequence")
        x = queries
        for layer in self.layers:
            x = layer(x, motion, audio)
        return self.norm(x)

"""
Training objectives.

  loss_sep          per-pixel L1 between predicted and ground-truth masks of
                    the assigned queries (mean over pixels, summed over sources)
  loss_contrastive  cross-entropy over cosine similarities between
                    mask-pooled audio embeddings and projected query embeddings
  htl_weights       epoch-indexed blend of the two
"""
from dataclasses import dataclass

import numpy as np

from apps.dsp.signals import Mask
from apps.tensorcore import ops
from apps.tensorcore.nn import Linear, Module
from apps.tensorcore.tensor import Tensor, as_tensor
from apps.training.exceptions import ConfigError, UsageError

POOL_EPS = 1e-8
NORM_EPS = 1e-12


def _stack_targets(gt_masks, like: Tensor) -> Tensor:
    arrays = [m.values if isinstance(m, Mask) else np.asarray(m) for m in gt_masks]
    return as_tensor(np.stack(arrays).astype(like.dtype), like)


def loss_sep(pred_masks: Tensor, gt_masks, assigned_indices) -> Tensor:
    """
    pred_masks: columns × F × T; gt_masks: one F×T target per assigned index.
    Queries that are not assigned receive no loss.

    Raises:
      UsageError: no assigned indices, or a target count that differs.
    """
    assigned_indices = list(assigned_indices)
    if not assigned_indices:
        raise UsageError("loss_sep needs at least one assigned query")
    if len(gt_masks) != len(assigned_indices):
        raise UsageError(f"{len(gt_masks)} targets for {len(assigned_indices)} assigned queries")
    predicted = ops.take(pred_masks, assigned_indices)
    error = ops.abs(ops.sub(predicted, _stack_targets(gt_masks, pred_masks)))
    return ops.sum(ops.mean(error, axis=(1, 2)))


# ── Contrastive verification ──────────────────────────────────────────────────

class ContrastiveProjection(Module):
    """
    Maps C-dim query embeddings into the C_ε audio-embedding space: a
    learnable bias-free linear layer, or plain truncation to the first C_ε
    channels when `learnable` is off.
    """

    def __init__(self, channels: int, embed_dim: int, rng, learnable: bool = True):
        self.embed_dim = embed_dim
        self.linear = Linear(channels, embed_dim, rng, bias=False) if learnable else None
        if embed_dim > channels:
            raise ConfigError(f"cannot project {channels} channels to {embed_dim}")
        for name, param in self.named_parameters('contrast.'):
            param.name = name

    def forward(self, query_rows: Tensor) -> Tensor:
        if self.linear is not None:
            return self.linear(query_rows)
        return ops.take(query_rows, np.arange(self.embed_dim), axis=1)


def _unit_rows(x: Tensor) -> Tensor:
    return ops.div(x, ops.sqrt(ops.add(ops.sum(ops.square(x), axis=1, keepdims=True), NORM_EPS)))


def pool_audio(audio_embeddings: Tensor, masks: Tensor) -> Tensor:
    """Mask-weighted mean of ε_A over (f, t): C_ε×F×T and K×F×T → K×C_ε."""
    channels = audio_embeddings.shape[0]
    k = masks.shape[0]
    flat_audio = ops.reshape(audio_embeddings, (channels, -1))
    flat_masks = ops.reshape(masks, (k, -1))
    weighted = ops.matmul(flat_masks, ops.transpose(flat_audio))
    return ops.div(weighted, ops.add(ops.sum(flat_masks, axis=1, keepdims=True), POOL_EPS))


def contrastive_from_embeddings(pooled: Tensor, projected_queries: Tensor, assigned_indices,
                                temperature: float) -> Tensor:
    """Mean over sources of −log softmax(cos(pooled_k, q_j)/τ)[assigned_k]."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    logits = ops.div(ops.matmul(_unit_rows(pooled), ops.transpose(_unit_rows(projected_queries))), temperature)
    log_probs = ops.reshape(ops.log_softmax(logits, axis=1), (-1,))
    n_columns = projected_queries.shape[0]
    picks = [row * n_columns + index for row, index in enumerate(assigned_indices)]
    return ops.neg(ops.mean(ops.take(log_probs, picks)))


def loss_contrastive(audio_embeddings: Tensor, source_masks: Tensor, query_embeddings: Tensor, assigned_indices,
                     projection: ContrastiveProjection, temperature: float = 0.07) -> Tensor:
    """
    audio_embeddings C_ε×F×T; source_masks K×F×T, the predicted masks of the
    assigned queries in source order; query_embeddings columns×C (decoded
    ε_Q rows); assigned_indices the query column of each source.

    Raises:
      ConfigError: temperature ≤ 0.
      UsageError: no assigned indices.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    assigned_indices = list(assigned_indices)
    if not assigned_indices:
        raise UsageError("loss_contrastive needs at least one assigned query")
    if source_masks.shape[0] != len(assigned_indices):
        raise UsageError(f"{source_masks.shape[0]} masks for {len(assigned_indices)} assigned queries")
    pooled = pool_audio(audio_embeddings, source_masks)
    return contrastive_from_embeddings(pooled, projection(query_embeddings), assigned_indices, temperature)


# ── Hierarchical task weighting ───────────────────────────────────────────────

def htl_weights(epoch: int, config) -> tuple[float, float]:
    """
    (w_sep, w_contras). w_sep is always 1; w_contras is 0 before
    htl_start, then ramps linearly to htl_lambda over htl_ramp epochs.
    Without the adaptive ramp the contrastive weight is htl_lambda from the
    first epoch; with contrastive training off it is 0.
    """
    if not config.contrastive:
        return 1.0, 0.0
    if not config.adaptive:
        return 1.0, float(config.htl_lambda)
    if epoch < config.htl_start:
        return 1.0, 0.0
    if config.htl_ramp == 0:
        return 1.0, float(config.htl_lambda)
    progress = min((epoch - config.htl_start) / config.htl_ramp, 1.0)
    return 1.0, float(config.htl_lambda * progress)


def verify_loss(l_sep: Tensor, l_contras: Tensor, w_sep: float, w_contras: float) -> Tensor:
    total = ops.mul(l_sep, w_sep)
    if l_contras is not None and w_contras:
        total = ops.add(total, ops.mul(l_contras, w_contras))
    return total


@dataclass(frozen=True)
class LossReport:
    epoch: int
    step: int
    l_sep: float
    l_contras: float
    w_sep: float
    w_contras: float
    l_verify: float

    @classmethod
    def build(cls, epoch: int, step: int, l_sep: float, l_contras: float, w_sep: float, w_contras: float):
        return cls(epoch, step, float(l_sep), float(l_contras), float(w_sep), float(w_contras),
                   float(w_sep * l_sep + w_contras * l_contras))

    def consistent(self, tol: float = 1e-6) -> bool:
        return abs(self.l_verify - (self.w_sep * self.l_sep + self.w_contras * self.l_contras)) <= tol

"""
Module containers and the layers the iQuery network is assembled from.

Public API:
  Module (named parameter tree, freeze/unfreeze, state_dict)
  Linear, LayerNorm, FeedForward, MultiheadAttention
  init_uniform(rng, shape, fan_in)
"""
from collections import OrderedDict

import numpy as np

from apps.tensorcore import ops
from apps.tensorcore.exceptions import ConfigError, DimensionError
from apps.tensorcore.tensor import Parameter, Tensor, get_default_dtype


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """U(−1/√fan_in, 1/√fan_in), the usual default for dense and conv weights."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Module:
    """
    Base class for anything holding Parameters.
    Parameters are discovered from attributes (Parameters, Modules, and
    lists of either) in assignment order, so names are stable.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = ''):
        for attr, value in vars(self).items():
            if attr.startswith('_'):
                continue
            if isinstance(value, Parameter):
                yield f'{prefix}{attr}', value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{attr}.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f'{prefix}{attr}.{i}', item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f'{prefix}{attr}.{i}.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self):
        """Stamp every Parameter with its dotted path (used by checkpoints and optimizers)."""
        for name, param in self.named_parameters():
            param.name = name
        return self

    def freeze(self):
        for param in self.parameters():
            param.trainable = False
        return self

    def unfreeze(self):
        for param in self.parameters():
            param.trainable = True
        return self

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def parameter_count(self, trainable_only: bool = False) -> int:
        return int(sum(p.size for p in self.parameters() if p.trainable or not trainable_only))

    def state_dict(self) -> OrderedDict:
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            raise DimensionError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, array in state.items():
            if name not in own:
                continue
            param = own[name]
            if tuple(param.shape) != tuple(np.shape(array)):
                raise DimensionError(f"parameter '{name}' shape", param.shape, np.shape(array))
            param.data = np.array(array, dtype=param.dtype)
        return self


class Linear(Module):
    """y = x·W + b over the last axis of x (L×in → L×out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(init_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self._eps)


class FeedForward(Module):
    """Position-wise MLP C → hidden → C with relu."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class MultiheadAttention(Module):
    """
    Scaled dot-product attention with learned q/k/v/output projections.
    q: Lq×C, k and v: Lk×C → Lq×C. Scale 1/√(C/heads).
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        if heads < 1 or channels % heads:
            raise ConfigError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.q_proj = Linear(channels, channels, rng)
        self.k_proj = Linear(channels, channels, rng)
        self.v_proj = Linear(channels, channels, rng)
        self.out_proj = Linear(channels, channels, rng)
        self._heads = heads
        self._head_dim = channels // heads

    def _split(self, x: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(x, (x.shape[0], self._heads, self._head_dim)), (1, 0, 2))

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if k.shape[0] != v.shape[0]:
            raise DimensionError("attention keys and values must have equal length", k.shape, v.shape)
        length = q.shape[0]
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(self._head_dim))
        context = ops.matmul(ops.softmax(scores, axis=-1), vh)
        merged = ops.reshape(ops.transpose(context, (1, 0, 2)), (length, self._heads * self._head_dim))
        return self.out_proj(merged)

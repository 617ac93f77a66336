"""
Tensor and reverse-mode autodiff for the iQuery engine.

A Tensor wraps a dense numpy array. Every differentiable op creates its
output with a Node holding (parent, vjp) pairs; backward() rebuilds the tape
from the loss in topological order and walks it once in reverse.

Public API:
  Tensor, Parameter
  Tape.from_loss(loss)
  backward(loss, grad=None)
  no_grad(), is_grad_enabled()
  default_dtype(dtype), get_default_dtype()
  as_tensor(value, like=None)
"""
import threading
from contextlib import contextmanager

import numpy as np

from apps.tensorcore.exceptions import UsageError

_state = threading.local()


# ── Precision / grad mode ─────────────────────────────────────────────────────

def _settings_dtype():
    try:
        from django.conf import settings
        if settings.configured:
            return np.dtype(getattr(settings, 'TENSOR_DTYPE', 'float32'))
    except ImportError:
        pass
    return np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    dtype = getattr(_state, 'dtype', None)
    return dtype if dtype is not None else _settings_dtype()


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors and parameters are created with."""
    previous = getattr(_state, 'dtype', None)
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """Disable recording; used for inference and evaluation passes."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# ── Tensor ────────────────────────────────────────────────────────────────────

def _to_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, np.ndarray) and dtype is None and np.issubdtype(value.dtype, np.floating):
        return value
    return np.asarray(value, dtype=dtype or get_default_dtype())


class Node:
    """One recorded operation: the op name and (parent tensor, vjp) pairs."""
    __slots__ = ('op', 'parents')

    def __init__(self, op: str, parents):
        self.op = op
        self.parents = tuple(parents)


class Tensor:
    """
    Dense n-D array on the autodiff tape.
    Invariants: data.size == prod(shape); grad, when set, has data's shape.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _to_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # Shape helpers
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; implementations live in ops.py
    def __add__(self, other):
        from apps.tensorcore import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from apps.tensorcore import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from apps.tensorcore import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from apps.tensorcore import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from apps.tensorcore import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from apps.tensorcore import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from apps.tensorcore import ops
        return ops.div(self, other)

    def __neg__(self):
        from apps.tensorcore import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from apps.tensorcore import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from apps.tensorcore import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from apps.tensorcore import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from apps.tensorcore import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from apps.tensorcore import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


class Parameter(Tensor):
    """
    A named learnable tensor. trainable mirrors requires_grad; a frozen
    parameter records no gradient and is skipped by the optimizers.
    """

    def __init__(self, data, name: str = '', trainable: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool):
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(value, like: Tensor = None) -> Tensor:
    """Wrap constants; plain numbers and arrays adopt the dtype of `like`."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or get_default_dtype()))


def make_result(data: np.ndarray, parents, op: str) -> Tensor:
    """Build an op output; record it only when grad mode is on and a parent needs grad."""
    out = Tensor(data)
    live = [(p, fn) for p, fn in parents if p.requires_grad]
    if live and is_grad_enabled():
        out.requires_grad = True
        out._node = Node(op, live)
    return out


# ── Tape / backward ───────────────────────────────────────────────────────────

class Tape:
    """
    Ordered list of recorded op outputs reachable from a loss.
    Every node appears after all of its inputs.
    """

    def __init__(self, order):
        self.order = order

    def __len__(self):
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    @classmethod
    def from_loss(cls, loss: Tensor) -> 'Tape':
        order, seen = [], set()
        if loss._node is None:
            return cls(order)
        stack = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            for parent, _ in tensor._node.parents:
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, grad=None) -> None:
    """
    Populate .grad on every requires_grad leaf reachable from `loss`.

    Leaf gradients accumulate across calls: call zero_grad() (or the
    optimizer's zero_grad) between steps to reset them.
    """
    if grad is None and loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    if loss.is_leaf:
        _accumulate_leaf(loss, seed)
        return

    pending = {id(loss): seed}
    for tensor in reversed(Tape.from_loss(loss).order):
        g = pending.pop(id(tensor), None)
        if g is None:
            continue
        for parent, vjp in tensor._node.parents:
            contribution = vjp(g)
            if parent.is_leaf:
                _accumulate_leaf(parent, contribution)
            else:
                key = id(parent)
                pending[key] = pending[key] + contribution if key in pending else contribution


def _accumulate_leaf(leaf: Tensor, contribution: np.ndarray) -> None:
    contribution = np.asarray(contribution, dtype=leaf.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = contribution.copy()
    else:
        leaf.grad = leaf.grad + contribution

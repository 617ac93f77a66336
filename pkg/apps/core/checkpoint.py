"""
Binary checkpoint format (all integers little-endian):

  b'IQRY'  u32 version
  text     model config (key=value lines)
  text     train config (may be empty)
  u32      parameter count, then per parameter:
             text name, u8 ndim, u32 dims..., u8 trainable, float32 data
  u32      prompt class count, i32 class ids
  u8       optimizer state present; if 1: u32 optimizer count, then per
             optimizer: text name, u32 entries, per entry: text key, u32 t,
             array m, array v
  text     RNG / run state as JSON

`text` is u32 byte length + UTF-8. `array` is u8 ndim, u32 dims..., float32.
Files are written to a temporary name and renamed when complete.
"""
import io
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from apps.core.config import parse_config_text
from apps.core.exceptions import CheckpointError, DimensionError
from apps.core.forms import ModelConfigForm, TrainConfigForm
from apps.core.io import NumpyJSONEncoder, atomic_write
from apps.separator.network import IQueryNet

logger = logging.getLogger(__name__)

MAGIC = b'IQRY'
VERSION = 1
FLOAT = np.dtype('<f4')


@dataclass
class Checkpoint:
    model_text: str
    train_text: str = ''
    state: OrderedDict = field(default_factory=OrderedDict)
    trainable: dict = field(default_factory=dict)
    prompt_classes: list = field(default_factory=list)
    optimizers: dict = None
    extra: dict = field(default_factory=dict)

    @property
    def model_config(self):
        return ModelConfigForm(parse_config_text(self.model_text)).build()

    @property
    def train_config(self):
        return TrainConfigForm(parse_config_text(self.train_text)).build() if self.train_text.strip() else None

    def build_network(self):
        """Fresh IQueryNet carrying the stored weights, prompt columns and trainable flags."""
        net = IQueryNet(self.model_config, seed=0)
        stored = self.state.get('queries.weight')
        if stored is not None and stored.shape != net.queries.weight.shape:
            net.queries.weight.data = np.zeros(stored.shape, dtype=net.queries.weight.dtype)
        try:
            net.load_state_dict(self.state)
        except DimensionError as exc:
            raise CheckpointError(f"checkpoint does not fit its own model config: {exc}") from exc
        if self.prompt_classes:
            net.queries.restore_prompts(self.prompt_classes)
        if not all(self.trainable.values()):
            net.enter_finetune()
        params = dict(net.named_parameters())
        for name, flag in self.trainable.items():
            params[name].trainable = flag
        return net


# ── Encoding ──────────────────────────────────────────────────────────────────

def _u8(buf, value):
    buf.write(struct.pack('<B', value))


def _u32(buf, value):
    buf.write(struct.pack('<I', value))


def _text(buf, value: str):
    raw = value.encode('utf-8')
    _u32(buf, len(raw))
    buf.write(raw)


def _shape(buf, shape):
    _u8(buf, len(shape))
    for extent in shape:
        _u32(buf, extent)


def _array(buf, array):
    array = np.asarray(array)
    _shape(buf, array.shape)
    buf.write(array.astype(FLOAT).tobytes())


def encode(checkpoint: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    _text(buf, checkpoint.model_text)
    _text(buf, checkpoint.train_text)
    _u32(buf, len(checkpoint.state))
    for name, array in checkpoint.state.items():
        _text(buf, name)
        _shape(buf, np.shape(array))
        _u8(buf, int(checkpoint.trainable.get(name, True)))
        buf.write(np.asarray(array).astype(FLOAT).tobytes())
    _u32(buf, len(checkpoint.prompt_classes))
    for class_id in checkpoint.prompt_classes:
        buf.write(struct.pack('<i', int(class_id)))
    _u8(buf, int(checkpoint.optimizers is not None))
    if checkpoint.optimizers is not None:
        _u32(buf, len(checkpoint.optimizers))
        for opt_name, state in checkpoint.optimizers.items():
            _text(buf, opt_name)
            _u32(buf, len(state))
            for key, (t, m, v) in state.items():
                _text(buf, key)
                _u32(buf, t)
                _array(buf, m)
                _array(buf, v)
    _text(buf, json.dumps(checkpoint.extra, cls=NumpyJSONEncoder, sort_keys=True))
    return buf.getvalue()


# ── Decoding ──────────────────────────────────────────────────────────────────

class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u8(self) -> int:
        return struct.unpack('<B', self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack('<i', self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode('utf-8')
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad text field at byte {self.pos}") from exc

    def shape(self) -> tuple:
        return tuple(self.u32() for _ in range(self.u8()))

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(count * FLOAT.itemsize), dtype=FLOAT).reshape(shape).astype(np.float32)

    def array(self) -> np.ndarray:
        return self.floats(self.shape())


def decode(raw: bytes) -> Checkpoint:
    """
    Raises:
      CheckpointError: bad magic, unknown version, truncated or trailing data.
    """
    reader = _Reader(raw)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an iQuery checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    checkpoint = Checkpoint(model_text=reader.text(), train_text=reader.text())
    for _ in range(reader.u32()):
        name = reader.text()
        shape = reader.shape()
        checkpoint.trainable[name] = bool(reader.u8())
        checkpoint.state[name] = reader.floats(shape)
    checkpoint.prompt_classes = [reader.i32() for _ in range(reader.u32())]
    if reader.u8():
        checkpoint.optimizers = {}
        for _ in range(reader.u32()):
            opt_name = reader.text()
            entries = {}
            for _ in range(reader.u32()):
                key = reader.text()
                t = reader.u32()
                entries[key] = (t, reader.array(), reader.array())
            checkpoint.optimizers[opt_name] = entries
    try:
        checkpoint.extra = json.loads(reader.text())
    except json.JSONDecodeError as exc:
        raise CheckpointError("bad run-state block") from exc
    if reader.pos != len(raw):
        raise CheckpointError(f"{len(raw) - reader.pos} trailing bytes after the checkpoint")
    return checkpoint


# ── Files ─────────────────────────────────────────────────────────────────────

def snapshot(net, train_config=None, optimizers: dict = None, extra: dict = None) -> Checkpoint:
    return Checkpoint(
        model_text=net.config.to_text(),
        train_text=train_config.to_text() if train_config is not None else '',
        state=net.state_dict(),
        trainable={name: p.trainable for name, p in net.named_parameters()},
        prompt_classes=net.queries.prompt_classes,
        optimizers={name: opt.state_dict() for name, opt in optimizers.items()} if optimizers else None,
        extra=dict(extra or {}),
    )


def save_checkpoint(path, net, train_config=None, optimizers: dict = None, extra: dict = None) -> Checkpoint:
    checkpoint = snapshot(net, train_config, optimizers, extra)
    write_checkpoint(path, checkpoint)
    return checkpoint


def write_checkpoint(path, checkpoint: Checkpoint) -> None:
    with atomic_write(path, 'wb') as handle:
        handle.write(encode(checkpoint))
    logger.info('wrote checkpoint %s (%d parameters)', path, len(checkpoint.state))


def read_checkpoint(path) -> Checkpoint:
    try:
        with open(path, 'rb') as handle:
            raw = handle.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(raw)


def load_network(path):
    """(net, checkpoint) for the checkpoint at `path`."""
    checkpoint = read_checkpoint(path)
    return checkpoint.build_network(), checkpoint

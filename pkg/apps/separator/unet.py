"""
Audio U-Net: log-frequency magnitude (1×F×T) → bottleneck features F_A
(C_A×F/S×T/S) and per-pixel audio embeddings ε_A (C_ε×F×T), S = 2^depth.
"""
import numpy as np

from apps.separator.exceptions import DimensionError
from apps.tensorcore import ops
from apps.tensorcore.nn import Module, init_uniform
from apps.tensorcore.tensor import Parameter, Tensor, as_tensor

KERNEL = 4


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, pad: int = 0):
        self.weight = Parameter(init_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out))
        self._stride, self._pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self._stride, self._pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, pad: int = 0):
        self.weight = Parameter(init_uniform(rng, (c_in, c_out, kernel, kernel), c_in * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out))
        self._stride, self._pad = stride, pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self._stride, self._pad)


class AudioUNet(Module):
    """
    Encoder: `depth` stride-2 4×4 convs doubling channels from base_channels,
    leaky-relu 0.2. Bottleneck: 1×1 conv to C_A. Decoder: stride-2 4×4
    transpose convs, each concatenated with the encoder map of the same
    resolution and passed through relu, ending in C_ε channels at full
    resolution with no activation.
    """

    def __init__(self, depth: int, base_channels: int, audio_channels: int, embed_dim: int,
                 rng: np.random.Generator, in_channels: int = 1):
        widths = [base_channels * 2 ** i for i in range(depth)]
        self.down = []
        c_in = in_channels
        for width in widths:
            self.down.append(Conv2d(c_in, width, KERNEL, rng, stride=2, pad=1))
            c_in = width
        self.bottleneck = Conv2d(widths[-1], audio_channels, 1, rng)

        self.up = []
        c_in = audio_channels
        for level in range(depth - 1, 0, -1):
            skip = widths[level - 1]
            self.up.append(ConvTranspose2d(c_in, skip, KERNEL, rng, stride=2, pad=1))
            c_in = 2 * skip
        self.head = ConvTranspose2d(c_in, embed_dim, KERNEL, rng, stride=2, pad=1)
        self._depth = depth
        self._in_channels = in_channels

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim == 2:
            x = ops.reshape(x, (1, *x.shape))
        stride = 2 ** self._depth
        if x.ndim != 3 or x.shape[0] != self._in_channels or x.shape[1] % stride or x.shape[2] % stride:
            raise DimensionError(f"U-Net input must be {self._in_channels}×F×T with F, T divisible by {stride}",
                                 x.shape)
        skips = []
        h = x
        for conv in self.down:
            h = ops.leaky_relu(conv(h))
            skips.append(h)
        audio_features = self.bottleneck(h)

        h = audio_features
        for deconv, skip in zip(self.up, reversed(skips[:-1])):
            h = ops.relu(ops.concat([deconv(h), skip], axis=0))
        audio_embeddings = self.head(h)
        return audio_features, audio_embeddings

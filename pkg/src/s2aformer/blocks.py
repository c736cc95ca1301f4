"""Convolutional companions to the attention mixer: squeeze-excite gating,
the local interaction block, the token MLP, and the downsampling front end.
"""

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .nn import BatchNormInference, Conv2d, LayerNorm, Linear, Module


def to_tokens(x):
    """(N, C, H, W) -> (N, H*W, C)."""
    n, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def from_tokens(t, hw):
    """(N, H*W, C) -> (N, C, H, W)."""
    n, _, c = t.shape
    h, w = hw
    return T.transpose(T.reshape(t, (n, h, w, c)), (0, 3, 1, 2))


class SqueezeExcite(Module):
    """Per-channel sigmoid gate computed from globally pooled features."""

    def __init__(self, dim, rng, reduction=4, dtype=np.float32):
        if reduction < 1 or dim % reduction:
            raise ParameterError("se reduction %d must divide %d channels"
                                 % (reduction, dim))
        self.reduce = Linear(dim, dim // reduction, rng, dtype=dtype)
        self.expand = Linear(dim // reduction, dim, rng, dtype=dtype)

    def forward(self, x):
        n, c = x.shape[0], x.shape[1]
        s = T.global_avg_pool(x)
        s = T.relu(self.reduce(s))
        s = T.sigmoid(self.expand(s))
        return T.mul(x, T.reshape(s, (n, c, 1, 1)))


class LocalInteraction(Module):
    """Depthwise local mixing with channel recalibration:
    pointwise -> relu -> depthwise 3x3 -> squeeze-excite -> relu -> pointwise."""

    def __init__(self, dim, rng, se_reduction=4, dtype=np.float32):
        self.pw_in = Conv2d(dim, dim, 1, rng, dtype=dtype)
        self.dw = Conv2d(dim, dim, 3, rng, padding=1, groups=dim, dtype=dtype)
        self.se = SqueezeExcite(dim, rng, reduction=se_reduction, dtype=dtype)
        self.pw_out = Conv2d(dim, dim, 1, rng, dtype=dtype)

    def forward(self, x):
        y = self.dw(T.relu(self.pw_in(x)))
        return self.pw_out(T.relu(self.se(y)))


class Mlp(Module):
    """Two-layer token MLP with gelu, operating on (tokens, width)."""

    def __init__(self, dim, ratio, rng, dtype=np.float32):
        if ratio <= 0:
            raise ParameterError("mlp ratio must be positive, got %r" % (ratio,))
        hidden = int(dim * ratio)
        if hidden < 1:
            raise ParameterError("mlp ratio %r collapses %d-wide tokens" % (ratio, dim))
        self.fc_in = Linear(dim, hidden, rng, dtype=dtype)
        self.fc_out = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x):
        return self.fc_out(T.gelu(self.fc_in(x)))


class PatchEmbed(Module):
    """3x3 stride-2 conv downsample followed by channel layer norm."""

    def __init__(self, in_ch, out_ch, rng, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=2, padding=1, dtype=dtype)
        self.norm = LayerNorm(out_ch, dtype=dtype)

    def forward(self, x):
        y = self.conv(x)
        hw = (y.shape[2], y.shape[3])
        return from_tokens(self.norm(to_tokens(y)), hw)


class Stem(Module):
    """Three 3x3 convs (first stride 2), each with frozen-stat norm and gelu."""

    def __init__(self, out_ch, rng, dtype=np.float32):
        if out_ch % 2:
            raise ParameterError("stem width must be even, got %d" % out_ch)
        mid = out_ch // 2
        self.conv1 = Conv2d(3, mid, 3, rng, stride=2, padding=1, dtype=dtype)
        self.bn1 = BatchNormInference(mid, dtype=dtype)
        self.conv2 = Conv2d(mid, mid, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNormInference(mid, dtype=dtype)
        self.conv3 = Conv2d(mid, out_ch, 3, rng, padding=1, dtype=dtype)
        self.bn3 = BatchNormInference(out_ch, dtype=dtype)

    def forward(self, x):
        x = T.gelu(self.bn1(self.conv1(x)))
        x = T.gelu(self.bn2(self.conv2(x)))
        return T.gelu(self.bn3(self.conv3(x)))

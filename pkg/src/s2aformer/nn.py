"""Parameter containers and the basic trainable layers.

Modules hold Tensors directly or nest other modules (plain attributes or
lists). Traversal follows attribute insertion order, so two builds from the
same seed enumerate parameters identically; manifest layout and update order
depend on that.
"""

import math

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .tensor import Tensor


class Module:
    """Base container; subclasses assign Tensors and child modules as attributes."""

    def named_state(self, prefix=""):
        """All tensors (trainable and buffers) as (path, tensor), depth first."""
        for name, value in vars(self).items():
            path = prefix + name
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_state(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_state("%s.%d." % (path, i))

    def named_parameters(self, prefix=""):
        for path, t in self.named_state(prefix):
            if t.requires_grad:
                yield path, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self):
        return sum(t.size for _, t in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data):
    return Tensor(data, requires_grad=True)


def _buffer(data):
    return Tensor(data)


class Linear(Module):
    """Dense projection with truncated-normal weight init (sigma 0.02)."""

    def __init__(self, in_dim, out_dim, rng, bias=True, dtype=np.float32):
        if in_dim < 1 or out_dim < 1:
            raise ParameterError("linear dims must be positive, got %d -> %d"
                                 % (in_dim, out_dim))
        self.weight = _param(rng.truncated_normal((in_dim, out_dim), std=0.02, dtype=dtype))
        self.bias = _param(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Grouped conv with fan-out normal weight init."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 groups=1, bias=True, dtype=np.float32):
        if in_ch % groups or out_ch % groups:
            raise ParameterError("conv groups %d must divide channels %d -> %d"
                                 % (groups, in_ch, out_ch))
        fan_out = kernel * kernel * out_ch // groups
        self.weight = _param(rng.normal((out_ch, in_ch // groups, kernel, kernel),
                                        std=math.sqrt(2.0 / fan_out), dtype=dtype))
        self.bias = _param(np.zeros(out_ch, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    """Affine norm over the last axis."""

    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = _param(np.ones(dim, dtype=dtype))
        self.bias = _param(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class BatchNormInference(Module):
    """Channel norm with frozen unit statistics; gain/bias train, stats are buffers."""

    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gain = _param(np.ones(dim, dtype=dtype))
        self.bias = _param(np.zeros(dim, dtype=dtype))
        self.mean = _buffer(np.zeros(dim, dtype=dtype))
        self.var = _buffer(np.ones(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return T.batch_norm_inference(x, self.gain, self.bias, self.mean, self.var,
                                      eps=self.eps)

"""Token mixers: strip attention, reference full-width attention, and the
generalized path both are views of.

Strip mode squeezes queries/keys to one column per head so each attention map
costs n*ns instead of n*ns*(d/h); values keep full width. An optional spatial
reduction (strided depthwise conv or average pooling, then layer norm) shrinks
the key/value token set by sr_ratio**2 before projection.

The full-width reference (squeeze off, sr_ratio 1) runs through the identical
code path, which is what makes the two modes bit-comparable on shared weights.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .nn import Conv2d, LayerNorm, Linear, Module


@dataclass(frozen=True)
class AttnShapes:
    """Token/width bundle for one attention call: n tokens, ns reduced tokens."""

    n: int
    ns: int
    d: int
    h: int
    k: int

    def __post_init__(self):
        if min(self.n, self.ns, self.d, self.h, self.k) < 1:
            raise ParameterError("attention shapes must be positive, got %r" % (self,))
        if self.d % self.h:
            raise ParameterError("width %d not divisible by %d heads" % (self.d, self.h))
        if self.ns * self.k * self.k != self.n:
            raise ParameterError("reduced tokens %d * %d^2 != %d tokens"
                                 % (self.ns, self.k, self.n))

    @classmethod
    def derive(cls, n, d, h, k):
        if k < 1 or n % (k * k):
            raise ParameterError("sr ratio %d cannot tile %d tokens" % (k, n))
        return cls(n, n // (k * k), d, h, k)


class SpatialReduce(Module):
    """Token-set shrink by ratio**2: strided depthwise conv (or average pool),
    then channel layer norm."""

    def __init__(self, dim, ratio, rng, mode="conv", norm=True, dtype=np.float32):
        if ratio < 2:
            raise ParameterError("spatial reduction needs ratio >= 2, got %d" % ratio)
        if mode not in ("conv", "pool"):
            raise ParameterError("unknown sr mode %r" % (mode,))
        self.conv = (Conv2d(dim, dim, ratio, rng, stride=ratio, groups=dim, dtype=dtype)
                     if mode == "conv" else None)
        self.norm = LayerNorm(dim, dtype=dtype) if norm else None
        self.dim = dim
        self.ratio = ratio
        self.mode = mode

    def forward(self, x, hw):
        return csr_spatial_reduce(x, hw, self)


def csr_spatial_reduce(x, hw, params):
    """Reduce (n, d) tokens on an h*w grid to (n/ratio^2, d)."""
    h, w = hw
    n, d = x.shape
    if h * w != n:
        raise DimensionError("grid %dx%d does not hold %d tokens" % (h, w, n))
    if d != params.dim:
        raise DimensionError("token width %d, reducer built for %d" % (d, params.dim))
    r = params.ratio
    if h % r or w % r:
        raise DimensionError("grid %dx%d not divisible by sr ratio %d" % (h, w, r))
    grid = T.reshape(T.transpose(T.reshape(x, (h, w, d)), (2, 0, 1)), (1, d, h, w))
    if params.conv is not None:
        red = params.conv(grid)
    else:
        red = T.avg_pool2d(grid, r, r)
    hs, ws = h // r, w // r
    out = T.transpose(T.reshape(red, (d, hs * ws)), (1, 0))
    if params.norm is not None:
        out = params.norm(out)
    return out


class Attention(Module):
    """Projection weights plus mixing configuration for generalized_attention.

    squeeze=True narrows q/k to one column per head (strip mode, unit scale);
    squeeze=False keeps d columns and scales by sqrt(d/h).
    """

    def __init__(self, dim, heads, rng, sr_ratio=1, squeeze=True, sr_mode="conv",
                 csr_norm=True, drop=0.0, dtype=np.float32):
        if dim < 1 or heads < 1 or dim % heads:
            raise ParameterError("width %d not divisible by %d heads" % (dim, heads))
        if sr_ratio < 1:
            raise ParameterError("sr_ratio must be >= 1, got %d" % sr_ratio)
        if not 0.0 <= drop < 1.0:
            raise ParameterError("drop rate must lie in [0, 1), got %r" % (drop,))
        qk_dim = heads if squeeze else dim
        self.wq = Linear(dim, qk_dim, rng, dtype=dtype)
        self.wk = Linear(dim, qk_dim, rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)
        self.sr = (SpatialReduce(dim, sr_ratio, rng, mode=sr_mode, norm=csr_norm, dtype=dtype)
                   if sr_ratio > 1 else None)
        self.dim = dim
        self.heads = heads
        self.sr_ratio = sr_ratio
        self.squeeze = squeeze
        self.drop = drop
        self.inv_scale = 1.0 if squeeze else 1.0 / math.sqrt(dim / heads)

    def forward(self, x, hw=None, training=False, rng=None, return_attn=False):
        return generalized_attention(x, hw, self, training=training, rng=rng,
                                     return_attn=return_attn)


def grid_for_tokens(n, k):
    """Pick an (h, w) factorization of n tokens with both sides divisible by k."""
    root = math.isqrt(n)
    if root * root == n and (k == 1 or root % k == 0):
        return root, root
    if k == 1:
        return 1, n
    if n % (k * k):
        raise ParameterError("sr ratio %d cannot tile %d tokens" % (k, n))
    return k, n // k


def strip_params(dim, heads, sr_ratio, rng, **kwargs):
    """Strip-mode weights: q/k squeezed to one column per head."""
    return Attention(dim, heads, rng, sr_ratio=sr_ratio, squeeze=True, **kwargs)


def mhsa_params(dim, heads, rng, **kwargs):
    """Full-width reference weights: no squeeze, no spatial reduction."""
    return Attention(dim, heads, rng, sr_ratio=1, squeeze=False, **kwargs)


def generalized_attention(x, hw, params, training=False, rng=None, return_attn=False):
    """Shared mixing path: project, optionally reduce, attend per head, merge.

    x is one image's tokens, (n, d). Returns (n, d); with return_attn also the
    per-head attention maps, each (n, ns) with unit row sums.
    """
    if x.ndim != 2:
        raise DimensionError("attention expects (tokens, width), got %r" % (x.shape,))
    n, d = x.shape
    if d != params.dim:
        raise DimensionError("token width %d, weights built for %d" % (d, params.dim))
    shapes = AttnShapes.derive(n, d, params.heads, params.sr_ratio)
    if params.sr is not None:
        if hw is None:
            raise ParameterError("sr_ratio %d needs the token grid hw" % params.sr_ratio)
        reduced = csr_spatial_reduce(x, hw, params.sr)
    else:
        reduced = x

    q = params.wq(x)
    k = params.wk(reduced)
    v = params.wv(reduced)
    head_qk = q.shape[1] // params.heads
    head_v = d // params.heads

    mixed = []
    maps = []
    for i in range(params.heads):
        qi = T.narrow(q, 1, i * head_qk, head_qk)
        ki = T.narrow(k, 1, i * head_qk, head_qk)
        vi = T.narrow(v, 1, i * head_v, head_v)
        logits = T.mul_scalar(T.matmul(qi, T.transpose(ki, (1, 0))), params.inv_scale)
        attn = T.softmax(logits, axis=-1)
        mixed.append(T.matmul(attn, vi))
        maps.append(attn)
    out = mixed[0] if params.heads == 1 else T.concat(mixed, axis=1)
    out = params.wo(out)
    out = T.dropout(out, params.drop, rng=rng, training=training)
    if return_attn:
        return out, maps
    return out


def strip_attention(x, hw, params, training=False, rng=None, return_attn=False):
    """Strip-mode entry; params must be squeezed."""
    if not params.squeeze:
        raise ParameterError("strip_attention needs squeezed q/k weights")
    return generalized_attention(x, hw, params, training=training, rng=rng,
                                 return_attn=return_attn)


def reference_mhsa(x, params, training=False, rng=None, return_attn=False):
    """Full-width reference entry; params must be unsqueezed with sr_ratio 1."""
    if params.squeeze or params.sr_ratio != 1:
        raise ParameterError("reference_mhsa needs full-width weights and sr_ratio 1")
    return generalized_attention(x, None, params, training=training, rng=rng,
                                 return_attn=return_attn)

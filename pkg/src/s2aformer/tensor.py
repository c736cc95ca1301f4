"""float32/float64 tensors over numpy with reverse-mode autodiff.

Every op returns a fresh Tensor; when any input requires grad the op attaches
a closure computing input gradients from the output gradient. backward() walks
the graph once in reverse topological order and then consumes it. Matmul, conv
and linear tally multiply-accumulate counts into any active MacCounter, which
is the instrumented route the analytic cost model is checked against.

Broadcasting is deliberately narrow: bias add over the last axis and a
per-channel (N,C,1,1) gate are the only mixed-shape ops.
"""

import math

import numpy as np
from scipy import special

from .errors import DimensionError, GraphStateError, ParameterError

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
DTYPES = {"f32": F32, "f64": F64}

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class MacCounter:
    """Context manager tallying forward multiply-accumulates while active."""

    _active = []

    def __init__(self):
        self.total = 0

    def __enter__(self):
        MacCounter._active.append(self)
        return self

    def __exit__(self, *exc):
        MacCounter._active.remove(self)
        return False


def _tally(macs):
    for counter in MacCounter._active:
        counter.total += macs


class BranchTrace:
    """Context manager recording the branch pattern of every relu evaluated
    while active, in call order.

    Two forward passes follow the same smooth piece of the network function
    exactly when their recorded patterns match; finite differences are only
    trustworthy in that case.
    """

    _active = []

    def __init__(self):
        self.masks = []

    def __enter__(self):
        BranchTrace._active.append(self)
        return self

    def __exit__(self, *exc):
        BranchTrace._active.remove(self)
        return False

    def halves_agree(self):
        """True when the first and second half of the trace picked the same
        branches (the trace must hold exactly two forward passes)."""
        n = len(self.masks)
        if n % 2:
            raise ParameterError("branch trace does not hold two equal passes")
        half = n // 2
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.masks[:half], self.masks[half:])
        )


class Tensor:
    """Dense array plus optional gradient slot and graph linkage."""

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (F32, F64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._consumed = False

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

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return "Tensor(shape=%r, dtype=%s, requires_grad=%s)" % (
            self.shape, self.dtype.name, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _from_op(data, parents, grad_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ParameterError(
                "dtype mismatch: %s vs %s" % (dt.name, t.dtype.name))


def backward(loss):
    """Accumulate gradients of a scalar loss into every requires_grad leaf.

    The graph is consumed: a second backward through any visited node raises
    GraphStateError. Leaf .grad slots accumulate across separate graphs until
    the caller clears them.
    """
    if not isinstance(loss, Tensor):
        raise ParameterError("backward expects a Tensor")
    if loss.data.size != 1:
        raise DimensionError("backward needs a scalar loss, got shape %r" % (loss.shape,))
    if loss._consumed:
        raise GraphStateError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        loss._consumed = True
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node._consumed:
                raise GraphStateError("graph already consumed by a previous backward")
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._grad_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._grad_fn = None
        node._consumed = True


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b):
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        def grad_fn(g):
            return g, g
        return _from_op(a.data + b.data, (a, b), grad_fn)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))

        def grad_fn(g):
            return g, g.sum(axis=lead)
        return _from_op(a.data + b.data, (a, b), grad_fn)
    raise DimensionError("add: incompatible shapes %r and %r" % (a.shape, b.shape))


def mul(a, b):
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        def grad_fn(g):
            return g * b.data, g * a.data
        return _from_op(a.data * b.data, (a, b), grad_fn)
    if (a.ndim == 4 and b.ndim == 4
            and b.shape == (a.shape[0], a.shape[1], 1, 1)):
        # per-channel gate
        def grad_fn(g):
            return g * b.data, (g * a.data).sum(axis=(2, 3), keepdims=True)
        return _from_op(a.data * b.data, (a, b), grad_fn)
    raise DimensionError("mul: incompatible shapes %r and %r" % (a.shape, b.shape))


def mul_scalar(a, s):
    s = float(s)

    def grad_fn(g):
        return (g * s,)
    return _from_op(a.data * s, (a,), grad_fn)


def reshape(a, shape):
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)
    return _from_op(a.data.reshape(shape), (a,), grad_fn)


def transpose(a, axes):
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inv),)
    return _from_op(a.data.transpose(axes), (a,), grad_fn)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if not 0 <= axis < a.ndim:
        raise DimensionError("narrow: axis %d out of range for ndim %d" % (axis, a.ndim))
    if start < 0 or length <= 0 or start + length > a.shape[axis]:
        raise DimensionError("narrow: window [%d, %d) exceeds axis size %d"
                             % (start, start + length, a.shape[axis]))
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    in_shape = a.shape

    def grad_fn(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[index] = g
        return (full,)
    return _from_op(a.data[index].copy(), (a,), grad_fn)


def concat(tensors, axis):
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    _check_same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        pieces = []
        index = [slice(None)] * g.ndim
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(int(lo), int(hi))
            pieces.append(g[tuple(index)])
        return tuple(pieces)
    return _from_op(np.concatenate([t.data for t in tensors], axis=axis),
                    tuple(tensors), grad_fn)


def sum_all(a):
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)
    return _from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), grad_fn)


# ---------------------------------------------------------------------------
# activations and normalizers

def relu(a):
    mask = a.data > 0
    for trace in BranchTrace._active:
        trace.masks.append(mask)

    def grad_fn(g):
        return (g * mask,)
    return _from_op(np.maximum(a.data, 0), (a,), grad_fn)


def gelu(a):
    """Exact erf-based gelu."""
    x = a.data
    e = special.erf(x * _INV_SQRT2)

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (0.5 * (1.0 + e) + x * pdf),)
    return _from_op(0.5 * x * (1.0 + e), (a,), grad_fn)


def sigmoid(a):
    y = special.expit(a.data)

    def grad_fn(g):
        return (g * y * (1.0 - y),)
    return _from_op(y, (a,), grad_fn)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)
    return _from_op(y, (a,), grad_fn)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply per-feature affine."""
    _check_same_dtype(a, gain, bias)
    width = a.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError("layer_norm: affine shapes %r/%r do not match width %d"
                             % (gain.shape, bias.shape, width))
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(a.ndim - 1))

    def grad_fn(g):
        dxhat = g * gain.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _from_op(out, (a, gain, bias), grad_fn)


def batch_norm_inference(a, gain, bias, mean, var, eps=1e-5):
    """Frozen-statistics channel norm for NCHW maps; mean/var are buffers."""
    _check_same_dtype(a, gain, bias, mean, var)
    if a.ndim != 4:
        raise DimensionError("batch_norm_inference expects NCHW, got %r" % (a.shape,))
    c = a.shape[1]
    for t in (gain, bias, mean, var):
        if t.shape != (c,):
            raise DimensionError("batch_norm_inference: affine/stat shape %r for %d channels"
                                 % (t.shape, c))
    inv = (1.0 / np.sqrt(var.data + eps)).reshape(1, c, 1, 1)
    xhat = (a.data - mean.data.reshape(1, c, 1, 1)) * inv
    out = xhat * gain.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        dx = g * gain.data.reshape(1, c, 1, 1) * inv
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return _from_op(out, (a, gain, bias), grad_fn)


def dropout(a, rate, rng=None, training=False):
    """Inverted-scaling dropout; the exact input tensor comes back when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError("dropout rate must lie in [0, 1), got %r" % (rate,))
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng stream")
    keep = rng.uniform(a.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep.astype(a.dtype) * np.asarray(scale, dtype=a.dtype)

    def grad_fn(g):
        return (g * mask,)
    return _from_op(a.data * mask, (a,), grad_fn)


# ---------------------------------------------------------------------------
# contractions

def matmul(a, b):
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul is 2-D only, got %r @ %r" % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul: inner dims differ, %r @ %r" % (a.shape, b.shape))
    _tally(a.shape[0] * a.shape[1] * b.shape[1])

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g
    return _from_op(a.data @ b.data, (a, b), grad_fn)


def linear(x, weight, bias=None):
    """x[t, din] @ weight[din, dout] + bias."""
    _check_same_dtype(x, weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError("linear expects 2-D input and weight, got %r, %r"
                             % (x.shape, weight.shape))
    if x.shape[1] != weight.shape[0]:
        raise DimensionError("linear: input width %d != weight rows %d"
                             % (x.shape[1], weight.shape[0]))
    _tally(x.shape[0] * weight.shape[0] * weight.shape[1])
    out = x.data @ weight.data
    if bias is None:
        def grad_fn(g):
            return g @ weight.data.T, x.data.T @ g
        return _from_op(out, (x, weight), grad_fn)
    _check_same_dtype(x, bias)
    if bias.shape != (weight.shape[1],):
        raise DimensionError("linear: bias shape %r for %d outputs"
                             % (bias.shape, weight.shape[1]))

    def grad_fn(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)
    return _from_op(out + bias.data, (x, weight, bias), grad_fn)


def _conv_out_size(size, k, stride, pad):
    out = (size + 2 * pad - k) // stride + 1
    if out < 1:
        raise DimensionError("conv window %d over size %d (pad %d) is empty" % (k, size, pad))
    return out


def _im2col(x, kh, kw, stride, pad, out_h, out_w):
    n, c, _, _ = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * out_h:stride,
                                 j:j + stride * out_w:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(cols, x_shape, kh, kw, stride, pad, out_h, out_w):
    n, c, h, w = x_shape
    acc = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            acc[:, :, i:i + stride * out_h:stride,
                j:j + stride * out_w:stride] += cols[:, :, i, j]
    if pad:
        acc = acc[:, :, pad:pad + h, pad:pad + w]
    return acc


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-D convolution on NCHW input; weight is [cout, cin/groups, kh, kw]."""
    _check_same_dtype(x, weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight, got %r, %r"
                             % (x.shape, weight.shape))
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise DimensionError("conv2d: %d groups cannot tile cin=%d, cout=%d"
                             % (groups, cin, cout))
    if cin_g != cin // groups:
        raise DimensionError("conv2d: weight expects %d input channels per group, input has %d"
                             % (cin_g, cin // groups))
    out_h = _conv_out_size(h, kh, stride, padding)
    out_w = _conv_out_size(w, kw, stride, padding)
    _tally(n * out_h * out_w * cout * cin_g * kh * kw)

    cols = _im2col(x.data, kh, kw, stride, padding, out_h, out_w)
    cols_g = cols.reshape(n, groups, cin_g * kh * kw, out_h * out_w)
    w_g = weight.data.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(w_g[None], cols_g)
    out = out.reshape(n, cout, out_h, out_w)
    x_shape = x.shape

    def grad_x_w(g):
        g_g = g.reshape(n, groups, cout // groups, out_h * out_w)
        dw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        dcols = np.matmul(w_g.transpose(0, 2, 1)[None], g_g)
        dx = _col2im(dcols.reshape(n, cin * kh * kw, out_h * out_w),
                     x_shape, kh, kw, stride, padding, out_h, out_w)
        return dx, dw.reshape(weight.shape)

    if bias is None:
        def grad_fn(g):
            return grad_x_w(g)
        return _from_op(out, (x, weight), grad_fn)
    _check_same_dtype(x, bias)
    if bias.shape != (cout,):
        raise DimensionError("conv2d: bias shape %r for %d outputs" % (bias.shape, cout))

    def grad_fn(g):
        dx, dw = grad_x_w(g)
        return dx, dw, g.sum(axis=(0, 2, 3))
    return _from_op(out + bias.data.reshape(1, cout, 1, 1), (x, weight, bias), grad_fn)


def avg_pool2d(x, k, stride=None):
    """Non-padded average pooling on NCHW input."""
    if x.ndim != 4:
        raise DimensionError("avg_pool2d expects NCHW, got %r" % (x.shape,))
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    out_h = _conv_out_size(h, k, stride, 0)
    out_w = _conv_out_size(w, k, stride, 0)
    acc = np.zeros((n, c, out_h, out_w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            acc += x.data[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
    inv = 1.0 / (k * k)
    x_shape = x.shape

    def grad_fn(g):
        dx = np.zeros(x_shape, dtype=g.dtype)
        gi = g * np.asarray(inv, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += gi
        return (dx,)
    return _from_op(acc * np.asarray(inv, dtype=x.dtype), (x,), grad_fn)


def global_avg_pool(x):
    """NCHW -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects NCHW, got %r" % (x.shape,))
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    x_shape = x.shape

    def grad_fn(g):
        per = (g * np.asarray(inv, dtype=g.dtype))[:, :, None, None]
        return (np.broadcast_to(per, x_shape).copy(),)
    return _from_op(x.data.mean(axis=(2, 3)), (x,), grad_fn)


def cross_entropy(logits, labels):
    """Mean softmax cross entropy; labels is an int array of class ids."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects (batch, classes) logits, got %r"
                             % (logits.shape,))
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy: %d labels for %d rows"
                             % (labels.size, logits.shape[0]))
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ParameterError("cross_entropy: label outside [0, %d)" % logits.shape[1])
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(b), labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)
    return _from_op(np.asarray(nll, dtype=logits.dtype), (logits,), grad_fn)

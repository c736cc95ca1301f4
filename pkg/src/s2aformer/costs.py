"""Parameter and multiply-accumulate accounting.

Two independent routes exist for every count: the analytic walk in this module
and the instrumented counter inside the tensor ops (MacCounter). reconcile_ssa
ties the published closed form for strip attention to the instrumented count
via three explicit correction terms (output projection, per-head map width,
reduction conv), and verify_inequality checks the cost chain
ssa <= bound_a < mhsa on concrete shapes.

Counting convention: one MAC per multiply-accumulate inside conv, linear and
matmul. Biases, norms, softmax, activations, pooling and elementwise products
count zero.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .attention import Attention, SpatialReduce, generalized_attention, grid_for_tokens
from .backbone import HybridBlock, S2AFormer, Stage, VariantConfig, _halve
from .blocks import LocalInteraction, Mlp, PatchEmbed, SqueezeExcite, Stem
from .errors import ContractError, ParameterError
from .nn import BatchNormInference, Conv2d, LayerNorm, Linear, Module
from .rng import INIT_STREAM, RngStream
from .tensor import MacCounter, Tensor


@dataclass(frozen=True)
class FormulaInputs:
    """Shape bundle the closed forms are evaluated on."""

    n: int
    d: int
    h: int
    k: int

    def __post_init__(self):
        if min(self.n, self.d, self.h, self.k) < 1:
            raise ParameterError("formula inputs must be positive, got %r" % (self,))
        if self.d % self.h:
            raise ParameterError("width %d not divisible by %d heads" % (self.d, self.h))

    @property
    def ns(self):
        frac = Fraction(self.n, self.k * self.k)
        if frac.denominator != 1:
            raise ContractError("reduced token count n/k^2 = %s is not integral" % frac)
        return int(frac)


def _integral(label, frac):
    if frac.denominator != 1:
        raise ContractError("term %s = %s is not integral" % (label, frac))
    return int(frac)


def mhsa_macs_formula(n, d):
    """Full-width attention: 3*n*d^2 projections + 2*n^2*d mixing."""
    if n < 1 or d < 1:
        raise ParameterError("formula needs positive n, d")
    return 3 * n * d * d + 2 * n * n * d


def ssa_macs_breakdown(inputs):
    """The five closed-form terms for strip attention, labeled."""
    n, d, h, k2 = inputs.n, inputs.d, inputs.h, inputs.k ** 2
    inputs.ns  # force the divisibility check
    terms = [
        ("n*d^2/k^2", Fraction(n * d * d, k2)),
        ("n^2/k^2", Fraction(n * n, k2)),
        ("n^2*d/k^2", Fraction(n * n * d, k2)),
        ("n*d*h", Fraction(n * d * h)),
        ("n*d*h/k^2", Fraction(n * d * h, k2)),
    ]
    return [(label, _integral(label, frac)) for label, frac in terms]


def ssa_macs_formula(inputs):
    return sum(value for _, value in ssa_macs_breakdown(inputs))


def bound_a_macs_formula(inputs):
    """Intermediate bound between strip attention and the full-width cost."""
    n, d, k2 = inputs.n, inputs.d, inputs.k ** 2
    t1 = _integral("(1+2/k^2)*n*d^2", Fraction(n * d * d * (k2 + 2), k2))
    t2 = _integral("((1+d)/k^2)*n^2", Fraction(n * n * (1 + d), k2))
    return t1 + t2


@dataclass(frozen=True)
class InequalityReport:
    inputs: FormulaInputs
    ssa: int
    bound_a: int
    mhsa: int
    holds: bool
    strict: bool


def verify_inequality(inputs):
    """Evaluate ssa <= bound_a < mhsa on one shape; strict only when k > 1."""
    ssa = ssa_macs_formula(inputs)
    bound = bound_a_macs_formula(inputs)
    mhsa = mhsa_macs_formula(inputs.n, inputs.d)
    return InequalityReport(inputs, ssa, bound, mhsa,
                            holds=(ssa <= bound < mhsa), strict=inputs.k > 1)


@dataclass(frozen=True)
class ReconcileReport:
    inputs: FormulaInputs
    formula: int
    out_proj: int
    qk_head_extra: int
    csr_conv: int
    expected: int
    counted: int
    holds: bool


def reconcile_ssa(inputs, sr_mode="conv"):
    """Check formula + corrections == instrumented count on a real forward.

    Corrections: the closed form books the output projection separately
    (n*d^2), prices attention maps at one head (n*ns*(h-1) extra), and ignores
    the reduction conv (n*d, conv mode only).
    """
    formula = ssa_macs_formula(inputs)
    out_proj = inputs.n * inputs.d * inputs.d
    qk_extra = inputs.n * inputs.ns * (inputs.h - 1)
    csr = inputs.n * inputs.d if (inputs.k > 1 and sr_mode == "conv") else 0
    expected = formula + out_proj + qk_extra + csr

    params = Attention(inputs.d, inputs.h, RngStream(0, INIT_STREAM),
                       sr_ratio=inputs.k, squeeze=True, sr_mode=sr_mode)
    x = Tensor(np.zeros((inputs.n, inputs.d), dtype=np.float32))
    with MacCounter() as counter:
        generalized_attention(x, grid_for_tokens(inputs.n, inputs.k), params)
    return ReconcileReport(inputs, formula, out_proj, qk_extra, csr,
                           expected, counter.total, holds=(counter.total == expected))


# ---------------------------------------------------------------------------
# analytic per-module counting

def count_params(module):
    """Trainable parameter total (buffers excluded)."""
    return module.param_count()


def conv_macs(conv, hw, batch=1):
    cout, cin_g, kh, kw = conv.weight.shape
    out_h = (hw[0] + 2 * conv.padding - kh) // conv.stride + 1
    out_w = (hw[1] + 2 * conv.padding - kw) // conv.stride + 1
    macs = batch * out_h * out_w * cout * cin_g * kh * kw
    return macs, (out_h, out_w)


def linear_macs(lin, tokens):
    din, dout = lin.weight.shape
    return tokens * din * dout


def se_macs(se, batch=1):
    return linear_macs(se.reduce, batch) + linear_macs(se.expand, batch)


def lim_macs(lim, hw, batch=1):
    total, _ = conv_macs(lim.pw_in, hw, batch)
    dw, _ = conv_macs(lim.dw, hw, batch)
    out, _ = conv_macs(lim.pw_out, hw, batch)
    return total + dw + out + se_macs(lim.se, batch)


def mlp_macs(mlp, tokens):
    return linear_macs(mlp.fc_in, tokens) + linear_macs(mlp.fc_out, tokens)


def attention_macs(attn, n_tokens, batch=1):
    """Instrumentation-exact count for one generalized_attention call per image."""
    d, heads, k = attn.dim, attn.heads, attn.sr_ratio
    if n_tokens % (k * k):
        raise ParameterError("sr ratio %d cannot tile %d tokens" % (k, n_tokens))
    ns = n_tokens // (k * k)
    qk_dim = heads if attn.squeeze else d
    per_image = (
        n_tokens * d * qk_dim        # q projection
        + ns * d * qk_dim            # k projection
        + ns * d * d                 # v projection
        + n_tokens * ns * qk_dim     # attention logits over all heads
        + n_tokens * ns * d          # attention-weighted values
        + n_tokens * d * d           # output projection
    )
    if attn.sr is not None and attn.sr.conv is not None:
        per_image += ns * k * k * d  # depthwise reduction conv
    return batch * per_image


def stem_macs(stem, hw, batch=1):
    m1, hw = conv_macs(stem.conv1, hw, batch)
    m2, hw = conv_macs(stem.conv2, hw, batch)
    m3, hw = conv_macs(stem.conv3, hw, batch)
    return m1 + m2 + m3, hw


def hpb_macs(block, hw, batch=1):
    tokens = hw[0] * hw[1]
    total, _ = conv_macs(block.dw, hw, batch)
    total += attention_macs(block.attn, tokens, batch)
    if block.lim is not None:
        total += lim_macs(block.lim, hw, batch)
    total += mlp_macs(block.mlp, batch * tokens)
    return total


def count_macs(module, input_shape):
    """Analytic MAC count for a module given its input shape.

    4-D shapes are (batch, channels, h, w); 2-D shapes are (tokens, width)
    and count a single image for attention-style modules.
    """
    if isinstance(module, S2AFormer):
        batch, _, h, w = input_shape
        total, hw = stem_macs(module.stem, (h, w), batch)
        for stage in module.stages:
            macs, hw = _stage_macs(stage, hw, batch)
            total += macs
        total += linear_macs(module.head, batch)
        return total
    if isinstance(module, Stage):
        batch, _, h, w = input_shape
        return _stage_macs(module, (h, w), batch)[0]
    if isinstance(module, HybridBlock):
        batch, _, h, w = input_shape
        return hpb_macs(module, (h, w), batch)
    if isinstance(module, Attention):
        return attention_macs(module, input_shape[0])
    if isinstance(module, SpatialReduce):
        n_tokens = input_shape[0]
        if module.conv is None:
            return 0
        return (n_tokens // module.ratio ** 2) * module.ratio ** 2 * module.dim
    if isinstance(module, LocalInteraction):
        batch, _, h, w = input_shape
        return lim_macs(module, (h, w), batch)
    if isinstance(module, SqueezeExcite):
        return se_macs(module, input_shape[0])
    if isinstance(module, Stem):
        batch, _, h, w = input_shape
        return stem_macs(module, (h, w), batch)[0]
    if isinstance(module, PatchEmbed):
        batch, _, h, w = input_shape
        return conv_macs(module.conv, (h, w), batch)[0]
    if isinstance(module, Mlp):
        return mlp_macs(module, input_shape[0])
    if isinstance(module, Linear):
        return linear_macs(module, input_shape[0])
    if isinstance(module, Conv2d):
        batch, _, h, w = input_shape
        return conv_macs(module, (h, w), batch)[0]
    if isinstance(module, (LayerNorm, BatchNormInference)):
        return 0
    raise ParameterError("no MAC model for %r" % type(module).__name__)


def _stage_macs(stage, hw, batch=1):
    total, hw = conv_macs(stage.embed.conv, hw, batch)
    for block in stage.blocks:
        total += hpb_macs(block, hw, batch)
    return total, hw


# ---------------------------------------------------------------------------
# cost report

@dataclass(frozen=True)
class CostReport:
    variant: str
    res: int
    params: int
    macs: int
    modules: tuple

    def to_json_dict(self):
        return {"variant": self.variant, "res": self.res, "params": self.params,
                "macs": self.macs, "modules": [_node_dict(m) for m in self.modules]}

    def to_text(self):
        rows = [("module", "params", "macs")]
        for node in self.modules:
            _node_rows(node, 0, rows)
        rows.append(("total", str(self.params), str(self.macs)))
        name_w = max(len(r[0]) for r in rows)
        par_w = max(len(r[1]) for r in rows)
        mac_w = max(len(r[2]) for r in rows)
        lines = ["%-*s  %*s  %*s" % (name_w, n, par_w, p, mac_w, m) for n, p, m in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


def _node_dict(node):
    return {"name": node["name"], "params": node["params"], "macs": node["macs"],
            "children": [_node_dict(c) for c in node["children"]]}


def _node_rows(node, depth, rows):
    rows.append(("  " * depth + node["name"], str(node["params"]), str(node["macs"])))
    for child in node["children"]:
        _node_rows(child, depth + 1, rows)


def _node(name, params, macs, children=()):
    return {"name": name, "params": params, "macs": macs, "children": list(children)}


def _leaf(name, module, macs):
    return _node(name, count_params(module), macs)


def build_cost_report(model, res):
    """Per-module params/MACs for one image at res x res input."""
    model.pyramid_shapes((res, res))
    hw = (res, res)
    modules = []

    stem = model.stem
    stem_children = []
    for name, conv, bn in (("conv1", stem.conv1, stem.bn1),
                           ("conv2", stem.conv2, stem.bn2),
                           ("conv3", stem.conv3, stem.bn3)):
        macs, hw = conv_macs(conv, hw)
        stem_children.append(_leaf(name, conv, macs))
        stem_children.append(_leaf(name.replace("conv", "norm"), bn, 0))
    modules.append(_node("stem", count_params(stem), sum(c["macs"] for c in stem_children),
                         stem_children))

    for i, stage in enumerate(model.stages):
        children = []
        macs, hw = conv_macs(stage.embed.conv, hw)
        children.append(_node("embed", count_params(stage.embed), macs, [
            _leaf("conv", stage.embed.conv, macs),
            _leaf("norm", stage.embed.norm, 0),
        ]))
        tokens = hw[0] * hw[1]
        for j, block in enumerate(stage.blocks):
            dw_macs, _ = conv_macs(block.dw, hw)
            block_children = [
                _leaf("dw", block.dw, dw_macs),
                _leaf("norm1", block.norm1, 0),
                _leaf("attn", block.attn, attention_macs(block.attn, tokens)),
            ]
            if block.lim is not None:
                block_children.append(_leaf("norm2", block.norm2, 0))
                block_children.append(_leaf("lim", block.lim, lim_macs(block.lim, hw)))
            block_children.append(_leaf("norm3", block.norm3, 0))
            block_children.append(_leaf("mlp", block.mlp, mlp_macs(block.mlp, tokens)))
            children.append(_node("block%d" % j, count_params(block),
                                  sum(c["macs"] for c in block_children), block_children))
        modules.append(_node("stage%d" % (i + 1),
                             count_params(stage.embed) + sum(count_params(b) for b in stage.blocks),
                             sum(c["macs"] for c in children), children))

    head_children = [_leaf("norm", model.norm, 0),
                     _leaf("fc", model.head, linear_macs(model.head, 1))]
    modules.append(_node("head", count_params(model.norm) + count_params(model.head),
                         sum(c["macs"] for c in head_children), head_children))

    return CostReport(model.config.name, res,
                      params=count_params(model),
                      macs=sum(m["macs"] for m in modules),
                      modules=tuple(modules))


def stage_formula_inputs(config, res):
    """FormulaInputs for each stage of a variant at res x res input."""
    size = _halve(res)
    out = []
    for stage in config.stages:
        size = _halve(size)
        out.append(FormulaInputs(n=size * size, d=stage.channels,
                                 h=stage.heads, k=stage.sr_ratio))
    return out

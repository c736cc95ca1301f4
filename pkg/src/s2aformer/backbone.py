"""Four-stage pyramid backbone built from hybrid perception blocks.

Each stage halves resolution (stem plus one patch embed per stage gives
strides 4/8/16/32) and runs a fixed number of blocks. A block chains four
residual branches: depthwise conv, strip attention, optional local
interaction, and a token MLP, with a layer norm in front of each non-conv
branch. Also home to the parameter manifest format and the toy training loop.
"""

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .attention import Attention, generalized_attention
from .blocks import LocalInteraction, Mlp, PatchEmbed, Stem, from_tokens, to_tokens
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .nn import Conv2d, LayerNorm, Linear, Module
from .rng import INIT_STREAM, RngStream
from .tensor import Tensor, backward

SR_RATIOS = (8, 4, 2, 1)
HEADS = (1, 2, 4, 8)


@dataclass(frozen=True)
class StageConfig:
    channels: int
    blocks: int
    sr_ratio: int
    heads: int
    mlp_ratio: float = 4.0

    def validate(self):
        if self.channels < 1 or self.heads < 1:
            raise ConfigError("stage needs positive channels/heads, got %r" % (self,))
        if self.blocks < 0:
            raise ConfigError("stage blocks must be >= 0, got %d" % self.blocks)
        if self.channels % self.heads:
            raise ConfigError("channels %d not divisible by %d heads"
                              % (self.channels, self.heads))
        if self.sr_ratio not in (1, 2, 4, 8):
            raise ConfigError("sr_ratio must be one of 1/2/4/8, got %d" % self.sr_ratio)
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive, got %r" % (self.mlp_ratio,))


@dataclass(frozen=True)
class VariantConfig:
    name: str
    stages: tuple
    num_classes: int = 1000
    lim_enabled: bool = True
    sr_mode: str = "conv"
    drop_rate: float = 0.0

    def validate(self):
        if len(self.stages) != 4:
            raise ConfigError("expected 4 stages, got %d" % len(self.stages))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2, got %d" % self.num_classes)
        if self.sr_mode not in ("conv", "pool"):
            raise ConfigError("sr_mode must be conv or pool, got %r" % (self.sr_mode,))
        if self.stages[0].channels % 2:
            raise ConfigError("first stage width must be even for the stem, got %d"
                              % self.stages[0].channels)
        for stage in self.stages:
            stage.validate()

    def to_dict(self):
        return {
            "name": self.name,
            "stages": [{"channels": s.channels, "blocks": s.blocks,
                        "sr_ratio": s.sr_ratio, "heads": s.heads,
                        "mlp_ratio": s.mlp_ratio} for s in self.stages],
            "num_classes": self.num_classes,
            "lim_enabled": self.lim_enabled,
            "sr_mode": self.sr_mode,
        }

    @classmethod
    def from_dict(cls, raw):
        try:
            stages = tuple(StageConfig(
                channels=int(s["channels"]), blocks=int(s["blocks"]),
                sr_ratio=int(s["sr_ratio"]), heads=int(s["heads"]),
                mlp_ratio=float(s.get("mlp_ratio", 4.0))) for s in raw["stages"])
            cfg = cls(name=str(raw["name"]), stages=stages,
                      num_classes=int(raw.get("num_classes", 1000)),
                      lim_enabled=bool(raw.get("lim_enabled", True)),
                      sr_mode=str(raw.get("sr_mode", "conv")),
                      drop_rate=float(raw.get("drop_rate", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("malformed variant config: %s" % exc) from None
        cfg.validate()
        return cfg


def _standard(name, channels, blocks, num_classes=1000):
    stages = tuple(StageConfig(c, b, k, h)
                   for c, b, k, h in zip(channels, blocks, SR_RATIOS, HEADS))
    return VariantConfig(name, stages, num_classes=num_classes)


VARIANTS = {
    "mini": _standard("mini", (32, 64, 128, 256), (2, 2, 2, 2)),
    "t": _standard("t", (48, 64, 128, 256), (2, 2, 6, 2)),
    "xs": _standard("xs", (48, 64, 128, 256), (2, 2, 10, 2)),
    "s": _standard("s", (48, 64, 128, 256), (2, 4, 24, 4)),
    "m": _standard("m", (96, 128, 256, 512), (2, 4, 20, 2)),
    # desk-scale configs: one block per stage for gradient checks, two
    # blocks total (later stages are embed-only) for the training loop
    "toy": _standard("toy", (8, 16, 32, 64), (1, 1, 1, 1), num_classes=2),
    "toy2": _standard("toy2", (8, 16, 32, 64), (1, 1, 0, 0), num_classes=2),
}

ORDERED_VARIANTS = ("mini", "t", "xs", "s", "m")


class HybridBlock(Module):
    """Residual chain: depthwise conv, strip attention, optional local
    interaction, token MLP; layer norm ahead of each tokenized branch."""

    def __init__(self, dim, heads, sr_ratio, rng, mlp_ratio=4.0, lim_enabled=True,
                 sr_mode="conv", drop=0.0, dtype=np.float32):
        self.dw = Conv2d(dim, dim, 3, rng, padding=1, groups=dim, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, heads, rng, sr_ratio=sr_ratio, squeeze=True,
                              sr_mode=sr_mode, drop=drop, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype) if lim_enabled else None
        self.lim = LocalInteraction(dim, rng, dtype=dtype) if lim_enabled else None
        self.norm3 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, mlp_ratio, rng, dtype=dtype)
        self.dim = dim

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        if c != self.dim:
            raise DimensionError("block built for %d channels, got %d" % (self.dim, c))
        x = T.add(self.dw(x), x)
        t = to_tokens(x)
        normed = self.norm1(t)
        mixed = []
        for b in range(n):
            img = T.reshape(T.narrow(normed, 0, b, 1), (h * w, c))
            out = generalized_attention(img, (h, w), self.attn,
                                        training=training, rng=rng)
            mixed.append(T.reshape(out, (1, h * w, c)))
        t = T.add(mixed[0] if n == 1 else T.concat(mixed, axis=0), t)
        if self.lim is not None:
            local = self.lim(from_tokens(self.norm2(t), (h, w)))
            t = T.add(to_tokens(local), t)
        flat = T.reshape(self.norm3(t), (n * h * w, c))
        t = T.add(T.reshape(self.mlp(flat), (n, h * w, c)), t)
        return from_tokens(t, (h, w))


class Stage(Module):
    def __init__(self, in_ch, stage_cfg, variant_cfg, rng, dtype=np.float32):
        s = stage_cfg
        self.embed = PatchEmbed(in_ch, s.channels, rng, dtype=dtype)
        self.blocks = [HybridBlock(s.channels, s.heads, s.sr_ratio, rng,
                                   mlp_ratio=s.mlp_ratio,
                                   lim_enabled=variant_cfg.lim_enabled,
                                   sr_mode=variant_cfg.sr_mode,
                                   drop=variant_cfg.drop_rate, dtype=dtype)
                       for _ in range(s.blocks)]

    def forward(self, x, training=False, rng=None):
        x = self.embed(x)
        for block in self.blocks:
            x = block(x, training=training, rng=rng)
        return x


def _halve(size):
    # 3x3 stride-2 pad-1 conv output size
    return (size - 1) // 2 + 1


class S2AFormer(Module):
    """Stem, four stages, and a pooled classification head. forward returns
    (logits, [F1..F4]) where Fi sits at stride 4*2^i relative to the input."""

    def __init__(self, config, seed=0, dtype=np.float32):
        config.validate()
        rng = RngStream(seed, INIT_STREAM)
        self.stem = Stem(config.stages[0].channels, rng, dtype=dtype)
        self.stages = []
        in_ch = config.stages[0].channels
        for stage_cfg in config.stages:
            self.stages.append(Stage(in_ch, stage_cfg, config, rng, dtype=dtype))
            in_ch = stage_cfg.channels
        self.norm = LayerNorm(in_ch, dtype=dtype)
        self.head = Linear(in_ch, config.num_classes, rng, dtype=dtype)
        self.config = config
        self.seed = seed

    def pyramid_shapes(self, hw):
        """Static (channels, h, w) per stage; raises if any stage cannot tile."""
        h, w = hw
        if h < 1 or w < 1:
            raise DimensionError("input grid %dx%d is empty" % (h, w))
        h, w = _halve(h), _halve(w)  # stem
        shapes = []
        for i, stage in enumerate(self.config.stages):
            h, w = _halve(h), _halve(w)  # patch embed
            k = stage.sr_ratio
            if h < 1 or w < 1 or h % k or w % k:
                raise DimensionError(
                    "stage %d grid %dx%d incompatible with sr_ratio %d" % (i + 1, h, w, k))
            shapes.append((stage.channels, h, w))
        return shapes

    def forward(self, images, training=False, rng=None):
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError("expected (N, 3, H, W) images, got %r" % (images.shape,))
        self.pyramid_shapes((images.shape[2], images.shape[3]))
        x = self.stem(images)
        feats = []
        for stage in self.stages:
            x = stage(x, training=training, rng=rng)
            feats.append(x)
        logits = self.head(self.norm(T.global_avg_pool(x)))
        return logits, feats


def build_variant(config, seed=0, num_classes=None, dtype=np.float32):
    """Build from a VariantConfig or a registered name ('mini', 't', ...)."""
    if isinstance(config, str):
        if config not in VARIANTS:
            raise ConfigError("unknown variant %r (have: %s)"
                              % (config, ", ".join(sorted(VARIANTS))))
        config = VARIANTS[config]
    if not isinstance(config, VariantConfig):
        raise ConfigError("config must be a VariantConfig or a variant name")
    if num_classes is not None:
        config = replace(config, num_classes=num_classes)
    return S2AFormer(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# parameter manifest

MANIFEST_MAGIC = b"S2AF0001"
_DTYPE_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_CODE_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_manifest(model, path):
    """Write every state tensor as little-endian raw bytes behind a JSON index."""
    entries = []
    chunks = []
    offset = 0
    for name, t in model.named_state():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": _DTYPE_CODES[t.data.dtype],
                        "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format": 1, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MANIFEST_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def read_manifest(path):
    """Return the manifest as an ordered list of (name, array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MANIFEST_MAGIC:
        raise ContractError("not a parameter manifest (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError("manifest header unreadable: %s" % exc) from None
    payload = blob[16 + header_len:]
    out = []
    for entry in header["tensors"]:
        dt = _CODE_DTYPES.get(entry["dtype"])
        if dt is None:
            raise ContractError("manifest dtype %r unknown" % (entry["dtype"],))
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContractError("manifest payload truncated at %r" % (entry["name"],))
        arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"])
        out.append((entry["name"], arr.astype(dt.newbyteorder("="), copy=True)))
    return out


def load_manifest(model, path):
    """Load a manifest saved from an identically shaped model, in place."""
    state = dict(model.named_state())
    loaded = read_manifest(path)
    if len(loaded) != len(state):
        raise ContractError("manifest holds %d tensors, model has %d"
                            % (len(loaded), len(state)))
    for name, arr in loaded:
        if name not in state:
            raise ContractError("manifest tensor %r not in model" % name)
        t = state[name]
        if tuple(arr.shape) != t.shape or arr.dtype != t.data.dtype:
            raise ContractError("manifest tensor %r is %r %s, model wants %r %s"
                                % (name, arr.shape, arr.dtype, t.shape, t.data.dtype))
        t.data[...] = arr


# ---------------------------------------------------------------------------
# toy training

def synthetic_blobs(samples, classes, res, rng):
    """Class-coded gaussian blobs with positional jitter and additive noise."""
    labels = (np.arange(samples) % classes).astype(np.int64)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    images = np.zeros((samples, 3, res, res), dtype=np.float32)
    sigma = 0.18 * res
    for s in range(samples):
        c = int(labels[s])
        ang = 2.0 * np.pi * c / classes
        jitter = rng.normal((2,), std=0.04 * res)
        cy = res / 2.0 + 0.25 * res * np.sin(ang) + jitter[0]
        cx = res / 2.0 + 0.25 * res * np.cos(ang) + jitter[1]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
        images[s, c % 3] = blob
        images[s] += 0.05 * rng.normal((3, res, res))
    return images, labels


def train_toy(model, images, labels, steps, lr=0.01, momentum=0.9, rng=None):
    """Plain SGD-with-momentum loop; returns the per-step loss list."""
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    x = images if isinstance(images, Tensor) else Tensor(images)
    losses = []
    for step in range(steps):
        logits, _ = model.forward(x, training=True, rng=rng)
        loss = T.cross_entropy(logits, labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError("loss diverged at step %d (%r)" % (step, value))
        backward(loss)
        for p, v in zip(params, velocity):
            if p.grad is None:
                continue
            v *= momentum
            v += p.grad
            p.data -= lr * v
            p.grad = None
        losses.append(value)
    return losses

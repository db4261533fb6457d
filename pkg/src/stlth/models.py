"""Two miniature style-transfer networks over a shared encoder/decoder skeleton.

The encoder is a small multi-scale stack: per level, two reflect-padded 3x3
convolutions with relu, then a 2x2 average-pool downsample to the next level.
The "adain" model uses four levels (16/32/64/128 channels on 64x64 inputs) and
a parameter-free statistics-matching transform on the deepest level; the
"sanet" model adds a fifth 128-channel level and a learnable attention
transform over the two deepest levels, merged back to the fourth-level
resolution. The decoder mirrors the four-level encoder with nearest-neighbor
upsampling and squashes its output into [0,1] with a sigmoid.

Parameters live in a ParameterRegistry — an ordered, name-keyed collection
tagged by submodule (encoder / transform / decoder) — and every forward pass
accepts an optional mask whose per-tensor {0,1} fields multiply the
convolution weights, so a pruned network is just a registry plus a mask.
"""

import enum
from collections import namedtuple

import numpy as np

from . import ops
from .tensor import Tensor, mul, reshape

EPSILON = 1e-5


class ModelKind(enum.Enum):
    ADAIN = "adain"
    SANET = "sanet"


Entry = namedtuple("Entry", ("name", "tag", "tensor", "prunable"))

# (level, [(c_in, c_out), (c_out, c_out)]) per encoder level; conv kernels are
# 3x3 except where noted. The decoder mirrors ENCODER_LEVELS[:4] in reverse.
ENCODER_LEVELS = {
    ModelKind.ADAIN: ((3, 16), (16, 32), (32, 64), (64, 128)),
    ModelKind.SANET: ((3, 16), (16, 32), (32, 64), (64, 128), (128, 128)),
}
DECODER_STAGES = ((128, 128, 64), (64, 64, 32), (32, 32, 16), (16, 16, 3))
ATTENTION_LEVELS = (4, 5)  # encoder levels the attention transform consumes
ATTENTION_QUERY_CHANNELS = 64
FEATURE_CHANNELS = 128  # channel width of the two deepest levels


class ParameterRegistry:
    """Ordered, uniquely named trainable tensors tagged by submodule."""

    def __init__(self, kind):
        self.kind = kind
        self._entries = {}

    def add(self, name, tag, tensor, prunable):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if tag not in ("encoder", "transform", "decoder"):
            raise ValueError(f"unknown submodule tag {tag!r}")
        self._entries[name] = Entry(name, tag, tensor, prunable)

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def get(self, name):
        return self._entries[name].tensor

    def entry(self, name):
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def prunable_entries(self):
        return [e for e in self._entries.values() if e.prunable]

    def by_tag(self, tag):
        return [e for e in self._entries.values() if e.tag == tag]

    def state(self):
        """Name -> copied value array, in registry order."""
        return {e.name: e.tensor.data.copy() for e in self}

    def load_state(self, state):
        for e in self:
            value = state[e.name]
            if value.shape != e.tensor.shape:
                raise ValueError(f"state shape {value.shape} != parameter {e.name} "
                                 f"shape {tuple(e.tensor.shape)}")
            e.tensor.data[...] = value

    def copy(self):
        dup = ParameterRegistry(self.kind)
        for e in self:
            t = Tensor(e.tensor.data.copy(), requires_grad=e.tensor.requires_grad,
                       dtype=e.tensor.dtype)
            dup.add(e.name, e.tag, t, e.prunable)
        return dup

    def set_trainable(self, trainable, tag=None):
        for e in self:
            if tag is None or e.tag == tag:
                e.tensor.requires_grad = trainable


class EncoderOutput:
    """Per-level feature maps, shallowest first."""

    def __init__(self, levels):
        self.levels = tuple(levels)

    @property
    def deepest(self):
        return self.levels[-1]

    def __len__(self):
        return len(self.levels)


def init_parameters(kind, seed, dtype=np.float32):
    """Fan-in-scaled normal init for conv weights, zero biases, seed-determined."""
    kind = ModelKind(kind)
    rng = np.random.Generator(np.random.PCG64(seed))
    reg = ParameterRegistry(kind)

    def add_conv(name, tag, c_in, c_out, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)
        reg.add(f"{name}.weight", tag, Tensor(w, requires_grad=True, dtype=dtype), True)
        reg.add(f"{name}.bias", tag, Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
                False)

    for level, (c_in, c_out) in enumerate(ENCODER_LEVELS[kind], start=1):
        add_conv(f"encoder.l{level}.c1", "encoder", c_in, c_out, 3)
        add_conv(f"encoder.l{level}.c2", "encoder", c_out, c_out, 3)

    if kind is ModelKind.SANET:
        fc = FEATURE_CHANNELS
        for level in ATTENTION_LEVELS:
            add_conv(f"transform.l{level}.f", "transform", fc, ATTENTION_QUERY_CHANNELS, 1)
            add_conv(f"transform.l{level}.g", "transform", fc, ATTENTION_QUERY_CHANNELS, 1)
            add_conv(f"transform.l{level}.h", "transform", fc, fc, 1)
            add_conv(f"transform.l{level}.out", "transform", fc, fc, 1)
        add_conv("transform.merge", "transform", fc, fc, 3)

    for stage, (c_in, c_mid, c_out) in enumerate(DECODER_STAGES):
        level = 4 - stage
        add_conv(f"decoder.l{level}.c1", "decoder", c_in, c_mid, 3)
        add_conv(f"decoder.l{level}.c2", "decoder", c_mid, c_out, 3)

    return reg


def _masked_conv(x, params, mask, name, padding="reflect"):
    w = params.get(f"{name}.weight")
    bits = None
    if mask is not None:
        m = mask.weight_tensor(f"{name}.weight", w.dtype)
        if m is not None:
            # in-graph product: pruned weights contribute exact zeros to the
            # forward pass and receive exact-zero gradients
            w = mul(w, m)
            bits = mask.get(f"{name}.weight")
    return ops.conv2d(x, w, params.get(f"{name}.bias"), padding=padding,
                      weight_mask=bits)


def encode(image, params, mask=None):
    """Masked multi-level encoder pass; returns all level feature maps."""
    kind = params.kind
    levels = len(ENCODER_LEVELS[kind])
    if image.ndim != 4:
        raise ValueError(f"encode: input must be 4-d (B,3,H,W), got {image.ndim}-d")
    b, c, h, w = image.shape
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ValueError(f"encode: spatial size {h}x{w} must be divisible by {div} "
                         f"({levels} levels)")
    if min(h, w) // div < 2:
        raise ValueError(f"encode: spatial size {h}x{w} leaves the deepest level below 2x2 "
                         f"(needs at least {2 * div}x{2 * div})")

    feats = []
    x = image
    for level in range(1, levels + 1):
        if level > 1:
            x = ops.avg_pool2x2(x)
        x = ops.relu(_masked_conv(x, params, mask, f"encoder.l{level}.c1"))
        x = ops.relu(_masked_conv(x, params, mask, f"encoder.l{level}.c2"))
        feats.append(x)
    return EncoderOutput(feats)


def decode(features, params, mask=None):
    """Mirror decoder: deepest-level features back to an image in [0,1]."""
    if features.ndim != 4:
        raise ValueError(f"decode: input must be 4-d, got {features.ndim}-d")
    if features.shape[1] != FEATURE_CHANNELS:
        raise ValueError(f"decode: input channel dimension is {features.shape[1]}, "
                         f"expected {FEATURE_CHANNELS}")
    x = features
    for stage in range(len(DECODER_STAGES)):
        level = 4 - stage
        x = ops.relu(_masked_conv(x, params, mask, f"decoder.l{level}.c1"))
        x = _masked_conv(x, params, mask, f"decoder.l{level}.c2")
        if stage < len(DECODER_STAGES) - 1:
            x = ops.relu(x)
            x = ops.upsample_nearest(x, 2)
    return ops.sigmoid(x)


def adain_transform(fc, fs, epsilon=EPSILON):
    """Re-statistic the content features with the style features' moments."""
    if fc.ndim != 4 or fs.ndim != 4:
        raise ValueError("adain_transform: inputs must be 4-d feature maps")
    if fc.shape[1] != fs.shape[1]:
        raise ValueError(f"adain_transform: channel counts differ, "
                         f"{fc.shape[1]} vs {fs.shape[1]}")
    if fc.shape[0] != fs.shape[0]:
        raise ValueError(f"adain_transform: batch sizes differ, {fc.shape[0]} vs {fs.shape[0]}")
    mu_s, std_s = ops.channel_stats(fs, epsilon)
    return ops.scale_shift_channels(ops.normalize_channels(fc, epsilon), std_s, mu_s)


def _attention_block(fc, fs, params, mask, level):
    """Style features attended onto content positions, residually added."""
    b, c, h, w = fc.shape
    query = _masked_conv(ops.normalize_channels(fc, EPSILON), params, mask,
                         f"transform.l{level}.f")
    key = _masked_conv(ops.normalize_channels(fs, EPSILON), params, mask,
                       f"transform.l{level}.g")
    value = _masked_conv(fs, params, mask, f"transform.l{level}.h")

    n = h * w
    m = fs.shape[2] * fs.shape[3]
    scores = ops.bmm(ops.transpose_last2(reshape(query, (b, query.shape[1], n))),
                     reshape(key, (b, key.shape[1], m)))
    attention = ops.softmax_over_positions(scores)  # (B, N, M), rows sum to 1
    attended = ops.bmm(reshape(value, (b, c, m)), ops.transpose_last2(attention))
    attended = _masked_conv(reshape(attended, (b, c, h, w)), params, mask,
                            f"transform.l{level}.out")
    return fc + attended


def sanet_transform(fc41, fs41, fc51, fs51, params, mask=None, with_levels=False):
    """Attention transform on the two deepest levels, fused at level-4 scale.

    Returns the merged feature map; with_levels=True also returns the
    per-level post-residual maps (used as content targets by the metrics).
    """
    for name, a, b in (("level-4", fc41, fs41), ("level-5", fc51, fs51)):
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"sanet_transform: {name} channel counts differ, "
                             f"{a.shape[1]} vs {b.shape[1]}")
    t4 = _attention_block(fc41, fs41, params, mask, 4)
    t5 = _attention_block(fc51, fs51, params, mask, 5)
    fused = t4 + ops.upsample_nearest(t5, 2)
    merged = _masked_conv(fused, params, mask, "transform.merge")
    if with_levels:
        return merged, (t4, t5)
    return merged


def stylize(content, style, params, mask=None):
    """Full pipeline: encode both images, transform, decode."""
    enc_c = encode(content, params, mask)
    enc_s = encode(style, params, mask)
    if params.kind is ModelKind.ADAIN:
        transformed = adain_transform(enc_c.deepest, enc_s.deepest)
    else:
        transformed = sanet_transform(enc_c.levels[3], enc_s.levels[3],
                                      enc_c.levels[4], enc_s.levels[4], params, mask)
    return decode(transformed, params, mask)


def pretrain_encoder_reconstruction(data, iterations, seed, kind=ModelKind.ADAIN,
                                    batch_size=8, learning_rate=1e-4):
    """Train the encoder jointly with a throwaway mirror decoder to reconstruct
    its input. Returns a registry whose encoder weights can then serve as a
    fixed feature extractor; the throwaway decoder is discarded.
    """
    from .lottery import Adam  # deferred: lottery builds on models
    from .tensor import ComputationTape, mean_all

    kind = ModelKind(kind)
    reg = init_parameters(kind, seed)
    extra_stage = kind is ModelKind.SANET
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5EED))
    aux = None
    if extra_stage:
        # mirror of the fifth level, bridging 4x4x128 back to 8x8x128
        std = np.sqrt(2.0 / (128 * 9))
        aux = {
            "weight": Tensor(rng.normal(0.0, std, (128, 128, 3, 3)).astype(np.float32),
                             requires_grad=True),
            "bias": Tensor(np.zeros(128, dtype=np.float32), requires_grad=True),
        }

    trained = [e.tensor for e in reg if e.tag in ("encoder", "decoder")]
    if aux:
        trained += list(aux.values())
    opt = Adam(trained, learning_rate)

    for _ in range(iterations):
        contents, _styles = data.next_batch(batch_size)
        x = Tensor(contents)
        with ComputationTape() as tape:
            feats = encode(x, reg)
            deep = feats.deepest
            if extra_stage:
                deep = ops.upsample_nearest(deep, 2)
                deep = ops.relu(ops.conv2d(deep, aux["weight"], aux["bias"]))
            recon = decode(deep, reg)
            loss = mean_all(ops.l2norm_rows(recon - x))
        for t in trained:
            t.zero_grad()
        tape.backward(loss)
        opt.step()
    return reg

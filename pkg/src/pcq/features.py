"""Per-view feature extraction: CNN backbone, attention block, node vectors.

Each projected image becomes one graph-node vector: the backbone yields an
early high-resolution feature map and a late low-resolution one, both are
recalibrated by a spatial-times-channel attention block with a residual,
then globally averaged and concatenated.

The default backbone is a small CNN trained from scratch.  Stage-1/stage-4
feature maps exported from a larger pretrained network can be fed in from
disk instead (``write_feature_pair``/``read_feature_pair``), skipping the
bundled backbone entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ShapeMismatch, Tensor


@dataclass
class BackboneConfig:
    """Four-stage CNN: a stride-2 stem then one stride-2 conv unit per stage.

    Stage-1 features sit at 1/4 of the input resolution and stage-4 at 1/32,
    so a 224 input yields 56x56 and 7x7 maps.  ``pretrained`` is reserved;
    ``freeze`` excludes backbone weights from optimization.
    """

    stage_channels: tuple = (16, 32, 64, 128)
    freeze: bool = False
    pretrained: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be 4 positive integers")

    @property
    def feature_dim(self):
        return self.stage_channels[0] + self.stage_channels[3]


def _he_weight(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


class ConvBnRelu:
    """3x3 stride-2 convolution, batch norm, relu."""

    def __init__(self, cin, cout, rng, dtype):
        self.weight = _he_weight(rng, (cout, cin, 3, 3), cin * 9, dtype)
        self.gamma = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.bn_state = BatchNormState.initial(cout, dtype)

    def __call__(self, x, training):
        out = T.conv2d(x, self.weight, stride=2, padding=1)
        out = T.batch_norm(out, self.gamma, self.beta, self.bn_state, training)
        return T.relu(out)

    def named_params(self):
        return [("conv.weight", self.weight), ("bn.gamma", self.gamma), ("bn.beta", self.beta)]

    def named_buffers(self):
        return [("bn.running_mean", self.bn_state.mean), ("bn.running_var", self.bn_state.var)]


class SmallCnnBackbone:
    """Trainable four-stage CNN exposing stage-1 and stage-4 activations."""

    def __init__(self, cfg, rng, dtype=np.float32):
        c1, c2, c3, c4 = cfg.stage_channels
        self.cfg = cfg
        self.stem = ConvBnRelu(3, c1, rng, dtype)
        self.stage1 = ConvBnRelu(c1, c1, rng, dtype)
        self.stage2 = ConvBnRelu(c1, c2, rng, dtype)
        self.stage3 = ConvBnRelu(c2, c3, rng, dtype)
        self.stage4 = ConvBnRelu(c3, c4, rng, dtype)
        if cfg.freeze:
            for _, p in self.named_params():
                p.requires_grad = False

    def forward(self, batch, training):
        """(B, 3, H, W) -> stage-1 map at H/4 and stage-4 map at H/32."""
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ShapeMismatch(f"backbone expects (B, 3, H, W), got {batch.shape}")
        x = self.stem(batch, training)
        f1 = self.stage1(x, training)
        x = self.stage2(f1, training)
        x = self.stage3(x, training)
        f4 = self.stage4(x, training)
        return f1, f4

    __call__ = forward

    def _units(self):
        return [("stem", self.stem), ("stage1", self.stage1), ("stage2", self.stage2),
                ("stage3", self.stage3), ("stage4", self.stage4)]

    def named_params(self):
        return [(f"{u}.{n}", p) for u, unit in self._units() for n, p in unit.named_params()]

    def named_buffers(self):
        return [(f"{u}.{n}", b) for u, unit in self._units() for n, b in unit.named_buffers()]


class AttentionBlock:
    """Spatial and channel gates multiplied together, applied with a residual.

    Spatial branch: 1x1 conv to a single channel, sigmoid.  Channel branch:
    global average pool, 1x1 conv down to channels/reduction, 1x1 conv back
    up, sigmoid.  The gated map rescales the input feature map and the
    residual keeps the ungated signal.
    """

    def __init__(self, channels, rng, reduction=4, dtype=np.float32):
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.reduction = reduction
        self.spatial_w = _he_weight(rng, (1, channels, 1, 1), channels, dtype)
        self.spatial_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        self.down_w = _he_weight(rng, (hidden, channels, 1, 1), channels, dtype)
        self.down_b = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.up_w = _he_weight(rng, (channels, hidden, 1, 1), hidden, dtype)
        self.up_b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    @staticmethod
    def _biased(x, bias):
        return x + bias.reshape((1, bias.shape[0], 1, 1))

    def spatial_attention(self, feat):
        """(B, C, H, W) -> gate (B, 1, H, W), entries strictly inside (0, 1)."""
        return T.sigmoid(self._biased(T.conv2d(feat, self.spatial_w), self.spatial_b))

    def channel_attention(self, feat):
        """(B, C, H, W) -> gate (B, C, 1, 1), entries strictly inside (0, 1)."""
        pooled = feat.mean(axis=(2, 3), keepdims=True)
        squeezed = self._biased(T.conv2d(pooled, self.down_w), self.down_b)
        expanded = self._biased(T.conv2d(squeezed, self.up_w), self.up_b)
        return T.sigmoid(expanded)

    def __call__(self, feat):
        gate = T.mul(self.spatial_attention(feat), self.channel_attention(feat))
        return T.add(T.mul(gate, feat), feat)

    def named_params(self):
        return [("spatial.weight", self.spatial_w), ("spatial.bias", self.spatial_b),
                ("down.weight", self.down_w), ("down.bias", self.down_b),
                ("up.weight", self.up_w), ("up.bias", self.up_b)]


def node_vector(f1, f4):
    """Spatially average both attentive maps and concatenate their channels.

    (B, C1, h1, w1) + (B, C4, h4, w4) -> (B, C1 + C4).
    """
    if f1.shape[0] != f4.shape[0]:
        raise ShapeMismatch(f"batch sizes differ: {f1.shape[0]} vs {f4.shape[0]}")
    return T.concat([f1.mean(axis=(2, 3)), f4.mean(axis=(2, 3))], axis=1)


# --- precomputed feature-map exchange --------------------------------------

def write_feature_pair(directory, name, f1, f4):
    """Store one image's stage-1/stage-4 maps as raw float32 plus a shape sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = {}
    for tag, arr in (("f1", f1), ("f4", f4)):
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatch(f"{tag} must be (C, H, W), got {arr.shape}")
        (directory / f"{name}.{tag}.bin").write_bytes(np.ascontiguousarray(arr).astype("<f4").tobytes())
        sidecar[tag] = {"shape": list(arr.shape), "dtype": "float32"}
    (directory / f"{name}.json").write_text(json.dumps(sidecar, indent=1))


def read_feature_pair(directory, name):
    """Load the map pair written by ``write_feature_pair``."""
    directory = Path(directory)
    sidecar = json.loads((directory / f"{name}.json").read_text())
    out = []
    for tag in ("f1", "f4"):
        meta = sidecar[tag]
        raw = (directory / f"{name}.{tag}.bin").read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).astype(np.float32)
        out.append(arr)
    return out[0], out[1]

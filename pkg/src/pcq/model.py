"""The quality predictor: per-direction GCNs, multi-level fusion, regression.

Both view groups pass through the shared backbone and attention block as one
batch; the resulting node vectors split back into a horizontal and a
vertical graph, each processed by its own four-block GCN (no weight
sharing).  Every branch is summarized into a five-entry fusion vector
(pooled-and-projected levels one to three, the node-projected last level,
and its plain node average); the concatenated ten-vector maps linearly to a
single score, rescaled onto the declared MOS range.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .features import AttentionBlock, BackboneConfig, SmallCnnBackbone, node_vector
from .graph import ViewGraph, build_adjacency, normalize_adjacency
from .projection import ProjectionConfig
from .tensor import BatchNormState, ShapeMismatch, Tensor


class ConfigMismatch(ValueError):
    pass


@dataclass
class GcnConfig:
    """Output channels of the four graph-convolution blocks; the last is 1."""

    layer_channels: tuple = (512, 128, 32, 1)

    def __post_init__(self):
        self.layer_channels = tuple(int(c) for c in self.layer_channels)
        if len(self.layer_channels) < 1 or self.layer_channels[-1] != 1:
            raise ValueError("layer_channels must end with a single-channel layer")
        if min(self.layer_channels) < 1:
            raise ValueError("layer_channels must be positive")


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    gcn: GcnConfig
    projection: ProjectionConfig
    theta_deg: float = 36.0
    normalization: str = "symmetric"
    attention_reduction: int = 4
    mos_range: tuple = (0.0, 10.0)

    @classmethod
    def default(cls):
        return cls(BackboneConfig(), GcnConfig(), ProjectionConfig())

    def to_dict(self):
        data = dataclasses.asdict(self)
        data["backbone"]["stage_channels"] = list(self.backbone.stage_channels)
        data["gcn"]["layer_channels"] = list(self.gcn.layer_channels)
        data["mos_range"] = list(self.mos_range)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        backbone = dataclass_from_dict(BackboneConfig, data.pop("backbone", {}), "backbone")
        gcn = dataclass_from_dict(GcnConfig, data.pop("gcn", {}), "gcn")
        projection = dataclass_from_dict(ProjectionConfig, data.pop("projection", {}), "projection")
        cfg = dataclass_from_dict(cls, {"backbone": backbone, "gcn": gcn, "projection": projection, **data}, "model")
        cfg.mos_range = tuple(float(v) for v in cfg.mos_range)
        return cfg


def dataclass_from_dict(cls, data, name):
    """Build a dataclass from a plain dict, rejecting unknown keys."""
    if dataclasses.is_dataclass(data):
        return data
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown keys in {name} config: {unknown}")
    return cls(**data)


def gcn_block(nodes, adjacency, weight, gamma, beta, state, training):
    """One propagation block: adjacency @ nodes @ weight, batch norm, softplus.

    ``nodes`` is (N, C_in), ``adjacency`` (N, N), ``weight`` (C_in, C_out);
    normalization runs over the node dimension per output channel.  Softplus
    keeps every output strictly positive.
    """
    mixed = T.matmul(T.matmul(adjacency, nodes), weight)
    return T.softplus(T.batch_norm(mixed, gamma, beta, state, training))


class GcnBranch:
    """Stack of gcn_blocks for one direction group."""

    def __init__(self, input_dim, layer_channels, rng, dtype=np.float32):
        self.layers = []
        cin = input_dim
        for cout in layer_channels:
            weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / (cin + cout)), size=(cin, cout)).astype(dtype),
                            requires_grad=True)
            gamma = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
            beta = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            self.layers.append({"weight": weight, "gamma": gamma, "beta": beta,
                                "state": BatchNormState.initial(cout, dtype)})
            cin = cout

    def forward(self, nodes, adjacency, training):
        """Return the activated feature matrix of every block, shallow to deep."""
        levels = []
        h = nodes
        for layer in self.layers:
            h = gcn_block(h, adjacency, layer["weight"], layer["gamma"], layer["beta"],
                          layer["state"], training)
            levels.append(h)
        return levels

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers, start=1):
            out += [(f"layer{i}.weight", layer["weight"]),
                    (f"layer{i}.bn.gamma", layer["gamma"]),
                    (f"layer{i}.bn.beta", layer["beta"])]
        return out

    def named_buffers(self):
        out = []
        for i, layer in enumerate(self.layers, start=1):
            out += [(f"layer{i}.bn.running_mean", layer["state"].mean),
                    (f"layer{i}.bn.running_var", layer["state"].var)]
        return out

    def weight_count(self):
        return sum(layer["weight"].size for layer in self.layers)


class FusionHead:
    """Collapse the four GCN levels of one direction into five scalars."""

    def __init__(self, layer_channels, n_views, rng, dtype=np.float32):
        self.maps = []
        for c in layer_channels[:-1]:
            w = Tensor(rng.normal(0.0, np.sqrt(2.0 / (c + 1)), size=(c, 1)).astype(dtype), requires_grad=True)
            b = Tensor(np.zeros((1, 1), dtype=dtype), requires_grad=True)
            self.maps.append((w, b))
        self.node_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / (n_views + 1)), size=(n_views, 1)).astype(dtype),
                             requires_grad=True)
        self.node_b = Tensor(np.zeros((1, 1), dtype=dtype), requires_grad=True)

    def fuse(self, levels):
        """[H1..H4] -> (1, 5): projected node-averages, node projection, node average."""
        parts = []
        for (w, b), level in zip(self.maps, levels[:-1]):
            pooled = level.mean(axis=0, keepdims=True)          # (1, C)
            parts.append(T.add(T.matmul(pooled, w), b))         # (1, 1)
        last = levels[-1]                                       # (N, 1)
        parts.append(T.add(T.matmul(last.transpose(), self.node_w), self.node_b))
        parts.append(last.mean(axis=0, keepdims=True))
        return T.concat(parts, axis=1)

    def named_params(self):
        out = []
        for i, (w, b) in enumerate(self.maps, start=1):
            out += [(f"level{i}.weight", w), (f"level{i}.bias", b)]
        out += [("node.weight", self.node_w), ("node.bias", self.node_b)]
        return out


class QualityModel:
    """End-to-end no-reference quality predictor over two projection groups."""

    FUSION_WIDTH = 5

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or ModelConfig.default()
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        cfg = self.config

        self.n_views = cfg.projection.views_per_direction
        self.backbone = SmallCnnBackbone(cfg.backbone, rng, dtype)
        c1, c4 = cfg.backbone.stage_channels[0], cfg.backbone.stage_channels[3]
        self.attn1 = AttentionBlock(c1, rng, cfg.attention_reduction, dtype)
        self.attn4 = AttentionBlock(c4, rng, cfg.attention_reduction, dtype)

        feature_dim = cfg.backbone.feature_dim
        channels = cfg.gcn.layer_channels
        self.gcn_h = GcnBranch(feature_dim, channels, rng, dtype)
        self.gcn_v = GcnBranch(feature_dim, channels, rng, dtype)
        self.head_h = FusionHead(channels, self.n_views, rng, dtype)
        self.head_v = FusionHead(channels, self.n_views, rng, dtype)

        width = 2 * self.FUSION_WIDTH
        self.final_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / (width + 1)), size=(width, 1)).astype(dtype),
                              requires_grad=True)
        # start predictions mid-range so the output affine has nothing to chase
        self.final_b = Tensor(np.full((1, 1), 0.5, dtype=dtype), requires_grad=True)

        raw = build_adjacency(self.n_views, cfg.projection.rs_deg, cfg.theta_deg)
        norm = normalize_adjacency(raw, cfg.normalization)
        self.adjacency_raw = raw
        self.adjacency = Tensor(norm.astype(dtype))

    # --- forward ----------------------------------------------------------

    def view_graphs(self, nodes_h, nodes_v):
        cfg = self.config
        raw = self.adjacency_raw
        norm = self.adjacency.data
        return (ViewGraph(nodes_h, raw, norm, cfg.projection.rs_deg, cfg.theta_deg),
                ViewGraph(nodes_v, raw, norm, cfg.projection.rs_deg, cfg.theta_deg))

    def forward(self, images_h, images_v, training):
        """Score a cloud from its two (N, 3, S, S) view batches; returns (1, 1)."""
        n = self.n_views
        for name, arr in (("horizontal", images_h), ("vertical", images_v)):
            if arr.shape[0] != n:
                raise ConfigMismatch(f"{name} group has {arr.shape[0]} views, model expects {n}")
        batch = Tensor(np.concatenate([images_h, images_v]).astype(self.dtype))
        f1, f4 = self.backbone(batch, training)
        nodes = node_vector(self.attn1(f1), self.attn4(f4))    # (2N, D)
        return self.forward_nodes(T.narrow(nodes, 0, 0, n), T.narrow(nodes, 0, n, n), training)

    def forward_features(self, f1_all, f4_all, training):
        """Same as ``forward`` but starting from imported backbone feature maps.

        ``f1_all``/``f4_all`` stack both directions: horizontal views first,
        vertical views second, (2N, C, h, w) each.
        """
        n = self.n_views
        if f1_all.shape[0] != 2 * n or f4_all.shape[0] != 2 * n:
            raise ConfigMismatch(f"expected {2 * n} feature maps, got {f1_all.shape[0]}/{f4_all.shape[0]}")
        f1 = f1_all if isinstance(f1_all, Tensor) else Tensor(np.asarray(f1_all, dtype=self.dtype))
        f4 = f4_all if isinstance(f4_all, Tensor) else Tensor(np.asarray(f4_all, dtype=self.dtype))
        nodes = node_vector(self.attn1(f1), self.attn4(f4))
        return self.forward_nodes(T.narrow(nodes, 0, 0, n), T.narrow(nodes, 0, n, n), training)

    def forward_nodes(self, nodes_h, nodes_v, training):
        """Run the per-direction GCNs and heads on (N, D) node matrices."""
        fused = []
        for nodes, gcn, head in ((nodes_h, self.gcn_h, self.head_h),
                                 (nodes_v, self.gcn_v, self.head_v)):
            levels = gcn.forward(nodes, self.adjacency, training)
            fused.append(head.fuse(levels))
        joint = T.concat(fused, axis=1)                         # (1, 10)
        raw = T.add(T.matmul(joint, self.final_w), self.final_b)
        lo, hi = self.config.mos_range
        return T.add(T.mul(raw, float(hi - lo)), float(lo))

    def predict(self, group_h, group_v):
        """Score a pair of ProjectionGroups in eval mode; returns a float."""
        cfg = self.config.projection
        for group in (group_h, group_v):
            if abs(group.rs_deg - cfg.rs_deg) > 1e-9:
                raise ConfigMismatch(f"group stride {group.rs_deg} != model stride {cfg.rs_deg}")
        out = self.forward(group_h.as_batch(), group_v.as_batch(), training=False)
        return float(out.data.reshape(()))

    # --- parameters and persistence ----------------------------------------

    def _groups(self):
        return [("backbone", self.backbone.named_params(), self.backbone.named_buffers()),
                ("attn1", self.attn1.named_params(), []),
                ("attn4", self.attn4.named_params(), []),
                ("gcn_h", self.gcn_h.named_params(), self.gcn_h.named_buffers()),
                ("gcn_v", self.gcn_v.named_params(), self.gcn_v.named_buffers()),
                ("head_h", self.head_h.named_params(), []),
                ("head_v", self.head_v.named_params(), []),
                ("final", [("weight", self.final_w), ("bias", self.final_b)], [])]

    def named_params(self):
        return [(f"{g}.{n}", p) for g, params, _ in self._groups() for n, p in params]

    def named_buffers(self):
        return [(f"{g}.{n}", b) for g, _, buffers in self._groups() for n, b in buffers]

    def trainable_params(self):
        return [(n, p) for n, p in self.named_params() if p.requires_grad]

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def describe(self):
        """Parameter counts per component plus the architecture config."""
        counts = {}
        for group, params, _ in self._groups():
            counts[group] = int(sum(p.size for _, p in params))
        return {
            "config": self.config.to_dict(),
            "n_views": self.n_views,
            "feature_dim": self.config.backbone.feature_dim,
            "param_counts": counts,
            "total_params": int(sum(counts.values())),
            "gcn_weights_per_direction": int(self.gcn_h.weight_count()),
        }

    def state_arrays(self):
        arrays = {name: p.data for name, p in self.named_params()}
        arrays.update({name: b for name, b in self.named_buffers()})
        return arrays

    def save(self, directory):
        """Write weights (tensor checkpoint format) plus model.json."""
        directory = Path(directory)
        T.save_arrays(directory, self.state_arrays())
        (directory / "model.json").write_text(json.dumps(self.config.to_dict(), indent=1))

    @classmethod
    def load(cls, directory, dtype=np.float32):
        directory = Path(directory)
        config = ModelConfig.from_dict(json.loads((directory / "model.json").read_text()))
        model = cls(config, seed=0, dtype=dtype)
        arrays = T.load_arrays(directory)
        model.load_state_arrays(arrays)
        return model

    def load_state_arrays(self, arrays):
        expected = dict(self.named_params())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(arrays)
        if missing:
            raise ConfigMismatch(f"checkpoint lacks arrays: {sorted(missing)[:5]}")
        for name, tensor in expected.items():
            arr = arrays[name]
            if tuple(arr.shape) != tensor.shape:
                raise ConfigMismatch(f"{name}: checkpoint shape {arr.shape} != model shape {tensor.shape}")
            tensor.data = arr.astype(tensor.data.dtype)
        for name, buf in buffers.items():
            buf[...] = arrays[name].astype(buf.dtype)

"""Graph layers, readouts and the graph classifier.

All layers take node embeddings ``H`` (``n_nodes x d``), a graph (``Rag``,
``SuperGraph`` or ``GraphBatch``) and a :class:`LayerParams`. Parameters may
be plain arrays or :class:`~stagnn.autodiff.Tensor` leaves; outputs are
tensors so gradients flow when the parameters require them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphBatch, as_batch

LAYER_KINDS = ("gcn", "gatv1", "gatv2", "sagnn")
READOUTS = ("gsp", "gcp")
CHECKPOINT_VERSION = 1


@dataclass
class LayerParams:
    """Weights of one layer: ``W`` is ``out x in``, ``a`` is ``heads x (2 out)``."""

    W: object
    a: object = None
    bias: object = None


@dataclass
class LayerActivation:
    """Layer output plus attention coefficients over message edges ``src -> dst``."""

    H: Tensor
    attn: np.ndarray
    src: np.ndarray
    dst: np.ndarray


@dataclass
class GraphEmbedding:
    x: Tensor

    def numpy(self) -> np.ndarray:
        return self.x.data


@dataclass
class ModelConfig:
    in_dim: int
    layer_kind: str = "sagnn"
    hidden_dims: tuple[int, ...] = (128, 128)
    heads: int = 1
    readout: str = "gsp"
    mlp_dims: tuple[int, ...] = (64,)
    n_classes: int = 10
    n_frames: int = 1
    aggregator: str = "mean"
    activation: str = "relu"
    attention_slope: float = 0.2

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        self.mlp_dims = tuple(int(d) for d in self.mlp_dims)
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"layer_kind must be one of {LAYER_KINDS}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if self.heads < 1:
            raise ValueError("heads must be at least 1")
        if self.aggregator not in ("mean", "sum"):
            raise ValueError("aggregator must be 'mean' or 'sum'")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if min(self.hidden_dims + self.mlp_dims, default=1) < 1 or self.in_dim < 0 or self.n_classes < 0:
            raise ValueError("dimensions must be positive")
        if self.n_frames < 1:
            raise ValueError("n_frames must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["mlp_dims"] = list(self.mlp_dims)
        return d


ACTIVATIONS: dict[str, Callable] = {"relu": ad.relu, "identity": ad.identity}


def _act(activation) -> Callable:
    return ACTIVATIONS[activation] if isinstance(activation, str) else activation


def _bias(out: Tensor, bias) -> Tensor:
    return out if bias is None else ad.add(out, bias)


def _linear(x: Tensor, W, bias=None) -> Tensor:
    return _bias(ad.matmul(x, ad.transpose(W)), bias)


def _prepare(H, g, p: LayerParams):
    H = ad.as_tensor(H)
    b = as_batch(g, dtype=H.dtype if H.dtype.kind == "f" else np.float64)
    if H.shape[0] != b.n_nodes:
        raise ValueError(f"H has {H.shape[0]} rows but the graph has {b.n_nodes} nodes")
    return H, b


def _check_width(W, expected: int, what: str):
    if W.shape[1] != expected:
        raise ValueError(f"{what}: W expects {W.shape[1]} inputs, got {expected}")


# ---------------------------------------------------------------- layers


def gcn_layer(H, g, p: LayerParams, activation="relu") -> Tensor:
    """Mean over the closed neighbourhood, then ``W``: ``f(W . sum_j C h_j)`` with ``C = 1/(deg+1)``."""
    H, b = _prepare(H, g, p)
    W = ad.as_tensor(p.W)
    _check_width(W, H.shape[1], "gcn")
    agg = ad.spmm(b.self_mean, H)
    return _act(activation)(_linear(agg, W, p.bias))


def _attention_matrix(a) -> Tensor:
    a = ad.as_tensor(a)
    if a.data.ndim == 1:
        a = ad.reshape(a, (1, -1))
    return a


def gatv1_attention(H, g, p: LayerParams, activation="relu", slope: float = 0.2) -> LayerActivation:
    """GAT scoring ``LeakyReLU(a . [W h_i || W h_j])`` softmaxed over ``N_i + {i}``.

    Heads are concatenated; ``W`` has ``heads * out`` rows.
    """
    H, b = _prepare(H, g, p)
    W = ad.as_tensor(p.W)
    a = _attention_matrix(p.a)
    heads, o = a.shape[0], a.shape[1] // 2
    if W.shape[0] != heads * o or a.shape[1] != 2 * o:
        raise ValueError(f"W {W.shape} and a {a.shape} disagree on head layout")
    _check_width(W, H.shape[1], "attention")
    n, m = b.n_nodes, b.n_messages

    z = ad.matmul(H, ad.transpose(W))
    z3 = ad.reshape(z, (n, heads, o))
    s_dst = ad.sum(ad.mul(z3, ad.take(a, (slice(None), slice(0, o)))), axis=2)
    s_src = ad.sum(ad.mul(z3, ad.take(a, (slice(None), slice(o, 2 * o)))), axis=2)
    e = ad.leaky_relu(ad.add(ad.gather(s_dst, b.dst, b.dst_scatter), ad.gather(s_src, b.src, b.src_scatter)), slope)
    alpha = ad.segment_softmax(e, b.dst_starts, b.in_counts)
    msg = ad.mul(ad.reshape(ad.gather(z, b.src, b.src_scatter), (m, heads, o)), ad.reshape(alpha, (m, heads, 1)))
    out = ad.segment_sum(ad.reshape(msg, (m, heads * o)), b.dst_starts, b.in_counts, b.dst_scatter)
    out = _act(activation)(_bias(out, p.bias))
    return LayerActivation(out, alpha.data, b.src, b.dst)


def gatv2_attention(H, g, p: LayerParams, activation="relu", slope: float = 0.2) -> LayerActivation:
    """GATv2 scoring ``a . LeakyReLU(W [h_i || h_j])``.

    ``W`` is ``(heads * out) x (2 in)``: its left half acts on the target, its
    right half on the source and also produces the message.
    """
    H, b = _prepare(H, g, p)
    W = ad.as_tensor(p.W)
    a = _attention_matrix(p.a)
    heads, o = a.shape
    d = H.shape[1]
    if W.shape != (heads * o, 2 * d):
        raise ValueError(f"gatv2: W has shape {W.shape}, expected {(heads * o, 2 * d)}")
    n, m = b.n_nodes, b.n_messages

    z_t = ad.matmul(H, ad.transpose(ad.take(W, (slice(None), slice(0, d)))))
    z_s = ad.matmul(H, ad.transpose(ad.take(W, (slice(None), slice(d, 2 * d)))))
    zs_edge = ad.gather(z_s, b.src, b.src_scatter)
    pre = ad.leaky_relu(ad.add(ad.gather(z_t, b.dst, b.dst_scatter), zs_edge), slope)
    e = ad.sum(ad.mul(ad.reshape(pre, (m, heads, o)), a), axis=2)
    alpha = ad.segment_softmax(e, b.dst_starts, b.in_counts)
    msg = ad.mul(ad.reshape(zs_edge, (m, heads, o)), ad.reshape(alpha, (m, heads, 1)))
    out = ad.segment_sum(ad.reshape(msg, (m, heads * o)), b.dst_starts, b.in_counts, b.dst_scatter)
    out = _act(activation)(_bias(out, p.bias))
    return LayerActivation(out, alpha.data, b.src, b.dst)


def sagnn_first_layer(H0, g, p: LayerParams, activation="relu", aggregator: str = "mean") -> Tensor:
    """``f(W . [AGG_{j in N_i} h_j || h_i])``; an empty neighbourhood aggregates to zero."""
    H, b = _prepare(H0, g, p)
    W = ad.as_tensor(p.W)
    _check_width(W, 2 * H.shape[1], "sagnn first layer")
    op = b.neighbor_mean if aggregator == "mean" else b.neighbor_sum
    agg = ad.spmm(op, H)
    return _act(activation)(_linear(ad.concat([agg, H], axis=1), W, p.bias))


def sagnn_attention_layer(H, g, p: LayerParams, activation="relu", slope: float = 0.2) -> LayerActivation:
    """Attention-weighted update for layers after the first (same form as GAT)."""
    return gatv1_attention(H, g, p, activation=activation, slope=slope)


# ---------------------------------------------------------------- readouts


def gsp_readout(H, g) -> GraphEmbedding:
    """Sum of node embeddings, one row per graph."""
    H = ad.as_tensor(H)
    b = as_batch(g, dtype=H.dtype)
    if (b.graph_sizes == 0).any():
        raise ValueError("cannot pool an empty graph")
    return GraphEmbedding(ad.segment_sum(H, b.graph_starts, b.graph_sizes))


def gcp_readout(H, g) -> GraphEmbedding:
    """Per-frame sums concatenated in chronological order (``T * D`` per graph)."""
    H = ad.as_tensor(H)
    b = as_batch(g, dtype=H.dtype)
    if not b.has_frames:
        raise ValueError("frame-wise pooling needs SuperGraph input")
    if b.n_frames is None:
        raise ValueError("graphs in the batch have different frame counts")
    if (b.frame_sizes == 0).any():
        raise ValueError("cannot pool an empty frame")
    pooled = ad.segment_sum(H, b.frame_starts, b.frame_sizes)
    return GraphEmbedding(ad.reshape(pooled, (b.n_graphs, b.n_frames * H.shape[1])))


def mlp_head(x, params: Sequence[LayerParams]) -> Tensor:
    """Affine layers with ReLU between them; the last layer emits logits."""
    h = x.x if isinstance(x, GraphEmbedding) else ad.as_tensor(x)
    if h.data.ndim == 1:
        h = ad.reshape(h, (1, -1))
    for k, p in enumerate(params):
        h = _linear(h, ad.as_tensor(p.W), p.bias)
        if k < len(params) - 1:
            h = ad.relu(h)
    return h


# ---------------------------------------------------------------- model


def layer_dims(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(input, output) widths of each message-passing layer."""
    dims = []
    d = cfg.in_dim
    for k, o in enumerate(cfg.hidden_dims):
        out = o if cfg.layer_kind == "gcn" or (cfg.layer_kind == "sagnn" and k == 0) else o * cfg.heads
        dims.append((d, out))
        d = out
    return dims


def embedding_dim(cfg: ModelConfig) -> int:
    d = layer_dims(cfg)[-1][1] if cfg.hidden_dims else cfg.in_dim
    return d * cfg.n_frames if cfg.readout == "gcp" else d


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for k, ((d, out), o) in enumerate(zip(layer_dims(cfg), cfg.hidden_dims)):
        kind = cfg.layer_kind
        if kind == "gcn":
            shapes += [(f"gnn.{k}.W", (o, d))]
        elif kind == "sagnn" and k == 0:
            shapes += [(f"gnn.{k}.W", (o, 2 * d))]
        elif kind == "gatv2":
            shapes += [(f"gnn.{k}.W", (cfg.heads * o, 2 * d)), (f"gnn.{k}.a", (cfg.heads, o))]
        else:
            shapes += [(f"gnn.{k}.W", (cfg.heads * o, d)), (f"gnn.{k}.a", (cfg.heads, 2 * o))]
        shapes.append((f"gnn.{k}.bias", (out,)))
    d = embedding_dim(cfg)
    for k, o in enumerate(cfg.mlp_dims + (cfg.n_classes,)):
        shapes += [(f"mlp.{k}.W", (o, d)), (f"mlp.{k}.bias", (o,))]
        d = o
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Number of trainable scalars."""
    return int(sum(np.prod(s) for _, s in param_shapes(cfg)))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and attention vectors, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_out, fan_in = (shape[0], shape[1]) if name.endswith(".W") else (1, shape[1])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def group_layers(cfg: ModelConfig, params: dict) -> tuple[list[LayerParams], list[LayerParams]]:
    gnn = [
        LayerParams(params[f"gnn.{k}.W"], params.get(f"gnn.{k}.a"), params[f"gnn.{k}.bias"])
        for k in range(len(cfg.hidden_dims))
    ]
    head = [
        LayerParams(params[f"mlp.{k}.W"], None, params[f"mlp.{k}.bias"])
        for k in range(len(cfg.mlp_dims) + 1)
    ]
    return gnn, head


def _param_dtype(layers: Sequence[LayerParams]):
    if not layers:
        return np.float64
    W = layers[0].W
    return (W.data if isinstance(W, Tensor) else np.asarray(W)).dtype


def node_embeddings(g, layers: Sequence[LayerParams], cfg: ModelConfig) -> Tensor:
    """Run the configured message-passing stack and return final node embeddings."""
    dtype = _param_dtype(layers)
    b = g if isinstance(g, GraphBatch) else GraphBatch([g], dtype=dtype)
    H: Tensor = ad.as_tensor(b.features.astype(dtype, copy=False))
    slope = cfg.attention_slope
    for k, p in enumerate(layers):
        kind = cfg.layer_kind
        if kind == "gcn":
            H = gcn_layer(H, b, p, cfg.activation)
        elif kind == "gatv1":
            H = gatv1_attention(H, b, p, cfg.activation, slope).H
        elif kind == "gatv2":
            H = gatv2_attention(H, b, p, cfg.activation, slope).H
        elif k == 0:
            H = sagnn_first_layer(H, b, p, cfg.activation, cfg.aggregator)
        else:
            H = sagnn_attention_layer(H, b, p, cfg.activation, slope).H
    return H


def readout(H, g, cfg: ModelConfig) -> GraphEmbedding:
    return gcp_readout(H, g) if cfg.readout == "gcp" else gsp_readout(H, g)


def stagnn_forward(sg, params: Sequence[LayerParams], cfg: ModelConfig) -> GraphEmbedding:
    """Message passing over a whole (super)graph followed by the configured readout.

    The block-diagonal adjacency keeps frames from exchanging messages while
    every frame shares the same layer weights.
    """
    b = sg if isinstance(sg, GraphBatch) else GraphBatch([sg], dtype=_param_dtype(params))
    H = node_embeddings(b, params, cfg)
    return readout(H, b, cfg)


class GraphClassifier:
    """Message-passing stack, readout and MLP head with named parameters."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        expected = dict(param_shapes(cfg))
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ValueError(f"parameter {name} missing or mis-shaped")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def names(self) -> list[str]:
        return [n for n, _ in param_shapes(self.cfg)]

    def astype(self, dtype) -> "GraphClassifier":
        return GraphClassifier(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def batch(self, graphs) -> GraphBatch:
        return graphs if isinstance(graphs, GraphBatch) else GraphBatch(list(graphs), dtype=self.dtype)

    def logits(self, graphs, params: dict | None = None) -> Tensor:
        b = self.batch(graphs)
        gnn, head = group_layers(self.cfg, params if params is not None else self.params)
        H = node_embeddings(b, gnn, self.cfg)
        return mlp_head(readout(H, b, self.cfg), head)

    def loss_and_grads(self, graphs, labels) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
        """Mean cross-entropy, its gradients, and the logits."""
        leaves = {k: ad.parameter(v) for k, v in self.params.items()}
        logits = self.logits(graphs, leaves)
        loss = ad.softmax_cross_entropy(logits, np.asarray(labels))
        names = list(leaves)
        grads = ad.backward(loss, [leaves[n] for n in names])
        return float(loss.data), dict(zip(names, grads)), logits.data

    def predict_proba(self, graphs) -> np.ndarray:
        z = self.logits(graphs).data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, graphs) -> np.ndarray:
        return self.logits(graphs).data.argmax(axis=1)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# ---------------------------------------------------------------- checkpoints


def checkpoint_dict(model: GraphClassifier, extra: dict | None = None) -> dict:
    return {
        "format": "stagnn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "dtype": str(model.dtype),
        "params": [
            {"name": n, "shape": list(model.params[n].shape), "data": model.params[n].ravel().tolist()}
            for n in model.names()
        ],
        "extra": extra or {},
    }


def save_checkpoint(model: GraphClassifier, path, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(checkpoint_dict(model, extra)))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[GraphClassifier, dict]:
    d = json.loads(Path(path).read_text())
    if d.get("format") != "stagnn-checkpoint" or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
    cfg = ModelConfig.from_dict(d["config"])
    dtype = np.dtype(d["dtype"])
    params = {p["name"]: np.array(p["data"], dtype=dtype).reshape(p["shape"]) for p in d["params"]}
    return GraphClassifier(cfg, params), d.get("extra", {})

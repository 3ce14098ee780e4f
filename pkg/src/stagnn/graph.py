"""Region adjacency graphs, temporal supergraphs and batching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

from .segmentation import LabelMap, SuperpixelStats, _pixel_pairs

FORMAT_VERSION = 1


class GraphFormatError(ValueError):
    """Malformed or incompatible graph payload."""


def _canonical_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


class _GraphBase:
    features: np.ndarray
    edges: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """``(indptr, indices)`` of the symmetric neighbour lists, sorted per node."""
        adj = self.adjacency()
        return adj.indptr, adj.indices

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i), dtype=bool)
        adj = sp.csr_matrix((data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
        adj.sort_indices()
        return adj

    def neighbors(self, node: int) -> np.ndarray:
        indptr, indices = self.csr
        return indices[indptr[node] : indptr[node + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.csr[0])

    def has_edge(self, i: int, j: int) -> bool:
        nb = self.neighbors(i)
        k = np.searchsorted(nb, j)
        return bool(k < len(nb) and nb[k] == j)


@dataclass(eq=False)
class Rag(_GraphBase):
    """Region adjacency graph.

    ``features`` is ``(n_nodes, F)``; ``edges`` holds each undirected edge
    once as ``(i, j)`` with ``i < j`` in lexicographic order. Self loops are
    never stored.
    """

    features: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.edges = _canonical_edges(self.edges)
        if self.edges.size and self.edges.max() >= self.n_nodes:
            raise ValueError("edge refers to a missing node")

    def __eq__(self, other):
        return (
            type(other) is Rag
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edges, other.edges)
        )


@dataclass(eq=False)
class SuperGraph(_GraphBase):
    """Per-frame RAGs fused under a block-diagonal adjacency.

    The last feature column is the frame index normalised to [0, 1]. Nodes of
    frame ``t`` occupy ``frame_offsets[t]:frame_offsets[t + 1]``.
    """

    features: np.ndarray
    edges: np.ndarray
    frame_sizes: tuple[int, ...]

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.edges = _canonical_edges(self.edges)
        self.frame_sizes = tuple(int(s) for s in self.frame_sizes)
        if sum(self.frame_sizes) != self.n_nodes:
            raise ValueError("frame sizes do not add up to the node count")
        if self.edges.size:
            frame = self.frame_index
            if (frame[self.edges[:, 0]] != frame[self.edges[:, 1]]).any():
                raise ValueError("edge crosses frames")

    @property
    def n_frames(self) -> int:
        return len(self.frame_sizes)

    @property
    def frame_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.frame_sizes)]).astype(np.int64)

    @property
    def frame_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_frames), self.frame_sizes)

    def frame(self, t: int) -> Rag:
        """Frame ``t`` as a standalone RAG, temporal column dropped."""
        lo, hi = self.frame_offsets[t], self.frame_offsets[t + 1]
        mask = (self.edges[:, 0] >= lo) & (self.edges[:, 0] < hi)
        return Rag(self.features[lo:hi, :-1], self.edges[mask] - lo)

    def __eq__(self, other):
        return (
            type(other) is SuperGraph
            and self.frame_sizes == other.frame_sizes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edges, other.edges)
        )


Graph = Union[Rag, SuperGraph]


# ---------------------------------------------------------------- construction


def build_rag(lm: LabelMap, stats: Sequence[SuperpixelStats] | None = None, connectivity: int = 8,
              features: np.ndarray | None = None) -> Rag:
    """RAG whose nodes are superpixels and whose edges join touching regions.

    Node ``i`` carries ``[mean_color..., centroid_row, centroid_col]``. Two
    regions are adjacent when any of their pixels are ``connectivity``
    neighbours (4 or 8). ``features`` may be passed directly instead of
    ``stats`` when the caller already holds them as an array.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    n = lm.n_segments
    if features is None:
        if stats is None:
            raise ValueError("either stats or features is required")
        if len(stats) != n or any(s.label != i for i, s in enumerate(stats)):
            raise ValueError(f"stats describe {len(stats)} labels but the label map has {n}")
        features = np.array([list(s.mean_color) + list(s.centroid) for s in stats], dtype=np.float64)
    elif len(features) != n:
        raise ValueError(f"{len(features)} feature rows for {n} labels")
    flat = lm.labels.ravel()
    a, b = _pixel_pairs(lm.height, lm.width, connectivity)
    la, lb = flat[a], flat[b]
    diff = la != lb
    return Rag(features, np.stack([la[diff], lb[diff]], axis=1))


def build_supergraph(rags: Sequence[Rag]) -> SuperGraph:
    """Direct sum of per-frame RAGs with a temporal feature column ``t / (T - 1)``."""
    if not rags:
        raise ValueError("at least one frame is required")
    widths = {r.feature_dim for r in rags}
    if len(widths) != 1:
        raise ValueError(f"frames disagree on feature width: {sorted(widths)}")
    T = len(rags)
    blocks, edges, offset = [], [], 0
    for t, r in enumerate(rags):
        stamp = np.full((r.n_nodes, 1), t / (T - 1) if T > 1 else 0.0)
        blocks.append(np.hstack([r.features, stamp]))
        edges.append(r.edges + offset)
        offset += r.n_nodes
    return SuperGraph(np.vstack(blocks), np.vstack(edges), tuple(r.n_nodes for r in rags))


# ---------------------------------------------------------------- interchange


def graph_to_dict(g: Graph) -> dict:
    d = {
        "version": FORMAT_VERSION,
        "n_nodes": int(g.n_nodes),
        "feature_dim": int(g.feature_dim),
        "features": g.features.tolist(),
        "edges": g.edges.tolist(),
    }
    if isinstance(g, SuperGraph):
        d["frames"] = list(g.frame_sizes)
    return d


def graph_from_dict(d: dict) -> Graph:
    if not isinstance(d, dict):
        raise GraphFormatError("graph payload must be a JSON object")
    if d.get("version") != FORMAT_VERSION:
        raise GraphFormatError(f"unsupported graph format version {d.get('version')!r}")
    try:
        n, fdim = int(d["n_nodes"]), int(d["feature_dim"])
        feats = np.array(d["features"], dtype=np.float64).reshape(n, fdim)
        edges = np.array(d["edges"], dtype=np.int64).reshape(-1, 2)
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed graph payload: {exc}") from exc
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphFormatError("edge index out of range")
    try:
        if "frames" in d:
            return SuperGraph(feats, edges, tuple(d["frames"]))
        return Rag(feats, edges)
    except ValueError as exc:
        raise GraphFormatError(str(exc)) from exc


def serialize_graph(g: Graph) -> bytes:
    return json.dumps(graph_to_dict(g), separators=(",", ":")).encode("utf-8")


def deserialize_graph(payload: bytes | str) -> Graph:
    try:
        d = json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise GraphFormatError(f"not valid JSON: {exc}") from exc
    return graph_from_dict(d)


# ---------------------------------------------------------------- batching


class GraphBatch:
    """Several graphs fused by direct sum, ready for message passing.

    Message edges include one self loop per node and are sorted by target,
    so every target owns a contiguous, non-empty run ``dst_starts[i]:...``.
    Readout segments are per graph, or per (graph, frame) for frame-wise
    pooling; all graphs must then share the same frame count.
    """

    def __init__(self, graphs: Sequence[Graph], dtype=np.float64):
        if not graphs:
            raise ValueError("cannot batch zero graphs")
        self.dtype = np.dtype(dtype)
        self.n_graphs = len(graphs)
        self.graph_sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(self.graph_sizes)])
        self.n_nodes = int(offsets[-1])
        self.features = np.vstack([g.features for g in graphs]).astype(self.dtype)
        und = np.vstack([g.edges + off for g, off in zip(graphs, offsets)]) if self.n_nodes else np.zeros((0, 2), int)
        self.undirected = und.astype(np.int64)

        self.has_frames = all(isinstance(g, SuperGraph) for g in graphs)
        frames = [g.frame_sizes if isinstance(g, SuperGraph) else (g.n_nodes,) for g in graphs]
        self.n_frames = len(frames[0]) if len({len(f) for f in frames}) == 1 else None
        self.frame_sizes = np.array([s for f in frames for s in f], dtype=np.int64)

        nodes = np.arange(self.n_nodes)
        src = np.concatenate([und[:, 0], und[:, 1], nodes])
        dst = np.concatenate([und[:, 1], und[:, 0], nodes])
        order = np.lexsort((src, dst))
        self.src, self.dst = src[order], dst[order]
        self.in_counts = np.bincount(self.dst, minlength=self.n_nodes)
        self.dst_starts = np.concatenate([[0], np.cumsum(self.in_counts)[:-1]]).astype(np.int64)

    @property
    def n_messages(self) -> int:
        return len(self.src)

    @cached_property
    def neighbor_degree(self) -> np.ndarray:
        return self.in_counts - 1

    @cached_property
    def src_scatter(self) -> sp.csr_matrix:
        m = len(self.src)
        return sp.csr_matrix(
            (np.ones(m, dtype=self.dtype), (self.src, np.arange(m))), shape=(self.n_nodes, m)
        )

    @cached_property
    def dst_scatter(self) -> sp.csr_matrix:
        m = len(self.dst)
        return sp.csr_matrix(
            (np.ones(m, dtype=self.dtype), (self.dst, np.arange(m))), shape=(self.n_nodes, m)
        )

    @cached_property
    def neighbor_mean(self) -> sp.csr_matrix:
        """Row-normalised adjacency without self loops; isolated rows are zero."""
        und = self.undirected
        n = self.n_nodes
        rows = np.concatenate([und[:, 0], und[:, 1]])
        cols = np.concatenate([und[:, 1], und[:, 0]])
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        w = (1.0 / deg[rows]).astype(self.dtype)
        return sp.csr_matrix((w, (rows, cols)), shape=(n, n))

    @cached_property
    def self_mean(self) -> sp.csr_matrix:
        """``(A + I)`` with rows scaled by ``1 / (deg + 1)``."""
        w = (1.0 / self.in_counts[self.dst]).astype(self.dtype)
        return sp.csr_matrix((w, (self.dst, self.src)), shape=(self.n_nodes, self.n_nodes))

    @cached_property
    def neighbor_sum(self) -> sp.csr_matrix:
        und = self.undirected
        n = self.n_nodes
        rows = np.concatenate([und[:, 0], und[:, 1]])
        cols = np.concatenate([und[:, 1], und[:, 0]])
        return sp.csr_matrix((np.ones(len(rows), dtype=self.dtype), (rows, cols)), shape=(n, n))

    @cached_property
    def graph_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.graph_sizes)[:-1]]).astype(np.int64)

    @cached_property
    def frame_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.frame_sizes)[:-1]]).astype(np.int64)


def as_batch(g, dtype=None) -> GraphBatch:
    if isinstance(g, GraphBatch):
        return g
    return GraphBatch([g], dtype=dtype or np.float64)

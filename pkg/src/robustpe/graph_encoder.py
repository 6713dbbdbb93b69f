"""Per-section component graphs and a non-negative graph attention encoder.

Every section contributes a 3-node clique (n-gram, histogram and string
representations).  Cliques never connect to each other, so a node's
embedding depends only on its own section.  Per-kind sum pooling turns the
node embeddings into a fixed-length encoding.

All encoder parameters are kept non-negative (clamped after each update).
With non-negative inputs this keeps every embedding non-negative, and adding
a section can only add to the pooled encoding.
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateData, DimensionMismatch, Diverged, EmptyCorpus, EmptySections, VocabularyMismatch
from .features import SectionFeatureSet, Vocabulary, section_features
from .pe_format import PeFile

GAT_FORMAT = 1


class NodeKind(enum.IntEnum):
    NGRAM = 0
    HISTOGRAM = 1
    STRINGS = 2


KINDS = tuple(NodeKind)


@dataclass(frozen=True)
class GatConfig:
    d_in: int = 64
    d_out: int = 32
    slope: float = 0.2
    learning_rate: float = 0.001
    epochs: int = 200
    seed: int = 0


@dataclass(eq=False)
class GatParams:
    projections: list[np.ndarray]  # one (d_raw_k, d_in) matrix per node kind
    weight: np.ndarray  # (d_in, d_out)
    attention: np.ndarray  # (2 * d_out,)
    slope: float = 0.2
    vocab_fingerprint: str = ""
    seed: int = 0
    # fixed positive multiplier per node kind applied to raw inputs (not trained)
    input_scale: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.input_scale:
            self.input_scale = tuple(1.0 for _ in self.projections)
        if len(self.input_scale) != len(self.projections) or min(self.input_scale, default=1.0) <= 0:
            raise DimensionMismatch("input_scale needs one positive entry per node kind")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @property
    def raw_dims(self) -> tuple[int, ...]:
        return tuple(p.shape[0] for p in self.projections)

    def arrays(self) -> list[np.ndarray]:
        return [*self.projections, self.weight, self.attention]

    def copy(self) -> GatParams:
        return GatParams(
            [p.copy() for p in self.projections],
            self.weight.copy(),
            self.attention.copy(),
            self.slope,
            self.vocab_fingerprint,
            self.seed,
            self.input_scale,
        )

    def clamp(self) -> None:
        for arr in self.arrays():
            np.maximum(arr, 0.0, out=arr)

    def min_entry(self) -> float:
        return min(float(a.min()) for a in self.arrays() if a.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GatParams):
            return NotImplemented
        return (
            self.slope == other.slope
            and self.input_scale == other.input_scale
            and self.vocab_fingerprint == other.vocab_fingerprint
            and len(self.projections) == len(other.projections)
            and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )

    def to_json(self) -> str:
        def enc(a: np.ndarray) -> dict:
            a = np.ascontiguousarray(a, dtype="<f8")
            return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}

        return json.dumps(
            {
                "format": GAT_FORMAT,
                "d_in": self.d_in,
                "d_out": self.d_out,
                "slope": self.slope,
                "seed": self.seed,
                "vocab_fingerprint": self.vocab_fingerprint,
                "input_scale": list(self.input_scale),
                "projections": [enc(p) for p in self.projections],
                "weight": enc(self.weight),
                "attention": enc(self.attention),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> GatParams:
        d = json.loads(text)
        if d.get("format") != GAT_FORMAT:
            raise ValueError(f"unsupported GAT parameter format {d.get('format')!r}")

        def dec(e: dict) -> np.ndarray:
            return np.frombuffer(base64.b64decode(e["data"]), dtype="<f8").reshape(e["shape"]).copy()

        return cls(
            [dec(p) for p in d["projections"]],
            dec(d["weight"]),
            dec(d["attention"]),
            float(d["slope"]),
            d["vocab_fingerprint"],
            int(d["seed"]),
            tuple(float(v) for v in d["input_scale"]),
        )


def init_params(raw_dims: Sequence[int], config: GatConfig, row_scale: Sequence[float] | None = None) -> GatParams:
    """Random strictly positive parameters.

    ``row_scale`` is the typical row sum of each kind's input.  Inputs are
    divided by it so every projected coordinate starts near 1 while the
    trainable entries stay of order one.
    """
    rng = np.random.default_rng(config.seed)
    row_scale = row_scale or [1.0] * len(raw_dims)
    projections = [rng.uniform(0, 2.0, (d, config.d_in)) for d in raw_dims]
    weight = rng.uniform(0, 2.0 / config.d_in, (config.d_in, config.d_out))
    attention = rng.uniform(0, 2.0 / config.d_out, 2 * config.d_out)
    scale = tuple(1.0 / max(float(s), 1e-9) for s in row_scale)
    return GatParams(projections, weight, attention, config.slope, seed=config.seed, input_scale=scale)


# ---------------------------------------------------------------- graph inputs


@dataclass(eq=False)
class RawGraph:
    """Raw per-kind inputs of one file: one CSR row per section for each kind."""

    inputs: list[sp.csr_matrix]
    section_names: tuple[str, ...] = ()

    @property
    def n_sections(self) -> int:
        return self.inputs[0].shape[0]


def transform_counts(counts: np.ndarray) -> np.ndarray:
    """Input scaling applied to raw counts; monotone and zero-preserving."""
    return np.log1p(counts)


def raw_graph(sections: Sequence[SectionFeatureSet]) -> RawGraph:
    if not sections:
        raise EmptySections("a component graph needs at least one section")

    def stack(vecs) -> sp.csr_matrix:
        rows = np.concatenate([np.full(len(v.indices), i) for i, v in enumerate(vecs)])
        cols = np.concatenate([v.indices for v in vecs])
        vals = transform_counts(np.concatenate([v.values for v in vecs]).astype(np.float64))
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(vecs), vecs[0].dim))

    hist = sp.csr_matrix(transform_counts(np.stack([s.histogram for s in sections]).astype(np.float64)))
    return RawGraph(
        [stack([s.ngram_vec for s in sections]), hist, stack([s.string_vec for s in sections])],
        tuple(s.section_name for s in sections),
    )


@dataclass(eq=False)
class ComponentGraph:
    node_section: np.ndarray  # (N,) section index of each node
    node_kind: np.ndarray  # (N,) NodeKind of each node
    features: np.ndarray  # (N, d_in) projected node vectors
    edges: np.ndarray  # (E, 2) undirected pairs i < j; self loops are implicit

    @property
    def n_nodes(self) -> int:
        return len(self.node_section)

    @property
    def n_sections(self) -> int:
        return int(self.node_section.max()) + 1 if self.n_nodes else 0

    def neighbourhoods(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed ``(src, dst)`` pairs of every closed neighbourhood, self loops included."""
        n = np.arange(self.n_nodes)
        src = np.concatenate([n, self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([n, self.edges[:, 1], self.edges[:, 0]])
        order = np.lexsort((dst, src))
        return src[order], dst[order]


def _project(graph: RawGraph, params: GatParams) -> np.ndarray:
    """Projected node vectors as an (S, 3, d_in) array."""
    if len(graph.inputs) != len(params.projections):
        raise DimensionMismatch("graph and parameters disagree on the number of node kinds")
    out = []
    for x, p, c in zip(graph.inputs, params.projections, params.input_scale):
        if x.shape[1] != p.shape[0]:
            raise DimensionMismatch(f"raw width {x.shape[1]} does not match projection rows {p.shape[0]}")
        out.append(np.asarray(x @ p) * c)
    return np.stack(out, axis=1)


def build_graph(sections: Sequence[SectionFeatureSet] | RawGraph, params: GatParams) -> ComponentGraph:
    graph = sections if isinstance(sections, RawGraph) else raw_graph(sections)
    h = _project(graph, params)
    s = h.shape[0]
    k = len(KINDS)
    base = np.arange(s) * k
    pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
    edges = np.stack([np.stack([base + a, base + b], axis=1) for a, b in pairs], axis=1).reshape(-1, 2)
    return ComponentGraph(
        node_section=np.repeat(np.arange(s), k),
        node_kind=np.tile(np.arange(k), s),
        features=h.reshape(s * k, -1),
        edges=edges,
    )


def _lrelu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def gat_forward(graph: ComponentGraph, params: GatParams, return_attention: bool = False):
    """Single-head attention over closed neighbourhoods on an arbitrary edge list.

    Returns the (N, d_out) node embeddings, and with ``return_attention`` also
    the attention coefficients as a sparse (N, N) matrix whose rows sum to 1.
    """
    if graph.features.shape[1] != params.d_in:
        raise DimensionMismatch(f"node width {graph.features.shape[1]} != d_in {params.d_in}")
    d = params.d_out
    z = np.einsum("nk,kd->nd", graph.features, params.weight)
    u = np.einsum("nd,d->n", z, params.attention[:d])
    v = np.einsum("nd,d->n", z, params.attention[d:])
    src, dst = graph.neighbourhoods()
    e = _lrelu(u[src] + v[dst], params.slope)
    n = graph.n_nodes
    e_max = np.full(n, -np.inf)
    np.maximum.at(e_max, src, e)
    w = np.exp(e - e_max[src])
    denom = np.zeros(n)
    np.add.at(denom, src, w)
    alpha = w / denom[src]
    msg = np.zeros((n, d))
    np.add.at(msg, src, alpha[:, None] * z[dst])
    out = np.maximum(msg, 0.0)
    if return_attention:
        return out, sp.csr_matrix((alpha, (src, dst)), shape=(n, n))
    return out


def _clique_forward(h: np.ndarray, params: GatParams) -> dict:
    """Forward pass on stacked 3-cliques; ``h`` is (S, 3, d_in).

    Uses einsum throughout so each section's result is computed independently
    of the other sections in the batch.
    """
    d = params.d_out
    z = np.einsum("sik,kd->sid", h, params.weight)
    u = np.einsum("sid,d->si", z, params.attention[:d])
    v = np.einsum("sid,d->si", z, params.attention[d:])
    pre = u[:, :, None] + v[:, None, :]
    e = _lrelu(pre, params.slope)
    e = e - e.max(axis=2, keepdims=True)
    w = np.exp(e)
    alpha = w / w.sum(axis=2, keepdims=True)
    m = np.einsum("sij,sjd->sid", alpha, z)
    return {"h": h, "z": z, "pre": pre, "alpha": alpha, "m": m, "out": np.maximum(m, 0.0)}


def node_embeddings(graph: RawGraph, params: GatParams) -> np.ndarray:
    """(S, 3, d_out) embeddings of every section's three nodes."""
    return _clique_forward(_project(graph, params), params)["out"]


def _canonical_sum(rows: np.ndarray) -> np.ndarray:
    # sum in a content-defined order so the result does not depend on section order
    if len(rows) <= 1:
        return rows.sum(axis=0)
    order = np.lexsort(rows.T[::-1])
    return rows[order].sum(axis=0)


@dataclass(frozen=True, eq=False)
class GraphEncoding:
    pooled: tuple[np.ndarray, ...]  # one d_out vector per node kind

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate(self.pooled)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraphEncoding):
            return NotImplemented
        return np.array_equal(self.vector, other.vector)


def readout(embeddings: np.ndarray, graph: ComponentGraph | None = None) -> GraphEncoding:
    """Per-kind sum pooling.

    ``embeddings`` is either (N, d_out) node rows ordered like ``graph`` or
    the (S, 3, d_out) clique layout.
    """
    if embeddings.ndim == 2:
        if graph is None:
            raise ValueError("node-level embeddings need the graph for their kinds")
        return GraphEncoding(tuple(_canonical_sum(embeddings[graph.node_kind == k]) for k in KINDS))
    return GraphEncoding(tuple(_canonical_sum(embeddings[:, k, :]) for k in KINDS))


def check_vocab(params: GatParams, vocab: Vocabulary) -> None:
    if params.vocab_fingerprint and params.vocab_fingerprint != vocab.built_from:
        raise VocabularyMismatch("GAT parameters were trained against a different vocabulary")


def encode_sections(sections: Sequence[SectionFeatureSet], params: GatParams) -> GraphEncoding:
    return readout(node_embeddings(raw_graph(sections), params))


def encode(pe: PeFile, vocab: Vocabulary, params: GatParams) -> GraphEncoding:
    check_vocab(params, vocab)
    return encode_sections(section_features(pe, vocab), params)


def encode_many(graphs: Sequence[RawGraph], params: GatParams) -> np.ndarray:
    """Encodings of many files as a (G, 3*d_out) matrix; row g equals ``readout`` of graph g."""
    if not graphs:
        return np.zeros((0, len(KINDS) * params.d_out))
    batch = _stack(graphs)
    out = node_embeddings(batch.graph, params)
    bounds = np.concatenate([[0], np.cumsum(batch.counts)])
    return np.stack([readout(out[a:b]).vector for a, b in zip(bounds[:-1], bounds[1:])])


# ---------------------------------------------------------------- training


@dataclass(eq=False)
class _Batch:
    graph: RawGraph
    counts: np.ndarray  # sections per file
    pool: sp.csr_matrix  # (G, S) file membership


def _stack(graphs: Sequence[RawGraph]) -> _Batch:
    inputs = [sp.vstack([g.inputs[k] for g in graphs], format="csr") for k in range(len(KINDS))]
    counts = np.array([g.n_sections for g in graphs])
    rows = np.repeat(np.arange(len(graphs)), counts)
    pool = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(len(graphs), len(rows)))
    return _Batch(RawGraph(inputs), counts, pool)


@dataclass(eq=False)
class Probe:
    weight: np.ndarray  # (3*d_out, K)
    bias: np.ndarray  # (K,)


def _targets(labels: Sequence) -> tuple[np.ndarray, list]:
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise DegenerateData("GAT training needs at least two classes")
    if len(classes) == 2:
        y = np.array([[float(l == classes[1])] for l in labels])
    else:
        y = np.array([[float(l == c) for c in classes] for l in labels])
    return y, classes


def _loss_and_grads(batch: _Batch, y: np.ndarray, params: GatParams, probe: Probe, need_grad: bool = True):
    h = _project(batch.graph, params)
    f = _clique_forward(h, params)
    s = h.shape[0]
    d = params.d_out
    enc = np.asarray(batch.pool @ f["out"].reshape(s, -1))
    logits = enc @ probe.weight + probe.bias
    # mean binary cross-entropy over files and outputs, computed stably
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    if not need_grad:
        return loss, None, enc
    g, k = y.shape
    dlog = (1.0 / (1.0 + np.exp(-logits)) - y) / (g * k)
    d_probe_w = enc.T @ dlog
    d_probe_b = dlog.sum(axis=0)
    denc = dlog @ probe.weight.T
    d_out = np.asarray(batch.pool.T @ denc).reshape(s, len(KINDS), d)
    dm = d_out * (f["m"] > 0)
    alpha, z = f["alpha"], f["z"]
    dalpha = np.einsum("sid,sjd->sij", dm, z)
    dz = np.einsum("sij,sid->sjd", alpha, dm)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=2, keepdims=True))
    dpre = de * np.where(f["pre"] > 0, 1.0, params.slope)
    du = dpre.sum(axis=2)
    dv = dpre.sum(axis=1)
    a1, a2 = params.attention[:d], params.attention[d:]
    dz = dz + du[:, :, None] * a1 + dv[:, :, None] * a2
    da = np.concatenate([np.einsum("si,sid->d", du, z), np.einsum("si,sid->d", dv, z)])
    dw = h.reshape(-1, params.d_in).T @ dz.reshape(-1, d)
    dh = dz @ params.weight.T
    dps = [np.asarray(x.T @ dh[:, kk, :]) * c for kk, (x, c) in enumerate(zip(batch.graph.inputs, params.input_scale))]
    grads = {"projections": dps, "weight": dw, "attention": da, "probe_w": d_probe_w, "probe_b": d_probe_b}
    return loss, grads, enc


def gat_loss(graphs: Sequence[RawGraph], labels: Sequence, params: GatParams, probe: Probe) -> float:
    y, _ = _targets(list(labels))
    return _loss_and_grads(_stack(graphs), y, params, probe, need_grad=False)[0]


def gat_gradients(graphs: Sequence[RawGraph], labels: Sequence, params: GatParams, probe: Probe) -> dict:
    y, _ = _targets(list(labels))
    return _loss_and_grads(_stack(graphs), y, params, probe)[1]


@dataclass
class GatTrainResult:
    params: GatParams
    probe: Probe
    losses: list[float] = field(default_factory=list)
    classes: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def probe_scores(self, graphs: Sequence[RawGraph]) -> np.ndarray:
        enc = encode_many(graphs, self.params)
        return 1.0 / (1.0 + np.exp(-(enc @ self.probe.weight + self.probe.bias)))


class _Adam:
    def __init__(self, shapes, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_gat(
    graphs: Sequence[RawGraph],
    labels: Sequence,
    config: GatConfig | None = None,
    vocab_fingerprint: str = "",
    init: GatParams | None = None,
) -> GatTrainResult:
    """Full-batch Adam on the logistic loss of a linear probe over the pooled encoding.

    Encoder parameters are clamped at zero after every step; the probe is
    unconstrained.  Multi-class labels use one sigmoid output per class.
    """
    config = config or GatConfig()
    if not graphs:
        raise EmptyCorpus("no graphs to train on")
    y, classes = _targets(list(labels))
    batch = _stack(graphs)
    if init is None:
        row_scale = [float(np.asarray(x.sum(axis=1)).mean()) for x in batch.graph.inputs]
        params = init_params([x.shape[1] for x in batch.graph.inputs], config, row_scale)
    else:
        params = init.copy()
    params.vocab_fingerprint = vocab_fingerprint or params.vocab_fingerprint
    params.slope = config.slope
    params.clamp()
    prior = np.clip(y.mean(axis=0), 1e-6, 1 - 1e-6)
    probe = Probe(np.zeros((len(KINDS) * params.d_out, y.shape[1])), np.log(prior / (1 - prior)))

    arrays = [*params.projections, params.weight, params.attention, probe.weight, probe.bias]
    opt = _Adam([a.shape for a in arrays], config.learning_rate)
    losses = []
    for _ in range(config.epochs):
        loss, grads, _ = _loss_and_grads(batch, y, params, probe)
        if not np.isfinite(loss):
            raise Diverged(f"loss became {loss} after {len(losses)} epochs")
        flat = [*grads["projections"], grads["weight"], grads["attention"], grads["probe_w"], grads["probe_b"]]
        if not all(np.isfinite(g).all() for g in flat):
            raise Diverged(f"non-finite gradient after {len(losses)} epochs")
        losses.append(loss)
        opt.step(arrays, flat)
        params.clamp()
    loss = _loss_and_grads(batch, y, params, probe, need_grad=False)[0]
    if not np.isfinite(loss):
        raise Diverged(f"final loss is {loss}")
    losses.append(loss)
    return GatTrainResult(params, probe, losses, classes)

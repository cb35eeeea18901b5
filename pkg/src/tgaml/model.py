"""Temporal GNN: stacked node encoders, an LSTM temporal encoder over per-step
messages, and a classifier fed by every intermediate embedding."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import ConfigError, ContractError, ShapeError
from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .features import FeatureTable
from .graph import TemporalGraph, rng as make_rng


@dataclass(frozen=True)
class ModelConfig:
    num_node_encoder_layers: int = 2
    encoder_channels: int = 32
    lstm_units_per_layer: tuple[int, ...] = (32, 32)
    classifier_hidden: tuple[int, ...] = (32,)
    max_sequence_length: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lstm_units_per_layer", tuple(self.lstm_units_per_layer))
        object.__setattr__(self, "classifier_hidden", tuple(self.classifier_hidden))
        sizes = [self.num_node_encoder_layers, self.encoder_channels, self.max_sequence_length,
                 *self.lstm_units_per_layer, *self.classifier_hidden]
        if not self.lstm_units_per_layer or any(int(s) < 1 for s in sizes):
            raise ConfigError(f"model sizes must all be >= 1: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def classifier_input_width(self) -> int:
        return self.num_node_encoder_layers * self.encoder_channels + self.lstm_units_per_layer[-1]


# -- precomputed graph operators -----------------------------------------------

@dataclass(frozen=True, eq=False)
class TimedNodes:
    """Per-node sequences of active time steps and the edges behind each step.

    Slots are (node, step) pairs where the node has at least one incident
    edge, ordered by node then step and truncated to the most recent
    ``max_len`` steps per node.
    """
    num_nodes: int
    max_len: int
    slot_ptr: np.ndarray  # node -> slot range
    slot_step: np.ndarray
    neighbor_mean: sp.csr_matrix  # slots x nodes
    incoming_mean: sp.csr_matrix  # slots x edges

    @property
    def lengths(self) -> np.ndarray:
        """Sequence length per node; nodes without edges get a single empty step."""
        return np.maximum(np.diff(self.slot_ptr), 1)

    @classmethod
    def build(cls, graph: TemporalGraph, max_len: int) -> "TimedNodes":
        n, m = graph.num_nodes, graph.num_edges
        loop = graph.src == graph.dst
        edges = np.arange(m)
        # one incidence entry per (endpoint, edge); a self-loop is a single incoming entry
        node = np.concatenate([graph.dst, graph.src[~loop]])
        other = np.concatenate([graph.src, graph.dst[~loop]])
        edge = np.concatenate([edges, edges[~loop]])
        incoming = np.concatenate([np.ones(m, bool), np.zeros((~loop).sum(), bool)])
        step = graph.step[edge]
        order = np.lexsort((edge, step, node))
        node, other, edge, incoming, step = node[order], other[order], edge[order], incoming[order], step[order]

        new_slot = np.ones(len(node), dtype=bool)
        new_slot[1:] = (node[1:] != node[:-1]) | (step[1:] != step[:-1])
        slot_of = np.cumsum(new_slot) - 1
        slot_node = node[new_slot]
        slot_step = step[new_slot]
        counts = np.bincount(slot_node, minlength=n)
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        local = np.arange(len(slot_node)) - start[slot_node]
        keep_slot = local >= counts[slot_node] - max_len

        keep = keep_slot[slot_of]
        new_index = np.cumsum(keep_slot) - 1
        rows = new_index[slot_of[keep]]
        s = int(keep_slot.sum())
        kept_node = slot_node[keep_slot]
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(kept_node, minlength=n), out=ptr[1:])

        nb_count = np.bincount(rows, minlength=s).astype(np.float64)
        neighbor_mean = sp.csr_matrix(
            (1.0 / nb_count[rows], (rows, other[keep])), shape=(s, n)
        )
        inc = keep & incoming
        inc_rows = new_index[slot_of[inc]]
        in_count = np.bincount(inc_rows, minlength=s).astype(np.float64)
        incoming_mean = sp.csr_matrix(
            (1.0 / in_count[inc_rows], (inc_rows, edge[inc])), shape=(s, m)
        )
        return cls(n, max_len, ptr, slot_step[keep_slot], neighbor_mean, incoming_mean)

    def sequences(self, nodes: Sequence[int] | None = None) -> "SequenceBatch":
        """Right-aligned per-position operators for the given nodes (all by default)."""
        nodes = np.arange(self.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
        b = len(nodes)
        lengths = self.lengths[nodes]
        width = int(lengths.max()) if b else 1
        starts, ends = self.slot_ptr[nodes], self.slot_ptr[nodes + 1]
        has = ends - starts
        slots = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)]) if has.sum() else \
            np.zeros(0, dtype=np.int64)
        row = np.repeat(np.arange(b), has)
        local = slots - np.repeat(starts, has)
        pos = width - np.repeat(has, has) + local
        stacked = pos * b + row
        nb = self.neighbor_mean[slots].tocoo()
        nb_stacked = sp.csr_matrix(
            (nb.data, (stacked[nb.row], nb.col)), shape=(width * b, self.num_nodes)
        )
        inc = self.incoming_mean[slots].tocoo()
        inc_stacked = sp.csr_matrix(
            (inc.data, (stacked[inc.row], inc.col)), shape=(width * b, self.incoming_mean.shape[1])
        )
        mask = (np.arange(width)[:, None] >= width - lengths[None, :]).astype(np.float64)
        return SequenceBatch(nodes, width, nb_stacked, inc_stacked, mask[:, :, None])


@dataclass(frozen=True, eq=False)
class SequenceBatch:
    nodes: np.ndarray
    width: int
    neighbor_mean: sp.csr_matrix  # (width * batch) x nodes
    incoming_mean: sp.csr_matrix  # (width * batch) x edges
    mask: np.ndarray  # width x batch x 1

    def neighbor_op(self, p: int) -> sp.csr_matrix:
        b = len(self.nodes)
        return self.neighbor_mean[p * b:(p + 1) * b]

    def edge_messages(self, edge_feats: np.ndarray) -> np.ndarray:
        """Mean incoming edge features per position, shape width x batch x D_e."""
        out = self.incoming_mean @ edge_feats
        return np.asarray(out).reshape(self.width, len(self.nodes), edge_feats.shape[1])


@dataclass(frozen=True, eq=False)
class GraphInputs:
    """Constant operators and features for running the model on one graph."""
    graph: TemporalGraph
    node_features: np.ndarray
    edge_features: np.ndarray
    neighbor_mean: sp.csr_matrix  # distinct in/out neighbours, self excluded
    incoming_edge_mean: np.ndarray  # nodes x D_e
    timed: TimedNodes
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "labels", self.graph.labels.astype(np.float64))

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @classmethod
    def build(cls, graph: TemporalGraph, table: FeatureTable | tuple[np.ndarray, np.ndarray],
              max_sequence_length: int = 64) -> "GraphInputs":
        if isinstance(table, FeatureTable):
            x, e = table.node_features, table.edge_features
        else:
            x, e = table
        x, e = np.asarray(x, dtype=np.float64), np.asarray(e, dtype=np.float64)
        n = graph.num_nodes
        if x.shape[0] != n or e.shape[0] != graph.num_edges:
            raise ShapeError(f"features {x.shape}/{e.shape} do not match graph ({n} nodes, "
                             f"{graph.num_edges} edges)")
        mask = graph.src != graph.dst
        a = sp.csr_matrix((np.ones(mask.sum()), (graph.src[mask], graph.dst[mask])), shape=(n, n))
        a = (a + a.T).tocsr()
        a.data[:] = 1.0
        deg = np.asarray(a.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
        neighbor_mean = (sp.diags(inv) @ a).tocsr()
        in_count = np.bincount(graph.dst, minlength=n).astype(np.float64)
        inc = sp.csr_matrix(
            (1.0 / np.maximum(in_count[graph.dst], 1.0), (graph.dst, np.arange(graph.num_edges))),
            shape=(n, graph.num_edges),
        )
        incoming_edge_mean = np.asarray(inc @ e).reshape(n, e.shape[1])
        return cls(graph, x, e, neighbor_mean, incoming_edge_mean,
                   TimedNodes.build(graph, max_sequence_length))


# -- parameters ---------------------------------------------------------------

def init_params(config: ModelConfig, node_dim: int, edge_dim: int, seed: int = 0) -> ParameterStore:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    gen = make_rng(seed, 101)
    store = ParameterStore()
    d_in = node_dim
    for l in range(config.num_node_encoder_layers):
        fan_in = 2 * d_in + edge_dim
        store.add(f"encoder.{l}.weight", ad.glorot_uniform(gen, fan_in, config.encoder_channels))
        store.add(f"encoder.{l}.bias", np.zeros(config.encoder_channels))
        d_in = config.encoder_channels
    d_in = config.encoder_channels + edge_dim
    for k, h in enumerate(config.lstm_units_per_layer):
        store.add(f"lstm.{k}.w_x", ad.glorot_uniform(gen, d_in, 4 * h))
        store.add(f"lstm.{k}.w_h", ad.glorot_uniform(gen, h, 4 * h))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        store.add(f"lstm.{k}.bias", bias)
        d_in = h
    d_in = config.classifier_input_width
    for j, h in enumerate((*config.classifier_hidden, 1)):
        store.add(f"classifier.{j}.weight", ad.glorot_uniform(gen, d_in, h))
        store.add(f"classifier.{j}.bias", np.zeros(h))
        d_in = h
    return store


# -- forward components --------------------------------------------------------

def _dropout(x: Tensor, rate: float, gen: np.random.Generator | None) -> Tensor:
    if rate <= 0 or gen is None:
        return x
    keep = (gen.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def node_encoder_forward(inputs: GraphInputs, x, weight: Tensor, bias: Tensor) -> Tensor:
    """ReLU(W . [x_v, mean neighbour features, mean incoming edge features] + b)."""
    x = ad.as_tensor(x)
    if weight.shape[0] != 2 * x.shape[1] + inputs.edge_features.shape[1]:
        raise ShapeError(f"node encoder weight {weight.shape} does not fit input width {x.shape[1]}")
    msg = ad.concat([x, ad.spmm(inputs.neighbor_mean, x), inputs.incoming_edge_mean], axis=1)
    return ad.relu(ad.broadcast_add(msg @ weight, bias))


def temporal_encoder_forward(
    batch: SequenceBatch, embeddings, edge_features: np.ndarray,
    lstm: Sequence[tuple[Tensor, Tensor, Tensor]],
) -> Tensor:
    """Run the LSTM stack over each node's per-step mean messages; return final hidden states."""
    embeddings = ad.as_tensor(embeddings)
    b = len(batch.nodes)
    edge_msgs = batch.edge_messages(edge_features)
    xs = [
        ad.concat([ad.spmm(batch.neighbor_op(p), embeddings), edge_msgs[p]], axis=1)
        for p in range(batch.width)
    ]
    for w_x, w_h, bias in lstm:
        hidden = w_h.shape[0]
        h = Tensor(np.zeros((b, hidden)))
        c = Tensor(np.zeros((b, hidden)))
        outs = []
        for p, x in enumerate(xs):
            h_new, c_new = ad.lstm_cell(x, h, c, w_x, w_h, bias)
            m = batch.mask[p]
            h = ad.masked_update(h_new, h, m)
            c = ad.masked_update(c_new, c, m)
            outs.append(h)
        xs = outs
    return xs[-1]


def classifier_forward(embeddings: Sequence, layers: Sequence[tuple[Tensor, Tensor]],
                       dropout: float = 0.0, gen: np.random.Generator | None = None) -> Tensor:
    """Concatenate all embeddings, apply the ReLU MLP, return sigmoid probabilities (flat)."""
    z = ad.concat(list(embeddings), axis=1)
    for j, (w, b) in enumerate(layers):
        if z.shape[1] != w.shape[0]:
            raise ShapeError(f"classifier layer {j}: input width {z.shape[1]} != {w.shape[0]}")
        z = ad.broadcast_add(z @ w, b)
        if j < len(layers) - 1:
            z = _dropout(ad.relu(z), dropout, gen)
    return ad.reshape(ad.sigmoid(z), (z.shape[0],))


class Model:
    def __init__(self, config: ModelConfig, params: ParameterStore):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, node_dim: int, edge_dim: int, seed: int = 0) -> "Model":
        return cls(config, init_params(config, node_dim, edge_dim, seed))

    def encoder_layers(self) -> list[tuple[Tensor, Tensor]]:
        return [(self.params[f"encoder.{l}.weight"], self.params[f"encoder.{l}.bias"])
                for l in range(self.config.num_node_encoder_layers)]

    def lstm_layers(self) -> list[tuple[Tensor, Tensor, Tensor]]:
        return [(self.params[f"lstm.{k}.w_x"], self.params[f"lstm.{k}.w_h"], self.params[f"lstm.{k}.bias"])
                for k in range(len(self.config.lstm_units_per_layer))]

    def classifier_layers(self) -> list[tuple[Tensor, Tensor]]:
        return [(self.params[f"classifier.{j}.weight"], self.params[f"classifier.{j}.bias"])
                for j in range(len(self.config.classifier_hidden) + 1)]

    def encode(self, inputs: GraphInputs, gen: np.random.Generator | None = None) -> list[Tensor]:
        h = inputs.node_features
        out = []
        for w, b in self.encoder_layers():
            h = _dropout(node_encoder_forward(inputs, h, w, b), self.config.dropout, gen)
            out.append(h)
        return out

    def head(self, inputs: GraphInputs, encoded: Sequence, nodes=None,
             gen: np.random.Generator | None = None) -> Tensor:
        """Temporal encoder plus classifier for ``nodes`` (all nodes by default)."""
        batch = inputs.timed.sequences(nodes)
        temporal = temporal_encoder_forward(batch, encoded[-1], inputs.edge_features, self.lstm_layers())
        if nodes is not None:
            encoded = [ad.getitem(ad.as_tensor(e), batch.nodes) for e in encoded]
        return classifier_forward([*encoded, temporal], self.classifier_layers(), self.config.dropout, gen)

    def forward(self, inputs: GraphInputs, gen: np.random.Generator | None = None) -> Tensor:
        """Probability of launderer for every node. Pass ``gen`` only when training with dropout."""
        self._check_complete()
        return self.head(inputs, self.encode(inputs, gen), gen=gen)

    def predict(self, inputs: GraphInputs) -> np.ndarray:
        return self.forward(inputs).value.copy()

    def _check_complete(self) -> None:
        for group in ("encoder", "lstm", "classifier"):
            if not self.params.names(group):
                raise ContractError(f"parameter store has no {group!r} parameters")
        self.encoder_layers()
        self.lstm_layers()
        self.classifier_layers()

    def with_config(self, **changes) -> "Model":
        return Model(replace(self.config, **changes), self.params)


def full_forward(inputs: GraphInputs, model: Model) -> np.ndarray:
    return model.predict(inputs)

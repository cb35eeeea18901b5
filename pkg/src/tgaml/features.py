"""Per-node and per-edge feature engineering.

Every family is computed on the graph it is handed, so calling these on a
split subgraph never leaks information from the other splits. Centralities use
simple projections (distinct neighbours, no self-loops); transaction
statistics use every parallel edge.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from . import DataError
from .graph import TemporalGraph

log = logging.getLogger(__name__)

TRANSACTION_FEATURES = [
    "avg_tx_per_step", "min_sent", "max_sent", "min_received",
    "max_received", "var_sent", "var_received",
]
TOPOLOGY_FEATURES = [
    "in_degree", "out_degree", "degree_centrality", "closeness",
    "eigenvector", "avg_neighbor_degree",
]
NODE_FEATURES = TRANSACTION_FEATURES + TOPOLOGY_FEATURES + ["clustering", "pagerank"]

STD_EPS = 1e-12
OTHER = "<other>"


# -- projections -------------------------------------------------------------

def directed_adjacency(graph: TemporalGraph) -> sp.csr_matrix:
    """Binary directed adjacency with parallel edges collapsed and self-loops removed."""
    n = graph.num_nodes
    mask = graph.src != graph.dst
    a = sp.csr_matrix(
        (np.ones(mask.sum()), (graph.src[mask], graph.dst[mask])), shape=(n, n)
    )
    a.sum_duplicates()
    a.data[:] = 1.0
    return a


def undirected_adjacency(graph: TemporalGraph) -> sp.csr_matrix:
    a = directed_adjacency(graph)
    u = (a + a.T).tocsr()
    u.data[:] = 1.0
    return u


# -- transaction statistics --------------------------------------------------

def _group_stats(owner: np.ndarray, values: np.ndarray, n: int) -> tuple[np.ndarray, ...]:
    count = np.bincount(owner, minlength=n).astype(np.float64)
    has = count > 0
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    np.minimum.at(lo, owner, values)
    np.maximum.at(hi, owner, values)
    mean = np.zeros(n)
    mean[has] = np.bincount(owner, weights=values, minlength=n)[has] / count[has]
    var = np.zeros(n)
    sq = np.bincount(owner, weights=(values - mean[owner]) ** 2, minlength=n)
    var[has] = sq[has] / count[has]
    lo[~has] = 0.0
    hi[~has] = 0.0
    return lo, hi, var


def transaction_stats(graph: TemporalGraph) -> np.ndarray:
    """Columns follow :data:`TRANSACTION_FEATURES`; variances are population variances."""
    n = graph.num_nodes
    incident = np.bincount(graph.src, minlength=n) + np.bincount(graph.dst, minlength=n)
    selfloop = np.bincount(graph.src[graph.src == graph.dst], minlength=n)
    avg = (incident - selfloop) / float(graph.total_steps)
    min_s, max_s, var_s = _group_stats(graph.src, graph.amount_paid, n)
    min_r, max_r, var_r = _group_stats(graph.dst, graph.amount_received, n)
    return np.column_stack([avg, min_s, max_s, min_r, max_r, var_s, var_r])


# -- topology ----------------------------------------------------------------

def closeness_centrality(adj: sp.csr_matrix, chunk: int = 256) -> np.ndarray:
    """Outward closeness with the Wasserman-Faust correction for unreachable nodes.

    For node v reaching r nodes (itself included) at total distance D the score
    is ((r-1)/(n-1)) * ((r-1)/D), and 0 when nothing is reachable.
    """
    n = adj.shape[0]
    out = np.zeros(n)
    if n < 2:
        return out
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        dist = csgraph.shortest_path(adj, method="D", directed=True, unweighted=True, indices=idx)
        finite = np.isfinite(dist)
        reach = finite.sum(axis=1).astype(np.float64)
        total = np.where(finite, dist, 0.0).sum(axis=1)
        ok = total > 0
        out[idx[ok]] = (reach[ok] - 1) / (n - 1) * (reach[ok] - 1) / total[ok]
    return out


def eigenvector_centrality(adj: sp.csr_matrix, tol: float = 1e-12, max_iter: int = 10000) -> np.ndarray:
    """Power iteration on ``adj + I`` from the uniform vector, L2-normalised.

    The identity shift keeps bipartite components from oscillating without
    moving the dominant eigenvectors. Graphs without edges score 0 everywhere.
    """
    n = adj.shape[0]
    if n < 2 or adj.nnz == 0:
        return np.zeros(n)
    x = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(max_iter):
        y = adj @ x + x
        y /= np.linalg.norm(y)
        if np.abs(y - x).sum() < n * tol:
            x = y
            break
        x = y
    else:
        log.warning("eigenvector centrality did not converge in %d iterations", max_iter)
    return x


def average_neighbor_degree(adj: sp.csr_matrix) -> np.ndarray:
    deg = np.asarray(adj.sum(axis=1)).ravel()
    tot = adj @ deg
    out = np.zeros_like(deg)
    np.divide(tot, deg, out=out, where=deg > 0)
    return out


def topology_features(graph: TemporalGraph) -> np.ndarray:
    """Columns follow :data:`TOPOLOGY_FEATURES`."""
    n = graph.num_nodes
    d = directed_adjacency(graph)
    u = undirected_adjacency(graph)
    in_deg = np.asarray(d.sum(axis=0)).ravel()
    out_deg = np.asarray(d.sum(axis=1)).ravel()
    deg = np.asarray(u.sum(axis=1)).ravel()
    if n < 2:
        zero = np.zeros(n)
        return np.column_stack([in_deg, out_deg, zero, zero, zero, average_neighbor_degree(u)])
    return np.column_stack([
        in_deg, out_deg, deg / (n - 1), closeness_centrality(d),
        eigenvector_centrality(u), average_neighbor_degree(u),
    ])


def clustering_coefficient(graph: TemporalGraph | sp.csr_matrix) -> np.ndarray:
    u = undirected_adjacency(graph) if isinstance(graph, TemporalGraph) else graph
    deg = np.asarray(u.sum(axis=1)).ravel()
    closed = np.asarray((u @ u).multiply(u).sum(axis=1)).ravel()  # 2 x triangles
    out = np.zeros_like(deg)
    np.divide(closed, deg * (deg - 1), out=out, where=deg >= 2)
    return out


class PageRank(NamedTuple):
    scores: np.ndarray
    iterations: int
    converged: bool


def pagerank(
    graph: TemporalGraph | sp.csr_matrix,
    damping: float = 0.85,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PageRank:
    """Power-iteration PageRank on the directed simple projection.

    Dangling nodes spread their mass uniformly. Stops once the L1 change
    between iterates drops below ``tol``.
    """
    if not 0.0 < damping < 1.0:
        raise ValueError(f"damping must lie in (0, 1), got {damping}")
    a = directed_adjacency(graph) if isinstance(graph, TemporalGraph) else sp.csr_matrix(graph)
    n = a.shape[0]
    if n == 0:
        return PageRank(np.zeros(0), 0, True)
    out_deg = np.asarray(a.sum(axis=1)).ravel()
    dangling = out_deg == 0
    inv = np.zeros(n)
    inv[~dangling] = 1.0 / out_deg[~dangling]
    pt = (sp.diags(inv) @ a).T.tocsr()
    x = np.full(n, 1.0 / n)
    for it in range(1, max_iter + 1):
        y = damping * (pt @ x + x[dangling].sum() / n) + (1.0 - damping) / n
        delta = np.abs(y - x).sum()
        x = y
        if delta < tol:
            return PageRank(x / x.sum(), it, True)
    log.warning("pagerank stopped at max_iter=%d (delta %.3g)", max_iter, delta)
    return PageRank(x / x.sum(), max_iter, False)


# -- assembly ----------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    formats: tuple[str, ...]
    currencies: tuple[str, ...]

    @classmethod
    def fit(cls, raw: np.ndarray, graph: TemporalGraph) -> "NormalizationStats":
        return cls(
            names=tuple(NODE_FEATURES),
            mean=raw.mean(axis=0) if len(raw) else np.zeros(raw.shape[1]),
            std=raw.std(axis=0) if len(raw) else np.zeros(raw.shape[1]),
            formats=tuple(sorted(set(graph.payment_format.tolist()))),
            currencies=tuple(sorted(set(graph.payment_currency.tolist()))),
        )

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        ok = self.std > STD_EPS
        z = np.zeros_like(raw)
        z[:, ok] = (raw[:, ok] - self.mean[ok]) / self.std[ok]
        return z

    def edge_feature_names(self) -> list[str]:
        return (
            ["log_amount_paid", "log_amount_received"]
            + [f"format={f}" for f in self.formats] + [f"format={OTHER}"]
            + [f"currency={c}" for c in self.currencies] + [f"currency={OTHER}"]
            + ["same_currency"]
        )

    def save(self, path: str | Path) -> None:
        lines = [f"names = {json.dumps(list(self.names))}"]
        lines += [f"mean.{k} = {v!r}" for k, v in zip(self.names, self.mean.tolist())]
        lines += [f"std.{k} = {v!r}" for k, v in zip(self.names, self.std.tolist())]
        lines.append(f"vocab.payment_format = {json.dumps(list(self.formats))}")
        lines.append(f"vocab.payment_currency = {json.dumps(list(self.currencies))}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationStats":
        kv = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                kv[k] = v
        names = tuple(json.loads(kv["names"]))
        return cls(
            names=names,
            mean=np.array([float(kv[f"mean.{k}"]) for k in names]),
            std=np.array([float(kv[f"std.{k}"]) for k in names]),
            formats=tuple(json.loads(kv["vocab.payment_format"])),
            currencies=tuple(json.loads(kv["vocab.payment_currency"])),
        )


@dataclass(frozen=True, eq=False)
class FeatureTable:
    node_features: np.ndarray
    edge_features: np.ndarray
    feature_names: list[str]
    edge_feature_names: list[str]
    normalization_stats: NormalizationStats
    raw_node_features: np.ndarray | None = None


def raw_node_features(graph: TemporalGraph, damping: float = 0.85, tol: float = 1e-8,
                      max_iter: int = 100) -> np.ndarray:
    u = undirected_adjacency(graph)
    return np.column_stack([
        transaction_stats(graph),
        topology_features(graph),
        clustering_coefficient(u),
        pagerank(graph, damping, tol, max_iter).scores,
    ])


def _one_hot(values: np.ndarray, vocab: Sequence[str]) -> np.ndarray:
    index = {v: i for i, v in enumerate(vocab)}
    cols = np.array([index.get(v, len(vocab)) for v in values.tolist()], dtype=np.int64)
    out = np.zeros((len(values), len(vocab) + 1))
    out[np.arange(len(values)), cols] = 1.0
    return out


def edge_features(graph: TemporalGraph, stats: NormalizationStats) -> np.ndarray:
    return np.column_stack([
        np.log1p(graph.amount_paid),
        np.log1p(graph.amount_received),
        _one_hot(graph.payment_format, stats.formats),
        _one_hot(graph.payment_currency, stats.currencies),
        (graph.payment_currency == graph.receiving_currency).astype(np.float64),
    ]).reshape(graph.num_edges, -1)


def assemble(
    graph: TemporalGraph,
    train_stats: NormalizationStats | None = None,
    pagerank_damping: float = 0.85,
    pagerank_tol: float = 1e-8,
    pagerank_max_iter: int = 100,
) -> FeatureTable:
    """Compute, normalise and concatenate all node and edge features of ``graph``.

    Without ``train_stats`` the graph is treated as the training split and its
    own statistics and category vocabularies are fitted and returned.
    """
    raw = raw_node_features(graph, pagerank_damping, pagerank_tol, pagerank_max_iter)
    if raw.shape[1] != len(NODE_FEATURES):
        raise DataError(f"node feature width {raw.shape[1]} != {len(NODE_FEATURES)} names")
    stats = train_stats if train_stats is not None else NormalizationStats.fit(raw, graph)
    if tuple(stats.names) != tuple(NODE_FEATURES):
        raise DataError("normalization stats were fitted on a different feature layout")
    node = stats.normalize(raw)
    edge = edge_features(graph, stats)
    edge_names = stats.edge_feature_names()
    if edge.shape[1] != len(edge_names):
        raise DataError(f"edge feature width {edge.shape[1]} != {len(edge_names)} names")
    if not (np.isfinite(node).all() and np.isfinite(edge).all()):
        raise DataError("non-finite feature values")
    return FeatureTable(node, edge, list(NODE_FEATURES), edge_names, stats, raw)


def write_feature_table(table: FeatureTable, graph: TemporalGraph, path: str | Path) -> None:
    """Tab-separated node table with an account column; stats go to ``<path>.stats``."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\t".join(["bank", "account"] + table.feature_names) + "\n")
        for key, row in zip(graph.keys, table.node_features):
            fh.write("\t".join([key[0], key[1]] + [repr(float(x)) for x in row]) + "\n")
    table.normalization_stats.save(path.with_suffix(path.suffix + ".stats"))

"""Shared builders, brute-force oracles and a finite-difference checker."""

from __future__ import annotations

import itertools
from collections import deque
from typing import Callable, Sequence

import numpy as np

from tgaml import autodiff as ad
from tgaml.graph import TemporalGraph


def make_graph(n: int, edges: Sequence[tuple[int, int, int]], labels: Sequence[int] | None = None,
               total_steps: int | None = None, amounts: Sequence[float] | None = None,
               currencies: Sequence[str] | None = None, formats: Sequence[str] | None = None,
               ) -> TemporalGraph:
    """Graph from ``(src, dst, step)`` triples with optional per-edge attributes."""
    m = len(edges)
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    step = np.array([e[2] for e in edges], dtype=np.int64)
    amt = np.asarray(amounts if amounts is not None else np.arange(1, m + 1) * 10.0, dtype=np.float64)
    cur = np.array(currencies if currencies is not None else ["US Dollar"] * m, dtype=object)
    fmt = np.array(formats if formats is not None else ["ACH"] * m, dtype=object)
    if total_steps is None:
        total_steps = int(step.max()) + 1 if m else 1
    return TemporalGraph(
        keys=tuple(("001", f"A{i:04d}") for i in range(n)),
        labels=np.asarray(labels if labels is not None else [0] * n, dtype=np.int8),
        src=src, dst=dst, step=step, edge_index=np.arange(m),
        amount_paid=amt, amount_received=amt.copy(),
        payment_currency=cur, receiving_currency=cur.copy(), payment_format=fmt,
        total_steps=total_steps,
    )


def random_graph(gen: np.random.Generator, max_nodes: int = 8, max_edges: int = 20,
                 steps: int = 6) -> TemporalGraph:
    n = int(gen.integers(1, max_nodes + 1))
    m = int(gen.integers(0, max_edges + 1))
    edges = [(int(gen.integers(n)), int(gen.integers(n)), int(gen.integers(steps))) for _ in range(m)]
    return make_graph(n, edges, labels=gen.integers(0, 2, n), total_steps=steps,
                      amounts=gen.lognormal(3, 1, m).round(2))


# -- brute-force oracles on plain Python structures ----------------------------

def simple_directed(graph: TemporalGraph) -> list[set[int]]:
    out = [set() for _ in range(graph.num_nodes)]
    for s, d in zip(graph.src.tolist(), graph.dst.tolist()):
        if s != d:
            out[s].add(d)
    return out


def simple_undirected(graph: TemporalGraph) -> list[set[int]]:
    nb = [set() for _ in range(graph.num_nodes)]
    for s, d in zip(graph.src.tolist(), graph.dst.tolist()):
        if s != d:
            nb[s].add(d)
            nb[d].add(s)
    return nb


def bfs_distances(adj: list[set[int]], source: int) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def oracle_closeness(graph: TemporalGraph) -> np.ndarray:
    adj = simple_directed(graph)
    n = len(adj)
    out = np.zeros(n)
    for v in range(n):
        dist = bfs_distances(adj, v)
        r, total = len(dist), sum(dist.values())
        if n > 1 and total > 0:
            out[v] = (r - 1) / (n - 1) * (r - 1) / total
    return out


def oracle_eigenvector(graph: TemporalGraph) -> np.ndarray:
    """Uniform start vector projected onto the top eigenspace of the adjacency."""
    nb = simple_undirected(graph)
    n = len(nb)
    if n < 2 or not any(nb):
        return np.zeros(n)
    a = np.zeros((n, n))
    for u, ws in enumerate(nb):
        for w in ws:
            a[u, w] = 1.0
    vals, vecs = np.linalg.eigh(a)
    top = vecs[:, np.abs(vals - vals.max()) < 1e-9]
    x = top @ (top.T @ np.ones(n))
    return x / np.linalg.norm(x)


def oracle_clustering(graph: TemporalGraph) -> np.ndarray:
    nb = simple_undirected(graph)
    out = np.zeros(len(nb))
    for v, ws in enumerate(nb):
        k = len(ws)
        if k >= 2:
            links = sum(1 for a, b in itertools.combinations(ws, 2) if b in nb[a])
            out[v] = 2.0 * links / (k * (k - 1))
    return out


def oracle_avg_neighbor_degree(graph: TemporalGraph) -> np.ndarray:
    nb = simple_undirected(graph)
    return np.array([np.mean([len(nb[w]) for w in ws]) if ws else 0.0 for ws in nb])


def oracle_pagerank(graph: TemporalGraph, damping: float = 0.85) -> np.ndarray:
    """Exact stationary vector of the dense Google matrix by a linear solve."""
    adj = simple_directed(graph)
    n = len(adj)
    g = np.zeros((n, n))
    for u, ws in enumerate(adj):
        if ws:
            for w in ws:
                g[w, u] = 1.0 / len(ws)
        else:
            g[:, u] = 1.0 / n
    g = damping * g + (1 - damping) / n
    x = np.linalg.solve(np.eye(n) - g + np.ones((n, n)) / n, np.ones(n) / n)
    return x / x.sum()


# -- finite differences --------------------------------------------------------

def fd_max_rel_error(loss_fn: Callable[[], ad.Tensor], params: Sequence[ad.Tensor],
                     h: float = 1e-5, floor: float = 1e-3) -> float:
    """Worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over every entry.

    ``loss_fn`` must rebuild the graph from the current parameter values. The
    floor keeps entries whose true gradient is ~0 from dividing rounding noise
    by zero; it turns the criterion into an absolute one below ``floor``.
    """
    for p in params:
        p.grad = None
    ad.backward(loss_fn())
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().value)
            flat[i] = old - h
            down = float(loss_fn().value)
            flat[i] = old
            num = (up - down) / (2 * h)
            a = g.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst

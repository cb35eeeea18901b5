"""Temporal account graph: accounts as nodes, transactions as time-stamped
parallel directed edges, plus stratified inductive splits."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import DataError
from .ingest import AccountRecord, TransactionRecord


class SplitError(DataError):
    pass


class CacheMismatch(DataError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _incidence(owner: np.ndarray, step: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR pointer/edge arrays grouping edges by ``owner``, time-sorted within a node."""
    order = np.lexsort((np.arange(len(owner)), step, owner))
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(owner, minlength=n), out=ptr[1:])
    return ptr, order.astype(np.int64)


@dataclass(frozen=True, eq=False)
class TemporalGraph:
    keys: tuple
    labels: np.ndarray  # 1 = launderer
    src: np.ndarray
    dst: np.ndarray
    step: np.ndarray
    edge_index: np.ndarray  # position of the edge's transaction in the source list
    amount_paid: np.ndarray  # currency units
    amount_received: np.ndarray
    payment_currency: np.ndarray
    receiving_currency: np.ndarray
    payment_format: np.ndarray
    total_steps: int
    parent_index: np.ndarray | None = None
    in_ptr: np.ndarray = field(init=False, repr=False)
    in_edges: np.ndarray = field(init=False, repr=False)
    out_ptr: np.ndarray = field(init=False, repr=False)
    out_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.keys)
        for name in ("labels", "src", "dst", "step", "edge_index", "amount_paid",
                     "amount_received", "payment_currency", "receiving_currency",
                     "payment_format"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.parent_index is not None:
            object.__setattr__(self, "parent_index", _frozen(self.parent_index))
        in_ptr, in_edges = _incidence(self.dst, self.step, n)
        out_ptr, out_edges = _incidence(self.src, self.step, n)
        object.__setattr__(self, "in_ptr", _frozen(in_ptr))
        object.__setattr__(self, "in_edges", _frozen(in_edges))
        object.__setattr__(self, "out_ptr", _frozen(out_ptr))
        object.__setattr__(self, "out_edges", _frozen(out_edges))

    @property
    def num_nodes(self) -> int:
        return len(self.keys)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def incoming(self, v: int) -> np.ndarray:
        return self.in_edges[self.in_ptr[v]:self.in_ptr[v + 1]]

    def outgoing(self, v: int) -> np.ndarray:
        return self.out_edges[self.out_ptr[v]:self.out_ptr[v + 1]]

    def index_of(self, key) -> int:
        try:
            return self._key_index[key]
        except AttributeError:
            object.__setattr__(self, "_key_index", {k: i for i, k in enumerate(self.keys)})
            return self._key_index[key]

    def subgraph(self, nodes: Sequence[int]) -> "TemporalGraph":
        """Induced subgraph on ``nodes``; edges leaving the node set are dropped."""
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        keep = (remap[self.src] >= 0) & (remap[self.dst] >= 0)
        parent = nodes if self.parent_index is None else self.parent_index[nodes]
        return TemporalGraph(
            keys=tuple(self.keys[i] for i in nodes),
            labels=self.labels[nodes],
            src=remap[self.src[keep]],
            dst=remap[self.dst[keep]],
            step=self.step[keep],
            edge_index=self.edge_index[keep],
            amount_paid=self.amount_paid[keep],
            amount_received=self.amount_received[keep],
            payment_currency=self.payment_currency[keep],
            receiving_currency=self.receiving_currency[keep],
            payment_format=self.payment_format[keep],
            total_steps=self.total_steps,
            parent_index=parent,
        )

    def permuted(self, perm: Sequence[int]) -> "TemporalGraph":
        """Relabel nodes so that old node ``perm[i]`` becomes node ``i``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return TemporalGraph(
            keys=tuple(self.keys[i] for i in perm),
            labels=self.labels[perm],
            src=inv[self.src], dst=inv[self.dst], step=self.step,
            edge_index=self.edge_index, amount_paid=self.amount_paid,
            amount_received=self.amount_received,
            payment_currency=self.payment_currency,
            receiving_currency=self.receiving_currency,
            payment_format=self.payment_format, total_steps=self.total_steps,
        )


def build_graph(
    transactions: Sequence[TransactionRecord],
    accounts: Sequence[AccountRecord],
    total_steps: int | None = None,
) -> TemporalGraph:
    if not accounts:
        raise DataError("no accounts")
    keys = tuple(a.account_key for a in accounts)
    index = {k: i for i, k in enumerate(keys)}
    if len(index) != len(keys):
        raise DataError("duplicate account keys")
    m = len(transactions)
    src = np.empty(m, dtype=np.int64)
    dst = np.empty(m, dtype=np.int64)
    step = np.empty(m, dtype=np.int64)
    for i, t in enumerate(transactions):
        try:
            src[i] = index[(t.src_bank, t.src_account)]
            dst[i] = index[(t.dst_bank, t.dst_account)]
        except KeyError as exc:
            raise DataError(f"transaction {i} references unknown account {exc.args[0]}") from None
        step[i] = t.time_step
    if total_steps is None:
        total_steps = int(step.max()) + 1 if m else 1
    if m and (step.min() < 0 or step.max() >= total_steps):
        raise DataError("transaction time step outside [0, total_steps)")
    return TemporalGraph(
        keys=keys,
        labels=np.array([a.is_launderer for a in accounts], dtype=np.int8),
        src=src, dst=dst, step=step,
        edge_index=np.arange(m, dtype=np.int64),
        amount_paid=np.array([t.amount_paid / 100.0 for t in transactions], dtype=np.float64),
        amount_received=np.array([t.amount_received / 100.0 for t in transactions], dtype=np.float64),
        payment_currency=np.array([t.payment_currency for t in transactions], dtype=str),
        receiving_currency=np.array([t.receiving_currency for t in transactions], dtype=str),
        payment_format=np.array([t.payment_format for t in transactions], dtype=str),
        total_steps=int(total_steps),
    )


# -- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, ...] = (0.70, 0.15, 0.15)
    seed: int = 0
    folds: int = 1

    def __post_init__(self):
        if len(self.fractions) < 2:
            raise SplitError("need at least two split fractions")
        if any(not 0.0 < f < 1.0 for f in self.fractions):
            raise SplitError(f"split fractions must lie in (0, 1): {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SplitError(f"split fractions must sum to 1: {self.fractions}")
        if self.folds < 1:
            raise SplitError("folds must be >= 1")


def rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator; ``stream`` selects an independent substream."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), _stream_key(stream)]))


def _stream_key(stream: tuple[int, ...]) -> int:
    h = hashlib.sha256(repr(stream).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment with at least one item per part."""
    raw = [n * f for f in fractions]
    counts = [max(1, int(np.floor(r))) for r in raw]
    while sum(counts) > n:
        j = max(range(len(counts)), key=lambda i: (counts[i] - raw[i], counts[i]))
        counts[j] -= 1
    rema = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    k = 0
    while sum(counts) < n:
        counts[rema[k % len(rema)]] += 1
        k += 1
    return counts


def split_assignment(graph: TemporalGraph, spec: SplitSpec, fold: int = 0) -> np.ndarray:
    """Part index for every node. Stratified by label, independent of node order."""
    nparts = len(spec.fractions)
    part = np.empty(graph.num_nodes, dtype=np.int64)
    for label in (0, 1):
        members = np.flatnonzero(graph.labels == label)
        if len(members) < nparts:
            raise SplitError(
                f"label {label} has {len(members)} nodes, fewer than {nparts} parts"
            )
        members = np.array(sorted(members, key=lambda i: graph.keys[i]), dtype=np.int64)
        members = members[rng(spec.seed, label).permutation(len(members))]
        counts = _allocate(len(members), spec.fractions)
        if spec.folds > 1:
            # rotate the train/validation pool; the last part (test) stays fixed
            pool = counts[0] + counts[1]
            shift = (fold % spec.folds) * pool // spec.folds
            head = np.roll(members[:pool], -shift)
            members = np.concatenate([head, members[pool:]])
        bounds = np.cumsum([0] + counts)
        for p in range(nparts):
            part[members[bounds[p]:bounds[p + 1]]] = p
    return part


def stratified_split(graph: TemporalGraph, spec: SplitSpec, fold: int = 0) -> tuple[TemporalGraph, ...]:
    if not (graph.labels == 1).any() or not (graph.labels == 0).any():
        raise SplitError("graph needs at least one node of each label")
    part = split_assignment(graph, spec, fold)
    return tuple(graph.subgraph(np.flatnonzero(part == p)) for p in range(len(spec.fractions)))


# -- binary cache ------------------------------------------------------------

MAGIC = b"TGAMLGR\0"
VERSION = 1
_HEADER = struct.Struct("<8sI32sQQQ")
_EDGE = np.dtype([
    ("src", "<u4"), ("dst", "<u4"), ("step", "<u4"), ("feat", "<u4"),
    ("paid", "<f8"), ("received", "<f8"),
    ("pay_cur", "<u2"), ("recv_cur", "<u2"), ("fmt", "<u2"),
])
_NODE = np.dtype([("label", "u1"), ("bank_len", "<u4"), ("acct_len", "<u4")])


def file_digest(path: str | Path) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.digest()


def _write_strings(fh, strings) -> None:
    fh.write(struct.pack("<I", len(strings)))
    for s in strings:
        b = s.encode("utf-8")
        fh.write(struct.pack("<I", len(b)))
        fh.write(b)


def _read_strings(fh) -> list[str]:
    (n,) = struct.unpack("<I", fh.read(4))
    out = []
    for _ in range(n):
        (k,) = struct.unpack("<I", fh.read(4))
        out.append(fh.read(k).decode("utf-8"))
    return out


def save_graph(graph: TemporalGraph, path: str | Path, digest: bytes) -> None:
    """Write the graph as a versioned little-endian binary file keyed by ``digest``."""
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    vocab = sorted(set(graph.payment_currency) | set(graph.receiving_currency) | set(graph.payment_format))
    code = {s: i for i, s in enumerate(vocab)}
    nodes = np.zeros(graph.num_nodes, dtype=_NODE)
    nodes["label"] = graph.labels
    banks = [k[0].encode() for k in graph.keys]
    accts = [k[1].encode() for k in graph.keys]
    nodes["bank_len"] = [len(b) for b in banks]
    nodes["acct_len"] = [len(a) for a in accts]
    edges = np.zeros(graph.num_edges, dtype=_EDGE)
    edges["src"], edges["dst"], edges["step"] = graph.src, graph.dst, graph.step
    edges["feat"] = graph.edge_index
    edges["paid"], edges["received"] = graph.amount_paid, graph.amount_received
    edges["pay_cur"] = [code[s] for s in graph.payment_currency]
    edges["recv_cur"] = [code[s] for s in graph.receiving_currency]
    edges["fmt"] = [code[s] for s in graph.payment_format]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, digest, graph.num_nodes, graph.num_edges, graph.total_steps))
        _write_strings(fh, vocab)
        fh.write(nodes.tobytes())
        fh.write(b"".join(banks))
        fh.write(b"".join(accts))
        fh.write(edges.tobytes())


def load_graph(path: str | Path, digest: bytes | None = None) -> TemporalGraph:
    """Read a cached graph; raises :class:`CacheMismatch` on version or digest mismatch."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CacheMismatch(f"{path}: truncated header")
        magic, version, stored, n, m, total_steps = _HEADER.unpack(head)
        if magic != MAGIC or version != VERSION:
            raise CacheMismatch(f"{path}: not a version-{VERSION} graph cache")
        if digest is not None and stored != digest:
            raise CacheMismatch(f"{path}: input digest mismatch")
        vocab = np.array(_read_strings(fh) or [""], dtype=str)
        nodes = np.frombuffer(fh.read(n * _NODE.itemsize), dtype=_NODE)
        bank_blob = fh.read(int(nodes["bank_len"].sum()))
        acct_blob = fh.read(int(nodes["acct_len"].sum()))
        edges = np.frombuffer(fh.read(m * _EDGE.itemsize), dtype=_EDGE)
    bo = np.concatenate([[0], np.cumsum(nodes["bank_len"], dtype=np.int64)])
    ao = np.concatenate([[0], np.cumsum(nodes["acct_len"], dtype=np.int64)])
    keys = tuple(
        (bank_blob[bo[i]:bo[i + 1]].decode(), acct_blob[ao[i]:ao[i + 1]].decode()) for i in range(n)
    )
    return TemporalGraph(
        keys=keys,
        labels=nodes["label"].astype(np.int8),
        src=edges["src"].astype(np.int64), dst=edges["dst"].astype(np.int64),
        step=edges["step"].astype(np.int64), edge_index=edges["feat"].astype(np.int64),
        amount_paid=edges["paid"].astype(np.float64),
        amount_received=edges["received"].astype(np.float64),
        payment_currency=vocab[edges["pay_cur"]], receiving_currency=vocab[edges["recv_cur"]],
        payment_format=vocab[edges["fmt"]], total_steps=int(total_steps),
    )

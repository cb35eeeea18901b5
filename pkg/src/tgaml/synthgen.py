"""Deterministic synthetic transaction corpora in the IT-AML CSV layout.

Background traffic flows between random account pairs; laundering motifs
(fan-in, fan-out, cycle, scatter-gather) run over consecutive hourly steps and
are flagged. The lawful population is cut into pools of the same size,
each running the same motif program with the hop steps shuffled within the
pool, so static structure alone cannot tell the groups apart. A time-shuffled control permutes the steps of the laundering
transactions only, which keeps every static property of the graph while
destroying the ordering of the laundering activity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import ConfigError
from .graph import rng
from .ingest import CSV_HEADER, DEFAULT_TIMESTAMP_FORMAT

MOTIF_KINDS = ("fan_in", "fan_out", "cycle", "scatter_gather")
ORIGIN = datetime(2022, 9, 1)
CURRENCIES = ("US Dollar", "Euro", "UK Pound", "Yen", "Swiss Franc")
CURRENCY_P = (0.55, 0.2, 0.1, 0.1, 0.05)
FORMATS = ("ACH", "Cheque", "Credit Card", "Wire", "Cash")
FORMAT_P = (0.3, 0.2, 0.25, 0.15, 0.1)


class SpecError(ConfigError):
    pass


@dataclass(frozen=True)
class MotifSpec:
    kind: str
    count: int
    min_size: int
    max_size: int

    def __post_init__(self):
        if self.kind not in MOTIF_KINDS:
            raise SpecError(f"unknown motif kind {self.kind!r}")
        smallest = 2 if self.kind != "scatter_gather" else 3
        if self.count < 0 or not smallest <= self.min_size <= self.max_size:
            raise SpecError(f"bad motif sizes for {self.kind}: {self}")


def default_motifs() -> tuple[MotifSpec, ...]:
    return (
        MotifSpec("fan_in", 45, 5, 7),
        MotifSpec("fan_out", 45, 5, 7),
        MotifSpec("cycle", 10, 3, 5),
        MotifSpec("scatter_gather", 10, 6, 8),
    )


@dataclass(frozen=True)
class GenSpec:
    num_accounts: int = 2000
    num_background_tx: int = 20000
    launderer_fraction: float = 0.05
    num_steps: int = 48
    motifs: tuple[MotifSpec, ...] = field(default_factory=default_motifs)
    seed: int = 0
    num_banks: int = 20
    degree_matched: bool = True
    decoys: bool = True

    def __post_init__(self):
        if not 0.0 < self.launderer_fraction < 0.5:
            raise SpecError(f"launderer_fraction must lie in (0, 0.5), got {self.launderer_fraction}")
        if self.num_steps < 2:
            raise SpecError("num_steps must be >= 2")
        if self.num_accounts < 2 or self.num_background_tx < 1 or self.num_banks < 1:
            raise SpecError("need at least 2 accounts, 1 background transaction and 1 bank")
        for m in self.motifs:
            if m.count and m.max_size > self.pool_size:
                raise SpecError(
                    f"{m.kind} motif of size {m.max_size} exceeds launderer pool of {self.pool_size}"
                )
            if m.count and _duration(m.kind, m.max_size) > self.num_steps:
                raise SpecError(f"{m.kind} motif of size {m.max_size} does not fit in {self.num_steps} steps")

    @property
    def pool_size(self) -> int:
        return max(1, int(round(self.num_accounts * self.launderer_fraction)))

    @classmethod
    def from_config(cls, cfg: dict) -> "GenSpec":
        motifs = []
        for kind in MOTIF_KINDS:
            if f"motifs.{kind}.count" in cfg:
                motifs.append(MotifSpec(
                    kind, int(cfg[f"motifs.{kind}.count"]),
                    int(cfg.get(f"motifs.{kind}.min_size", 3)),
                    int(cfg.get(f"motifs.{kind}.max_size", cfg.get(f"motifs.{kind}.min_size", 3))),
                ))
        kwargs = {k: cfg[k] for k in ("num_accounts", "num_background_tx", "launderer_fraction",
                                     "num_steps", "seed", "num_banks", "degree_matched", "decoys")
                  if k in cfg}
        if motifs:
            kwargs["motifs"] = tuple(motifs)
        unknown = [k for k in cfg if not k.startswith("motifs.") and k not in kwargs]
        if unknown:
            raise SpecError(f"unknown generator keys: {', '.join(sorted(unknown))}")
        return cls(**kwargs)


@dataclass
class Corpus:
    """Generated transactions, one row per transaction, plus account metadata."""
    banks: np.ndarray  # per account
    accounts: list[str]
    src: np.ndarray
    dst: np.ndarray
    step: np.ndarray
    minute: np.ndarray
    amount: np.ndarray
    pay_currency: np.ndarray
    recv_currency: np.ndarray
    fmt: np.ndarray
    laundering: np.ndarray
    launderers: np.ndarray  # account indices
    motif_counts: dict[str, int]

    def key(self, i: int) -> tuple[str, str]:
        return (f"{self.banks[i]:03d}", self.accounts[i])


def _duration(kind: str, size: int) -> int:
    return {"fan_in": 1, "fan_out": 1, "cycle": size, "scatter_gather": 2}[kind]


def _split_amount(gen: np.random.Generator, total: float, pieces: int) -> np.ndarray:
    return total * gen.dirichlet(np.full(pieces, 5.0))


def _motif_edges(kind: str, members: list[int], start: int, total: float,
                 gen: np.random.Generator) -> list[tuple[int, int, int, float]]:
    """(src, dst, step, amount) hops of one motif instance."""
    if kind == "fan_out":
        hub, mules = members[0], members[1:]
        return [(hub, m, start, a) for m, a in zip(mules, _split_amount(gen, total, len(mules)))]
    if kind == "fan_in":
        hub, sources = members[0], members[1:]
        return [(s, hub, start, a) for s, a in zip(sources, _split_amount(gen, total, len(sources)))]
    if kind == "cycle":
        out, amount = [], total
        for k, a in enumerate(members):
            out.append((a, members[(k + 1) % len(members)], start + k, amount))
            amount *= 1.0 - gen.uniform(0.01, 0.03)
        return out
    source, sink, mules = members[0], members[-1], members[1:-1]
    out = []
    for m, a in zip(mules, _split_amount(gen, total, len(mules))):
        out.append((source, m, start, a))
        out.append((m, sink, start + 1, a * (1.0 - gen.uniform(0.01, 0.03))))
    return out


def _motif_program(spec: GenSpec, gen: np.random.Generator
                   ) -> tuple[list[tuple[int, int, int, float]], dict[str, int]]:
    """Motif hops over pool-relative member indices ``0 .. pool_size - 1``."""
    pool = np.arange(spec.pool_size)
    # hub roles (first member; source and sink for scatter-gather) rotate
    # through the pool so every member leads a motif before any repeats
    hub_queue: list[int] = []
    hops: list[tuple[int, int, int, float]] = []
    counts = {k: 0 for k in MOTIF_KINDS}

    def next_hub(exclude: list[int]) -> int:
        nonlocal hub_queue
        for _ in range(2):
            for i, a in enumerate(hub_queue):
                if a not in exclude:
                    return hub_queue.pop(i)
            hub_queue = [int(a) for a in gen.permutation(pool)]
        raise SpecError("launderer pool too small for motif hubs")

    for m in spec.motifs:
        for _ in range(m.count):
            size = int(gen.integers(m.min_size, m.max_size + 1))
            members = [next_hub([])]
            if m.kind == "scatter_gather":
                members.append(next_hub(members))
            rest = np.array([a for a in pool if a not in members])
            fill = [int(a) for a in gen.choice(rest, size - len(members), replace=False)]
            if m.kind == "scatter_gather":
                members = [members[0], *fill, members[1]]
            else:
                members += fill
            start = int(gen.integers(0, spec.num_steps - _duration(m.kind, size) + 1))
            total = float(gen.lognormal(3.0 + np.log(size), 1.0))
            new = _motif_edges(m.kind, members, start, total, gen)
            hops.extend(new)
            counts[m.kind] += len(new)
    return hops, counts


def _place(program: list[tuple[int, int, int, float]], accounts: np.ndarray,
           shuffle: np.random.Generator | None) -> tuple[np.ndarray, ...]:
    src = accounts[[h[0] for h in program]].astype(np.int64)
    dst = accounts[[h[1] for h in program]].astype(np.int64)
    step = np.array([h[2] for h in program], dtype=np.int64)
    amount = np.array([h[3] for h in program])
    if shuffle is not None:
        step = step[shuffle.permutation(len(step))]
    return src, dst, step, amount


def build_corpus(spec: GenSpec, control: bool = False) -> Corpus:
    n = spec.num_accounts
    acct_gen = rng(spec.seed, 1)
    banks = acct_gen.integers(1, spec.num_banks + 1, size=n)
    ids = acct_gen.choice(16 ** 7, size=n, replace=False)
    accounts = [f"8{int(v):07X}{b % 10}" for v, b in zip(ids, banks)]

    order = rng(spec.seed, 2).permutation(n)
    k = spec.pool_size
    program, counts = _motif_program(spec, rng(spec.seed, 3))
    m_src, m_dst, m_step, m_amount = _place(program, order[:k], rng(spec.seed, 4) if control else None)
    # every other full pool of lawful accounts replays the same program with its
    # steps shuffled, so launderers and lawful accounts share their static structure
    decoys = [_place(program, order[j * k:(j + 1) * k], rng(spec.seed, 7, j))
              for j in range(1, n // k)] if spec.decoys and program else []
    d_src, d_dst, d_step, d_amount = (
        (np.concatenate(parts) for parts in zip(*decoys)) if decoys
        else (np.zeros(0, np.int64),) * 3 + (np.zeros(0),)
    )
    if len(d_src) >= spec.num_background_tx:
        raise SpecError("decoy motifs exceed the background transaction budget")

    bg = rng(spec.seed, 5)
    b = spec.num_background_tx - len(d_src)
    base = b / n
    w_out = np.full(n, base)
    w_in = np.full(n, base)
    if spec.degree_matched:
        w_out -= np.bincount(np.r_[m_src, d_src], minlength=n)
        w_in -= np.bincount(np.r_[m_dst, d_dst], minlength=n)
    w_out = np.maximum(w_out, 0.1 * base)
    w_in = np.maximum(w_in, 0.1 * base)
    src = bg.choice(n, size=b, p=w_out / w_out.sum())
    dst = bg.choice(n, size=b, p=w_in / w_in.sum())
    clash = src == dst
    while clash.any():
        dst[clash] = bg.choice(n, size=int(clash.sum()), p=w_in / w_in.sum())
        clash = src == dst
    step = bg.integers(0, spec.num_steps, size=b)
    step[0] = 0
    amount = bg.lognormal(3.0, 1.0, size=b)

    # categorical attributes and minutes are drawn for all rows from one stream so
    # that ordered and control corpora differ only in motif steps
    b = spec.num_background_tx
    src, dst = np.r_[src, d_src], np.r_[dst, d_dst]
    step, amount = np.r_[step, d_step], np.r_[amount, d_amount]
    tot = b + len(m_src)
    attr = rng(spec.seed, 6)
    pay = attr.choice(len(CURRENCIES), size=tot, p=CURRENCY_P)
    recv = np.where(attr.random(tot) < 0.9, pay, attr.choice(len(CURRENCIES), size=tot, p=CURRENCY_P))
    fmt = attr.choice(len(FORMATS), size=tot, p=FORMAT_P)
    minute = attr.integers(0, 60, size=tot)
    minute[0] = 0

    launder = np.unique(np.concatenate([m_src, m_dst])) if len(m_src) else np.zeros(0, np.int64)
    return Corpus(
        banks=banks, accounts=accounts,
        src=np.concatenate([src, m_src]), dst=np.concatenate([dst, m_dst]),
        step=np.concatenate([step, m_step]), minute=minute,
        amount=np.round(np.concatenate([amount, m_amount]), 2),
        pay_currency=pay, recv_currency=recv, fmt=fmt,
        laundering=np.concatenate([np.zeros(b, bool), np.ones(len(m_src), bool)]),
        launderers=launder, motif_counts=counts,
    )


def write_corpus(corpus: Corpus, out_dir: str | Path, name: str = "transactions.csv") -> tuple[Path, Path]:
    """Write the IT-AML style CSV and a ground-truth account label file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, labels_path = out / name, out / "accounts.csv"
    order = np.lexsort((np.arange(len(corpus.step)), corpus.minute, corpus.step))
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in order:
            ts = ORIGIN + timedelta(hours=int(corpus.step[i]), minutes=int(corpus.minute[i]))
            s, d = corpus.key(corpus.src[i]), corpus.key(corpus.dst[i])
            amt = f"{corpus.amount[i]:.2f}"
            w.writerow([
                ts.strftime(DEFAULT_TIMESTAMP_FORMAT), s[0], s[1], d[0], d[1], amt,
                CURRENCIES[corpus.recv_currency[i]], amt, CURRENCIES[corpus.pay_currency[i]],
                FORMATS[corpus.fmt[i]], int(corpus.laundering[i]),
            ])
    flagged = np.zeros(len(corpus.accounts), bool)
    flagged[corpus.launderers] = True
    with labels_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Bank", "Account", "Is Launderer"])
        for i in range(len(corpus.accounts)):
            bank, acct = corpus.key(i)
            w.writerow([bank, acct, int(flagged[i])])
    return csv_path, labels_path


def generate(spec: GenSpec, out_dir: str | Path, control: bool = False) -> tuple[Path, Path]:
    return write_corpus(build_corpus(spec, control), out_dir)

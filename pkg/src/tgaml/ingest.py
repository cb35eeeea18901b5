"""Transaction ledger ingest.

Parses IT-AML style CSV exports into an intermediate representation: a list of
transactions and a list of labeled accounts, with timestamps bucketed into
hourly steps counted from the earliest timestamp in the corpus.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import datetime
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, NamedTuple

from . import DataError

log = logging.getLogger(__name__)

DEFAULT_TIMESTAMP_FORMAT = "%Y/%m/%d %H:%M"

# logical field -> CSV header name
DEFAULT_SCHEMA = {
    "timestamp": "Timestamp",
    "src_bank": "From Bank",
    "src_account": "Account",
    "dst_bank": "To Bank",
    "dst_account": "Account.1",
    "amount_received": "Amount Received",
    "receiving_currency": "Receiving Currency",
    "amount_paid": "Amount Paid",
    "payment_currency": "Payment Currency",
    "payment_format": "Payment Format",
    "is_laundering": "Is Laundering",
}

CSV_HEADER = [
    "Timestamp", "From Bank", "Account", "To Bank", "Account",
    "Amount Received", "Receiving Currency", "Amount Paid",
    "Payment Currency", "Payment Format", "Is Laundering",
]

SECONDS_PER_STEP = 3600
_CENT = Decimal("0.01")

LAUNDERER = "launderer"
LAWFUL = "lawful"


class SchemaError(DataError):
    pass


class RowError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RawRow(NamedTuple):
    timestamp: datetime
    src_bank: str
    src_account: str
    dst_bank: str
    dst_account: str
    amount_received: int  # cents
    receiving_currency: str
    amount_paid: int  # cents
    payment_currency: str
    payment_format: str
    is_laundering: bool


@dataclass(frozen=True)
class ParseResult:
    rows: list[RawRow]
    skipped: int
    line_count: int


@dataclass(frozen=True, slots=True)
class TransactionRecord:
    src_bank: str
    src_account: str
    dst_bank: str
    dst_account: str
    amount_paid: int
    amount_received: int
    payment_currency: str
    receiving_currency: str
    payment_format: str
    time_step: int
    is_laundering: bool

    @property
    def src_key(self) -> tuple[str, str]:
        return (self.src_bank, self.src_account)

    @property
    def dst_key(self) -> tuple[str, str]:
        return (self.dst_bank, self.dst_account)


@dataclass(frozen=True, slots=True)
class AccountRecord:
    account_key: tuple[str, str]
    label: str
    first_step: int
    last_step: int

    @property
    def is_launderer(self) -> bool:
        return self.label == LAUNDERER


@dataclass(frozen=True)
class Intermediate:
    transactions: list[TransactionRecord]
    accounts: list[AccountRecord]
    total_steps: int
    origin: datetime | None = None

    def summary(self) -> dict:
        n_launder = sum(a.is_launderer for a in self.accounts)
        return {
            "accounts": len(self.accounts),
            "launderers": n_launder,
            "launderer_fraction": n_launder / len(self.accounts) if self.accounts else 0.0,
            "transactions": len(self.transactions),
            "laundering_transactions": sum(t.is_laundering for t in self.transactions),
            "total_steps": self.total_steps,
        }


def _dedupe_header(header: list[str]) -> list[str]:
    # IT-AML exports repeat "Account"; number repeats the way pandas does.
    seen: dict[str, int] = {}
    out = []
    for name in header:
        name = name.strip()
        n = seen.get(name, 0)
        out.append(name if n == 0 else f"{name}.{n}")
        seen[name] = n + 1
    return out


def parse_amount(text: str) -> int:
    """Parse a decimal amount into integer cents."""
    try:
        value = Decimal(text.strip())
    except InvalidOperation:
        raise ValueError(f"unparsable amount {text!r}") from None
    if not value.is_finite():
        raise ValueError(f"non-finite amount {text!r}")
    if value < 0:
        raise ValueError(f"negative amount {text!r}")
    return int(value.quantize(_CENT, rounding=ROUND_HALF_EVEN) * 100)


def _parse_flag(text: str) -> bool:
    text = text.strip().lower()
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no", ""):
        return False
    raise ValueError(f"unparsable laundering flag {text!r}")


def parse_csv(
    path: str | Path,
    schema: dict[str, str] | None = None,
    timestamp_format: str = DEFAULT_TIMESTAMP_FORMAT,
    lenient: bool = False,
) -> ParseResult:
    """Read a transaction CSV into typed raw rows.

    ``schema`` maps logical field names to header names and may override any
    subset of :data:`DEFAULT_SCHEMA`. Bad rows raise :class:`RowError` unless
    ``lenient`` is set, in which case they are skipped and counted.
    """
    mapping = dict(DEFAULT_SCHEMA)
    if schema:
        mapping.update(schema)
    path = Path(path)
    rows: list[RawRow] = []
    skipped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = _dedupe_header(next(reader))
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        index = {}
        for field, column in mapping.items():
            if column not in header:
                raise SchemaError(f"{path}: missing column {column!r}")
            index[field] = header.index(column)
        width = max(index.values()) + 1
        lineno = 1
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                if len(rec) < width:
                    raise ValueError(f"expected at least {width} fields, got {len(rec)}")
                try:
                    ts = datetime.strptime(rec[index["timestamp"]].strip(), timestamp_format)
                except ValueError:
                    raise ValueError(f"unparsable timestamp {rec[index['timestamp']]!r}") from None
                row = RawRow(
                    timestamp=ts,
                    src_bank=rec[index["src_bank"]].strip(),
                    src_account=rec[index["src_account"]].strip(),
                    dst_bank=rec[index["dst_bank"]].strip(),
                    dst_account=rec[index["dst_account"]].strip(),
                    amount_received=parse_amount(rec[index["amount_received"]]),
                    receiving_currency=rec[index["receiving_currency"]].strip(),
                    amount_paid=parse_amount(rec[index["amount_paid"]]),
                    payment_currency=rec[index["payment_currency"]].strip(),
                    payment_format=rec[index["payment_format"]].strip(),
                    is_laundering=_parse_flag(rec[index["is_laundering"]]),
                )
            except ValueError as exc:
                if not lenient:
                    raise RowError(lineno, str(exc)) from None
                skipped += 1
                continue
            rows.append(row)
    log.info("parsed %d rows from %s (%d skipped)", len(rows), path, skipped)
    return ParseResult(rows=rows, skipped=skipped, line_count=max(lineno - 1, 0))


def discretize_time(timestamp: datetime, origin: datetime) -> int:
    """Hour bucket of ``timestamp`` counted from ``origin``."""
    delta = timestamp - origin
    if delta.total_seconds() < 0:
        raise DataError(f"timestamp {timestamp} precedes origin {origin}")
    return (delta.days * 86400 + delta.seconds) // SECONDS_PER_STEP


def build_intermediate(rows: Iterable[RawRow], drop_self: bool = False) -> Intermediate:
    rows = list(rows)
    if drop_self:
        rows = [r for r in rows if (r.src_bank, r.src_account) != (r.dst_bank, r.dst_account)]
    if not rows:
        raise DataError("no transactions to build from")
    origin = min(r.timestamp for r in rows)

    transactions = []
    span: dict[tuple[str, str], list[int]] = {}
    flagged: set[tuple[str, str]] = set()
    for r in rows:
        step = discretize_time(r.timestamp, origin)
        transactions.append(TransactionRecord(
            r.src_bank, r.src_account, r.dst_bank, r.dst_account,
            r.amount_paid, r.amount_received, r.payment_currency,
            r.receiving_currency, r.payment_format, step, r.is_laundering,
        ))
        for key in ((r.src_bank, r.src_account), (r.dst_bank, r.dst_account)):
            s = span.get(key)
            if s is None:
                span[key] = [step, step]
            else:
                s[0] = min(s[0], step)
                s[1] = max(s[1], step)
            if r.is_laundering:
                flagged.add(key)

    accounts = [
        AccountRecord(key, LAUNDERER if key in flagged else LAWFUL, lo, hi)
        for key, (lo, hi) in sorted(span.items())
    ]
    total_steps = max(t.time_step for t in transactions) + 1
    return Intermediate(transactions, accounts, total_steps, origin)


def load_corpus(path: str | Path, **kwargs) -> Intermediate:
    drop_self = kwargs.pop("drop_self", False)
    return build_intermediate(parse_csv(path, **kwargs).rows, drop_self=drop_self)


# -- intermediate list files -------------------------------------------------

_TX_FIELDS = [
    "src_bank", "src_account", "dst_bank", "dst_account", "amount_paid",
    "amount_received", "payment_currency", "receiving_currency",
    "payment_format", "time_step", "is_laundering",
]


def write_intermediate(inter: Intermediate, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "transactions.tsv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(_TX_FIELDS)
        for t in inter.transactions:
            w.writerow([
                t.src_bank, t.src_account, t.dst_bank, t.dst_account, t.amount_paid,
                t.amount_received, t.payment_currency, t.receiving_currency,
                t.payment_format, t.time_step, int(t.is_laundering),
            ])
    with (out / "accounts.tsv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["bank", "account", "label", "first_step", "last_step"])
        for a in inter.accounts:
            w.writerow([a.account_key[0], a.account_key[1], a.label, a.first_step, a.last_step])
    origin = inter.origin.isoformat() if inter.origin else ""
    (out / "steps.txt").write_text(f"total_steps = {inter.total_steps}\norigin = {origin}\n")


def read_intermediate(data_dir: str | Path) -> Intermediate:
    d = Path(data_dir)
    for name in ("transactions.tsv", "accounts.tsv", "steps.txt"):
        if not (d / name).exists():
            raise DataError(f"{d}: missing {name}; run ingest first")
    meta = dict(
        line.split(" = ", 1) for line in (d / "steps.txt").read_text().splitlines() if " = " in line
    )
    with (d / "transactions.tsv").open(newline="", encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        next(r)
        txs = [
            TransactionRecord(a, b, c, e, int(f), int(g), h, i, j, int(k), l == "1")
            for a, b, c, e, f, g, h, i, j, k, l in r
        ]
    with (d / "accounts.tsv").open(newline="", encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        next(r)
        accounts = [AccountRecord((b, a), lab, int(lo), int(hi)) for b, a, lab, lo, hi in r]
    origin = datetime.fromisoformat(meta["origin"]) if meta.get("origin") else None
    return Intermediate(txs, accounts, int(meta["total_steps"]), origin)

"""Append-only hash-chained ledger.

Block linkage: every header carries the SHA-256 digest of its
predecessor's header, computed over the canonical byte layout
(index, prev_hash, timestamp, tx_root, nonce; each field
length-prefixed, integers 8-byte big-endian). The genesis block has
index 0, an all-zero prev_hash, timestamp 0, and folds the chain id
into its tx_root as SHA-256 of the id bytes.

On-disk format, one block per line, tab-separated:

    PICHAIN/1 <chain_id>
    <index> <prev_hash> <timestamp> <tx_root> <nonce> <tx_count> <tx fields ...> <header_digest>

Digests are 64 lowercase hex characters. The trailing header_digest
column repeats the block's own header digest so that a mutation of
any byte on the line is caught on load, including in fields the next
block's link does not cover (the tip's timestamp and nonce).
"""

from __future__ import annotations

import enum
import hashlib
import os
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

from . import canon, sms
from .registry import DeviceRecord, DeviceStatus, valid_imei, valid_phone
from .sms import LocationReport

VERSION_TOKEN = "PICHAIN/1"
ZERO_HASH = bytes(32)

_CHAIN_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")
_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")
_UINT_RE = re.compile(r"^(?:0|[1-9][0-9]*)$")
_INT_RE = re.compile(r"^-?(?:0|[1-9][0-9]*)$")


class ChainError(Exception):
    pass


class ChainLoadError(ChainError):
    """A chain file failed to parse or verify.

    first_bad_index is the lowest block index at which the failure was
    detected, or None when the file is unreadable outright.
    """

    def __init__(self, message: str, first_bad_index: Optional[int] = None):
        self.first_bad_index = first_bad_index
        super().__init__(message)


class TxKind(enum.Enum):
    REGISTER = "REGISTER"
    REMOVE = "REMOVE"
    LOCATION = "LOCATION"


Payload = Union[DeviceRecord, LocationReport]


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    submitter: str  # node id, 64 lowercase hex chars
    payload: Payload
    received_at: int


@dataclass(frozen=True)
class BlockHeader:
    index: int
    prev_hash: bytes
    timestamp: int
    tx_root: bytes
    nonce: int


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]


@dataclass(frozen=True)
class Chain:
    """Immutable snapshot of the ledger; appends produce a new value."""

    chain_id: str
    blocks: tuple[Block, ...]

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def tip(self) -> Block:
        return self.blocks[-1]


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    first_bad_index: Optional[int] = None


def hash_header(header: BlockHeader) -> bytes:
    payload = (
        canon.lp(canon.u64be(header.index))
        + canon.lp(header.prev_hash)
        + canon.lp(canon.u64be(header.timestamp))
        + canon.lp(header.tx_root)
        + canon.lp(canon.u64be(header.nonce))
    )
    return hashlib.sha256(payload).digest()


def genesis_tx_root(chain_id: str) -> bytes:
    return hashlib.sha256(chain_id.encode("utf-8")).digest()


def tx_fields(tx: Transaction) -> list[str]:
    """Canonical text fields of a transaction, in hashing order."""
    head = [tx.kind.value, tx.submitter, str(tx.received_at)]
    p = tx.payload
    if tx.kind is TxKind.LOCATION:
        assert isinstance(p, LocationReport)
        return head + [
            p.imei,
            p.phone,
            sms._coord_text(p.lat, "lat", 90.0),
            sms._coord_text(p.lon, "lon", 180.0),
            p.time_of_day,
            p.date,
            str(p.epoch),
        ]
    assert isinstance(p, DeviceRecord)
    return head + [p.imei, p.phone, p.status.value, str(p.registered_at)]


def tx_bytes(tx: Transaction) -> bytes:
    return canon.lp_texts(tx_fields(tx))


def tx_root(transactions: Iterable[Transaction]) -> bytes:
    body = canon.lp_fields(tx_bytes(tx) for tx in transactions)
    return hashlib.sha256(body).digest()


def make_genesis(chain_id: str) -> Block:
    if not chain_id:
        raise ChainError("chain_id must be non-empty")
    if not _CHAIN_ID_RE.match(chain_id):
        raise ChainError(f"chain_id has unsupported characters: {chain_id!r}")
    header = BlockHeader(
        index=0,
        prev_hash=ZERO_HASH,
        timestamp=0,
        tx_root=genesis_tx_root(chain_id),
        nonce=0,
    )
    return Block(header=header, transactions=())


def new_chain(chain_id: str) -> Chain:
    return Chain(chain_id=chain_id, blocks=(make_genesis(chain_id),))


def _check_tx_structure(tx: Transaction) -> None:
    if tx.kind is TxKind.LOCATION:
        if not isinstance(tx.payload, LocationReport):
            raise ChainError("LOCATION transaction must carry a location report")
    elif tx.kind in (TxKind.REGISTER, TxKind.REMOVE):
        if not isinstance(tx.payload, DeviceRecord):
            raise ChainError(f"{tx.kind.value} transaction must carry a device record")
    else:
        raise ChainError(f"unknown transaction kind: {tx.kind!r}")
    if not _HEX64_RE.match(tx.submitter):
        raise ChainError(f"submitter is not a node id: {tx.submitter!r}")
    if tx.received_at < 0:
        raise ChainError("received_at must be non-negative")


def append_block(
    chain: Chain,
    txs: Iterable[Transaction],
    now: int,
    validator: Optional[Callable[[Transaction], object]] = None,
) -> Chain:
    """Seal one new block on the tip and return the extended chain.

    Callers are expected to have policy-validated every transaction
    already; passing a validator re-checks each one as defense in
    depth and rejects the whole append on the first failure.
    """
    txs = tuple(txs)
    if not txs:
        raise ChainError("refusing to seal an empty block")
    for tx in txs:
        _check_tx_structure(tx)
        if validator is not None and not validator(tx):
            raise ChainError(f"transaction rejected by validator: {tx.kind.value}")
    tip = chain.tip
    header = BlockHeader(
        index=tip.header.index + 1,
        prev_hash=hash_header(tip.header),
        timestamp=now,
        tx_root=tx_root(txs),
        nonce=0,
    )
    return Chain(chain.chain_id, chain.blocks + (Block(header, txs),))


def verify_chain(chain: Chain) -> VerifyReport:
    """Check every link, index and tx_root invariant over the chain.

    Returns a report rather than raising: {ok, first_bad_index}.
    """
    if not chain.blocks:
        return VerifyReport(False, 0)
    for i, block in enumerate(chain.blocks):
        h = block.header
        if h.index != i:
            return VerifyReport(False, i)
        if i == 0:
            if h.prev_hash != ZERO_HASH:
                return VerifyReport(False, 0)
            if block.transactions:
                return VerifyReport(False, 0)
            if h.tx_root != genesis_tx_root(chain.chain_id):
                return VerifyReport(False, 0)
            continue
        if not block.transactions:
            return VerifyReport(False, i)
        for tx in block.transactions:
            try:
                _check_tx_structure(tx)
            except ChainError:
                return VerifyReport(False, i)
        if h.prev_hash != hash_header(chain.blocks[i - 1].header):
            return VerifyReport(False, i)
        if h.tx_root != tx_root(block.transactions):
            return VerifyReport(False, i)
    return VerifyReport(True, None)


# ---------------------------------------------------------------------------
# text codec


def _parse_uint(text: str, what: str) -> int:
    if not _UINT_RE.match(text):
        raise ValueError(f"{what} is not a canonical non-negative integer: {text!r}")
    return int(text)


def _parse_int(text: str, what: str) -> int:
    if not _INT_RE.match(text):
        raise ValueError(f"{what} is not a canonical integer: {text!r}")
    return int(text)


def _parse_hash(text: str, what: str) -> bytes:
    if not _HEX64_RE.match(text):
        raise ValueError(f"{what} is not a 64-char lowercase hex digest: {text!r}")
    return bytes.fromhex(text)


class _FieldReader:
    def __init__(self, fields: list[str]):
        self.fields = fields
        self.pos = 0

    def take(self, what: str) -> str:
        if self.pos >= len(self.fields):
            raise ValueError(f"line truncated, missing {what}")
        value = self.fields[self.pos]
        self.pos += 1
        return value

    def remaining(self) -> int:
        return len(self.fields) - self.pos


def _tx_from_reader(reader: _FieldReader) -> Transaction:
    kind_text = reader.take("tx kind")
    try:
        kind = TxKind(kind_text)
    except ValueError:
        raise ValueError(f"unknown transaction kind: {kind_text!r}") from None
    submitter = reader.take("submitter")
    if not _HEX64_RE.match(submitter):
        raise ValueError(f"submitter is not a node id: {submitter!r}")
    received_at = _parse_uint(reader.take("received_at"), "received_at")
    imei = reader.take("imei")
    if not valid_imei(imei):
        raise ValueError(f"bad imei on chain: {imei!r}")
    phone = reader.take("phone")
    if not valid_phone(phone):
        raise ValueError(f"bad phone on chain: {phone!r}")
    if kind is TxKind.LOCATION:
        lat = sms._parse_coord(reader.take("lat"), "lat", 90.0)
        lon = sms._parse_coord(reader.take("lon"), "lon", 180.0)
        clock = sms._check_clock(reader.take("time_of_day"))
        date = sms._check_date(reader.take("date"))
        epoch = _parse_int(reader.take("epoch"), "epoch")
        payload: Payload = LocationReport(imei, phone, lat, lon, clock, date, epoch)
    else:
        status_text = reader.take("status")
        try:
            status = DeviceStatus(status_text)
        except ValueError:
            raise ValueError(f"unknown device status: {status_text!r}") from None
        registered_at = _parse_uint(reader.take("registered_at"), "registered_at")
        payload = DeviceRecord(imei, phone, status, registered_at)
    return Transaction(kind, submitter, payload, received_at)


def encode_block_line(block: Block) -> str:
    h = block.header
    fields = [
        str(h.index),
        h.prev_hash.hex(),
        str(h.timestamp),
        h.tx_root.hex(),
        str(h.nonce),
        str(len(block.transactions)),
    ]
    for tx in block.transactions:
        fields.extend(tx_fields(tx))
    fields.append(hash_header(h).hex())
    return "\t".join(fields)


def decode_block_line(line: str) -> Block:
    """Parse one block line, enforcing the canonical rendering of every
    field and the line's own trailing header digest."""
    reader = _FieldReader(line.split("\t"))
    index = _parse_uint(reader.take("index"), "index")
    prev_hash = _parse_hash(reader.take("prev_hash"), "prev_hash")
    timestamp = _parse_uint(reader.take("timestamp"), "timestamp")
    root = _parse_hash(reader.take("tx_root"), "tx_root")
    nonce = _parse_uint(reader.take("nonce"), "nonce")
    tx_count = _parse_uint(reader.take("tx_count"), "tx_count")
    txs = tuple(_tx_from_reader(reader) for _ in range(tx_count))
    stored_digest = _parse_hash(reader.take("header digest"), "header digest")
    if reader.remaining():
        raise ValueError(f"{reader.remaining()} unexpected trailing fields")
    header = BlockHeader(index, prev_hash, timestamp, root, nonce)
    if hash_header(header) != stored_digest:
        raise ValueError("stored header digest does not match the header")
    return Block(header, txs)


def dump_chain_text(chain: Chain) -> str:
    lines = [f"{VERSION_TOKEN} {chain.chain_id}"]
    lines.extend(encode_block_line(block) for block in chain.blocks)
    return "\n".join(lines) + "\n"


def persist_chain(chain: Chain, path: str) -> None:
    """Write the whole chain to path (atomically via rename).

    Refuses to persist a chain that does not verify.
    """
    report = verify_chain(chain)
    if not report.ok:
        raise ChainError(
            f"refusing to persist: chain fails verification at index {report.first_bad_index}"
        )
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dump_chain_text(chain))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def append_block_line(fh, block: Block) -> None:
    """Append one sealed block to an open chain file and flush it."""
    fh.write(encode_block_line(block) + "\n")
    fh.flush()
    os.fsync(fh.fileno())


def _parse_version_line(line: str) -> str:
    parts = line.split(" ")
    if len(parts) != 2 or parts[0] != VERSION_TOKEN or not _CHAIN_ID_RE.match(parts[1]):
        raise ValueError(f"bad version line: {line!r}")
    return parts[1]


def load_chain(path: str) -> Chain:
    """Load and fully verify a chain file.

    Any parse or verification failure raises ChainLoadError carrying
    the lowest block index at which the file went bad; corruption of
    the version line is attributed to index 0 since the chain id is
    bound into the genesis tx_root.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ChainLoadError(f"cannot read chain file: {exc}") from exc
    if not blob:
        raise ChainLoadError("chain file is empty", first_bad_index=0)
    raw_lines = blob.split(b"\n")
    if raw_lines and raw_lines[-1] == b"":
        raw_lines.pop()
    try:
        version_line = raw_lines[0].decode("utf-8")
        chain_id = _parse_version_line(version_line)
    except (UnicodeDecodeError, ValueError) as exc:
        raise ChainLoadError(f"bad version line: {exc}", first_bad_index=0) from exc
    blocks = []
    for position, raw in enumerate(raw_lines[1:]):
        try:
            blocks.append(decode_block_line(raw.decode("utf-8")))
        except (UnicodeDecodeError, ValueError) as exc:
            raise ChainLoadError(
                f"block {position} unparseable: {exc}", first_bad_index=position
            ) from exc
    chain = Chain(chain_id, tuple(blocks))
    report = verify_chain(chain)
    if not report.ok:
        raise ChainLoadError(
            f"chain fails verification at index {report.first_bad_index}",
            first_bad_index=report.first_bad_index,
        )
    return chain

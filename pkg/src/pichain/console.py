"""Parent console client: registration, removal, reads, replication
and the arrival-notification stream.

All privileged actions live here; the console authenticates as the
parent node and surfaces miner denials verbatim as RequestDenied.
"""

from __future__ import annotations

from typing import Callable, Optional

from .chain import Chain, decode_block_line, verify_chain
from .policy import Notification
from .sms import LocationReport
from .wire import (
    ClientConnection,
    MsgType,
    NodeIdentity,
    RequestDenied,
    WireError,
)


class SyncError(WireError):
    def __init__(self, message: str, first_bad_index: Optional[int] = None):
        self.first_bad_index = first_bad_index
        super().__init__(message)


def apply_sync_blocks(
    local: Optional[Chain], fields: tuple[str, ...]
) -> Chain:
    """Extend (or build) a replica from a SYNC_BLOCKS body and verify it.

    Aborts with SyncError carrying the first bad block index if the
    stream is unparseable or the resulting chain fails verification.
    """
    if len(fields) < 2:
        raise SyncError("sync reply missing chain id or count")
    chain_id, count_text = fields[0], fields[1]
    lines = fields[2:]
    try:
        count = int(count_text)
    except ValueError:
        raise SyncError(f"bad block count: {count_text!r}") from None
    if count != len(lines):
        raise SyncError(f"sync reply advertised {count} blocks, carried {len(lines)}")
    if local is not None and local.chain_id != chain_id:
        raise SyncError(f"chain id mismatch: {chain_id!r} != {local.chain_id!r}")
    base = local.blocks if local is not None else ()
    blocks = list(base)
    for pos, line in enumerate(lines):
        try:
            blocks.append(decode_block_line(line))
        except ValueError as exc:
            raise SyncError(
                f"bad block in sync stream: {exc}", first_bad_index=len(base) + pos
            ) from exc
    replica = Chain(chain_id, tuple(blocks))
    report = verify_chain(replica)
    if not report.ok:
        raise SyncError(
            f"synced chain fails verification at index {report.first_bad_index}",
            first_bad_index=report.first_bad_index,
        )
    return replica


def _reply_or_denied(envelope) -> tuple[str, ...]:
    if envelope.msg_type is MsgType.ERR:
        reason = envelope.fields[0] if envelope.fields else "Error"
        detail = envelope.fields[1] if len(envelope.fields) > 1 else ""
        raise RequestDenied(reason, detail)
    return envelope.fields


def reports_from_fields(fields: tuple[str, ...]) -> list[LocationReport]:
    """Decode the flattened report list of a query reply."""
    if not fields:
        raise WireError("query reply missing count")
    count = int(fields[0])
    rest = fields[1:]
    if len(rest) != count * 7:
        raise WireError(f"query reply carried {len(rest)} fields for {count} reports")
    reports = []
    for i in range(count):
        imei, phone, lat, lon, clock, date, epoch = rest[i * 7 : (i + 1) * 7]
        reports.append(
            LocationReport(imei, phone, float(lat), float(lon), clock, date, int(epoch))
        )
    return reports


class ParentConsole:
    """The parents' node. Deduplicates pushed notifications on
    (imei, epoch); duplicates are swallowed silently."""

    def __init__(
        self,
        identity: NodeIdentity,
        host: str,
        port: int,
        timeout: float = 10.0,
        subscribe_notify: bool = False,
        on_notify: Optional[Callable[[Notification], None]] = None,
    ):
        self.notifications: list[Notification] = []
        self._seen: set[tuple[str, int]] = set()
        self._on_notify = on_notify
        self.conn = ClientConnection(
            identity,
            host,
            port,
            timeout=timeout,
            subscribe_notify=subscribe_notify,
            on_notify=self._notify_fields,
        )

    def _notify_fields(self, fields: tuple[str, ...]) -> None:
        if len(fields) != 4:
            return
        imei, phone, epoch_text, distance_text = fields
        key = (imei, int(epoch_text))
        if key in self._seen:
            return
        self._seen.add(key)
        notification = Notification(imei, phone, int(epoch_text), float(distance_text))
        self.notifications.append(notification)
        if self._on_notify is not None:
            self._on_notify(notification)

    def connect(self) -> int:
        return self.conn.connect()

    def close(self) -> None:
        self.conn.close()

    def register(self, imei: str, phone: str, at: int) -> int:
        """Register a device; returns the sealed block index."""
        fields = _reply_or_denied(
            self.conn.request(MsgType.REGISTER_DEVICE, (imei, phone, str(at)))
        )
        return int(fields[0])

    def remove(self, imei: str, phone: str, at: int) -> int:
        fields = _reply_or_denied(
            self.conn.request(MsgType.REMOVE_DEVICE, (imei, phone, str(at)))
        )
        return int(fields[0])

    def query(
        self,
        imei: str,
        phone: str,
        t0: Optional[int] = None,
        t1: Optional[int] = None,
    ) -> list[LocationReport]:
        fields = _reply_or_denied(
            self.conn.request(
                MsgType.QUERY,
                (imei, phone, "" if t0 is None else str(t0), "" if t1 is None else str(t1)),
            )
        )
        return reports_from_fields(fields)

    def sync(self, local: Optional[Chain] = None) -> Chain:
        have = local.height if local is not None else -1
        envelope = self.conn.request(MsgType.SYNC_REQUEST, (str(have),))
        if envelope.msg_type is MsgType.ERR:
            _reply_or_denied(envelope)
        return apply_sync_blocks(local, envelope.fields)

    def watch(self, idle_timeout: float = 1.0) -> list[Notification]:
        """Block draining pushed notifications until the stream stays
        quiet for idle_timeout seconds; returns the new ones."""
        before = len(self.notifications)
        self.conn.wait_notify(idle_timeout)
        return self.notifications[before:]

"""Ingestion node: turns raw location texts into chain submissions.

Input is one record per line, tab-separated:

    from_phone <TAB> imei <TAB> body

The body follows the message grammar in sms.py. Reports the miner
cannot be reached for are appended to a spool file (same columns plus
received_at) and re-sent in order on reconnect; a policy rejection is
final and never retried.
"""

from __future__ import annotations

import os
import time
from typing import Optional

from .chain import Chain
from .console import apply_sync_blocks
from .policy import Role
from .sms import LocationReport, RawSms, SmsError, parse_sms, serialize_report
from .wire import (
    CLIENT_TYPES,
    ClientConnection,
    MsgType,
    NodeIdentity,
    RequestDenied,
    TransportError,
)


class GatewayClient:
    """One gateway process: a single serial submit path to the miner,
    mirroring a modem that can only have one message in flight."""

    def __init__(
        self,
        identity: NodeIdentity,
        host: str,
        port: int,
        spool_path: Optional[str] = None,
        tz: str = "UTC",
        timeout: float = 10.0,
        connect_retries: int = 0,
        backoff_s: float = 0.05,
    ):
        if identity.role is not Role.GATEWAY:
            raise ValueError("gateway identity must have the gateway role")
        self.identity = identity
        self.tz = tz
        self.spool_path = spool_path
        self.connect_retries = connect_retries
        self.backoff_s = backoff_s
        # The connection layer enforces the role invariant: this node
        # can physically never emit a read request.
        self.conn = ClientConnection(
            identity, host, port, timeout=timeout, allowed_types=CLIENT_TYPES[Role.GATEWAY]
        )
        self.accepted = 0
        self.rejected = 0
        self.spooled = 0
        self.parse_failures = 0
        self.flushed = 0

    def connect(self) -> int:
        """Dial the miner (with retries), then drain any spool backlog."""
        attempts = self.connect_retries + 1
        last: Optional[TransportError] = None
        for attempt in range(attempts):
            try:
                height = self.conn.connect()
                break
            except TransportError as exc:
                last = exc
                if attempt + 1 < attempts:
                    time.sleep(self.backoff_s * (attempt + 1))
        else:
            raise last
        self.flush_spool()
        return height

    def close(self) -> None:
        self.conn.close()

    def submit_report(self, report: LocationReport, received_at: int) -> int:
        """Send one report; returns the sealed block index.

        Raises RequestDenied on a policy rejection and TransportError
        when the miner is unreachable. Does not spool by itself.
        """
        fields = (
            report.imei,
            report.phone,
            f"{report.lat:.6f}",
            f"{report.lon:.6f}",
            report.time_of_day,
            report.date,
            str(report.epoch),
            str(received_at),
        )
        envelope = self.conn.request(MsgType.SUBMIT_TX, fields)
        if envelope.msg_type is MsgType.ERR:
            reason = envelope.fields[0] if envelope.fields else "Error"
            detail = envelope.fields[1] if len(envelope.fields) > 1 else ""
            raise RequestDenied(reason, detail)
        return int(envelope.fields[0])

    def ingest_line(self, line: str, now: int) -> str:
        """Handle one inbound record; returns a short status string:
        accepted:<block>, rejected:<reason>, spooled or parse-error."""
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            self.parse_failures += 1
            return "parse-error"
        from_phone, imei, body = parts
        try:
            raw = RawSms(from_phone, imei, body, now)
            report = parse_sms(raw, self.tz)
        except SmsError:
            self.parse_failures += 1
            return "parse-error"
        return self._deliver(raw, report)

    def _deliver(self, raw: RawSms, report: LocationReport) -> str:
        if not self.conn.connected:
            try:
                self.connect()
            except TransportError:
                self._spool(raw)
                return "spooled"
        try:
            index = self.submit_report(report, raw.received_at)
        except RequestDenied as exc:
            self.rejected += 1
            return f"rejected:{exc.reason}"
        except TransportError:
            self.conn.close()
            self._spool(raw)
            return "spooled"
        self.accepted += 1
        return f"accepted:{index}"

    # -- spool --------------------------------------------------------------

    def _spool(self, raw: RawSms) -> None:
        self.spooled += 1
        if self.spool_path is None:
            return
        with open(self.spool_path, "a", encoding="utf-8") as fh:
            fh.write(f"{raw.from_phone}\t{raw.imei}\t{raw.body}\t{raw.received_at}\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _read_spool(self) -> list[RawSms]:
        if self.spool_path is None or not os.path.exists(self.spool_path):
            return []
        entries = []
        with open(self.spool_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                from_phone, imei, body, received_text = line.split("\t")
                entries.append(RawSms(from_phone, imei, body, int(received_text)))
        return entries

    def _write_spool(self, entries: list[RawSms]) -> None:
        if self.spool_path is None:
            return
        tmp = f"{self.spool_path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for raw in entries:
                fh.write(f"{raw.from_phone}\t{raw.imei}\t{raw.body}\t{raw.received_at}\n")
        os.replace(tmp, self.spool_path)

    def flush_spool(self) -> int:
        """Re-send spooled reports in order, exactly once each.

        Entries leave the spool when the miner acknowledges or finally
        rejects them; a transport failure keeps the rest for the next
        reconnect. Returns how many were delivered."""
        entries = self._read_spool()
        if not entries:
            return 0
        delivered = 0
        remaining: list[RawSms] = []
        for pos, raw in enumerate(entries):
            try:
                report = parse_sms(raw, self.tz)
                self.submit_report(report, raw.received_at)
                delivered += 1
                self.flushed += 1
            except RequestDenied:
                self.rejected += 1
            except TransportError:
                self.conn.close()
                remaining = entries[pos:]
                break
            except SmsError:
                self.parse_failures += 1
        self._write_spool(remaining)
        return delivered

    def spool_backlog(self) -> int:
        return len(self._read_spool())

    def sync(self, local: Optional[Chain] = None) -> Chain:
        """Pull a verifying replica, when the miner permits gateways to
        replicate at all (off by default)."""
        have = local.height if local is not None else -1
        envelope = self.conn.request(MsgType.SYNC_REQUEST, (str(have),))
        if envelope.msg_type is MsgType.ERR:
            reason = envelope.fields[0] if envelope.fields else "Error"
            raise RequestDenied(reason)
        return apply_sync_blocks(local, envelope.fields)


def format_ingest_line(from_phone: str, imei: str, report: LocationReport) -> str:
    """Render the ingest record a simulated phone would transmit."""
    return f"{from_phone}\t{imei}\t{serialize_report(report)}"

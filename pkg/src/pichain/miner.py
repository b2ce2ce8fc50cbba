"""The sealing node: accepts authenticated requests, consults policy,
seals blocks and pushes home-arrival notifications.

One accept loop feeds every decoded request into a single ordered
queue; one sealer thread drains it, so sealing order is queue order
and there is exactly one writer of chain state. Readers only ever see
immutable chain snapshots.

Request handling leaves an event trace (enable with trace=True) so a
run's wire-visible step sequence can be asserted: device registration
is a four-step exchange, a location append and a read are seven steps
each.
"""

from __future__ import annotations

import queue
import socket
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import chain as chain_mod
from . import policy as policy_mod
from . import sms, wire
from .chain import Chain, Transaction, TxKind
from .policy import DenyReason, PolicyConfig, PolicyState, Role
from .registry import DeviceRecord, DeviceStatus
from .sms import LocationReport
from .wire import Envelope, MsgType, NodeIdentity

ERR_MALFORMED = "Malformed"
ERR_UNSUPPORTED = "Unsupported"


@dataclass(frozen=True)
class TraceEvent:
    op: str  # "register" | "remove" | "submit" | "query"
    step: int
    label: str
    detail: str = ""


@dataclass
class _Conn:
    sock: socket.socket
    peer: str
    identity: Optional[NodeIdentity] = None
    wants_notify: bool = False
    last_client_seq: int = 0
    server_seq: int = 0
    send_lock: threading.Lock = field(default_factory=threading.Lock)
    closed: bool = False


class MinerServer:
    """Hosts the chain for one deployment; start() binds and returns,
    stop() flushes pending transactions and persists the tip."""

    def __init__(
        self,
        chain: Chain,
        identities: dict[str, NodeIdentity],
        config: PolicyConfig,
        chain_path: Optional[str] = None,
        host: str = "127.0.0.1",
        port: int = 0,
        trace: bool = False,
    ):
        self.chain = chain
        self.identities = identities
        self.config = config
        self.chain_path = chain_path
        self.host = host
        self.port = port
        self.state = PolicyState.replay(chain, config)
        self.counters: Counter[str] = Counter()
        self._counter_lock = threading.Lock()
        self.trace_enabled = trace
        self.trace_events: list[TraceEvent] = []
        self._listener: Optional[socket.socket] = None
        self._chain_fh = None
        self._queue: queue.Queue = queue.Queue()
        self._pending: list[tuple[Transaction, Optional[_Conn], str]] = []
        self._threads: list[threading.Thread] = []
        self._conns: set[_Conn] = set()
        self._conns_lock = threading.Lock()
        self._stopping = threading.Event()

    # -- lifecycle ----------------------------------------------------------

    @property
    def address(self) -> tuple[str, int]:
        assert self._listener is not None, "server not started"
        return self._listener.getsockname()[:2]

    def start(self) -> tuple[str, int]:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen(16)
        self._listener = listener
        if self.chain_path is not None:
            self._chain_fh = open(self.chain_path, "a", encoding="utf-8")
        sealer = threading.Thread(target=self._seal_loop, name="miner-sealer", daemon=True)
        acceptor = threading.Thread(target=self._accept_loop, name="miner-accept", daemon=True)
        self._threads = [sealer, acceptor]
        sealer.start()
        acceptor.start()
        return self.address

    def stop(self) -> None:
        if self._stopping.is_set():
            return
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        self._queue.put(None)
        for thread in self._threads:
            thread.join(timeout=10)
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            self._drop_conn(conn)
        if self._chain_fh is not None:
            self._chain_fh.close()
            self._chain_fh = None

    def count(self, key: str, n: int = 1) -> None:
        with self._counter_lock:
            self.counters[key] += n

    def _trace(self, op: str, step: int, label: str, detail: str = "") -> None:
        if self.trace_enabled:
            self.trace_events.append(TraceEvent(op, step, label, detail))

    def trace_for(self, op: str) -> list[tuple[int, str]]:
        return [(e.step, e.label) for e in self.trace_events if e.op == op]

    # -- socket plumbing ----------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            conn = _Conn(sock=sock, peer=f"{addr[0]}:{addr[1]}")
            with self._conns_lock:
                self._conns.add(conn)
            thread = threading.Thread(
                target=self._serve_conn, args=(conn,), name=f"miner-conn-{conn.peer}", daemon=True
            )
            thread.start()

    def _drop_conn(self, conn: _Conn) -> None:
        conn.closed = True
        try:
            conn.sock.close()
        except OSError:
            pass
        with self._conns_lock:
            self._conns.discard(conn)

    def _serve_conn(self, conn: _Conn) -> None:
        try:
            if not self._handshake(conn):
                return
            while not self._stopping.is_set():
                payload = wire.read_frame(conn.sock)
                if payload is None:
                    return
                try:
                    envelope, mac, authed = wire.parse_payload(payload)
                except wire.FrameError:
                    self.count("malformed_frames")
                    return
                if not wire.verify_mac(conn.identity.secret, mac, authed):
                    self.count("auth_failures")
                    continue
                if envelope.seq <= conn.last_client_seq:
                    self.count("replay_drops")
                    continue
                conn.last_client_seq = envelope.seq
                self._queue.put((conn, envelope))
        except wire.FrameError:
            self.count("malformed_frames")
        except wire.TransportError:
            pass
        finally:
            self._drop_conn(conn)

    def _handshake(self, conn: _Conn) -> bool:
        payload = wire.read_frame(conn.sock)
        if payload is None:
            return False
        try:
            envelope, mac, authed = wire.parse_payload(payload)
        except wire.FrameError:
            self.count("malformed_frames")
            return False
        if envelope.msg_type is not MsgType.HELLO or not envelope.fields:
            self.count("malformed_frames")
            return False
        identity = self.identities.get(envelope.fields[0])
        if identity is None:
            self.count("unknown_nodes")
            return False
        if not wire.verify_mac(identity.secret, mac, authed):
            self.count("auth_failures")
            return False
        conn.identity = identity
        conn.last_client_seq = envelope.seq
        flags = envelope.fields[1] if len(envelope.fields) > 1 else ""
        conn.wants_notify = identity.role is Role.PARENT and "notify" in flags
        self._reply(conn, MsgType.ACK, (str(self.chain.height),))
        return True

    def _reply(self, conn: _Conn, msg_type: MsgType, fields: tuple[str, ...]) -> None:
        if conn.closed:
            return
        with conn.send_lock:
            conn.server_seq += 1
            payload = wire.encode_payload(msg_type, conn.server_seq, fields, conn.identity.secret)
            try:
                wire.send_payload(conn.sock, payload)
            except wire.TransportError:
                self._drop_conn(conn)

    def _err(self, conn: _Conn, reason: str, detail: str = "") -> None:
        self._reply(conn, MsgType.ERR, (reason, detail))

    # -- sealing ------------------------------------------------------------

    def _seal_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                break
            conn, envelope = item
            try:
                self._dispatch(conn, envelope)
            except Exception as exc:  # keep the sealer alive; fail the request
                self._err(conn, ERR_MALFORMED, f"internal: {exc}")
        self._flush_pending()
        self._persist_snapshot()

    def _dispatch(self, conn: _Conn, envelope: Envelope) -> None:
        handler = {
            MsgType.SUBMIT_TX: self._handle_submit,
            MsgType.REGISTER_DEVICE: self._handle_register,
            MsgType.REMOVE_DEVICE: self._handle_remove,
            MsgType.QUERY: self._handle_query,
            MsgType.SYNC_REQUEST: self._handle_sync,
        }.get(envelope.msg_type)
        if handler is None:
            self._err(conn, ERR_UNSUPPORTED, envelope.msg_type.name)
            return
        handler(conn, envelope)

    def _accept_tx(self, tx: Transaction, conn: Optional[_Conn], op: str) -> None:
        """Queue an accepted transaction; seals when the batch fills."""
        self._pending.append((tx, conn, op))
        if len(self._pending) >= self.config.block_batch_size:
            self._flush_pending()

    def _flush_pending(self) -> None:
        if not self._pending:
            return
        batch = self._pending
        self._pending = []
        txs = tuple(tx for tx, _, _ in batch)
        now = max(tx.received_at for tx in txs)
        self.chain = chain_mod.append_block(self.chain, txs, now)
        sealed = self.chain.tip
        if self._chain_fh is not None:
            chain_mod.append_block_line(self._chain_fh, sealed)
        notifications = []
        for tx in txs:
            notification = self.state.apply_tx(tx)
            if notification is not None:
                notifications.append(notification)
        index = sealed.header.index
        for tx, conn, op in batch:
            self._trace(op, self._seal_step(op), "sealed", f"block {index}")
            if conn is not None:
                self._reply(conn, MsgType.ACK, (str(index),))
        for notification in notifications:
            self._push_notification(notification)

    @staticmethod
    def _seal_step(op: str) -> int:
        return 7 if op == "submit" else 4

    def _persist_snapshot(self) -> None:
        if self.chain_path is None:
            return
        if self._chain_fh is not None:
            self._chain_fh.flush()

    def _push_notification(self, notification: policy_mod.Notification) -> None:
        fields = (
            notification.imei,
            notification.phone,
            str(notification.epoch),
            f"{notification.distance_m:.3f}",
        )
        with self._conns_lock:
            listeners = [c for c in self._conns if c.wants_notify and c.identity is not None]
        for conn in listeners:
            self._reply(conn, MsgType.NOTIFY, fields)

    # -- request handlers ---------------------------------------------------

    def _handle_register(self, conn: _Conn, envelope: Envelope) -> None:
        self._registration(conn, envelope, remove=False)

    def _handle_remove(self, conn: _Conn, envelope: Envelope) -> None:
        self._registration(conn, envelope, remove=True)

    def _registration(self, conn: _Conn, envelope: Envelope, remove: bool) -> None:
        op = "remove" if remove else "register"
        if len(envelope.fields) != 3:
            self._err(conn, ERR_MALFORMED, f"{op} takes (imei, phone, at)")
            return
        imei, phone, at_text = envelope.fields
        self._trace(op, 1, "request-received", f"{imei} {phone}")
        self._trace(op, 2, "contract-access-check", conn.identity.node_id)
        try:
            at = chain_mod._parse_uint(at_text, "at")
        except ValueError as exc:
            self._err(conn, ERR_MALFORMED, str(exc))
            return
        submitter = conn.identity.node_id
        if remove:
            decision = policy_mod.check_removal_request(self.state, submitter, imei, phone)
            status = DeviceStatus.REMOVED
            kind = TxKind.REMOVE
        else:
            candidate = DeviceRecord(imei, phone, DeviceStatus.ACTIVE, at)
            decision = policy_mod.check_registration_request(self.state, submitter, candidate)
            status = DeviceStatus.ACTIVE
            kind = TxKind.REGISTER
        if not decision:
            self._trace(op, 2, "request-dropped", decision.reason.value)
            self.count(f"rejected_{op}")
            self._err(conn, decision.reason.value)
            return
        self._trace(op, 3, "access-granted")
        record = DeviceRecord(imei, phone, status, at)
        self._accept_tx(Transaction(kind, submitter, record, at), conn, op)

    def _handle_submit(self, conn: _Conn, envelope: Envelope) -> None:
        op = "submit"
        if len(envelope.fields) != 8:
            self._err(conn, ERR_MALFORMED, "submit takes 8 fields")
            return
        imei, phone, lat_t, lon_t, clock_t, date_t, epoch_t, recv_t = envelope.fields
        submitter = conn.identity.node_id
        self._trace(op, 1, "node-check-requested", submitter)
        self._trace(op, 2, "node-contract-check")
        node_decision = policy_mod.check_submitter_node(self.state, submitter)
        if not node_decision:
            self._trace(op, 2, "request-dumped", node_decision.reason.value)
            self.count("rejected_submissions")
            self._err(conn, node_decision.reason.value)
            return
        self._trace(op, 3, "node-accepted")
        try:
            report = LocationReport(
                imei=imei,
                phone=phone,
                lat=sms._parse_coord(lat_t, "lat", 90.0),
                lon=sms._parse_coord(lon_t, "lon", 180.0),
                time_of_day=sms._check_clock(clock_t),
                date=sms._check_date(date_t),
                epoch=chain_mod._parse_int(epoch_t, "epoch"),
            )
            received_at = chain_mod._parse_uint(recv_t, "received_at")
        except ValueError as exc:
            self.count("malformed_requests")
            self._err(conn, ERR_MALFORMED, str(exc))
            return
        self._trace(op, 4, "device-check-requested", f"{imei} {phone}")
        self._trace(op, 5, "device-contract-check")
        device_decision = policy_mod.check_device_registered(self.state, imei, phone)
        if not device_decision:
            self._trace(op, 5, "report-discarded", device_decision.reason.value)
            self.count("rejected_submissions")
            self._err(conn, device_decision.reason.value)
            return
        self._trace(op, 6, "device-accepted")
        tx = Transaction(TxKind.LOCATION, submitter, report, received_at)
        self._accept_tx(tx, conn, op)

    def _handle_query(self, conn: _Conn, envelope: Envelope) -> None:
        op = "query"
        if len(envelope.fields) != 4:
            self._err(conn, ERR_MALFORMED, "query takes (imei, phone, t0, t1)")
            return
        imei, phone, t0_text, t1_text = envelope.fields
        self._trace(op, 1, "request-received", f"{imei} {phone}")
        self._trace(op, 2, "permission-check", conn.identity.node_id)
        decision = policy_mod.check_read_request(self.state, conn.identity.node_id)
        if not decision:
            self._trace(op, 3, "request-rejected", decision.reason.value)
            self.count("forbidden_queries")
            self._err(conn, decision.reason.value)
            return
        self._trace(op, 3, "permission-granted")
        self._trace(op, 4, "permission-acknowledged")
        try:
            t0 = int(t0_text) if t0_text else None
            t1 = int(t1_text) if t1_text else None
            self._trace(op, 5, "search-dispatched")
            reports = policy_mod.query_locations(self.chain, imei, phone, t0, t1)
        except ValueError as exc:
            self.count("malformed_requests")
            self._err(conn, ERR_MALFORMED, str(exc))
            return
        self._trace(op, 6, "search-executed", f"{len(reports)} reports")
        fields: list[str] = [str(len(reports))]
        for r in reports:
            fields.extend(
                (r.imei, r.phone, f"{r.lat:.6f}", f"{r.lon:.6f}", r.time_of_day, r.date, str(r.epoch))
            )
        self._trace(op, 7, "results-returned")
        self._reply(conn, MsgType.ACK, tuple(fields))

    def _handle_sync(self, conn: _Conn, envelope: Envelope) -> None:
        if len(envelope.fields) != 1:
            self._err(conn, ERR_MALFORMED, "sync takes (have_height)")
            return
        role = conn.identity.role
        if role is Role.GATEWAY and not self.config.allow_gateway_sync:
            self.count("denied_syncs")
            self._err(conn, DenyReason.FORBIDDEN.value, "gateway replication disabled")
            return
        if role is Role.MINER:
            self.count("denied_syncs")
            self._err(conn, DenyReason.FORBIDDEN.value)
            return
        try:
            have = int(envelope.fields[0])
        except ValueError:
            self._err(conn, ERR_MALFORMED, "have_height must be an integer")
            return
        if have < -1 or have > self.chain.height:
            self._err(conn, ERR_MALFORMED, f"have_height {have} out of range")
            return
        lines = [
            chain_mod.encode_block_line(block) for block in self.chain.blocks[have + 1 :]
        ]
        self._reply(
            conn, MsgType.SYNC_BLOCKS, (self.chain.chain_id, str(len(lines)), *lines)
        )

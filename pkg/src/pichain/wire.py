"""Framed wire protocol with per-node message authentication.

Frame layout on the socket:

    [4 bytes  big-endian payload length]
    [1 byte   message type]
    [8 bytes  big-endian sequence number]
    [32 bytes HMAC-SHA256 over (type || seq || body)]
    [N bytes  body: length-prefixed UTF-8 fields, see canon]

Every node shares a 32-byte secret with the miner; both directions of
a connection authenticate with the client node's secret. Sequence
numbers increase strictly per direction; anything replayed or failing
authentication is dropped and counted, never processed.
"""

from __future__ import annotations

import enum
import hmac
import hashlib
import re
import secrets
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from . import canon
from .policy import Role

MAX_FRAME = 16 * 1024 * 1024
MAX_FIELDS = 1 << 16
_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")

HEAD = struct.Struct(">BQ")  # type, seq
MAC_LEN = 32


class MsgType(enum.IntEnum):
    HELLO = 1
    SUBMIT_TX = 2
    REGISTER_DEVICE = 3
    REMOVE_DEVICE = 4
    QUERY = 5
    SYNC_REQUEST = 6
    SYNC_BLOCKS = 7
    NOTIFY = 8
    ACK = 9
    ERR = 10


# Message types a client of each role may originate. The gateway is
# write-only: it can never send a read request of any kind.
CLIENT_TYPES = {
    Role.PARENT: frozenset(
        {MsgType.HELLO, MsgType.REGISTER_DEVICE, MsgType.REMOVE_DEVICE,
         MsgType.QUERY, MsgType.SYNC_REQUEST}
    ),
    Role.GATEWAY: frozenset({MsgType.HELLO, MsgType.SUBMIT_TX, MsgType.SYNC_REQUEST}),
    Role.MINER: frozenset(),
}


class WireError(Exception):
    pass


class FrameError(WireError):
    """The byte stream itself is broken; the connection is unusable."""


class TransportError(WireError):
    """The peer is unreachable or stopped answering."""


class RequestDenied(WireError):
    """The miner answered ERR; reason is the denial code."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class NodeIdentity:
    node_id: str  # 64 lowercase hex chars
    role: Role
    secret: bytes  # 32 bytes, shared with the miner

    def __post_init__(self):
        if not _HEX64_RE.match(self.node_id):
            raise ValueError(f"node_id must be 64 lowercase hex chars: {self.node_id!r}")
        if len(self.secret) != 32:
            raise ValueError("secret must be exactly 32 bytes")


def generate_identity(role: Role) -> NodeIdentity:
    return NodeIdentity(secrets.token_hex(32), role, secrets.token_bytes(32))


def parse_identities(text: str) -> dict[str, NodeIdentity]:
    """Parse a provisioning file: key=value lines, one node per
    (node_id, role, secret) group, '#' comments allowed."""
    nodes: dict[str, NodeIdentity] = {}
    current: dict[str, str] = {}

    def flush():
        if not current:
            return
        missing = {"node_id", "role", "secret"} - current.keys()
        if missing:
            raise ValueError(f"provisioning record missing {sorted(missing)}")
        try:
            role = Role(current["role"].lower())
        except ValueError:
            raise ValueError(f"unknown role: {current['role']!r}") from None
        if not _HEX64_RE.match(current["secret"]):
            raise ValueError("secret must be 64 lowercase hex chars")
        identity = NodeIdentity(current["node_id"], role, bytes.fromhex(current["secret"]))
        if identity.node_id in nodes:
            raise ValueError(f"duplicate node_id: {identity.node_id}")
        nodes[identity.node_id] = identity
        current.clear()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"provisioning line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "node_id" and current:
            flush()
        current[key] = value
    flush()
    if not nodes:
        raise ValueError("provisioning file defines no nodes")
    return nodes


def load_identities(path: str) -> dict[str, NodeIdentity]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_identities(fh.read())


def format_identities(identities: list[NodeIdentity]) -> str:
    chunks = []
    for node in identities:
        chunks.append(
            f"node_id={node.node_id}\nrole={node.role.value}\nsecret={node.secret.hex()}\n"
        )
    return "\n".join(chunks)


# ---------------------------------------------------------------------------
# encoding


def encode_payload(msg_type: MsgType, seq: int, fields: tuple[str, ...], secret: bytes) -> bytes:
    head = HEAD.pack(int(msg_type), seq)
    body = canon.lp_texts(fields)
    mac = hmac.new(secret, head + body, hashlib.sha256).digest()
    return head + mac + body


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    seq: int
    fields: tuple[str, ...]


def parse_payload(payload: bytes) -> tuple[Envelope, bytes, bytes]:
    """Structurally decode a payload without authenticating it.

    Returns (envelope, claimed mac, the bytes the mac covers). Callers
    must verify with verify_mac before acting on the envelope.
    """
    if len(payload) < HEAD.size + MAC_LEN:
        raise FrameError("payload shorter than fixed header")
    type_value, seq = HEAD.unpack_from(payload, 0)
    try:
        msg_type = MsgType(type_value)
    except ValueError:
        raise FrameError(f"unknown message type {type_value}") from None
    mac = payload[HEAD.size : HEAD.size + MAC_LEN]
    body = payload[HEAD.size + MAC_LEN :]
    envelope = Envelope(msg_type, seq, _decode_fields(body))
    return envelope, mac, payload[: HEAD.size] + body


def verify_mac(secret: bytes, mac: bytes, authed: bytes) -> bool:
    expected = hmac.new(secret, authed, hashlib.sha256).digest()
    return hmac.compare_digest(mac, expected)


def decode_payload(payload: bytes, secret: bytes) -> Envelope:
    """Decode and authenticate one payload.

    Raises FrameError for malformed bytes and WireError("bad mac") when
    authentication fails.
    """
    envelope, mac, authed = parse_payload(payload)
    if not verify_mac(secret, mac, authed):
        raise WireError("bad mac")
    return envelope


def _decode_fields(body: bytes) -> tuple[str, ...]:
    if len(body) < 8:
        raise FrameError("body missing field count")
    (count,) = struct.unpack_from(">Q", body, 0)
    if count > MAX_FIELDS:
        raise FrameError(f"field count {count} too large")
    fields = []
    offset = 8
    for _ in range(count):
        if offset + 8 > len(body):
            raise FrameError("truncated field length")
        (length,) = struct.unpack_from(">Q", body, offset)
        offset += 8
        if offset + length > len(body):
            raise FrameError("truncated field bytes")
        try:
            fields.append(body[offset : offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FrameError(f"field is not UTF-8: {exc}") from None
        offset += length
    if offset != len(body):
        raise FrameError("trailing bytes after last field")
    return tuple(fields)


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise TransportError("read timed out") from None
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from exc
        if not chunk:
            if buf:
                raise FrameError("connection closed mid-frame")
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one frame payload, or None on clean end of stream."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise FrameError("connection closed mid-frame")
    return payload


def send_payload(sock: socket.socket, payload: bytes) -> None:
    try:
        sock.sendall(struct.pack(">I", len(payload)) + payload)
    except OSError as exc:
        raise TransportError(f"socket error: {exc}") from exc


# ---------------------------------------------------------------------------
# client side


class ClientConnection:
    """One authenticated connection from a node to the miner.

    Holds at most one request in flight; replies are matched by
    reading until an ACK or ERR arrives. NOTIFY frames pushed by the
    miner while waiting are handed to the on_notify callback.
    """

    def __init__(
        self,
        identity: NodeIdentity,
        host: str,
        port: int,
        timeout: float = 10.0,
        subscribe_notify: bool = False,
        on_notify: Optional[Callable[[tuple[str, ...]], None]] = None,
        allowed_types: Optional[frozenset] = None,
    ):
        self.identity = identity
        self.host = host
        self.port = port
        self.timeout = timeout
        self.subscribe_notify = subscribe_notify
        self.on_notify = on_notify
        self.allowed_types = allowed_types
        self.sock: Optional[socket.socket] = None
        self.send_seq = 0
        self.peer_seq = 0
        self.auth_failures = 0
        self.replay_drops = 0
        self._lock = threading.Lock()

    @property
    def connected(self) -> bool:
        return self.sock is not None

    def connect(self) -> int:
        """Dial the miner, introduce ourselves, return the miner's
        current chain height from the handshake reply."""
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach miner at {self.host}:{self.port}: {exc}") from exc
        sock.settimeout(self.timeout)
        self.sock = sock
        self.send_seq = 0
        self.peer_seq = 0
        flags = "notify" if self.subscribe_notify else ""
        reply = self._roundtrip(MsgType.HELLO, (self.identity.node_id, flags))
        if reply.msg_type is not MsgType.ACK:
            detail = ",".join(reply.fields)
            self.close()
            raise WireError(f"handshake refused: {detail}")
        return int(reply.fields[0])

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def request(self, msg_type: MsgType, fields: tuple[str, ...]) -> Envelope:
        """Send one message and wait for its ACK or ERR."""
        with self._lock:
            return self._roundtrip(msg_type, fields)

    def _roundtrip(self, msg_type: MsgType, fields: tuple[str, ...]) -> Envelope:
        if self.sock is None:
            raise TransportError("not connected")
        if self.allowed_types is not None:
            assert msg_type in self.allowed_types, (
                f"{self.identity.role.value} node may not send {msg_type.name}"
            )
        self.send_seq += 1
        send_payload(
            self.sock,
            encode_payload(msg_type, self.send_seq, fields, self.identity.secret),
        )
        while True:
            envelope = self._recv_verified()
            if envelope is None:
                continue
            if envelope.msg_type is MsgType.NOTIFY:
                if self.on_notify is not None:
                    self.on_notify(envelope.fields)
                continue
            if envelope.msg_type in (MsgType.ACK, MsgType.ERR, MsgType.SYNC_BLOCKS):
                return envelope
            # Anything else is not addressed to this request.
            continue

    def _recv_verified(self) -> Optional[Envelope]:
        payload = read_frame(self.sock)
        if payload is None:
            self.close()
            raise TransportError("miner closed the connection")
        try:
            envelope = decode_payload(payload, self.identity.secret)
        except FrameError:
            self.close()
            raise
        except WireError:
            self.auth_failures += 1
            return None
        if envelope.seq <= self.peer_seq:
            self.replay_drops += 1
            return None
        self.peer_seq = envelope.seq
        return envelope

    def wait_notify(self, deadline: float) -> list[tuple[str, ...]]:
        """Drain pushed NOTIFY frames until the socket stays quiet.

        Used by watch sessions; returns the notification field tuples
        received before `deadline` seconds of silence."""
        if self.sock is None:
            raise TransportError("not connected")
        received: list[tuple[str, ...]] = []
        self.sock.settimeout(deadline)
        try:
            while True:
                try:
                    envelope = self._recv_verified()
                except TransportError:
                    break
                if envelope is not None and envelope.msg_type is MsgType.NOTIFY:
                    received.append(envelope.fields)
                    if self.on_notify is not None:
                        self.on_notify(envelope.fields)
        finally:
            if self.sock is not None:
                self.sock.settimeout(self.timeout)
        return received

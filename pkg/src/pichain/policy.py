"""The miner's contract: who may do what, and the home-arrival trigger.

Four fixed rules, evaluated deterministically against state replayed
from the chain itself:

  * only the parent node registers or removes devices;
  * only provisioned gateway nodes submit location reports, and only
    for devices currently registered;
  * only the parent node reads location data back;
  * a report inside the home fence raises a notification, once per
    arrival (edge-triggered on the device's previous position).

Denials are values, not exceptions: every check returns a Decision.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

from .chain import Chain, Transaction, TxKind
from .registry import DeviceRecord, DeviceStatus, valid_imei, valid_phone
from .sms import LocationReport

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_FENCE_RADIUS_M = 50.0


class Role(enum.Enum):
    MINER = "miner"
    GATEWAY = "gateway"
    PARENT = "parent"


class DenyReason(enum.Enum):
    NOT_PARENT = "NotParent"
    BAD_IMEI = "BadImei"
    BAD_PHONE = "BadPhone"
    ALREADY_REGISTERED = "AlreadyRegistered"
    NOT_REGISTERED = "NotRegistered"
    UNKNOWN_NODE = "UnknownNode"
    UNREGISTERED_DEVICE = "UnregisteredDevice"
    FORBIDDEN = "Forbidden"


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: Optional[DenyReason] = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def deny(reason: DenyReason) -> Decision:
    return Decision(False, reason)


@dataclass(frozen=True)
class GeoFence:
    """Circle around the home position, radius in meters."""

    home_lat: float
    home_lon: float
    radius_m: float = DEFAULT_FENCE_RADIUS_M

    def __post_init__(self):
        _check_coords(self.home_lat, self.home_lon)
        if not math.isfinite(self.radius_m) or self.radius_m <= 0:
            raise ValueError(f"fence radius must be finite and positive: {self.radius_m}")


@dataclass(frozen=True)
class Notification:
    """A family member's device entered the home fence."""

    imei: str
    phone: str
    epoch: int
    distance_m: float


def _check_coords(lat: float, lon: float) -> None:
    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise ValueError(f"latitude out of range: {lat}")
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise ValueError(f"longitude out of range: {lon}")


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on a sphere of radius 6371 km."""
    _check_coords(lat1, lon1)
    _check_coords(lat2, lon2)
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return EARTH_RADIUS_M * 2 * math.atan2(math.sqrt(a), math.sqrt(1 - a))


def check_home_arrival(
    fence: GeoFence, report: LocationReport, previously_inside: bool
) -> Optional[Notification]:
    """Edge-triggered fence check: notify only on the outside->inside
    transition; a device with no previous report counts as outside."""
    distance = haversine_m(fence.home_lat, fence.home_lon, report.lat, report.lon)
    if distance <= fence.radius_m and not previously_inside:
        return Notification(report.imei, report.phone, report.epoch, distance)
    return None


@dataclass(frozen=True)
class PolicyConfig:
    fence: GeoFence
    parent_node_id: str
    gateway_node_ids: tuple[str, ...]
    block_batch_size: int = 1
    allow_gateway_sync: bool = False


def parse_policy_config(text: str) -> PolicyConfig:
    """Parse key=value policy configuration.

    Required keys: home_lat, home_lon, parent_node_id, gateway_node_ids
    (comma-separated). Optional: radius_m, block_batch_size,
    allow_gateway_sync. '#' starts a comment.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"policy config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    missing = {"home_lat", "home_lon", "parent_node_id", "gateway_node_ids"} - values.keys()
    if missing:
        raise ValueError(f"policy config missing keys: {sorted(missing)}")
    fence = GeoFence(
        home_lat=float(values["home_lat"]),
        home_lon=float(values["home_lon"]),
        radius_m=float(values.get("radius_m", DEFAULT_FENCE_RADIUS_M)),
    )
    gateways = tuple(g.strip() for g in values["gateway_node_ids"].split(",") if g.strip())
    batch = int(values.get("block_batch_size", "1"))
    if batch < 1:
        raise ValueError("block_batch_size must be >= 1")
    allow_sync = values.get("allow_gateway_sync", "false").lower() in ("1", "true", "yes")
    return PolicyConfig(
        fence=fence,
        parent_node_id=values["parent_node_id"],
        gateway_node_ids=gateways,
        block_batch_size=batch,
        allow_gateway_sync=allow_sync,
    )


def load_policy_config(path: str) -> PolicyConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_policy_config(fh.read())


@dataclass
class PolicyState:
    """Device registry and per-device fence state, a pure fold over the
    chain: replaying the same blocks always yields the same state."""

    fence: GeoFence
    parent_node_id: str
    gateway_node_ids: frozenset[str]
    devices: dict[tuple[str, str], DeviceRecord] = field(default_factory=dict)
    inside_fence: dict[tuple[str, str], bool] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: PolicyConfig) -> "PolicyState":
        return cls(
            fence=config.fence,
            parent_node_id=config.parent_node_id,
            gateway_node_ids=frozenset(config.gateway_node_ids),
        )

    @classmethod
    def replay(cls, chain: Chain, config: PolicyConfig) -> "PolicyState":
        state = cls.from_config(config)
        for block in chain.blocks:
            for tx in block.transactions:
                state.apply_tx(tx)
        return state

    def device_active(self, imei: str, phone: str) -> bool:
        record = self.devices.get((imei, phone))
        return record is not None and record.status is DeviceStatus.ACTIVE

    def apply_tx(self, tx: Transaction) -> Optional[Notification]:
        """Fold one sealed transaction into the state; for location
        reports, returns the arrival notification when one triggers."""
        if tx.kind in (TxKind.REGISTER, TxKind.REMOVE):
            assert isinstance(tx.payload, DeviceRecord)
            self.devices[tx.payload.key] = tx.payload
            return None
        assert isinstance(tx.payload, LocationReport)
        return self.observe_report(tx.payload)

    def observe_report(self, report: LocationReport) -> Optional[Notification]:
        key = (report.imei, report.phone)
        was_inside = self.inside_fence.get(key, False)
        notification = check_home_arrival(self.fence, report, was_inside)
        distance = haversine_m(
            self.fence.home_lat, self.fence.home_lon, report.lat, report.lon
        )
        self.inside_fence[key] = distance <= self.fence.radius_m
        return notification


def check_registration_request(
    state: PolicyState, submitter: str, dev: DeviceRecord
) -> Decision:
    if submitter != state.parent_node_id:
        return deny(DenyReason.NOT_PARENT)
    if not valid_imei(dev.imei):
        return deny(DenyReason.BAD_IMEI)
    if not valid_phone(dev.phone):
        return deny(DenyReason.BAD_PHONE)
    if state.device_active(dev.imei, dev.phone):
        return deny(DenyReason.ALREADY_REGISTERED)
    return ALLOW


def check_removal_request(
    state: PolicyState, submitter: str, imei: str, phone: str
) -> Decision:
    if submitter != state.parent_node_id:
        return deny(DenyReason.NOT_PARENT)
    if not valid_imei(imei):
        return deny(DenyReason.BAD_IMEI)
    if not valid_phone(phone):
        return deny(DenyReason.BAD_PHONE)
    if not state.device_active(imei, phone):
        return deny(DenyReason.NOT_REGISTERED)
    return ALLOW


def check_submitter_node(state: PolicyState, submitter: str) -> Decision:
    if submitter not in state.gateway_node_ids:
        return deny(DenyReason.UNKNOWN_NODE)
    return ALLOW


def check_device_registered(state: PolicyState, imei: str, phone: str) -> Decision:
    if not state.device_active(imei, phone):
        return deny(DenyReason.UNREGISTERED_DEVICE)
    return ALLOW


def check_location_submission(
    state: PolicyState, submitter: str, report: LocationReport
) -> Decision:
    node = check_submitter_node(state, submitter)
    if not node:
        return node
    return check_device_registered(state, report.imei, report.phone)


def check_read_request(state: PolicyState, requester: str) -> Decision:
    if requester != state.parent_node_id:
        return deny(DenyReason.FORBIDDEN)
    return ALLOW


def query_locations(
    chain: Chain,
    imei: str,
    phone: str,
    t0: Optional[int] = None,
    t1: Optional[int] = None,
) -> list[LocationReport]:
    """All location reports for one device, oldest first.

    The optional [t0, t1] range is inclusive and filters on the
    report's own timestamp. Ties keep chain order (stable sort).
    """
    if not valid_imei(imei):
        raise ValueError(f"malformed imei: {imei!r}")
    if not valid_phone(phone):
        raise ValueError(f"malformed phone: {phone!r}")
    matches: list[LocationReport] = []
    for block in chain.blocks:
        for tx in block.transactions:
            if tx.kind is not TxKind.LOCATION:
                continue
            report = tx.payload
            assert isinstance(report, LocationReport)
            if report.imei != imei or report.phone != phone:
                continue
            if t0 is not None and report.epoch < t0:
                continue
            if t1 is not None and report.epoch > t1:
                continue
            matches.append(report)
    matches.sort(key=lambda r: r.epoch)
    return matches

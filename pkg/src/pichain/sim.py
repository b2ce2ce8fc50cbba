"""Scripted phones on a virtual clock.

Each simulated phone walks a track and emits one location text per
cadence interval (30 s by default). Messages whose true position lies
inside a blackspot circle are lost outright or held back and
re-delivered on zone exit, depending on the drop mode. Everything runs
on virtual time, so a five-minute scenario finishes in milliseconds
and two runs with the same inputs produce identical output bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from .gateway import format_ingest_line
from .policy import haversine_m
from .sms import report_at

DEFAULT_CADENCE_S = 30
DEFAULT_START_EPOCH = 1_700_000_000  # fixed so runs are reproducible

IngestSink = Callable[[str, int], object]


@dataclass(frozen=True)
class PhoneSim:
    imei: str
    phone: str
    track: tuple[tuple[float, float], ...]
    cadence_s: int = DEFAULT_CADENCE_S
    seed: int = 0

    def position(self, tick: int) -> tuple[float, float]:
        return self.track[min(tick, len(self.track) - 1)]


class DropMode(enum.Enum):
    SILENT = "silent"
    SPOOLED = "spooled"


@dataclass(frozen=True)
class BlackspotZone:
    lat: float
    lon: float
    radius_m: float


@dataclass(frozen=True)
class BlackspotModel:
    zones: tuple[BlackspotZone, ...] = ()
    drop_mode: DropMode = DropMode.SILENT

    def covers(self, lat: float, lon: float) -> bool:
        return any(
            haversine_m(zone.lat, zone.lon, lat, lon) <= zone.radius_m
            for zone in self.zones
        )


class VirtualClock:
    """Monotone simulated time shared by every component of a run."""

    def __init__(self, start: int, step_s: int = 1):
        self.now = start
        self.step_s = step_s

    def advance_to(self, epoch: int) -> None:
        if epoch < self.now:
            raise ValueError(f"clock cannot run backwards: {epoch} < {self.now}")
        self.now = epoch

    def tick(self) -> int:
        self.now += self.step_s
        return self.now


@dataclass
class PhoneCounters:
    emitted: int = 0
    delivered: int = 0
    dropped: int = 0


@dataclass
class ScenarioReport:
    seed: int
    duration_s: int
    start_epoch: int
    phones: dict[tuple[str, str], PhoneCounters] = field(default_factory=dict)

    def totals(self) -> PhoneCounters:
        total = PhoneCounters()
        for c in self.phones.values():
            total.emitted += c.emitted
            total.delivered += c.delivered
            total.dropped += c.dropped
        return total

    def render(self) -> str:
        lines = [
            f"scenario seed={self.seed} duration_s={self.duration_s} start_epoch={self.start_epoch}"
        ]
        for (imei, phone), c in self.phones.items():
            lines.append(
                f"phone {imei} {phone} emitted={c.emitted} delivered={c.delivered} dropped={c.dropped}"
            )
        t = self.totals()
        lines.append(f"total emitted={t.emitted} delivered={t.delivered} dropped={t.dropped}")
        return "\n".join(lines) + "\n"


def make_track_walk(
    start: tuple[float, float], end: tuple[float, float], steps: int
) -> tuple[tuple[float, float], ...]:
    """Straight-line walk from start to end over `steps` waypoints.

    Interpolation is linear in raw degrees, which is fine at
    foot-traffic scale; do not use this to plan flights.
    """
    if steps < 2:
        raise ValueError("a walk needs at least 2 waypoints")
    lat0, lon0 = start
    lat1, lon1 = end
    span = steps - 1
    return tuple(
        (lat0 + (lat1 - lat0) * i / span, lon0 + (lon1 - lon0) * i / span)
        for i in range(steps)
    )


def run_scenario(
    phones: list[PhoneSim],
    blackspots: BlackspotModel,
    sink: IngestSink,
    duration_s: int,
    start_epoch: int = DEFAULT_START_EPOCH,
    tz: str = "UTC",
    seed: int = 0,
) -> ScenarioReport:
    """Drive every phone for duration_s virtual seconds against the
    gateway's ingest entry point and return exact per-phone counts."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    identities = [(p.imei, p.phone) for p in phones]
    if len(set(identities)) != len(identities):
        raise ValueError("phones must have distinct (imei, phone) identities")
    for p in phones:
        if not p.track:
            raise ValueError(f"phone {p.imei} has an empty track")
        if p.cadence_s <= 0:
            raise ValueError("cadence_s must be positive")

    report = ScenarioReport(seed=seed, duration_s=duration_s, start_epoch=start_epoch)
    for p in phones:
        report.phones[(p.imei, p.phone)] = PhoneCounters()

    # (epoch, phone order, tick) for every emission in the window
    events = sorted(
        (start_epoch + tick * p.cadence_s, order, tick)
        for order, p in enumerate(phones)
        for tick in range(duration_s // p.cadence_s)
    )
    clock = VirtualClock(start_epoch)
    held: dict[int, list[str]] = {order: [] for order in range(len(phones))}

    for epoch, order, tick in events:
        clock.advance_to(epoch)
        phone = phones[order]
        counters = report.phones[(phone.imei, phone.phone)]
        lat, lon = phone.position(tick)
        message = report_at(phone.imei, phone.phone, lat, lon, clock.now, tz)
        line = format_ingest_line(phone.phone, phone.imei, message)
        counters.emitted += 1
        if blackspots.covers(lat, lon):
            if blackspots.drop_mode is DropMode.SILENT:
                counters.dropped += 1
            else:
                held[order].append(line)
            continue
        # store-and-forward: held messages leave first, in emission order
        for queued in held[order]:
            sink(queued, clock.now)
            counters.delivered += 1
        held[order].clear()
        sink(line, clock.now)
        counters.delivered += 1

    for order, queued in held.items():
        phone = phones[order]
        report.phones[(phone.imei, phone.phone)].dropped += len(queued)
    return report


# ---------------------------------------------------------------------------
# scenario files


@dataclass(frozen=True)
class Scenario:
    phones: tuple[PhoneSim, ...]
    blackspots: BlackspotModel
    duration_s: int
    start_epoch: int = DEFAULT_START_EPOCH
    seed: int = 0
    tz: Optional[str] = None


def parse_scenario(text: str) -> Scenario:
    """Parse the declarative scenario format.

    Scalars are key=value (duration_s, start_epoch, seed, tz,
    drop_mode). A `phone IMEI PHONE [cadence_s]` line opens a phone;
    `wp LAT LON` lines attach waypoints to it. `blackspot LAT LON
    RADIUS_M` adds a drop zone. '#' starts a comment.
    """
    scalars: dict[str, str] = {}
    phones: list[dict] = []
    zones: list[BlackspotZone] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("phone "):
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"scenario line {lineno}: phone IMEI PHONE [cadence_s]")
            cadence = int(parts[3]) if len(parts) == 4 else DEFAULT_CADENCE_S
            phones.append({"imei": parts[1], "phone": parts[2], "cadence": cadence, "track": []})
        elif line.startswith("wp "):
            if not phones:
                raise ValueError(f"scenario line {lineno}: waypoint before any phone")
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"scenario line {lineno}: wp LAT LON")
            phones[-1]["track"].append((float(parts[1]), float(parts[2])))
        elif line.startswith("blackspot "):
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"scenario line {lineno}: blackspot LAT LON RADIUS_M")
            zones.append(BlackspotZone(float(parts[1]), float(parts[2]), float(parts[3])))
        elif "=" in line:
            key, value = line.split("=", 1)
            scalars[key.strip()] = value.strip()
        else:
            raise ValueError(f"scenario line {lineno}: cannot parse {line!r}")
    if "duration_s" not in scalars:
        raise ValueError("scenario missing duration_s")
    sims = tuple(
        PhoneSim(p["imei"], p["phone"], tuple(p["track"]), p["cadence"])
        for p in phones
    )
    mode = DropMode(scalars.get("drop_mode", "silent"))
    return Scenario(
        phones=sims,
        blackspots=BlackspotModel(tuple(zones), mode),
        duration_s=int(scalars["duration_s"]),
        start_epoch=int(scalars.get("start_epoch", DEFAULT_START_EPOCH)),
        seed=int(scalars.get("seed", "0")),
        tz=scalars.get("tz"),
    )


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())

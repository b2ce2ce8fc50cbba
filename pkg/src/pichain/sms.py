"""Location message grammar and parsing.

A phone reports its position as a single short text message:

    LAT,LON,HH:MM:SS,DD-MM-YYYY

one comma between fields, no spaces, latitude and longitude carried
with exactly six decimal places, clock and date fields zero-padded.
``parse_sms`` accepts exactly the strings ``serialize_report`` can
emit; everything else is rejected with a distinguishable error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date as _date
from datetime import datetime
from zoneinfo import ZoneInfo

MAX_SMS_LEN = 160

# What serialize_report emits: optional sign, canonical integer part
# (no leading zeros), exactly six decimals.
_COORD_CANON = re.compile(r"^-?(?:0|[1-9][0-9]{0,2})\.[0-9]{6}$")
# Loose numeric shape used only to decide between "not a coordinate at
# all" (grammar) and "a coordinate with a bad value" (range).
_COORD_LOOSE = re.compile(r"^[+-]?[0-9]+\.[0-9]+$")
_CLOCK_SHAPE = re.compile(r"^([0-9]{2}):([0-9]{2}):([0-9]{2})$")
_DATE_SHAPE = re.compile(r"^([0-9]{2})-([0-9]{2})-([0-9]{4})$")


class SmsError(ValueError):
    """Base class for message rejections."""


class GrammarMismatch(SmsError):
    pass


class FieldOutOfRange(SmsError):
    def __init__(self, field: str, detail: str = ""):
        self.field = field
        super().__init__(f"{field} out of range{': ' + detail if detail else ''}")


class BadDate(SmsError):
    pass


@dataclass(frozen=True)
class RawSms:
    """One inbound text message plus its delivery envelope.

    The sending app knows its own IMEI and places it in the envelope;
    the transport reveals the sender's phone number.
    """

    from_phone: str
    imei: str
    body: str
    received_at: int

    def __post_init__(self):
        if len(self.body) > MAX_SMS_LEN:
            raise SmsError(f"body exceeds {MAX_SMS_LEN} characters")
        if self.received_at < 0:
            raise SmsError("received_at must be non-negative")


@dataclass(frozen=True)
class LocationReport:
    """A parsed location message bound to its device identity."""

    imei: str
    phone: str
    lat: float
    lon: float
    time_of_day: str  # HH:MM:SS, 24-hour
    date: str  # DD-MM-YYYY
    epoch: int  # derived from (date, time_of_day) in the home timezone


def _parse_coord(text: str, field: str, bound: float) -> float:
    if not _COORD_LOOSE.match(text):
        raise GrammarMismatch(f"{field} is not a decimal coordinate: {text!r}")
    value = float(text)
    if not -bound <= value <= bound:
        raise FieldOutOfRange(field, text)
    # Range verdicts above take priority; only now insist on the exact
    # six-decimal rendering.
    if not _COORD_CANON.match(text) or text.startswith("-") and value == 0.0:
        raise GrammarMismatch(f"{field} not in canonical form: {text!r}")
    return value


def _check_clock(text: str) -> str:
    m = _CLOCK_SHAPE.match(text)
    if not m:
        raise GrammarMismatch(f"bad clock field: {text!r}")
    hh, mm, ss = (int(g) for g in m.groups())
    if hh > 23 or mm > 59 or ss > 59:
        raise FieldOutOfRange("time_of_day", text)
    return text

def _check_date(text: str) -> str:
    m = _DATE_SHAPE.match(text)
    if not m:
        raise GrammarMismatch(f"bad date field: {text!r}")
    dd, mm, yyyy = (int(g) for g in m.groups())
    try:
        _date(yyyy, mm, dd)
    except ValueError:
        raise BadDate(f"no such calendar date: {text!r}") from None
    return text


def epoch_from_local(date_text: str, clock_text: str, tz: str) -> int:
    """Epoch seconds of a local (date, clock) pair in the given zone."""
    dd, mm, yyyy = (int(g) for g in _DATE_SHAPE.match(date_text).groups())
    hh, mi, ss = (int(g) for g in _CLOCK_SHAPE.match(clock_text).groups())
    dt = datetime(yyyy, mm, dd, hh, mi, ss, tzinfo=ZoneInfo(tz))
    return int(dt.timestamp())


def local_from_epoch(epoch: int, tz: str) -> tuple[str, str]:
    """Inverse of epoch_from_local: (HH:MM:SS, DD-MM-YYYY) in the zone."""
    dt = datetime.fromtimestamp(epoch, ZoneInfo(tz))
    return dt.strftime("%H:%M:%S"), dt.strftime("%d-%m-%Y")


def parse_body(body: str, imei: str, phone: str, tz: str = "UTC") -> LocationReport:
    """Parse a message body against the exact grammar.

    Raises GrammarMismatch for anything structurally off,
    FieldOutOfRange (naming the field) for valid-looking numbers
    outside their bounds, and BadDate for impossible calendar dates.
    """
    parts = body.split(",")
    if len(parts) != 4:
        raise GrammarMismatch(f"expected 4 comma-separated fields, got {len(parts)}")
    lat_text, lon_text, clock_text, date_text = parts
    lat = _parse_coord(lat_text, "lat", 90.0)
    lon = _parse_coord(lon_text, "lon", 180.0)
    _check_clock(clock_text)
    _check_date(date_text)
    epoch = epoch_from_local(date_text, clock_text, tz)
    return LocationReport(imei, phone, lat, lon, clock_text, date_text, epoch)


def parse_sms(raw: RawSms, tz: str = "UTC") -> LocationReport:
    """Parse an inbound message, binding identity from the envelope."""
    return parse_body(raw.body, raw.imei, raw.from_phone, tz)


def _coord_text(value: float, field: str, bound: float) -> str:
    if not -bound <= value <= bound:
        raise FieldOutOfRange(field, repr(value))
    text = f"{value:.6f}"
    if text == "-0.000000":
        text = "0.000000"
    if float(text) != value:
        raise SmsError(f"{field}={value!r} does not carry six decimal places")
    return text


def serialize_report(report: LocationReport) -> str:
    """Render a report as the exact message grammar.

    parse_body(serialize_report(r), ...) reproduces r field for field.
    """
    lat_text = _coord_text(report.lat, "lat", 90.0)
    lon_text = _coord_text(report.lon, "lon", 180.0)
    _check_clock(report.time_of_day)
    _check_date(report.date)
    return f"{lat_text},{lon_text},{report.time_of_day},{report.date}"


def report_at(imei: str, phone: str, lat: float, lon: float, epoch: int,
              tz: str = "UTC") -> LocationReport:
    """Build a report for a position at an instant, quantized to what the
    message grammar can carry (six decimal places, local clock fields)."""
    clock_text, date_text = local_from_epoch(epoch, tz)
    lat_q = float(_coord_text(round(lat, 6), "lat", 90.0))
    lon_q = float(_coord_text(round(lon, 6), "lon", 180.0))
    derived = epoch_from_local(date_text, clock_text, tz)
    return LocationReport(imei, phone, lat_q, lon_q, clock_text, date_text, derived)

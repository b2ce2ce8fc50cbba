"""Device identity records.

A device is the pair (IMEI, phone number); neither alone is a key.
IMEI is the 15-digit handset identifier, the phone number is the
SIM's E.164-style number with a leading ``+``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

IMEI_RE = re.compile(r"^[0-9]{15}$")
PHONE_RE = re.compile(r"^\+[0-9]{8,15}$")


def valid_imei(imei: str) -> bool:
    return bool(IMEI_RE.match(imei))


def valid_phone(phone: str) -> bool:
    return bool(PHONE_RE.match(phone))


class DeviceStatus(enum.Enum):
    ACTIVE = "Active"
    REMOVED = "Removed"


@dataclass(frozen=True)
class DeviceRecord:
    """A registered (IMEI, phone) pair.

    Status only ever moves Active -> Removed; registering the same
    device again creates a fresh record.
    """

    imei: str
    phone: str
    status: DeviceStatus
    registered_at: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.imei, self.phone)

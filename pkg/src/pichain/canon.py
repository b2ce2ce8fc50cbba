"""Canonical byte layout shared by header hashing and message authentication.

Layout rules:
    integer   -> 8-byte big-endian, unsigned
    field     -> 8-byte length prefix, then the raw bytes
    field seq -> 8-byte count, then each field length-prefixed

Length prefixes make the encoding injective: two different field
sequences can never serialize to the same byte string.
"""

from __future__ import annotations

import struct
from typing import Iterable


def u64be(value: int) -> bytes:
    """Encode a non-negative integer as 8 big-endian bytes."""
    if value < 0:
        raise ValueError(f"negative value not canonical: {value}")
    return struct.pack(">Q", value)


def lp(data: bytes) -> bytes:
    """Length-prefix a single byte field."""
    return u64be(len(data)) + data


def lp_fields(fields: Iterable[bytes]) -> bytes:
    """Encode a sequence of byte fields with a leading count."""
    items = list(fields)
    return u64be(len(items)) + b"".join(lp(item) for item in items)


def lp_texts(fields: Iterable[str]) -> bytes:
    """Encode a sequence of text fields (UTF-8) with a leading count."""
    return lp_fields(field.encode("utf-8") for field in fields)

"""Command/response APDU codec (ISO 7816-4 framing) and the card's wire constants.

Canonical encoding rules:

* Case 1   ``CLA INS P1 P2``
* Case 2S  ``... Le``                  (Le = 256 is written as ``00``)
* Case 3S  ``... Lc data``             (1 <= Lc <= 255)
* Case 4S  ``... Lc data Le``
* Case 2E  ``... 00 Le(2)``            (Le = 65536 is written as ``00 00``)
* Case 3E  ``... 00 Lc(2) data``
* Case 4E  ``... 00 Lc(2) data Le(2)``

Short form is used whenever both Lc and Le fit it. The decoder only accepts
canonical byte strings, so ``encode(decode(b)) == b`` for every accepted ``b``.

Command payloads are simple BER-style TLVs with one-octet tags (see ``Tag``).
These layouts are this simulator's own; they do not claim GSMA conformance.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Iterator, Optional

MAX_DATA = 65535
MAX_LE = 65536
SHORT_MAX_DATA = 255
SHORT_MAX_LE = 256

CLA_ISO = 0x00
CLA_PROPRIETARY = 0x80


class ApduError(ValueError):
    """Base class for codec failures."""


class Truncated(ApduError):
    pass


class MalformedLength(ApduError):
    pass


class OversizeData(ApduError):
    pass


class UnknownStatus(ApduError):
    pass


class MalformedTlv(ApduError):
    pass


class StatusWord(IntEnum):
    SUCCESS = 0x9000
    SECURITY_STATUS_NOT_SATISFIED = 0x6982
    CONDITIONS_NOT_SATISFIED = 0x6985
    WRONG_DATA = 0x6A80
    REFERENCED_DATA_NOT_FOUND = 0x6A88


class Ins(IntEnum):
    """Instruction codes understood by the simulated ISD-R."""

    CREATE_ISDP = 0xE6
    INSTALL_PROFILE = 0xE8
    ENABLE = 0xC2
    DISABLE = 0xC3
    DELETE = 0xE4
    SET_FALLBACK = 0xC4
    ESTABLISH_KEY = 0x88
    UPDATE_POL1 = 0xDA
    REPLACE_SMSR_KEY = 0xD8
    GET_STATUS = 0xF2
    # profile-content access; only valid through the profile's MNO-SD channel
    STORE_PROFILE_DATA = 0xE2
    GET_PROFILE_DATA = 0xCA


class Tag(IntEnum):
    AID = 0x4F
    FLAG = 0x80
    POL1 = 0x81
    CERTIFICATE = 0x85
    CHALLENGE = 0x86
    EPHEMERAL_KEY = 0x87
    SIGNATURE = 0x88
    CONFIRMATION = 0x89
    STATE = 0x8A
    KIND = 0x8B
    SEALED = 0xA0
    ENTRY = 0xE3


@dataclass(frozen=True)
class ApduCommand:
    cla: int
    ins: int
    p1: int = 0
    p2: int = 0
    data: bytes = b""
    le: Optional[int] = None

    def __post_init__(self):
        for name in ("cla", "ins", "p1", "p2"):
            value = getattr(self, name)
            if not 0 <= value <= 0xFF:
                raise ValueError(f"{name} out of octet range: {value!r}")
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) > MAX_DATA:
            raise OversizeData(f"data is {len(self.data)} octets, limit {MAX_DATA}")
        if self.le is not None and not 1 <= self.le <= MAX_LE:
            raise MalformedLength(f"le out of range: {self.le}")

    @property
    def extended(self) -> bool:
        return len(self.data) > SHORT_MAX_DATA or (self.le or 0) > SHORT_MAX_LE


@dataclass(frozen=True)
class ApduResponse:
    data: bytes = b""
    status: StatusWord = StatusWord.SUCCESS

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))
        try:
            object.__setattr__(self, "status", StatusWord(self.status))
        except ValueError:
            raise UnknownStatus(f"status word {self.status:#06x} not in table") from None

    @property
    def ok(self) -> bool:
        return self.status == StatusWord.SUCCESS


def _le_short(le: int) -> bytes:
    return bytes([le & 0xFF])


def _le_ext(le: int) -> bytes:
    return (le & 0xFFFF).to_bytes(2, "big")


def encode_command(cmd: ApduCommand) -> bytes:
    if len(cmd.data) > MAX_DATA:
        raise OversizeData(f"data is {len(cmd.data)} octets, limit {MAX_DATA}")
    out = bytearray([cmd.cla, cmd.ins, cmd.p1, cmd.p2])
    n = len(cmd.data)
    if not cmd.extended:
        if n:
            out.append(n)
            out += cmd.data
        if cmd.le is not None:
            out += _le_short(cmd.le)
        return bytes(out)
    out.append(0)
    if n:
        out += n.to_bytes(2, "big")
        out += cmd.data
    if cmd.le is not None:
        out += _le_ext(cmd.le)
    return bytes(out)


def decode_command(raw: bytes) -> ApduCommand:
    raw = bytes(raw)
    if len(raw) < 4:
        raise Truncated(f"command needs a 4-octet header, got {len(raw)}")
    cla, ins, p1, p2 = raw[:4]
    body = raw[4:]
    if not body:
        return ApduCommand(cla, ins, p1, p2)
    if len(body) == 1:
        return ApduCommand(cla, ins, p1, p2, le=body[0] or 256)
    if body[0] != 0:
        lc = body[0]
        if len(body) == 1 + lc:
            return ApduCommand(cla, ins, p1, p2, body[1:])
        if len(body) == 2 + lc:
            return ApduCommand(cla, ins, p1, p2, body[1:-1], le=body[-1] or 256)
        if len(body) < 1 + lc:
            raise Truncated(f"Lc={lc} but only {len(body) - 1} data octets")
        raise MalformedLength(f"Lc={lc} inconsistent with {len(body)} body octets")
    # extended form
    if len(body) < 3:
        raise Truncated("extended length field truncated")
    if len(body) == 3:
        le = int.from_bytes(body[1:3], "big") or 65536
        if le <= SHORT_MAX_LE:
            raise MalformedLength("non-canonical extended Le")
        return ApduCommand(cla, ins, p1, p2, le=le)
    lc = int.from_bytes(body[1:3], "big")
    if lc == 0:
        raise MalformedLength("extended Lc of zero")
    rest = body[3:]
    if len(rest) == lc:
        le = None
    elif len(rest) == lc + 2:
        le = int.from_bytes(rest[lc:], "big") or 65536
    elif len(rest) < lc:
        raise Truncated(f"extended Lc={lc} but only {len(rest)} data octets")
    else:
        raise MalformedLength(f"extended Lc={lc} inconsistent with {len(rest)} octets")
    cmd = ApduCommand(cla, ins, p1, p2, rest[:lc], le=le)
    if not cmd.extended:
        raise MalformedLength("non-canonical extended encoding")
    return cmd


def encode_response(resp: ApduResponse) -> bytes:
    return resp.data + int(resp.status).to_bytes(2, "big")


def decode_response(raw: bytes) -> ApduResponse:
    raw = bytes(raw)
    if len(raw) < 2:
        raise Truncated(f"response needs a 2-octet status word, got {len(raw)}")
    return ApduResponse(raw[:-2], int.from_bytes(raw[-2:], "big"))


# -- TLV payloads ------------------------------------------------------------

def encode_tlv(tag: int, value: bytes) -> bytes:
    value = bytes(value)
    n = len(value)
    if n < 0x80:
        length = bytes([n])
    elif n <= 0xFF:
        length = bytes([0x81, n])
    elif n <= 0xFFFF:
        length = bytes([0x82]) + n.to_bytes(2, "big")
    else:
        raise OversizeData("TLV value too long")
    return bytes([tag]) + length + value


def build_tlvs(items: Iterable[tuple[int, bytes]]) -> bytes:
    return b"".join(encode_tlv(tag, value) for tag, value in items)


def iter_tlvs(raw: bytes) -> Iterator[tuple[int, bytes]]:
    raw = bytes(raw)
    i = 0
    while i < len(raw):
        if i + 2 > len(raw):
            raise MalformedTlv("truncated tag/length")
        tag, first = raw[i], raw[i + 1]
        i += 2
        if first < 0x80:
            n = first
        elif first in (0x81, 0x82):
            width = first - 0x80
            if i + width > len(raw):
                raise MalformedTlv("truncated length")
            n = int.from_bytes(raw[i:i + width], "big")
            i += width
        else:
            raise MalformedTlv(f"unsupported length octet {first:#04x}")
        if i + n > len(raw):
            raise MalformedTlv("value runs past end of payload")
        yield tag, raw[i:i + n]
        i += n


def parse_tlvs(raw: bytes) -> dict[int, bytes]:
    """Parse a flat TLV sequence into ``{tag: value}``; duplicate tags are rejected."""
    out: dict[int, bytes] = {}
    for tag, value in iter_tlvs(raw):
        if tag in out:
            raise MalformedTlv(f"duplicate tag {tag:#04x}")
        out[tag] = value
    return out


def parse_tlv_list(raw: bytes, tag: int) -> list[bytes]:
    """Values of a concatenation of same-tag TLVs (status listings)."""
    items = []
    for got, value in iter_tlvs(raw):
        if got != tag:
            raise MalformedTlv(f"expected tag {tag:#04x}, got {got:#04x}")
        items.append(value)
    return items

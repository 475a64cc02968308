"""POL1 rules: may a profile be disabled, deleted, or must it be deleted once disabled."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum


class ContradictoryRules(ValueError):
    """delete_on_disable together with delete_disallowed."""


class Verdict(str, Enum):
    ALLOW = "Allow"
    DENY = "Deny"


class Followup(str, Enum):
    NONE = "None"
    DELETE_PROFILE = "DeleteProfile"


@dataclass(frozen=True)
class Pol1:
    disable_disallowed: bool = False
    delete_disallowed: bool = False
    delete_on_disable: bool = False

    def __post_init__(self):
        validate(self)

    @property
    def locked(self) -> bool:
        return self.disable_disallowed

    def to_dict(self) -> dict[str, bool]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Pol1":
        return cls(bool(d.get("disable_disallowed", False)),
                   bool(d.get("delete_disallowed", False)),
                   bool(d.get("delete_on_disable", False)))

    def to_byte(self) -> int:
        return self.disable_disallowed | self.delete_disallowed << 1 | self.delete_on_disable << 2

    @classmethod
    def from_byte(cls, b: int) -> "Pol1":
        if b & ~0x07:
            raise ValueError(f"reserved POL1 bits set: {b:#04x}")
        return cls(bool(b & 1), bool(b & 2), bool(b & 4))


@dataclass(frozen=True)
class PolicyDecision:
    verdict: Verdict
    followup: Followup = Followup.NONE

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW


ALLOW = PolicyDecision(Verdict.ALLOW)
DENY = PolicyDecision(Verdict.DENY)


def validate(p: Pol1) -> None:
    if p.delete_on_disable and p.delete_disallowed:
        raise ContradictoryRules("a profile cannot both forbid deletion and require it on disable")


def check_disable(p: Pol1) -> PolicyDecision:
    if p.disable_disallowed:
        return DENY
    if p.delete_on_disable:
        return PolicyDecision(Verdict.ALLOW, Followup.DELETE_PROFILE)
    return ALLOW


def check_delete(p: Pol1, state: str) -> PolicyDecision:
    """``state`` is the profile state name; an Enabled profile must be disabled first."""
    if p.delete_disallowed or state == "Enabled":
        return DENY
    return ALLOW

"""Round-based simulated transport with scriptable faults and a global trace.

Delivery is FIFO per (src, dst) unless a fault rule delays or duplicates an
envelope. Every send, delivery and fault lands in the trace, so
``len(trace) == sends + deliveries + faults``.

Trace records are JSON objects, one per line::

    {"round", "event", "src", "dst", "layer", "inner", "seq", "digest", "note"[, "body"]}

``event`` is ``send``, ``deliver``, or ``fault:<action>``. Actor-to-actor
(``actor-plain``) sends carry their JSON body verbatim, with key material
replaced by a fingerprint.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional

from .crypto import looks_like_record

OTA_ISDR = "ota-isdr"
DP_ISDP = "dp-isdp"
MNO_PROFILE = "mno-profile"
ACTOR_PLAIN = "actor-plain"
LAYERS = (OTA_ISDR, DP_ISDP, MNO_PROFILE, ACTOR_PLAIN)
NESTED_LAYERS = (DP_ISDP, MNO_PROFILE)

SECRET_FIELDS = frozenset({"k80", "key", "mno_sd_key"})


class NetworkError(Exception):
    pass


class UnknownActor(NetworkError):
    pass


class LayeringViolation(NetworkError):
    pass


@dataclass(frozen=True)
class Envelope:
    src: str
    dst: str
    layer: str
    payload: bytes
    seq: int = 0
    inner: tuple[str, ...] = ()
    label: str = ""
    note: str = ""


class FaultAction(str, Enum):
    DROP = "drop"
    TAMPER = "tamper"
    DUPLICATE = "duplicate"
    DELAY = "delay"


@dataclass
class FaultRule:
    """Fires on the first ``times`` envelopes matching every given field (0 = unlimited)."""

    action: FaultAction
    src: Optional[str] = None
    dst: Optional[str] = None
    seq: Optional[int] = None
    label: Optional[str] = None
    layer: Optional[str] = None
    index: int = 0
    rounds: int = 1
    times: int = 1
    skip: int = 0
    fired: int = 0
    seen: int = 0

    def __post_init__(self):
        self.action = FaultAction(self.action)

    def matches(self, env: Envelope) -> bool:
        if self.times and self.fired >= self.times:
            return False
        for name in ("src", "dst", "seq", "label", "layer"):
            want = getattr(self, name)
            if want is not None and getattr(env, name) != want:
                return False
        self.seen += 1
        return self.seen > self.skip

    def describe(self) -> str:
        extra = {FaultAction.TAMPER: f" index={self.index}", FaultAction.DELAY: f" rounds={self.rounds}"}
        return f"{self.action.value}{extra.get(self.action, '')}"


@dataclass
class FaultPlan:
    rules: list[FaultRule] = field(default_factory=list)

    def add(self, rule: FaultRule) -> FaultRule:
        self.rules.append(rule)
        return rule

    def match(self, env: Envelope) -> Optional[FaultRule]:
        for rule in self.rules:
            if rule.matches(env):
                rule.fired += 1
                return rule
        return None


def tamper(payload: bytes, index: int) -> bytes:
    if not payload:
        return payload
    buf = bytearray(payload)
    buf[index % len(buf)] ^= 0xFF
    return bytes(buf)


def _redact(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: (hashlib.sha256(str(v).encode()).hexdigest()[:16] if k in SECRET_FIELDS else _redact(v))
                for k, v in obj.items()}
    if isinstance(obj, list):
        return [_redact(v) for v in obj]
    return obj


class Network:
    def __init__(self, plan: Optional[FaultPlan] = None):
        self.plan = plan or FaultPlan()
        self.round = 0
        self._actors: dict[str, tuple[str, Any]] = {}
        self._queue: list[tuple[int, int, Envelope]] = []
        self._order = 0
        self._seq = 0
        self._trace: list[dict] = []
        self.inbox: dict[str, list[Envelope]] = {}
        self.counts = {"send": 0, "deliver": 0, "fault": 0}

    # ---- actors

    def register(self, name: str, obj: Any = None, kind: str = "actor") -> None:
        if name in self._actors:
            raise NetworkError(f"actor {name!r} already registered")
        self._actors[name] = (kind, obj)
        self.inbox[name] = []

    def actor(self, name: str) -> Any:
        try:
            return self._actors[name][1]
        except KeyError:
            raise UnknownActor(name) from None

    def kind(self, name: str) -> str:
        try:
            return self._actors[name][0]
        except KeyError:
            raise UnknownActor(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._actors

    # ---- traffic

    def _log(self, event: str, env: Envelope, note: str = "") -> None:
        rec = {
            "round": self.round,
            "event": event,
            "src": env.src,
            "dst": env.dst,
            "layer": env.layer,
            "inner": list(env.inner),
            "seq": env.seq,
            "digest": hashlib.sha256(env.payload).hexdigest()[:16],
            "note": note,
        }
        if event == "send" and env.layer == ACTOR_PLAIN:
            try:
                rec["body"] = _redact(json.loads(env.payload))
            except ValueError:
                rec["body"] = None
        self._trace.append(rec)

    def _check_layering(self, env: Envelope) -> None:
        if env.layer not in LAYERS:
            raise LayeringViolation(f"unknown layer {env.layer!r}")
        if env.layer in NESTED_LAYERS:
            raise LayeringViolation(f"{env.layer} traffic must ride inside {OTA_ISDR}")
        nested = [t for t in env.inner if t in NESTED_LAYERS]
        if nested and env.layer == OTA_ISDR and not looks_like_record(env.payload):
            raise LayeringViolation(f"{nested[0]} payload on the wire outside a secure record")
        if self.kind(env.dst) == "card" and env.layer != OTA_ISDR:
            raise LayeringViolation("card-bound traffic must use the ISD-R channel")

    def _enqueue(self, due: int, env: Envelope) -> None:
        heapq.heappush(self._queue, (due, self._order, env))
        self._order += 1

    def send(self, src: str, dst: str, layer: str, payload: bytes, *, inner=(), label: str = "",
             note: str = "") -> Envelope:
        for name in (src, dst):
            if name not in self._actors:
                raise UnknownActor(name)
        self._seq += 1
        env = Envelope(src, dst, layer, bytes(payload), self._seq, tuple(inner), label, note)
        self._check_layering(env)
        self._log("send", env, " ".join(x for x in (label, note) if x))
        self.counts["send"] += 1
        rule = self.plan.match(env)
        due = self.round + 1
        if rule is None:
            self._enqueue(due, env)
            return env
        self._log(f"fault:{rule.action.value}", env, rule.describe())
        self.counts["fault"] += 1
        if rule.action is FaultAction.DROP:
            return env
        if rule.action is FaultAction.TAMPER:
            self._enqueue(due, replace(env, payload=tamper(env.payload, rule.index)))
        elif rule.action is FaultAction.DUPLICATE:
            self._enqueue(due, env)
            self._enqueue(due, env)
        elif rule.action is FaultAction.DELAY:
            self._enqueue(due + max(0, rule.rounds), env)
        return env

    def step(self) -> list[Envelope]:
        """Advance one round and deliver everything due."""
        self.round += 1
        delivered = []
        while self._queue and self._queue[0][0] <= self.round:
            _, _, env = heapq.heappop(self._queue)
            self._log("deliver", env, env.label)
            self.counts["deliver"] += 1
            self.inbox[env.dst].append(env)
            delivered.append(env)
        return delivered

    def pending(self) -> int:
        return len(self._queue)

    def run_until_idle(self, max_rounds: int = 10_000) -> list[Envelope]:
        out = []
        for _ in range(max_rounds):
            if not self._queue:
                break
            out += self.step()
        return out

    def collect(self, dst: str, seq: int) -> list[Envelope]:
        box = self.inbox[dst]
        got = [e for e in box if e.seq == seq]
        self.inbox[dst] = [e for e in box if e.seq != seq]
        return got

    def transmit(self, src: str, dst: str, layer: str, payload: bytes, **kw) -> list[Envelope]:
        """Send, run the network dry, and return the copies of this envelope that arrived."""
        env = self.send(src, dst, layer, payload, **kw)
        self.run_until_idle()
        return self.collect(dst, env.seq)

    # ---- trace

    def trace(self) -> tuple[dict, ...]:
        return tuple(dict(r) for r in self._trace)

    def trace_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self._trace)

"""Scenario scripts: parse, run, and check expectations.

File format (line oriented; ``#`` starts a comment)::

    scenario <name>
    seed <int>

    [actors]
    eum <name>
    smsr <name> [capacity=<n>]
    smdp <name>
    mno <name>
    device <name>

    [steps]
    [<id>:] <verb> key=value ... [expect=<outcome>]

    [expect]
    <predicate> key=value ...

Steps:

==============  ====================================================================
verb            arguments
==============  ====================================================================
manufacture     card eum
register        card smsr
embed           card device
subscribe       device mno
download        card mno smdp profile [type] [pol1]     (SM-SR = the card's current one)
enable          card profile
disable         card profile
delete          card profile
fallback        card profile flag
update-pol1     card mno rules [profile]
smsr-change     card mno to
fault           action [label src dst seq layer index rounds times skip]
==============  ====================================================================

Every card has the built-in profile alias ``provisioning``. POL1 values are
comma lists of ``lock``, ``no-delete``, ``delete-on-disable`` (or ``none``).
Step outcomes are ``ok``, a status-word name, or an error class name.

Expectations:

=============  ===================================================================
predicate      arguments
=============  ===================================================================
outcome        step is
profile        card profile [state] [fallback] [kind] [isdp]  state may be ``absent``
profiles       card count
eis            smsr card present
eis-matches    card                       EIS inventory equals the card's profiles
eis-pol1       card profile rules         the SM-SR's (possibly stale) POL1 mirror
card-pol1      card profile rules
channel        card smsr live
retired-key    card rejected              records under the pre-handover k80
smdp           smdp holds-key
rolled-back    card step                  card and all registries unchanged by step
invariants     card                       enabled and fallback singletons
trace          contains [present]
=============  ===================================================================
"""

from __future__ import annotations

import hashlib
import json
import random
import shlex
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

from . import crypto, euicc, subman
from .apdu import StatusWord
from .euicc import Eid, Euicc
from .network import FaultAction, FaultRule, Network
from .policy import Pol1

ACTOR_KINDS = ("eum", "smsr", "smdp", "mno", "device")

STEP_SCHEMA: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    # verb: (required, optional)
    "manufacture": (("card", "eum"), ()),
    "register": (("card", "smsr"), ()),
    "embed": (("card", "device"), ()),
    "subscribe": (("device", "mno"), ()),
    "download": (("card", "mno", "smdp", "profile"), ("type", "pol1")),
    "enable": (("card", "profile"), ()),
    "disable": (("card", "profile"), ()),
    "delete": (("card", "profile"), ()),
    "fallback": (("card", "profile", "flag"), ()),
    "update-pol1": (("card", "mno", "rules"), ("profile",)),
    "smsr-change": (("card", "mno", "to"), ()),
    "fault": (("action",), ("label", "src", "dst", "seq", "layer", "index", "rounds", "times", "skip")),
}

EXPECT_SCHEMA: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "outcome": (("step", "is"), ()),
    "profile": (("card", "profile"), ("state", "fallback", "kind", "isdp")),
    "profiles": (("card", "count"), ()),
    "eis": (("smsr", "card", "present"), ()),
    "eis-matches": (("card",), ()),
    "eis-pol1": (("card", "profile", "rules"), ()),
    "card-pol1": (("card", "profile", "rules"), ()),
    "channel": (("card", "smsr", "live"), ()),
    "retired-key": (("card", "rejected"), ()),
    "smdp": (("smdp", "holds-key"), ()),
    "rolled-back": (("card", "step"), ()),
    "invariants": (("card",), ()),
    "trace": (("contains",), ("present",)),
}

# which argument names refer to which namespace
REFS = {"eum": "eum", "smsr": "smsr", "to": "smsr", "smdp": "smdp", "mno": "mno", "device": "device"}

POL1_WORDS = {"lock": "disable_disallowed", "no-delete": "delete_disallowed",
              "delete-on-disable": "delete_on_disable"}


class ScenarioError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ScenarioSyntaxError(ScenarioError):
    pass


class UnknownStep(ScenarioError):
    pass


class DanglingReference(ScenarioError):
    pass


@dataclass
class Step:
    line: int
    id: str
    verb: str
    args: dict[str, str]
    expect: Optional[str] = None

    def text(self) -> str:
        return " ".join([self.verb] + [f"{k}={v}" for k, v in self.args.items()])


@dataclass
class Expectation:
    line: int
    predicate: str
    args: dict[str, str]

    def text(self) -> str:
        return " ".join([self.predicate] + [f"{k}={v}" for k, v in self.args.items()])


@dataclass
class Scenario:
    name: str
    seed: int
    actors: dict[str, tuple[str, dict[str, str]]]
    steps: list[Step]
    expectations: list[Expectation]
    source: str = ""


def parse_pol1(text: str) -> Pol1:
    flags = {}
    for word in filter(None, text.split(",")):
        if word == "none":
            continue
        if word not in POL1_WORDS:
            raise ValueError(f"unknown POL1 word {word!r}")
        flags[POL1_WORDS[word]] = True
    return Pol1(**flags)


def parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _kv(tokens: list[str], line: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise ScenarioSyntaxError(line, f"expected key=value, got {tok!r}")
        if key in out:
            raise ScenarioSyntaxError(line, f"duplicate argument {key!r}")
        out[key] = value
    return out


def _check_args(schema, name, args, line, error=ScenarioSyntaxError):
    required, optional = schema[name]
    missing = [k for k in required if k not in args]
    if missing:
        raise error(line, f"{name}: missing {', '.join(missing)}")
    extra = [k for k in args if k not in required and k not in optional]
    if extra:
        raise error(line, f"{name}: unexpected {', '.join(extra)}")


def parse_scenario(text: str) -> Scenario:
    name, seed = None, 0
    actors: dict[str, tuple[str, dict[str, str]]] = {}
    steps: list[Step] = []
    expectations: list[Expectation] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("actors", "steps", "expect"):
                raise ScenarioSyntaxError(lineno, f"unknown section [{section}]")
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ScenarioSyntaxError(lineno, str(exc)) from None
        head = tokens[0]
        if section is None:
            if head == "scenario" and len(tokens) == 2:
                name = tokens[1]
            elif head == "seed" and len(tokens) == 2:
                try:
                    seed = int(tokens[1])
                except ValueError:
                    raise ScenarioSyntaxError(lineno, f"seed must be an integer: {tokens[1]!r}") from None
            else:
                raise ScenarioSyntaxError(lineno, f"expected 'scenario <name>' or 'seed <n>', got {line!r}")
        elif section == "actors":
            if head not in ACTOR_KINDS:
                raise ScenarioSyntaxError(lineno, f"unknown actor kind {head!r}")
            if len(tokens) < 2:
                raise ScenarioSyntaxError(lineno, f"{head} needs a name")
            if tokens[1] in actors:
                raise ScenarioSyntaxError(lineno, f"actor {tokens[1]!r} declared twice")
            opts = _kv(tokens[2:], lineno)
            if set(opts) - ({"capacity"} if head == "smsr" else set()):
                raise ScenarioSyntaxError(lineno, f"unexpected options for {head}: {sorted(opts)}")
            actors[tokens[1]] = (head, opts)
        elif section == "steps":
            step_id = str(len(steps) + 1)
            if head.endswith(":"):
                step_id = head[:-1]
                tokens = tokens[1:]
                if not tokens:
                    raise ScenarioSyntaxError(lineno, "step id without a step")
            verb = tokens[0]
            if verb not in STEP_SCHEMA:
                raise UnknownStep(lineno, f"unknown step {verb!r}")
            args = _kv(tokens[1:], lineno)
            expect = args.pop("expect", None)
            _check_args(STEP_SCHEMA, verb, args, lineno)
            if any(s.id == step_id for s in steps):
                raise ScenarioSyntaxError(lineno, f"step id {step_id!r} used twice")
            steps.append(Step(lineno, step_id, verb, args, expect))
        else:
            if head not in EXPECT_SCHEMA:
                raise ScenarioSyntaxError(lineno, f"unknown expectation {head!r}")
            args = _kv(tokens[1:], lineno)
            _check_args(EXPECT_SCHEMA, head, args, lineno)
            expectations.append(Expectation(lineno, head, args))
    if name is None:
        raise ScenarioSyntaxError(1, "missing 'scenario <name>' header")
    scenario = Scenario(name, seed, actors, steps, expectations, text)
    _validate(scenario)
    return scenario


def _validate(sc: Scenario) -> None:
    cards: set[str] = set()
    profiles: set[tuple[str, str]] = set()
    step_ids: set[str] = set()

    def ref(kind: str, name: str, line: int):
        got = sc.actors.get(name)
        if got is None or got[0] != kind:
            raise DanglingReference(line, f"{kind} {name!r} is not declared")

    def check(args: dict[str, str], line: int, new_card: bool = False, new_profile: bool = False):
        for key, value in args.items():
            if key in REFS:
                ref(REFS[key], value, line)
        if "card" in args:
            if new_card:
                if args["card"] in cards or args["card"] in sc.actors:
                    raise ScenarioSyntaxError(line, f"card {args['card']!r} already exists")
                cards.add(args["card"])
            elif args["card"] not in cards:
                raise DanglingReference(line, f"card {args['card']!r} is not manufactured")
        if "profile" in args:
            key = (args["card"], args["profile"])
            if new_profile:
                if key in profiles:
                    raise ScenarioSyntaxError(line, f"profile alias {args['profile']!r} reused")
                profiles.add(key)
            elif key not in profiles:
                raise DanglingReference(line, f"profile {args['profile']!r} is not defined on {args['card']!r}")

    for step in sc.steps:
        args = step.args
        try:
            if step.verb == "fault":
                FaultAction(args["action"])
                for key in ("seq", "index", "rounds", "times", "skip"):
                    if key in args:
                        int(args[key])
            if step.verb == "fallback":
                parse_bool(args["flag"])
            if "rules" in args:
                parse_pol1(args["rules"])
            if "pol1" in args:
                parse_pol1(args["pol1"])
        except ValueError as exc:
            raise ScenarioSyntaxError(step.line, str(exc)) from None
        if step.verb == "fault":
            for key in ("src", "dst"):
                if key in args and args[key] not in sc.actors and args[key] not in cards:
                    raise DanglingReference(step.line, f"{key} {args[key]!r} is not declared")
            step_ids.add(step.id)
            continue
        check(args, step.line, new_card=step.verb == "manufacture", new_profile=step.verb == "download")
        if step.verb == "manufacture":
            profiles.add((args["card"], "provisioning"))
        step_ids.add(step.id)

    for exp in sc.expectations:
        args = exp.args
        check(args, exp.line)
        if "step" in args and args["step"] not in step_ids:
            raise DanglingReference(exp.line, f"step {args['step']!r} does not exist")
        try:
            for key in ("present", "live", "rejected", "holds-key", "fallback"):
                if key in args:
                    parse_bool(args[key])
            if "rules" in args:
                parse_pol1(args["rules"])
            if "count" in args:
                int(args["count"])
        except ValueError as exc:
            raise ScenarioSyntaxError(exp.line, str(exc)) from None


# -- running ---------------------------------------------------------------------------

@dataclass
class StepResult:
    id: str
    line: int
    step: str
    outcome: str
    detail: str = ""
    trace_from: int = 0
    trace_to: int = 0


@dataclass
class ExpectationResult:
    line: int
    expectation: str
    passed: bool
    detail: str = ""


@dataclass
class RunReport:
    scenario: str
    seed: int
    passed: bool
    expectations: list[ExpectationResult]
    steps: list[StepResult]
    digests: dict[str, str]
    trace_digest: str
    trace_events: int
    trace_path: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"scenario {self.scenario} (seed {self.seed})"]
        for s in self.steps:
            lines.append(f"  step {s.id:>4} line {s.line:>3}: {s.step:<60} -> {s.outcome}")
        for e in self.expectations:
            mark = "PASS" if e.passed else "FAIL"
            tail = f"  [{e.detail}]" if e.detail and not e.passed else ""
            lines.append(f"  {mark} line {e.line:>3}: {e.expectation}{tail}")
        ok = sum(e.passed for e in self.expectations)
        lines.append(f"{ok}/{len(self.expectations)} expectations passed; trace {self.trace_events} events "
                     f"sha256:{self.trace_digest[:16]}")
        return "\n".join(lines) + "\n"


def outcome_of(exc: Exception) -> tuple[str, str]:
    status = getattr(exc, "status", None)
    name = type(exc).__name__
    if isinstance(status, StatusWord):
        return status.name, f"{name}: {exc}"
    return name, str(exc)


class Simulation:
    """All live objects of one scenario run."""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.net = Network()
        self.ci = crypto.CertificateIssuer(self.rng("ci"))
        self.actors: dict[str, object] = {}
        self.cards: dict[str, Euicc] = {}
        self.eis_seeds: dict[str, euicc.EisSeed] = {}
        self.devices: dict[str, Optional[str]] = {}
        self.card_device: dict[str, str] = {}
        self.subscriptions: dict[str, set[str]] = {}
        self.aliases: dict[tuple[str, str], bytes] = {}
        self.retired: dict[str, crypto.SecureChannelSession] = {}
        self.before: dict[str, str] = {}
        self.after: dict[str, str] = {}
        self.results: list[StepResult] = []
        self._serial = 0
        for name, (kind, opts) in scenario.actors.items():
            if kind == "smsr":
                cap = opts.get("capacity")
                self.actors[name] = subman.SmSr(name, self.net, self.ci, self.rng(name),
                                                capacity=int(cap) if cap is not None else None)
            elif kind == "smdp":
                self.actors[name] = subman.SmDp(name, self.net, self.ci, self.rng(name))
            elif kind == "mno":
                self.actors[name] = subman.Mno(name, self.net, self.rng(name))
            elif kind == "eum":
                self.actors[name] = name
            elif kind == "device":
                self.devices[name] = None

    def rng(self, name: str) -> random.Random:
        return random.Random(f"{self.seed}:{name}")

    # ---- lookup

    def eid(self, card: str) -> Eid:
        return self.cards[card].eid

    def smsrs(self) -> list[subman.SmSr]:
        return [a for a in self.actors.values() if isinstance(a, subman.SmSr)]

    def current_smsr(self, card: str) -> subman.SmSr:
        eid = self.eid(card)
        for smsr in self.smsrs():
            if eid in smsr.registry:
                return smsr
        raise subman.UnknownEid(f"no SM-SR manages {card}")

    def aid(self, card: str, alias: str) -> bytes:
        try:
            return self.aliases[(card, alias)]
        except KeyError:
            raise euicc.NotFound(f"profile {alias!r} was never installed on {card}") from None

    def state_fingerprint(self) -> str:
        cards = {name: c.snapshot() for name, c in sorted(self.cards.items())}
        regs = {s.name: {str(eid): r.to_dict() for eid, r in sorted(s.registry.items())} for s in self.smsrs()}
        return json.dumps({"cards": cards, "registries": regs}, sort_keys=True)

    # ---- steps

    def apply(self, step: Step) -> None:
        a = step.args
        v = step.verb
        if v == "manufacture":
            self._serial += 1
            card, seed = euicc.manufacture(Eid.from_serial(self._serial), self.ci, self.rng(a["card"]),
                                           eum_id=a["eum"])
            self.cards[a["card"]] = card
            self.eis_seeds[a["card"]] = seed
            self.aliases[(a["card"], "provisioning")] = seed.provisioning["isdp"]
        elif v == "register":
            subman.smsr_register(self.actors[a["smsr"]], subman.EisRecord.from_seed(self.eis_seeds[a["card"]]))
        elif v == "embed":
            if a["card"] in self.card_device:
                raise subman.SubmanError(f"{a['card']} is already embedded")
            self.card_device[a["card"]] = a["device"]
            self.devices[a["device"]] = a["card"]
            self.net.register(str(self.eid(a["card"])), self.cards[a["card"]], kind="card")
        elif v == "subscribe":
            self.subscriptions.setdefault(a["mno"], set()).add(a["device"])
        elif v == "download":
            device = self.card_device.get(a["card"])
            if device is None:
                raise subman.LinkError(f"{a['card']} is not embedded in a device yet")
            if device not in self.subscriptions.get(a["mno"], set()):
                raise subman.SubmanError(f"{device} has no subscription with {a['mno']}")
            req = subman.DownloadRequest(self.eid(a["card"]), a.get("type", "m2m"), a["mno"],
                                         parse_pol1(a["pol1"]) if "pol1" in a else None)
            aid = subman.download_profile(self.actors[a["mno"]], self.actors[a["smdp"]],
                                          self.current_smsr(a["card"]), req)
            self.aliases[(a["card"], a["profile"])] = aid
        elif v in ("enable", "disable", "delete"):
            smsr = self.current_smsr(a["card"])
            op = {"enable": smsr.enable_profile, "disable": smsr.disable_profile,
                  "delete": smsr.delete_profile}[v]
            op(self.eid(a["card"]), self.aid(a["card"], a["profile"]))
        elif v == "fallback":
            self.current_smsr(a["card"]).set_fallback(self.eid(a["card"]), self.aid(a["card"], a["profile"]),
                                                      parse_bool(a["flag"]))
        elif v == "update-pol1":
            aid = self.aid(a["card"], a["profile"]) if "profile" in a else None
            subman.mno_update_policy(self.actors[a["mno"]], self.current_smsr(a["card"]),
                                     self.eid(a["card"]), parse_pol1(a["rules"]), aid=aid)
        elif v == "smsr-change":
            old = self.current_smsr(a["card"])
            self.retired[a["card"]] = subman.smsr_change(self.actors[a["mno"]], old, self.actors[a["to"]],
                                                         self.eid(a["card"]))
        elif v == "fault":
            kw = {k: a[k] for k in ("label", "layer") if k in a}
            for key in ("src", "dst"):
                if key in a:
                    kw[key] = str(self.eid(a[key])) if a[key] in self.cards else a[key]
            for key in ("seq", "index", "rounds", "times", "skip"):
                if key in a:
                    kw[key] = int(a[key])
            self.net.plan.add(FaultRule(FaultAction(a["action"]), **kw))

    def run_steps(self) -> None:
        for step in self.scenario.steps:
            start = len(self.net.trace())
            self.before[step.id] = self.state_fingerprint()
            try:
                self.apply(step)
                outcome, detail = "ok", ""
            except Exception as exc:  # runtime failures become outcomes, never crashes
                outcome, detail = outcome_of(exc)
            self.after[step.id] = self.state_fingerprint()
            self.results.append(StepResult(step.id, step.line, step.text(), outcome, detail,
                                           start, len(self.net.trace())))

    # ---- expectations

    def check(self, exp: Expectation) -> tuple[bool, str]:
        a = exp.args
        p = exp.predicate
        if p == "outcome":
            res = next(r for r in self.results if r.id == a["step"])
            ok = res.outcome == a["is"] or res.detail.split(":", 1)[0] == a["is"]
            return ok, f"step {res.id} outcome {res.outcome} ({res.detail}); trace events {res.trace_from}..{res.trace_to}"
        if p == "trace":
            hit = any(a["contains"] in f"{r['event']} {r['note']}" for r in self.net.trace())
            want = parse_bool(a.get("present", "true"))
            return hit == want, f"'{a['contains']}' {'found' if hit else 'not found'} in trace"
        if p == "smdp":
            holds = self.actors[a["smdp"]].holds_key()
            return holds == parse_bool(a["holds-key"]), f"holds key: {holds}"
        if p == "eis":
            present = self.eid(a["card"]) in self.actors[a["smsr"]].registry
            return present == parse_bool(a["present"]), f"registered: {present}"
        if p == "rolled-back":
            same = self.before[a["step"]] == self.after[a["step"]]
            return same, "state unchanged" if same else "state differs from before the step"
        card = self.cards[a["card"]]
        if p == "invariants":
            enabled = sum(pr.state is euicc.ProfileState.ENABLED for pr in card.profiles.values())
            flagged = [pr for pr in card.profiles.values() if pr.fallback]
            ok = enabled == 1 and len(flagged) <= 1 and all(pr.state is euicc.ProfileState.DISABLED for pr in flagged)
            return ok, f"{enabled} enabled, {len(flagged)} fallback"
        if p == "profiles":
            n = len(card.profiles)
            return n == int(a["count"]), f"{n} profiles"
        if p == "channel":
            smsr = self.actors[a["smsr"]]
            live = card.eid in smsr.registry and smsr.ping(card.eid)
            return live == parse_bool(a["live"]), f"channel live: {live}"
        if p == "retired-key":
            old = self.retired.get(a["card"])
            if old is None:
                return False, "no handover happened"
            probe = crypto.SecureChannelSession(old.key, old.side, old.peer, old.send_counter, old.recv_counter)
            reply = card.receive(crypto.sc_wrap(probe, bytes.fromhex("80F20000"), card.eid.raw).encode())
            rejected = reply == StatusWord.SECURITY_STATUS_NOT_SATISFIED.to_bytes(2, "big")
            return rejected == parse_bool(a["rejected"]), f"retired key rejected: {rejected}"
        if p == "eis-matches":
            smsr = self.current_smsr(a["card"])
            eis = {e.isdp: (e.state, e.fallback) for e in smsr.registry[card.eid].profiles}
            real = {aid: (pr.state.value, pr.fallback) for aid, pr in card.profiles.items()}
            return eis == real, "EIS inventory matches" if eis == real else f"EIS {len(eis)} vs card {len(real)}"
        aid = self.aliases.get((a["card"], a["profile"]))
        prof = card.profiles.get(aid) if aid is not None else None
        if p == "eis-pol1":
            entry = self.current_smsr(a["card"]).registry[card.eid].entry(aid) if aid else None
            want = parse_pol1(a["rules"])
            return entry is not None and entry.pol1_mirror == want, f"mirror {entry.pol1_mirror if entry else None}"
        if p == "card-pol1":
            want = parse_pol1(a["rules"])
            return prof is not None and prof.pol1 == want, f"card POL1 {prof.pol1 if prof else None}"
        if p == "profile":
            if a.get("state") == "absent":
                return prof is None, "absent" if prof is None else f"present ({prof.state.value})"
            if prof is None:
                return False, "profile absent"
            problems = []
            if "state" in a and prof.state.value != a["state"]:
                problems.append(f"state {prof.state.value}")
            if "fallback" in a and prof.fallback != parse_bool(a["fallback"]):
                problems.append(f"fallback {prof.fallback}")
            if "kind" in a and prof.kind.value != a["kind"]:
                problems.append(f"kind {prof.kind.value}")
            if "isdp" in a and card.isdps[aid].state.value != a["isdp"]:
                problems.append(f"ISD-P {card.isdps[aid].state.value}")
            return not problems, ", ".join(problems) or f"{prof.state.value}, fallback={prof.fallback}"
        raise AssertionError(f"unhandled predicate {p}")

    def evaluate(self) -> list[ExpectationResult]:
        out = []
        inline = [Expectation(s.line, "outcome", {"step": s.id, "is": s.expect})
                  for s in self.scenario.steps if s.expect is not None]
        for exp in inline + self.scenario.expectations:
            try:
                ok, detail = self.check(exp)
            except Exception as exc:
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            out.append(ExpectationResult(exp.line, exp.text(), bool(ok), detail))
        out.sort(key=lambda r: r.line)
        return out

    def digests(self) -> dict[str, str]:
        out = {}
        for name, card in sorted(self.cards.items()):
            out[f"card:{name}"] = hashlib.sha256(card.snapshot_text().encode()).hexdigest()
        for smsr in self.smsrs():
            body = json.dumps({str(e): r.to_dict() for e, r in sorted(smsr.registry.items())}, sort_keys=True)
            out[f"smsr:{smsr.name}"] = hashlib.sha256(body.encode()).hexdigest()
        return out


def run(scenario: Scenario, seed: Optional[int] = None, trace_path: Optional[str] = None,
        preload: Optional[list[tuple[str, subman.EisRecord]]] = None) -> tuple[RunReport, Simulation]:
    sim = Simulation(scenario, seed)
    for smsr_name, record in preload or []:
        target = sim.actors.get(smsr_name)
        if isinstance(target, subman.SmSr) and record.eid not in target.registry:
            target.register(record)
    sim.run_steps()
    results = sim.evaluate()
    lines = sim.net.trace_lines()
    if trace_path is not None:
        write_trace(trace_path, scenario, sim.seed, lines)
    report = RunReport(
        scenario=scenario.name,
        seed=sim.seed,
        passed=all(r.passed for r in results),
        expectations=results,
        steps=sim.results,
        digests=sim.digests(),
        trace_digest=hashlib.sha256(lines.encode()).hexdigest(),
        trace_events=len(sim.net.trace()),
        trace_path=str(trace_path) if trace_path is not None else None,
    )
    return report, sim


def write_trace(path, scenario: Scenario, seed: int, lines: str) -> None:
    """First line is a header carrying the scenario source so the run can be replayed."""
    header = json.dumps({"meta": {"format": 1, "scenario": scenario.name, "seed": seed,
                                  "source": scenario.source}}, sort_keys=True)
    Path(path).write_text(header + "\n" + lines, encoding="utf-8")


def replay(path) -> tuple[bool, RunReport]:
    """Re-run the scenario recorded in a trace file; True when the new trace is identical."""
    text = Path(path).read_text(encoding="utf-8")
    header, _, recorded = text.partition("\n")
    meta = json.loads(header)["meta"]
    scenario = parse_scenario(meta["source"])
    report, sim = run(scenario, seed=meta["seed"])
    return sim.net.trace_lines() == recorded, report


def load(path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def shipped(name: str) -> Path:
    """Path of a scenario fixture bundled with the package."""
    return Path(__file__).parent / "scenarios" / f"{name}.scn"

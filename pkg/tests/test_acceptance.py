"""The eight acceptance criteria, each at its stated size and time limit.

Every test records one PASS/FAIL line; conftest prints them after the run.
"""

from __future__ import annotations

import random
import time
from pathlib import Path

import pytest

from conftest import ACCEPTANCE
from euiccsim import crypto
from euiccsim import scenario as sc
from euiccsim.apdu import (
    ApduCommand,
    ApduError,
    ApduResponse,
    StatusWord,
    decode_command,
    decode_response,
    encode_command,
    encode_response,
    parse_tlvs,
)
from euiccsim.crypto import (
    BadCertificate,
    BadSignature,
    ChallengeMismatch,
    ChannelError,
    ReplayDetected,
    StaleChallenge,
)
from euiccsim.policy import ContradictoryRules, Pol1, check_delete, check_disable

from support import ecka_parties, random_sequence_check
from test_policy import card_outcome, oracle_rows

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def record(request):
    """Call with (n, ok, detail); also fails the test when ok is False."""
    def _record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, ACCEPTANCE[n]
    return _record


# 1 ---------------------------------------------------------------------------

def _random_command(rng: random.Random) -> ApduCommand:
    size = rng.choice([0, rng.randint(1, 255), rng.randint(256, 2000), rng.randint(2000, 65535)])
    le = rng.choice([None, rng.randint(1, 256), rng.randint(257, 65536)])
    return ApduCommand(rng.randrange(256), rng.randrange(256), rng.randrange(256), rng.randrange(256),
                       rng.randbytes(size), le)


def test_criterion_1_apdu_codec(record):
    rng = random.Random(1)
    start = time.perf_counter()
    mismatches = panics = 0
    for _ in range(10_000):
        cmd = _random_command(rng)
        if decode_command(encode_command(cmd)) != cmd:
            mismatches += 1
        resp = ApduResponse(rng.randbytes(rng.randint(0, 300)), rng.choice(list(StatusWord)))
        if decode_response(encode_response(resp)) != resp:
            mismatches += 1
    for i in range(10_000):
        n = rng.randint(0, 65536) if i % 10 == 0 else rng.randint(0, 300)
        raw = rng.randbytes(n)
        for decode in (decode_command, decode_response, parse_tlvs):
            try:
                decode(raw)
            except ApduError:
                pass
            except Exception:  # anything else counts as a panic
                panics += 1
    elapsed = time.perf_counter() - start
    record(1, mismatches == 0 and panics == 0 and elapsed < 10,
           f"APDU codec: 20000 round-trips, {mismatches} mismatches; 10000 arbitrary inputs, "
           f"{panics} panics; {elapsed:.1f}s (< 10s)")


# 2 ---------------------------------------------------------------------------

def _no_key_material(dp, card) -> bool:
    return dp.ephemeral is None and dp.secret is None and card.challenge is None and card.secret is None


def _mutated_run(i: int, old_d: bytes):
    """One ECKA run with one transcript mutation; returns (expected, raised, clean)."""
    dp, card, cert, rng, _ = ecka_parties(10_000 + i)
    kind = i % 6
    seen: dict[str, bytes] = {}

    def flip(msg: bytes, pos: int) -> bytes:
        b = bytearray(msg)
        b[pos % len(b)] ^= 1 + (i % 255)
        return bytes(b)

    if kind == 0:  # tamper the DP certificate
        expected, channel = BadCertificate, lambda s, m: flip(m, i * 7) if s == "b" else m
    elif kind == 1:  # tamper the challenge on its way to the DP
        expected, channel = ChallengeMismatch, lambda s, m: flip(m, i) if s == "c" else m
    elif kind == 2:  # tamper step (d); the expected error depends on the field hit
        pos_box = {}

        def channel(s, m):
            if s != "d":
                return m
            pos = (i * 13) % len(m)
            pos_box["pos"] = pos
            return flip(m, pos)
        expected = None
    elif kind == 3:  # replay an old step (d) into a fresh exchange
        expected, channel = ChallengeMismatch, lambda s, m: old_d if s == "d" else m
    elif kind == 4:  # misorder: the certificate message arrives where (d) is expected
        def channel(s, m):
            seen[s] = m
            return seen["b"] if s == "d" else m
        expected = BadSignature
    else:  # misorder: (d) reaches a card with no exchange open
        raised = None
        try:
            card.receive_ephemeral(old_d)
        except Exception as exc:
            raised = exc
        return StaleChallenge, raised, _no_key_material(dp, card)

    try:
        crypto.ecka_run(dp, card, cert, rng, channel=channel)
        raised = None
    except Exception as exc:
        raised = exc
    if kind == 2:
        # step (d) is LV(ephemeral 32) || LV(challenge 16) || LV(signature 64)
        pos = pos_box["pos"]
        expected = ChallengeMismatch if 36 <= pos < 52 else BadSignature
    return expected, raised, _no_key_material(dp, card)


def test_criterion_2_ecka(record):
    start = time.perf_counter()
    honest_ok = 0
    last_d = None
    for i in range(1000):
        dp, card, cert, rng, _ = ecka_parties(i)
        log = []
        k_dp, k_card = crypto.ecka_run(dp, card, cert, rng, log=log)
        honest_ok += k_dp == k_card and _no_key_material(dp, card)
        last_d = dict(log)["d"]
    correct = 0
    wrong = []
    for i in range(1000):
        expected, raised, clean = _mutated_run(i, last_d)
        if type(raised) is expected and clean:
            correct += 1
        else:
            wrong.append((i, expected.__name__, type(raised).__name__, clean))
    elapsed = time.perf_counter() - start
    record(2, honest_ok == 1000 and correct == 1000 and elapsed < 30,
           f"ECKA: {honest_ok}/1000 honest runs agree; {correct}/1000 mutated runs abort with the "
           f"expected error and no key material{'; first miss ' + str(wrong[0]) if wrong else ''}; "
           f"{elapsed:.1f}s (< 30s)")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_secure_channel(record):
    rng = random.Random(3)
    start = time.perf_counter()
    key = crypto.generate_symmetric_key(rng, crypto.ROLE_K80)
    card, remote = crypto.session_pair(key)
    mutations = rejected = replays = replay_rejected = clean = 0
    for _ in range(1000):
        ad = rng.randbytes(16)
        rec = crypto.sc_wrap(remote, rng.randbytes(rng.randint(0, 200)), ad).encode()
        positions = rng.sample(range(len(rec)), 10) + [0, 1, 8, len(rec) - 1]
        for pos in positions:
            bad = bytearray(rec)
            bad[pos] ^= rng.randint(1, 255)
            mutations += 1
            try:
                crypto.sc_unwrap(card, bytes(bad), ad)
            except ChannelError:
                rejected += 1
        try:
            crypto.sc_unwrap(card, rec, ad)
            clean += 1
        except ChannelError:
            pass
        replays += 1
        try:
            crypto.sc_unwrap(card, rec, ad)
        except ReplayDetected:
            replay_rejected += 1
    elapsed = time.perf_counter() - start
    record(3, rejected == mutations and replay_rejected == replays == 1000 and clean == 1000 and elapsed < 30,
           f"secure channel: {rejected}/{mutations} mutations rejected; {replay_rejected}/{replays} replays "
           f"rejected; {clean}/1000 untouched records accepted; {elapsed:.1f}s (< 30s)")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_card_vs_reference(record):
    start = time.perf_counter()
    steps = 0
    failure = ""
    for seed in range(5000):
        try:
            steps += random_sequence_check(seed, max_len=20, max_profiles=3)
        except AssertionError as exc:
            failure = str(exc)
            break
    elapsed = time.perf_counter() - start
    record(4, not failure,
           f"card vs reference model: 5000 sequences (len <= 20, <= 3 profiles), {steps} steps, "
           f"invariants checked after each; {failure or 'no divergence'}; {elapsed:.1f}s")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_pol1_table(record):
    rows = oracle_rows()
    agree = invalid = 0
    for row in rows:
        flags = tuple(row[k] == "1" for k in ("disable_disallowed", "delete_disallowed", "delete_on_disable"))
        if row["policy"] == "Invalid":
            try:
                Pol1(*flags)
            except ContradictoryRules:
                invalid += 1
            continue
        rules = Pol1(*flags)
        d = check_disable(rules) if row["action"] == "disable" else check_delete(rules, row["state"])
        status, removed = card_outcome(rules, row["action"], row["state"])
        agree += (d.verdict.value == row["policy"] and d.followup.value == row["followup"]
                  and status == int(row["card"], 16) and removed == (row["removed"] == "1"))
    combos_rejected = invalid // 4  # each invalid combination has 4 rows (2 actions x 2 states)
    record(5, agree == 24 and invalid == 8 and len(rows) == 32,
           f"POL1: {agree}/24 valid rows match the oracle table (policy and card); "
           f"{combos_rejected}/2 contradictory combinations rejected at construction")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_download(record):
    report, sim = sc.run(sc.load(sc.shipped("lifecycle")))
    card = sim.cards["c1"]
    aid = sim.aliases[("c1", "opB")]
    isdp = card.isdps[aid]
    entry = sim.current_smsr("c1").registry[card.eid].entry(aid)
    flagship = (isdp.state.value == "Personalized" and isdp.profile.state.value == "Disabled"
                and entry is not None and entry.state == "Disabled"
                and not sim.actors["smdp1"].holds_key() and report.passed)
    faults = {}
    for step in (3, 5, 6):
        r, _ = sc.run(sc.load(sc.shipped(f"download_fault_step{step}")))
        rolled = [e for e in r.expectations if e.expectation.startswith("rolled-back")]
        faults[step] = r.passed and len(rolled) == 1 and rolled[0].passed
    record(6, flagship and all(faults.values()),
           f"download: flagship ends Personalized/Disabled with matching EIS and no SM-DP key: {flagship}; "
           f"rollback on fault at step 3/5/6: {faults[3]}/{faults[5]}/{faults[6]}")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_handover(record):
    report, sim = sc.run(sc.load(sc.shipped("lifecycle")))
    by_text = {e.expectation: e.passed for e in report.expectations}
    success = (by_text["retired-key card=c1 rejected=true"]
               and by_text["eis smsr=smsr1 card=c1 present=false"]
               and by_text["channel card=c1 smsr=smsr2 live=true"])
    failures = {}
    for name in ("handover_refused", "handover_step5_fault"):
        r, s = sc.run(sc.load(sc.shipped(name)))
        failures[name] = r.passed and any(e.expectation.startswith("rolled-back") and e.passed
                                          for e in r.expectations)
    record(7, success and all(failures.values()),
           f"handover: old-key records rejected and old registry cleared: {success}; "
           f"step-2 refusal unchanged: {failures['handover_refused']}; "
           f"step-5 fault unchanged: {failures['handover_step5_fault']}")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism(record):
    start = time.perf_counter()
    lifecycle = sc.load(sc.shipped("lifecycle"))
    r1, s1 = sc.run(lifecycle)
    r2, s2 = sc.run(lifecycle)
    identical = s1.net.trace_lines() == s2.net.trace_lines() and r1.to_json() == r2.to_json()
    suite = sorted((Path(sc.__file__).parent / "scenarios").glob("*.scn")) + sorted(FIXTURES.glob("*.scn"))
    for path in suite:
        sc.run(sc.load(path))
    elapsed = time.perf_counter() - start
    record(8, identical and elapsed < 60,
           f"determinism: lifecycle twice -> identical trace ({len(s1.net.trace())} events) and report: "
           f"{identical}; full suite of {len(suite)} scenarios in {elapsed:.1f}s (< 60s)")

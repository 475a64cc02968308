"""Shared helpers: cards with profiles installed without a full download."""

from __future__ import annotations

import random

from euiccsim import crypto
from euiccsim.apdu import CLA_PROPRIETARY, ApduCommand, Ins, Tag, build_tlvs
from euiccsim.crypto import SecureChannelSession, generate_symmetric_key
from euiccsim.euicc import Eid, Euicc, Profile, ProfileKind, manufacture
from euiccsim.policy import Pol1

from oracles.card_model import Model


def fresh_card(seed: int = 0, serial: int = 1) -> tuple[Euicc, crypto.CertificateIssuer, random.Random]:
    rng = random.Random(f"test:{seed}")
    ci = crypto.CertificateIssuer(rng)
    card, _ = manufacture(Eid.from_serial(serial), ci, rng)
    return card, ci, rng


def install(card: Euicc, rng: random.Random, pol1: Pol1 = Pol1(), mno_id: str = "mno",
            naa: bytes = b"naa") -> tuple[bytes, SecureChannelSession]:
    """Create an ISD-P, hand it a credentials key, and install a sealed profile.

    Returns the AID and the MNO's side of the MNO-SD channel.
    """
    aid = card.create_isdp()
    key = generate_symmetric_key(rng, crypto.ROLE_PMC)
    card.isdps[aid].install_session = SecureChannelSession(key, crypto.SIDE_CARD, "smdp")
    remote = SecureChannelSession(key, crypto.SIDE_REMOTE, str(card.eid))
    profile = Profile(mno_id, ProfileKind.OPERATIONAL, generate_symmetric_key(rng, crypto.ROLE_MNO_SD),
                      pol1, naa_params=naa)
    card.install_profile(aid, crypto.sc_wrap(remote, profile.to_package(), aid).encode())
    return aid, SecureChannelSession(profile.mno_sd_key, crypto.SIDE_REMOTE, str(card.eid))


def cmd(ins: Ins, items=(), p1: int = 0) -> ApduCommand:
    return ApduCommand(CLA_PROPRIETARY, ins, p1, 0, build_tlvs(items))


def pol1_cmd(aid: bytes, mno: SecureChannelSession, rules: Pol1) -> ApduCommand:
    sealed = crypto.sc_wrap(mno, build_tlvs([(Tag.POL1, bytes([rules.to_byte()]))]), aid).encode()
    return cmd(Ins.UPDATE_POL1, [(Tag.AID, aid), (Tag.SEALED, sealed)])


def project(card: Euicc, slot_of: dict[bytes, int]) -> dict[int, tuple]:
    """The card's profiles in the reference model's shape."""
    out = {}
    for aid, p in card.profiles.items():
        out[slot_of[aid]] = (p.state.value == "Enabled", p.fallback, p.pol1.disable_disallowed,
                             p.pol1.delete_disallowed, p.pol1.delete_on_disable)
    return dict(sorted(out.items()))


def check_invariants(card: Euicc) -> None:
    enabled = [p for p in card.profiles.values() if p.state.value == "Enabled"]
    flagged = [p for p in card.profiles.values() if p.fallback]
    assert len(enabled) == 1, f"{len(enabled)} enabled profiles"
    assert len(flagged) <= 1, f"{len(flagged)} fallback profiles"
    assert all(p.state.value == "Disabled" for p in flagged)


DEAD_AID = bytes.fromhex("A0000005591010FFFFFFFF89001000FF")
VALID_POL1 = [Pol1(a, b, c) for a in (False, True) for b in (False, True) for c in (False, True) if not (b and c)]


def random_sequence_check(seed: int, max_len: int = 20, max_profiles: int = 3) -> int:
    """Drive card and reference model with one random sequence; returns steps run."""
    rng = random.Random(seed)
    card, _, crng = fresh_card(seed)
    model = Model()
    slot_of = {card.provisioning_aid: 0}
    aid_of = {0: card.provisioning_aid}
    mno = {0: SecureChannelSession(card.profiles[card.provisioning_aid].mno_sd_key, crypto.SIDE_REMOTE)}
    next_slot = 1
    steps = rng.randint(1, max_len)
    for _ in range(steps):
        op = rng.choice(["install", "enable", "disable", "delete", "fallback", "pol1", "enable", "disable"])
        # slots may point at deleted profiles, and one slot past the end is never installed
        slot = rng.randint(0, next_slot)
        aid = aid_of.get(slot, DEAD_AID)
        if op == "install":
            if len(card.profiles) - 1 >= max_profiles:
                continue
            rules = rng.choice(VALID_POL1)
            aid, session = install(card, crng, rules)
            # the card reuses the AIDs of deleted ISD-Ps; stale slots must stop resolving
            for s, a in list(aid_of.items()):
                if a == aid:
                    aid_of[s] = DEAD_AID
            slot = next_slot
            next_slot += 1
            slot_of[aid], aid_of[slot], mno[slot] = slot, aid, session
            want = model.install(slot, rules.disable_disallowed, rules.delete_disallowed, rules.delete_on_disable)
            got = 0x9000
        elif op == "pol1":
            rules = rng.choice(VALID_POL1)
            session = mno.get(slot) or SecureChannelSession(generate_symmetric_key(crng, crypto.ROLE_MNO_SD),
                                                            crypto.SIDE_REMOTE)
            got = card.process_apdu(pol1_cmd(aid, session, rules)).status
            want = model.update_pol1(slot, rules.disable_disallowed, rules.delete_disallowed,
                                     rules.delete_on_disable)
        else:
            if op == "fallback":
                flag = rng.random() < 0.7
                c = cmd(Ins.SET_FALLBACK, [(Tag.AID, aid), (Tag.FLAG, b"\x01" if flag else b"\x00")])
                want = model.set_fallback(slot, flag)
            else:
                ins = {"enable": Ins.ENABLE, "disable": Ins.DISABLE, "delete": Ins.DELETE}[op]
                c = cmd(ins, [(Tag.AID, aid)])
                want = getattr(model, op)(slot)
            before = card.snapshot_text()
            got = card.process_apdu(c).status
            if got != 0x9000:
                assert card.snapshot_text() == before, f"failed {op} changed card state"
        assert int(got) == want, f"seed {seed}: {op} slot {slot}: card {int(got):04X} model {want:04X}"
        assert project(card, slot_of) == model.view(), f"seed {seed}: state diverged after {op} {slot}"
        check_invariants(card)
    return steps


def ecka_parties(seed: int, context: str = "pmc"):
    """A DP and a card side ready for key agreement, plus the card's certificate."""
    rng = random.Random(f"ecka:{seed}")
    ci = crypto.CertificateIssuer(rng)
    dp_keys = crypto.generate_keypair(rng, crypto.SIG_SCHEME)
    card_keys = crypto.generate_keypair(rng, crypto.KA_SCHEME)
    card_cert = ci.certify("euicc:test", card_keys.public)
    dp = crypto.DpEcka(context=context, certificate=ci.certify("smdp:test", dp_keys.public),
                       signing_key=dp_keys.private, ci_root=ci.root)
    card = crypto.CardEcka(context=context, ci_root=ci.root, static_key=card_keys.private,
                           expected_peer_prefix="smdp:")
    return dp, card, card_cert, rng, ci

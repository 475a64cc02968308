"""Off-card actors (SM-SR, SM-DP, MNO) and the procedures they run together.

Actors only talk through :class:`~euiccsim.network.Network`. Actor-to-actor
messages are versioned JSON envelopes (``{"v": 1, "type": ..., ...}``);
card-bound traffic is APDUs inside k80 records on the ``ota-isdr`` layer.

Procedure steps map onto envelope labels, which fault rules can target:

========================  ================================================
download step             label
========================  ================================================
1 request to SM-DP        ``DownloadProfile``
2 ISD-P request to SM-SR  ``CreateIsdpRequest``
3 ISD-P creation          ``CREATE_ISDP``
4 key agreement           ``GetEisCertificate``, ``ESTABLISH_KEY``
5 sealed profile to SR    ``PROFILE_TRANSFER``
6 upload to the card      ``INSTALL_PROFILE``
========================  ================================================

``smsr_change`` uses ``SmsrChangeNotice``, ``SmsrChangeAck``,
``SmsrChangeRequest``, ``EisHandover``, ``ESTABLISH_KEY``,
``REPLACE_SMSR_KEY`` and ``HandoverComplete`` (``CANCEL_KEY`` on abort).
"""

from __future__ import annotations

import contextlib
import copy
import json
import random
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import crypto
from .apdu import (
    CLA_PROPRIETARY,
    ApduCommand,
    ApduError,
    ApduResponse,
    Ins,
    StatusWord,
    Tag,
    build_tlvs,
    decode_command,
    decode_response,
    encode_command,
    encode_response,
    parse_tlv_list,
    parse_tlvs,
)
from .crypto import Certificate, SecureChannelSession, SymmetricKey
from .euicc import ISDR_AID, Eid, EisSeed, Profile, ProfileKind, isdp_aid, isdp_index
from .network import ACTOR_PLAIN, DP_ISDP, MNO_PROFILE, OTA_ISDR, Network, NetworkError
from .policy import Pol1

PROTOCOL_VERSION = 1


class SubmanError(Exception):
    status: Optional[StatusWord] = None


class DuplicateEid(SubmanError):
    pass


class UnknownEid(SubmanError):
    pass


class Busy(SubmanError):
    pass


class LinkError(SubmanError):
    """A message or its answer never arrived intact."""


class CommandRejected(SubmanError):
    def __init__(self, status: StatusWord, what: str = ""):
        super().__init__(f"{what or 'command'} rejected: {status.name} ({int(status):04X})")
        self.status = status


class NotEnabled(CommandRejected):
    pass


class SecurityRejected(CommandRejected):
    pass


class NotOwner(SubmanError):
    status = StatusWord.SECURITY_STATUS_NOT_SATISFIED


class IsdpCreationFailed(SubmanError):
    pass


class KeyAgreementFailed(SubmanError):
    pass


class InstallRejected(SubmanError):
    pass


class CapabilityRefused(SubmanError):
    pass


class EstablishmentFailed(SubmanError):
    pass


def rejected(resp: ApduResponse, what: str) -> CommandRejected:
    if resp.status == StatusWord.SECURITY_STATUS_NOT_SATISFIED:
        return SecurityRejected(resp.status, what)
    if resp.status == StatusWord.CONDITIONS_NOT_SATISFIED:
        return NotEnabled(resp.status, what) if what == "UPDATE_POL1" else CommandRejected(resp.status, what)
    return CommandRejected(resp.status, what)


def _cmd(ins: Ins, items=(), p1: int = 0) -> ApduCommand:
    return ApduCommand(CLA_PROPRIETARY, ins, p1, 0, build_tlvs(items))


# -- EIS ------------------------------------------------------------------------------

STATE_NAMES = {0: "Created", 1: "Disabled", 2: "Enabled"}


@dataclass
class EisProfileEntry:
    isdp: bytes
    mno_id: str
    state: str
    kind: str = ProfileKind.OPERATIONAL.value
    fallback: bool = False
    pol1_mirror: Pol1 = field(default_factory=Pol1)

    def to_dict(self) -> dict:
        return {"isdp": self.isdp.hex().upper(), "mno_id": self.mno_id, "state": self.state,
                "kind": self.kind, "fallback": self.fallback, "pol1": self.pol1_mirror.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "EisProfileEntry":
        return cls(bytes.fromhex(d["isdp"]), d["mno_id"], d["state"], d.get("kind", "Operational"),
                   bool(d.get("fallback", False)), Pol1.from_dict(d.get("pol1", {})))


@dataclass
class EisRecord:
    eid: Eid
    eum_id: str
    production_date: str
    euicc_certificate: Certificate
    k80: SymmetricKey
    profiles: list[EisProfileEntry] = field(default_factory=list)

    @property
    def euicc_public_key(self) -> crypto.PublicKey:
        return self.euicc_certificate.public_key

    @classmethod
    def from_seed(cls, seed: EisSeed) -> "EisRecord":
        p = seed.provisioning
        entry = EisProfileEntry(p["isdp"], p["mno_id"], p["state"], p["kind"], False, p["pol1"])
        return cls(seed.eid, seed.eum_id, seed.production_date, seed.euicc_certificate, seed.k80, [entry])

    def entry(self, aid: bytes) -> Optional[EisProfileEntry]:
        for e in self.profiles:
            if e.isdp == aid:
                return e
        return None

    @property
    def enabled(self) -> Optional[EisProfileEntry]:
        for e in self.profiles:
            if e.state == "Enabled":
                return e
        return None

    def to_dict(self) -> dict:
        return {
            "eid": str(self.eid),
            "eum_id": self.eum_id,
            "production_date": self.production_date,
            "euicc_certificate": self.euicc_certificate.encode().hex(),
            "k80": self.k80.material.hex(),
            "profiles": [e.to_dict() for e in self.profiles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EisRecord":
        return cls(Eid.parse(d["eid"]), d["eum_id"], d["production_date"],
                   Certificate.decode(bytes.fromhex(d["euicc_certificate"])),
                   SymmetricKey(bytes.fromhex(d["k80"]), crypto.ROLE_K80),
                   [EisProfileEntry.from_dict(e) for e in d.get("profiles", [])])


def save_registry(path, smsrs) -> None:
    """One JSON record per line: ``{"smsr": name, "eis": {...}}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for smsr in smsrs:
            for eid in sorted(smsr.registry):
                fh.write(json.dumps({"smsr": smsr.name, "eis": smsr.registry[eid].to_dict()},
                                    sort_keys=True) + "\n")


def load_registry(path) -> list[tuple[str, EisRecord]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append((d["smsr"], EisRecord.from_dict(d["eis"])))
    return out


# -- messaging helpers ---------------------------------------------------------------

def post(net: Network, src: str, dst: str, mtype: str, inner=(), **body) -> dict:
    """Deliver one actor-plain message; returns the first copy that parses."""
    payload = json.dumps({"v": PROTOCOL_VERSION, "type": mtype, **body}, sort_keys=True).encode()
    try:
        copies = net.transmit(src, dst, ACTOR_PLAIN, payload, label=mtype, inner=inner)
    except NetworkError as exc:
        raise LinkError(f"{mtype} from {src} to {dst}: {exc}") from None
    for env in copies:
        try:
            msg = json.loads(env.payload)
        except ValueError:
            continue
        if isinstance(msg, dict) and msg.get("v") == PROTOCOL_VERSION and msg.get("type") == mtype:
            return msg
    raise LinkError(f"{mtype} from {src} to {dst} did not arrive intact")


class Actor:
    def __init__(self, name: str, net: Network, rng: random.Random):
        self.name = name
        self.net = net
        self.rng = rng
        self._inflight: set = set()
        net.register(name, self, kind=type(self).__name__.lower())

    @contextlib.contextmanager
    def procedure(self, eid: Eid) -> Iterator[None]:
        """One in-flight procedure per eid."""
        if eid in self._inflight:
            raise Busy(f"{self.name}: a procedure for {eid} is already running")
        self._inflight.add(eid)
        try:
            yield
        finally:
            self._inflight.discard(eid)


# -- SM-SR ----------------------------------------------------------------------------

class SmSr(Actor):
    def __init__(self, name: str, net: Network, ci: crypto.CertificateIssuer, rng: random.Random,
                 capacity: Optional[int] = None):
        super().__init__(name, net, rng)
        self.capacity = capacity
        self.keypair = crypto.generate_keypair(rng, crypto.SIG_SCHEME)
        self.certificate = ci.certify(f"smsr:{name}", self.keypair.public)
        self.ci_root = ci.root
        self.registry: dict[Eid, EisRecord] = {}
        self.sessions: dict[Eid, SecureChannelSession] = {}
        # EIS in transit during a handover: eid -> (record, session)
        self.outgoing: dict[Eid, tuple[EisRecord, SecureChannelSession]] = {}
        self.incoming: dict[Eid, tuple[EisRecord, SecureChannelSession]] = {}

    def register(self, eis: EisRecord, session: Optional[SecureChannelSession] = None) -> None:
        if eis.eid in self.registry:
            raise DuplicateEid(f"{eis.eid} already registered at {self.name}")
        self.registry[eis.eid] = eis
        self.sessions[eis.eid] = session or SecureChannelSession(eis.k80, crypto.SIDE_REMOTE, str(eis.eid))

    def record(self, eid: Eid) -> EisRecord:
        try:
            return self.registry[eid]
        except KeyError:
            raise UnknownEid(f"{eid} is not managed by {self.name}") from None

    def supports(self, eid: Eid) -> bool:
        """Handover capability check: a plain capacity limit."""
        return self.capacity is None or len(self.registry) < self.capacity

    # ---- card channel

    def send_command(self, eid: Eid, cmd: ApduCommand, *, inner=(), label: str = "",
                     session: Optional[SecureChannelSession] = None) -> ApduResponse:
        """Seal, send, let the card answer, and authenticate the answer."""
        session = session or self.sessions.get(eid)
        if session is None:
            session = self.incoming[eid][1] if eid in self.incoming else None
        if session is None:
            raise UnknownEid(f"no channel to {eid} at {self.name}")
        card_id = str(eid)
        label = label or Ins(cmd.ins).name
        record = crypto.sc_wrap(session, encode_command(cmd), eid.raw).encode()
        replies = []
        try:
            for env in self.net.transmit(self.name, card_id, OTA_ISDR, record, inner=inner, label=label):
                card = self.net.actor(card_id)
                out = card.receive(env.payload)
                sw = card.last_status
                # a bare status word (channel refusal) carries no nested content
                replies += self.net.transmit(card_id, self.name, OTA_ISDR, out,
                                             inner=inner if crypto.looks_like_record(out) else (),
                                             label=f"{label}/resp", note=f"sw={int(sw):04X} {sw.name}")
        except NetworkError as exc:
            raise LinkError(f"{label} to {card_id}: {exc}") from None
        plain = None
        for env in replies:
            if not crypto.looks_like_record(env.payload):
                try:
                    plain = plain or decode_response(env.payload)
                except ApduError:
                    pass
                continue
            try:
                return decode_response(crypto.sc_unwrap(session, env.payload, eid.raw))
            except (crypto.ChannelError, ApduError):
                continue
        if plain is not None:
            return plain
        raise LinkError(f"no authenticated answer from {card_id} to {label}")

    def status(self, eid: Eid) -> list[dict]:
        resp = self.send_command(eid, _cmd(Ins.GET_STATUS))
        if not resp.ok:
            raise rejected(resp, "GET_STATUS")
        out = []
        for raw in parse_tlv_list(resp.data, Tag.ENTRY):
            t = parse_tlvs(raw)
            kind = {b"\x00": "Provisioning", b"\x01": "Operational"}.get(t[Tag.KIND], "")
            out.append({"isdp": t[Tag.AID], "state": STATE_NAMES[t[Tag.STATE][0]],
                        "kind": kind, "fallback": t[Tag.FLAG] == b"\x01"})
        return out

    def ping(self, eid: Eid, session: Optional[SecureChannelSession] = None) -> bool:
        try:
            return self.send_command(eid, _cmd(Ins.GET_STATUS), session=session).ok
        except (LinkError, UnknownEid):
            return False

    def refresh(self, eid: Eid) -> None:
        """Resync the EIS inventory with the card; POL1 mirrors are kept as they are."""
        eis = self.record(eid)
        listing = self.status(eid)
        old = {e.isdp: e for e in eis.profiles}
        fresh = []
        for item in listing:
            if item["state"] == "Created":
                continue
            prev = old.get(item["isdp"])
            fresh.append(EisProfileEntry(
                item["isdp"], prev.mno_id if prev else "", item["state"], item["kind"] or "Operational",
                item["fallback"], prev.pol1_mirror if prev else Pol1()))
        eis.profiles = fresh

    def next_isdp_aid(self, eid: Eid) -> bytes:
        used = [isdp_index(e.isdp) or 0 for e in self.record(eid).profiles]
        return isdp_aid(max(used, default=0) + 1)

    # ---- lifecycle commands on behalf of MNOs

    def _lifecycle(self, eid: Eid, ins: Ins, aid: bytes, extra=()) -> None:
        self.record(eid)
        with self.procedure(eid):
            resp = self.send_command(eid, _cmd(ins, [(Tag.AID, aid), *extra]))
            try:
                self.refresh(eid)
            except SubmanError:
                pass
            if not resp.ok:
                raise rejected(resp, ins.name)

    def enable_profile(self, eid: Eid, aid: bytes) -> None:
        self._lifecycle(eid, Ins.ENABLE, aid)

    def disable_profile(self, eid: Eid, aid: bytes) -> None:
        self._lifecycle(eid, Ins.DISABLE, aid)

    def delete_profile(self, eid: Eid, aid: bytes) -> None:
        self._lifecycle(eid, Ins.DELETE, aid)

    def set_fallback(self, eid: Eid, aid: bytes, flag: bool) -> None:
        self._lifecycle(eid, Ins.SET_FALLBACK, aid, [(Tag.FLAG, b"\x01" if flag else b"\x00")])


# -- SM-DP ------------------------------------------------------------------------------

@dataclass
class DownloadRequest:
    eid: Eid
    profile_type: str
    mno_id: str
    pol1: Optional[Pol1] = None


class SmDp(Actor):
    def __init__(self, name: str, net: Network, ci: crypto.CertificateIssuer, rng: random.Random):
        super().__init__(name, net, rng)
        self.keypair = crypto.generate_keypair(rng, crypto.SIG_SCHEME)
        self.certificate = ci.certify(f"smdp:{name}", self.keypair.public)
        self.ci_root = ci.root
        # profile management credentials, only while an installation is running
        self.credentials: dict[tuple[Eid, bytes], SecureChannelSession] = {}

    def holds_key(self) -> bool:
        return bool(self.credentials)

    def new_ecka(self, context: str = "pmc", key_role: str = crypto.ROLE_PMC) -> crypto.DpEcka:
        return crypto.DpEcka(context=context, key_role=key_role, certificate=self.certificate,
                             signing_key=self.keypair.private, ci_root=self.ci_root)


def smdp_build_profile(smdp: SmDp, req: DownloadRequest) -> Profile:
    return Profile(
        mno_id=req.mno_id,
        kind=ProfileKind.OPERATIONAL,
        mno_sd_key=crypto.generate_symmetric_key(smdp.rng, crypto.ROLE_MNO_SD),
        pol1=req.pol1 or Pol1(),
        naa_params=f"naa:{req.mno_id}:{req.profile_type}:".encode() + smdp.rng.randbytes(8),
    )


# -- MNO --------------------------------------------------------------------------------

class Mno(Actor):
    def __init__(self, name: str, net: Network, rng: random.Random):
        super().__init__(name, net, rng)
        self.subscriptions: set[str] = set()
        self.owned: dict[Eid, list[bytes]] = {}
        self.mno_sd: dict[tuple[Eid, bytes], SecureChannelSession] = {}

    def owns(self, eid: Eid, aid: bytes) -> bool:
        return aid in self.owned.get(eid, [])


# -- procedures -----------------------------------------------------------------------

def smsr_register(smsr: SmSr, eis: EisRecord) -> None:
    smsr.register(eis)


def _relay(net: Network, smdp: SmDp, smsr: SmSr, eid: Eid, cmd: ApduCommand, label: str) -> ApduResponse:
    """SM-DP -> SM-SR -> card and back; the command rides the ISD-R channel."""
    msg = post(net, smdp.name, smsr.name, "ForwardToCard", eid=str(eid),
               apdu=encode_command(cmd).hex(), inner=(DP_ISDP,))
    try:
        forwarded = decode_command(bytes.fromhex(msg["apdu"]))
    except (ApduError, ValueError, KeyError) as exc:
        raise LinkError(f"unusable ForwardToCard: {exc}") from None
    resp = smsr.send_command(eid, forwarded, inner=(DP_ISDP,), label=label)
    back = post(net, smsr.name, smdp.name, "CardResponse", eid=str(eid),
                rapdu=encode_response(resp).hex(), inner=(DP_ISDP,))
    try:
        return decode_response(bytes.fromhex(back["rapdu"]))
    except (ApduError, ValueError, KeyError) as exc:
        raise LinkError(f"unusable CardResponse: {exc}") from None


def _cleanup_isdp(smsr: SmSr, eid: Eid, aid: bytes) -> None:
    try:
        smsr.send_command(eid, _cmd(Ins.DELETE, [(Tag.AID, aid)]), label="CLEANUP_ISDP")
    except SubmanError:
        pass
    try:
        smsr.refresh(eid)
    except SubmanError:
        pass


def download_profile(mno: Mno, smdp: SmDp, smsr: SmSr, req: DownloadRequest) -> bytes:
    """Steps 1-7 of profile download and installation; returns the new ISD-P AID.

    Any failure after ISD-P creation deletes the orphaned ISD-P, so the card and
    the EIS end up as they were before the call.
    """
    net = smsr.net
    eid = req.eid
    eis = smsr.record(eid)
    with smsr.procedure(eid):
        # 1: MNO -> SM-DP
        try:
            post(net, mno.name, smdp.name, "DownloadProfile", eid=str(eid), profile_type=req.profile_type,
                 mno_id=req.mno_id, pol1=(req.pol1 or Pol1()).to_dict())
            # 2: build, ask the SM-SR for an ISD-P
            profile = smdp_build_profile(smdp, req)
            post(net, smdp.name, smsr.name, "CreateIsdpRequest", eid=str(eid))
        except LinkError as exc:
            raise IsdpCreationFailed(str(exc)) from None

        # 3: SM-SR -> ISD-R
        aid = smsr.next_isdp_aid(eid)
        try:
            resp = smsr.send_command(eid, _cmd(Ins.CREATE_ISDP, [(Tag.AID, aid)]))
        except LinkError as exc:
            _cleanup_isdp(smsr, eid, aid)
            raise IsdpCreationFailed(str(exc)) from None
        if not resp.ok:
            raise IsdpCreationFailed(f"card refused ISD-P creation: {resp.status.name}")
        try:
            post(net, smsr.name, smdp.name, "CreateIsdpResponse", eid=str(eid), aid=aid.hex().upper())
        except LinkError as exc:
            _cleanup_isdp(smsr, eid, aid)
            raise IsdpCreationFailed(str(exc)) from None

        try:
            # 4: key agreement, (a)-(e)
            ecka = smdp.new_ecka()
            try:
                cert_msg = post(net, smsr.name, smdp.name, "GetEisCertificate", eid=str(eid),
                                certificate=eis.euicc_certificate.encode().hex())
                ecka.accept_card_certificate(Certificate.decode(bytes.fromhex(cert_msg["certificate"])),
                                             expected_subject=f"euicc:{eid}")
                resp = _relay(net, smdp, smsr, eid, _cmd(Ins.ESTABLISH_KEY, [
                    (Tag.AID, aid), (Tag.CERTIFICATE, ecka.certificate_message())], p1=1), "ESTABLISH_KEY")
                if not resp.ok:
                    raise KeyAgreementFailed(f"card rejected certificate: {resp.status.name}")
                challenge = parse_tlvs(resp.data)[Tag.CHALLENGE]
                step_d = ecka.answer_challenge(challenge, smdp.rng)
                resp = _relay(net, smdp, smsr, eid, _cmd(Ins.ESTABLISH_KEY, [
                    (Tag.AID, aid), (Tag.SEALED, step_d)], p1=2), "ESTABLISH_KEY")
                if not resp.ok:
                    raise KeyAgreementFailed(f"card rejected ephemeral key: {resp.status.name}")
                k = ecka.finish()
            except (LinkError, crypto.CryptoError, ApduError, KeyError) as exc:
                raise KeyAgreementFailed(str(exc)) from None
            finally:
                ecka.reset()
            smdp.credentials[(eid, aid)] = SecureChannelSession(k, crypto.SIDE_REMOTE, str(eid))

            # 5: sealed profile to the SM-SR
            try:
                sealed = crypto.sc_wrap(smdp.credentials[(eid, aid)], profile.to_package(), aid).encode()
                msg = post(net, smdp.name, smsr.name, "PROFILE_TRANSFER", eid=str(eid),
                           aid=aid.hex().upper(), sealed=sealed.hex())
                sealed_rx = bytes.fromhex(msg["sealed"])
            except (LinkError, ValueError) as exc:
                raise InstallRejected(f"profile transfer failed: {exc}") from None

            # 6-7: upload; the ISD-P opens it with k
            try:
                resp = smsr.send_command(eid, _cmd(Ins.INSTALL_PROFILE, [(Tag.AID, aid), (Tag.SEALED, sealed_rx)]),
                                         inner=(DP_ISDP,))
            except LinkError as exc:
                raise InstallRejected(str(exc)) from None
            finally:
                smdp.credentials.pop((eid, aid), None)
            if not resp.ok:
                raise InstallRejected(f"card rejected the profile: {resp.status.name}")
        except (KeyAgreementFailed, InstallRejected):
            smdp.credentials.pop((eid, aid), None)
            _cleanup_isdp(smsr, eid, aid)
            raise

        smsr.refresh(eid)
        entry = smsr.record(eid).entry(aid)
        if entry is not None:
            entry.mno_id = req.mno_id
            entry.pol1_mirror = profile.pol1
        try:
            post(net, smsr.name, smdp.name, "InstallResult", eid=str(eid), aid=aid.hex().upper(), ok=True)
            post(net, smdp.name, mno.name, "DownloadResult", eid=str(eid), aid=aid.hex().upper(),
                 mno_sd_key=profile.mno_sd_key.material.hex())
        except LinkError:
            pass  # the profile is installed; the MNO learns of it from the SM-SR later
        mno.owned.setdefault(eid, []).append(aid)
        mno.mno_sd[(eid, aid)] = SecureChannelSession(profile.mno_sd_key, crypto.SIDE_REMOTE, str(eid))
        return aid


def mno_update_policy(mno: Mno, smsr: SmSr, eid: Eid, rules: Pol1, aid: Optional[bytes] = None) -> None:
    """Update POL1 through the MNO-SD. The EIS mirror is written first and may go stale."""
    net = smsr.net
    eis = smsr.record(eid)
    if aid is None:
        enabled = eis.enabled
        aid = enabled.isdp if enabled is not None and mno.owns(eid, enabled.isdp) else None
        if aid is None:
            owned = mno.owned.get(eid, [])
            if not owned:
                raise NotOwner(f"{mno.name} owns no profile on {eid}")
            aid = owned[-1]
    session = mno.mno_sd.get((eid, aid))
    if session is None:
        raise NotOwner(f"{mno.name} holds no MNO-SD key for {aid.hex().upper()}")
    with smsr.procedure(eid):
        post(net, mno.name, smsr.name, "Pol1MirrorUpdate", eid=str(eid), aid=aid.hex().upper(),
             pol1=rules.to_dict())
        entry = eis.entry(aid)
        if entry is not None:
            entry.pol1_mirror = rules
        sealed = crypto.sc_wrap(session, build_tlvs([(Tag.POL1, bytes([rules.to_byte()]))]), aid).encode()
        msg = post(net, mno.name, smsr.name, "ForwardToProfile", eid=str(eid), aid=aid.hex().upper(),
                   sealed=sealed.hex(), inner=(MNO_PROFILE,))
        resp = smsr.send_command(eid, _cmd(Ins.UPDATE_POL1, [(Tag.AID, aid), (Tag.SEALED, bytes.fromhex(msg["sealed"]))]),
                                 inner=(MNO_PROFILE,))
        post(net, smsr.name, mno.name, "ProfileResponse", eid=str(eid), sw=int(resp.status))
        if not resp.ok:
            raise rejected(resp, "UPDATE_POL1")


def smsr_change(mno: Mno, old: SmSr, new: SmSr, eid: Eid) -> SecureChannelSession:
    """Seven-step SM-SR handover. Returns the retired k80 session (old SM-SR side).

    A refusal at step 2 changes nothing. A failure at step 5 or 6 hands the EIS
    back to the old SM-SR and the card keeps its old key.
    """
    net = old.net
    old.record(eid)
    if eid in new.registry:
        raise DuplicateEid(f"{eid} already registered at {new.name}")
    with old.procedure(eid), new.procedure(eid):
        # 1-2
        post(net, mno.name, new.name, "SmsrChangeNotice", eid=str(eid), current=old.name)
        accepted = new.supports(eid)
        post(net, new.name, mno.name, "SmsrChangeAck", eid=str(eid), accepted=accepted)
        if not accepted:
            raise CapabilityRefused(f"{new.name} cannot take on {eid}")
        # 3-4
        post(net, mno.name, old.name, "SmsrChangeRequest", eid=str(eid), new=new.name)
        eis = old.registry.pop(eid)
        session = old.sessions.pop(eid)
        old.outgoing[eid] = (eis, session)
        try:
            msg = post(net, old.name, new.name, "EisHandover", eis=eis.to_dict())
            new.incoming[eid] = (EisRecord.from_dict(msg["eis"]), session)
        except (LinkError, KeyError, ValueError) as exc:
            _abort_handover(old, new, eid)
            raise EstablishmentFailed(f"EIS handover failed: {exc}") from None

        # 5: key establishment with the card over the old channel
        incoming = new.incoming[eid][0]
        ecka = crypto.DpEcka(context="k80", key_role=crypto.ROLE_K80, certificate=new.certificate,
                             signing_key=new.keypair.private, ci_root=new.ci_root)
        try:
            ecka.accept_card_certificate(incoming.euicc_certificate, expected_subject=f"euicc:{eid}")
            resp = new.send_command(eid, _cmd(Ins.ESTABLISH_KEY, [
                (Tag.AID, ISDR_AID), (Tag.CERTIFICATE, ecka.certificate_message())], p1=1))
            if not resp.ok:
                raise EstablishmentFailed(f"card rejected {new.name}'s certificate: {resp.status.name}")
            step_d = ecka.answer_challenge(parse_tlvs(resp.data)[Tag.CHALLENGE], new.rng)
            resp = new.send_command(eid, _cmd(Ins.ESTABLISH_KEY, [(Tag.AID, ISDR_AID), (Tag.SEALED, step_d)], p1=2))
            if not resp.ok:
                raise EstablishmentFailed(f"card rejected key establishment: {resp.status.name}")
            new_k80 = ecka.finish()
        except (EstablishmentFailed, LinkError, crypto.CryptoError, ApduError, KeyError) as exc:
            ecka.reset()
            _abort_handover(old, new, eid)
            raise EstablishmentFailed(str(exc)) from None

        # 6: the card swaps keys and forgets the old one
        new_session = SecureChannelSession(new_k80, crypto.SIDE_REMOTE, str(eid))
        confirm = crypto.key_confirmation(new_k80, eid.raw)
        try:
            resp = new.send_command(eid, _cmd(Ins.REPLACE_SMSR_KEY, [(Tag.CONFIRMATION, confirm)]))
            committed = resp.ok
        except LinkError:
            committed = new.ping(eid, session=new_session)
        if not committed:
            _abort_handover(old, new, eid)
            raise EstablishmentFailed("card did not commit the new SM-SR key")

        # 7
        incoming.k80 = new_k80
        new.incoming.pop(eid)
        new.register(incoming, new_session)
        retired = copy.deepcopy(old.outgoing.pop(eid)[1])
        try:
            post(net, new.name, old.name, "HandoverComplete", eid=str(eid))
        except LinkError:
            pass  # ownership already moved; the old copy is gone either way
    return retired


def _abort_handover(old: SmSr, new: SmSr, eid: Eid) -> None:
    """Give the EIS back to the old SM-SR and tell the card to drop any half-made key."""
    new.incoming.pop(eid, None)
    eis, session = old.outgoing.pop(eid)
    old.registry[eid] = eis
    old.sessions[eid] = session
    try:
        old.send_command(eid, _cmd(Ins.ESTABLISH_KEY, [(Tag.AID, ISDR_AID)], p1=0), label="CANCEL_KEY")
    except SubmanError:
        pass  # best effort: a stale pending key never becomes live without a confirmed commit

"""The eUICC: ISD-R, ECASD, ISD-Ps, profile lifecycle and POL1 enforcement.

All traffic enters through :meth:`Euicc.receive`, which opens the ISD-R's k80
channel, dispatches the APDU with :meth:`Euicc.process_apdu` and seals the
response under the same session. Operations either complete or leave the card
exactly as it was (transport counters aside).

Command payloads (TLV tags from :class:`euiccsim.apdu.Tag`):

==================  ===================================================  ==========================
INS                 command data                                         response data
==================  ===================================================  ==========================
CREATE_ISDP         [4F aid]                                             4F aid
ESTABLISH_KEY p1=1  4F target, 85 peer certificate                       86 challenge
ESTABLISH_KEY p1=2  4F target, A0 step-(d) message                       -
INSTALL_PROFILE     4F aid, A0 profile package sealed under k            -
ENABLE/DISABLE      4F aid                                               -
DELETE              4F aid                                               -
SET_FALLBACK        4F aid, 80 flag (00/01)                              -
UPDATE_POL1         4F aid, A0 (81 pol1) sealed under the MNO-SD key     -
STORE_PROFILE_DATA  4F aid, A0 NAA parameters sealed under MNO-SD key    -
GET_PROFILE_DATA    4F aid, A0 empty plaintext sealed under MNO-SD key   A0 parameters sealed
REPLACE_SMSR_KEY    89 confirmation of the pending k80                   -
GET_STATUS          -                                                    E3{4F, 8A state, 8B kind, 80 fallback}*
==================  ===================================================  ==========================

State octet in listings: 0 = Created, 1 = Disabled, 2 = Enabled.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

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
    encode_response,
    parse_tlvs,
)
from .crypto import CertificateIssuer, SecureChannelSession, SymmetricKey
from .policy import ContradictoryRules, Followup, Pol1, check_delete, check_disable

AID_PREFIX = bytes.fromhex("A0000005591010FFFFFFFF8900")
ISDR_AID = AID_PREFIX + bytes.fromhex("000100")
ECASD_AID = AID_PREFIX + bytes.fromhex("000200")
PROVISIONING_INDEX = 1


def isdp_aid(index: int) -> bytes:
    return AID_PREFIX + b"\x10" + index.to_bytes(2, "big")


def isdp_index(aid: bytes) -> Optional[int]:
    if len(aid) == 16 and aid.startswith(AID_PREFIX + b"\x10"):
        return int.from_bytes(aid[-2:], "big")
    return None


@dataclass(frozen=True, order=True)
class Eid:
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != 16:
            raise ValueError("an EID is 16 octets")

    def __str__(self) -> str:
        return self.raw.hex().upper()

    @classmethod
    def parse(cls, text: str) -> "Eid":
        return cls(bytes.fromhex(text))

    @classmethod
    def from_serial(cls, serial: int) -> "Eid":
        return cls(bytes.fromhex("89049032") + serial.to_bytes(12, "big"))


class ProfileState(str, Enum):
    DISABLED = "Disabled"
    ENABLED = "Enabled"


class ProfileKind(str, Enum):
    PROVISIONING = "Provisioning"
    OPERATIONAL = "Operational"


class IsdpState(str, Enum):
    CREATED = "Created"
    PERSONALIZED = "Personalized"


# -- errors ---------------------------------------------------------------------

class CardError(Exception):
    status = StatusWord.CONDITIONS_NOT_SATISFIED


class NotFound(CardError):
    status = StatusWord.REFERENCED_DATA_NOT_FOUND


class DuplicateId(CardError):
    pass


class NotPersonalized(CardError):
    pass


class PolicyDenied(CardError):
    pass


class CannotDeleteEnabled(CardError):
    pass


class ProtectedProfile(CardError):
    pass


class NoFallbackRoute(CardError):
    pass


class FallbackAlreadySet(CardError):
    pass


class ProfileEnabled(CardError):
    pass


class NotEnabled(CardError):
    pass


class AlreadyEnabled(CardError):
    pass


class NoKey(CardError):
    pass


class EstablishmentFailed(CardError):
    pass


class SecurityError(CardError):
    status = StatusWord.SECURITY_STATUS_NOT_SATISFIED


class WrongData(CardError):
    status = StatusWord.WRONG_DATA


def status_for(exc: Exception) -> StatusWord:
    if isinstance(exc, CardError):
        return exc.status
    if isinstance(exc, (crypto.ChannelError, crypto.BadCertificate, crypto.BadSignature,
                        crypto.ChallengeMismatch)):
        return StatusWord.SECURITY_STATUS_NOT_SATISFIED
    if isinstance(exc, crypto.StaleChallenge):
        return StatusWord.CONDITIONS_NOT_SATISFIED
    if isinstance(exc, (ApduError, ContradictoryRules, ValueError, KeyError)):
        return StatusWord.WRONG_DATA
    raise exc


# -- on-card data -----------------------------------------------------------------

@dataclass
class Profile:
    mno_id: str
    kind: ProfileKind
    mno_sd_key: SymmetricKey
    pol1: Pol1 = field(default_factory=Pol1)
    state: ProfileState = ProfileState.DISABLED
    fallback: bool = False
    naa_params: bytes = b""

    def to_package(self) -> bytes:
        """Plaintext handed from SM-DP to ISD-P (sealed under k in transit)."""
        return json.dumps({
            "mno_id": self.mno_id,
            "kind": self.kind.value,
            "pol1": self.pol1.to_dict(),
            "mno_sd_key": self.mno_sd_key.material.hex(),
            "naa_params": self.naa_params.hex(),
        }, sort_keys=True).encode()

    @classmethod
    def from_package(cls, raw: bytes) -> "Profile":
        try:
            d = json.loads(raw)
            return cls(
                mno_id=str(d["mno_id"]),
                kind=ProfileKind(d["kind"]),
                mno_sd_key=SymmetricKey(bytes.fromhex(d["mno_sd_key"]), crypto.ROLE_MNO_SD),
                pol1=Pol1.from_dict(d["pol1"]),
                naa_params=bytes.fromhex(d["naa_params"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise WrongData(f"malformed profile package: {exc}") from None

    def snapshot(self) -> dict:
        return {
            "mno_id": self.mno_id,
            "kind": self.kind.value,
            "state": self.state.value,
            "pol1": self.pol1.to_dict(),
            "fallback": self.fallback,
            "mno_sd_key": self.mno_sd_key.fingerprint,
            "naa_params": crypto.digest(self.naa_params),
        }


@dataclass
class IsdP:
    aid: bytes
    state: IsdpState = IsdpState.CREATED
    profile: Optional[Profile] = None
    # card side of the k channel; present only between key agreement and install
    install_session: Optional[SecureChannelSession] = None
    mno_session: Optional[SecureChannelSession] = None

    @property
    def install_key(self) -> Optional[SymmetricKey]:
        return self.install_session.key if self.install_session else None

    def snapshot(self) -> dict:
        return {
            "aid": self.aid.hex().upper(),
            "state": self.state.value,
            "install_key": self.install_key.fingerprint if self.install_key else None,
            "profile": self.profile.snapshot() if self.profile else None,
        }


@dataclass
class Ecasd:
    ci_root: crypto.PublicKey
    keypair: crypto.KeyPair
    certificate: crypto.Certificate


@dataclass
class EisSeed:
    """What the EUM hands to the first SM-SR at manufacture."""

    eid: Eid
    eum_id: str
    production_date: str
    euicc_certificate: crypto.Certificate
    k80: SymmetricKey
    provisioning: dict

    @property
    def euicc_public_key(self) -> crypto.PublicKey:
        return self.euicc_certificate.public_key


# -- the card ---------------------------------------------------------------------

class Euicc:
    def __init__(self, eid: Eid, ecasd: Ecasd, k80: SymmetricKey, rng: random.Random):
        self.eid = eid
        self.ecasd = ecasd
        self.isdr_session = SecureChannelSession(k80, crypto.SIDE_CARD, "smsr")
        self.isdps: dict[bytes, IsdP] = {}
        self.ecka: Optional[crypto.CardEcka] = None
        self.ecka_target: Optional[bytes] = None
        self.pending_smsr_key: Optional[SymmetricKey] = None
        self.rng = rng
        self.last_status: Optional[StatusWord] = None

    # ---- views

    @property
    def k80(self) -> SymmetricKey:
        return self.isdr_session.key

    @property
    def profiles(self) -> dict[bytes, Profile]:
        return {aid: p.profile for aid, p in self.isdps.items() if p.profile is not None}

    @property
    def enabled_aid(self) -> Optional[bytes]:
        for aid, prof in self.profiles.items():
            if prof.state is ProfileState.ENABLED:
                return aid
        return None

    @property
    def fallback_aid(self) -> Optional[bytes]:
        for aid, prof in self.profiles.items():
            if prof.fallback:
                return aid
        return None

    @property
    def provisioning_aid(self) -> Optional[bytes]:
        for aid, prof in self.profiles.items():
            if prof.kind is ProfileKind.PROVISIONING:
                return aid
        return None

    def snapshot(self) -> dict:
        """Persistent card content. Channel counters and the RNG are left out."""
        return {
            "eid": str(self.eid),
            "ecasd": {
                "certificate_subject": self.ecasd.certificate.subject,
                "euicc_public_key": self.ecasd.keypair.public.hex(),
                "ci_root": self.ecasd.ci_root.hex(),
            },
            "k80": self.k80.fingerprint,
            "pending_k80": self.pending_smsr_key.fingerprint if self.pending_smsr_key else None,
            "ecka_target": self.ecka_target.hex().upper() if self.ecka_target else None,
            "isdps": [p.snapshot() for p in self.isdps.values()],
        }

    def snapshot_text(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=True)

    def copy(self) -> "Euicc":
        return copy.deepcopy(self)

    # ---- lookups

    def _isdp(self, aid: bytes) -> IsdP:
        try:
            return self.isdps[bytes(aid)]
        except KeyError:
            raise NotFound(f"no ISD-P {bytes(aid).hex().upper()}") from None

    def _personalized(self, aid: bytes) -> tuple[IsdP, Profile]:
        isdp = self._isdp(aid)
        if isdp.profile is None:
            raise NotPersonalized(f"ISD-P {aid.hex().upper()} holds no profile")
        return isdp, isdp.profile

    # ---- ISD-R operations

    def create_isdp(self, requested: Optional[bytes] = None) -> bytes:
        if requested is None:
            used = [isdp_index(a) or 0 for a in self.isdps]
            aid = isdp_aid(max(used, default=0) + 1)
        else:
            aid = bytes(requested)
            if not 5 <= len(aid) <= 16:
                raise WrongData("AID must be 5 to 16 octets")
            if aid in self.isdps or aid in (ISDR_AID, ECASD_AID):
                raise DuplicateId(f"AID {aid.hex().upper()} already in use")
        self.isdps[aid] = IsdP(aid)
        return aid

    def establish_key_start(self, target: bytes, certificate: bytes) -> bytes:
        """Key agreement steps (b)-(c) for an ISD-P (profile credentials) or the ISD-R (k80)."""
        target = bytes(target)
        if target == ISDR_AID:
            context, role, prefix = "k80", crypto.ROLE_K80, "smsr:"
        else:
            isdp = self._isdp(target)
            if isdp.state is not IsdpState.CREATED:
                raise NotPersonalized("key agreement only for a freshly created ISD-P")
            context, role, prefix = "pmc", crypto.ROLE_PMC, "smdp:"
        state = crypto.CardEcka(context=context, key_role=role, ci_root=self.ecasd.ci_root,
                                static_key=self.ecasd.keypair.private, expected_peer_prefix=prefix)
        self.ecka, self.ecka_target = None, None
        if target == ISDR_AID:
            self.pending_smsr_key = None
        challenge = state.receive_certificate(certificate, self.rng)
        self.ecka, self.ecka_target = state, target
        return challenge

    def cancel_key_establishment(self) -> None:
        """Forget any exchange in progress and any uncommitted SM-SR key."""
        self.ecka, self.ecka_target = None, None
        self.pending_smsr_key = None

    def establish_key_finish(self, target: bytes, message: bytes) -> None:
        """Steps (d)-(e); the resulting key is held, not yet used."""
        state, expected = self.ecka, self.ecka_target
        self.ecka, self.ecka_target = None, None
        if state is None:
            raise crypto.StaleChallenge("no key agreement in progress")
        if bytes(target) != expected:
            raise WrongData("key agreement target changed mid-exchange")
        if expected != ISDR_AID and expected not in self.isdps:
            raise NotFound("ISD-P vanished during key agreement")
        key = state.receive_ephemeral(message)
        if expected == ISDR_AID:
            self.pending_smsr_key = key
        else:
            self.isdps[expected].install_session = SecureChannelSession(key, crypto.SIDE_CARD, "smdp")

    def install_profile(self, aid: bytes, sealed: bytes) -> None:
        isdp = self._isdp(aid)
        if isdp.state is not IsdpState.CREATED or isdp.install_session is None:
            raise NoKey("no profile management credentials for this ISD-P")
        probe = copy.copy(isdp.install_session)
        plaintext = crypto.sc_unwrap(probe, sealed, isdp.aid)
        profile = Profile.from_package(plaintext)
        profile.state = ProfileState.DISABLED
        profile.fallback = False
        isdp.profile = profile
        isdp.state = IsdpState.PERSONALIZED
        isdp.install_session = None
        isdp.mno_session = SecureChannelSession(profile.mno_sd_key, crypto.SIDE_CARD, profile.mno_id)

    def enable_profile(self, aid: bytes) -> None:
        aid = bytes(aid)
        _, target = self._personalized(aid)
        if target.state is ProfileState.ENABLED:
            raise AlreadyEnabled("profile already enabled")
        old_aid = self.enabled_aid
        decision = None
        if old_aid is not None:
            decision = check_disable(self.profiles[old_aid].pol1)
            if not decision.allowed:
                raise PolicyDenied("enabled profile is locked by its POL1")
        if old_aid is not None:
            self.profiles[old_aid].state = ProfileState.DISABLED
        target.state = ProfileState.ENABLED
        target.fallback = False
        if decision is not None and decision.followup is Followup.DELETE_PROFILE:
            del self.isdps[old_aid]

    def disable_profile(self, aid: bytes) -> None:
        aid = bytes(aid)
        _, target = self._personalized(aid)
        if target.state is not ProfileState.ENABLED:
            raise NotEnabled("profile is not enabled")
        decision = check_disable(target.pol1)
        if not decision.allowed:
            raise PolicyDenied("profile is locked by its POL1")
        successor = self.fallback_aid or self.provisioning_aid
        if successor is None or successor == aid:
            raise NoFallbackRoute("no other profile could take over connectivity")
        target.state = ProfileState.DISABLED
        nxt = self.profiles[successor]
        nxt.state = ProfileState.ENABLED
        nxt.fallback = False
        if decision.followup is Followup.DELETE_PROFILE:
            del self.isdps[aid]

    def delete_profile(self, aid: bytes) -> None:
        aid = bytes(aid)
        isdp = self._isdp(aid)
        prof = isdp.profile
        if prof is not None:
            if prof.kind is ProfileKind.PROVISIONING:
                raise ProtectedProfile("the provisioning profile cannot be deleted")
            if prof.state is ProfileState.ENABLED:
                raise CannotDeleteEnabled("disable the profile before deleting it")
            if not check_delete(prof.pol1, prof.state.value).allowed:
                raise PolicyDenied("POL1 forbids deleting this profile")
        del self.isdps[aid]
        if self.ecka_target == aid:
            self.ecka, self.ecka_target = None, None

    def set_fallback(self, aid: bytes, flag: bool) -> None:
        aid = bytes(aid)
        _, prof = self._personalized(aid)
        if flag:
            if prof.state is ProfileState.ENABLED:
                raise ProfileEnabled("only a disabled profile can carry the fallback attribute")
            holder = self.fallback_aid
            if holder is not None and holder != aid:
                raise FallbackAlreadySet("another profile already carries the fallback attribute")
        prof.fallback = bool(flag)

    def replace_smsr_key(self, confirmation: bytes) -> SecureChannelSession:
        """Commit the pending k80; returns the retired session."""
        pending = self.pending_smsr_key
        if pending is None:
            raise EstablishmentFailed("no new SM-SR key has been established")
        if confirmation != crypto.key_confirmation(pending, self.eid.raw):
            raise SecurityError("key confirmation mismatch")
        old = self.isdr_session
        self.isdr_session = SecureChannelSession(pending, crypto.SIDE_CARD, "smsr")
        self.pending_smsr_key = None
        return old

    # ---- MNO-SD path

    def _open_mno(self, isdp: IsdP, sealed: bytes) -> bytes:
        if isdp.mno_session is None:
            raise SecurityError("no MNO-SD on this ISD-P")
        try:
            return crypto.sc_unwrap(isdp.mno_session, sealed, isdp.aid)
        except crypto.ChannelError as exc:
            raise SecurityError(f"MNO-SD channel rejected record: {exc}") from None

    def update_pol1(self, aid: bytes, sealed: bytes) -> None:
        isdp = self._isdp(aid)
        plaintext = self._open_mno(isdp, sealed)
        prof = isdp.profile
        if prof.state is not ProfileState.ENABLED:
            raise NotEnabled("POL1 may only be updated on the enabled profile")
        if prof.kind is ProfileKind.PROVISIONING:
            raise ProtectedProfile("the provisioning profile's POL1 is fixed")
        try:
            rules = Pol1.from_byte(parse_tlvs(plaintext)[Tag.POL1][0])
        except (KeyError, IndexError) as exc:
            raise WrongData(f"missing POL1 value: {exc}") from None
        prof.pol1 = rules

    def store_profile_data(self, aid: bytes, sealed: bytes) -> None:
        isdp = self._isdp(aid)
        isdp.profile.naa_params = self._open_mno(isdp, sealed)

    def get_profile_data(self, aid: bytes, sealed: bytes) -> bytes:
        isdp = self._isdp(aid)
        self._open_mno(isdp, sealed)
        return crypto.sc_wrap(isdp.mno_session, isdp.profile.naa_params, isdp.aid).encode()

    # ---- dispatch

    def status_listing(self) -> bytes:
        entries = []
        for aid, isdp in self.isdps.items():
            prof = isdp.profile
            state = 0 if prof is None else (2 if prof.state is ProfileState.ENABLED else 1)
            kind = b"" if prof is None else (b"\x00" if prof.kind is ProfileKind.PROVISIONING else b"\x01")
            fallback = b"\x01" if prof is not None and prof.fallback else b"\x00"
            body = build_tlvs([(Tag.AID, aid), (Tag.STATE, bytes([state])), (Tag.KIND, kind),
                               (Tag.FLAG, fallback)])
            entries.append((Tag.ENTRY, body))
        return build_tlvs(entries)

    def process_apdu(self, cmd: ApduCommand, authenticated: bool = True) -> ApduResponse:
        """Dispatch one command in ISD-R context; failures come back as status words."""
        try:
            data = self._dispatch(cmd, authenticated)
            resp = ApduResponse(data, StatusWord.SUCCESS)
        except Exception as exc:  # every card-level failure maps onto a status word
            resp = ApduResponse(b"", status_for(exc))
        self.last_status = resp.status
        return resp

    def _dispatch(self, cmd: ApduCommand, authenticated: bool) -> bytes:
        if cmd.cla != CLA_PROPRIETARY:
            raise WrongData(f"unsupported class {cmd.cla:#04x}")
        try:
            ins = Ins(cmd.ins)
        except ValueError:
            raise WrongData(f"unknown instruction {cmd.ins:#04x}") from None
        if not authenticated and ins is not Ins.ESTABLISH_KEY:
            raise SecurityError("command requires the ISD-R secure channel")
        tlv = parse_tlvs(cmd.data)
        aid = tlv.get(Tag.AID)

        def need(tag: int) -> bytes:
            if tag not in tlv:
                raise WrongData(f"missing TLV {tag:#04x}")
            return tlv[tag]

        if ins is Ins.CREATE_ISDP:
            return build_tlvs([(Tag.AID, self.create_isdp(aid))])
        if ins is Ins.GET_STATUS:
            return self.status_listing()
        if ins is Ins.REPLACE_SMSR_KEY:
            self.replace_smsr_key(need(Tag.CONFIRMATION))
            return b""
        if ins is Ins.ESTABLISH_KEY:
            if cmd.p1 == 0:
                if not authenticated:
                    raise SecurityError("cancelling key establishment requires the ISD-R channel")
                self.cancel_key_establishment()
                return b""
            if cmd.p1 == 1:
                return build_tlvs([(Tag.CHALLENGE, self.establish_key_start(need(Tag.AID), need(Tag.CERTIFICATE)))])
            if cmd.p1 == 2:
                self.establish_key_finish(need(Tag.AID), need(Tag.SEALED))
                return b""
            raise WrongData("ESTABLISH_KEY phase must be 0, 1 or 2")
        aid = need(Tag.AID)
        if ins is Ins.INSTALL_PROFILE:
            self.install_profile(aid, need(Tag.SEALED))
        elif ins is Ins.ENABLE:
            self.enable_profile(aid)
        elif ins is Ins.DISABLE:
            self.disable_profile(aid)
        elif ins is Ins.DELETE:
            self.delete_profile(aid)
        elif ins is Ins.SET_FALLBACK:
            flag = need(Tag.FLAG)
            if flag not in (b"\x00", b"\x01"):
                raise WrongData("fallback flag must be 00 or 01")
            self.set_fallback(aid, flag == b"\x01")
        elif ins is Ins.UPDATE_POL1:
            self.update_pol1(aid, need(Tag.SEALED))
        elif ins is Ins.STORE_PROFILE_DATA:
            self.store_profile_data(aid, need(Tag.SEALED))
        elif ins is Ins.GET_PROFILE_DATA:
            return build_tlvs([(Tag.SEALED, self.get_profile_data(aid, need(Tag.SEALED)))])
        return b""

    def receive(self, record: bytes) -> bytes:
        """Over-the-air entry point: a k80 record in, a k80 record (or a bare status word) out."""
        session = self.isdr_session
        try:
            raw = crypto.sc_unwrap(session, record, self.eid.raw)
        except crypto.ChannelError:
            self.last_status = StatusWord.SECURITY_STATUS_NOT_SATISFIED
            return encode_response(ApduResponse(b"", self.last_status))
        try:
            cmd = decode_command(raw)
        except ApduError:
            resp = ApduResponse(b"", StatusWord.WRONG_DATA)
            self.last_status = resp.status
        else:
            resp = self.process_apdu(cmd)
        # a key replacement answers under the session the command arrived on
        return crypto.sc_wrap(session, encode_response(resp), self.eid.raw).encode()


def manufacture(eid: Eid, ci: CertificateIssuer, rng: random.Random, eum_id: str = "eum",
                production_date: str = "2016-01-01") -> tuple[Euicc, EisSeed]:
    """Build a fresh card: k80, ECASD, and the enabled provisioning profile."""
    keypair = crypto.generate_keypair(rng, crypto.KA_SCHEME)
    certificate = ci.certify(f"euicc:{eid}", keypair.public)
    k80 = crypto.generate_symmetric_key(rng, crypto.ROLE_K80)
    card = Euicc(eid, Ecasd(ci.root, keypair, certificate), k80, rng)
    aid = isdp_aid(PROVISIONING_INDEX)
    profile = Profile(
        mno_id=eum_id,
        kind=ProfileKind.PROVISIONING,
        mno_sd_key=crypto.generate_symmetric_key(rng, crypto.ROLE_MNO_SD),
        state=ProfileState.ENABLED,
        naa_params=b"provisioning-connectivity",
    )
    card.isdps[aid] = IsdP(aid, IsdpState.PERSONALIZED, profile,
                           mno_session=SecureChannelSession(profile.mno_sd_key, crypto.SIDE_CARD, eum_id))
    seed = EisSeed(eid, eum_id, production_date, certificate, k80,
                   {"isdp": aid, "mno_id": eum_id, "kind": ProfileKind.PROVISIONING.value,
                    "state": ProfileState.ENABLED.value, "pol1": Pol1()})
    return card, seed

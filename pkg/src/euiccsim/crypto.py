"""Keys, certificates, the ECKA exchange and the SCP80-style secure channel.

Pinned schemes (golden traces depend on them):

* key agreement: X25519 (``ecka-x25519``)
* signatures:    Ed25519 (``sig-ed25519``)
* KDF:           HKDF-SHA256, salt absent, ``info`` = context string, 16-octet output
* channel AEAD:  AES-128-GCM, 96-bit nonce = sender direction octet || 3 zero octets || counter

Key material is kept as raw octets so card and actor state can be copied and
snapshotted freely; library key objects are built on use.

SecureRecord wire layout::

    version (1) || counter (8, big-endian) || ciphertext || tag (16)

The AEAD additional data is ``version || counter || associated-data``.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

KA_SCHEME = "ecka-x25519"
SIG_SCHEME = "sig-ed25519"
SCHEMES = (KA_SCHEME, SIG_SCHEME)

KEY_LENGTH = 16
TAG_LENGTH = 16
CHALLENGE_LENGTH = 16
RECORD_VERSION = 1
RECORD_HEADER = 9
MAX_COUNTER = 2**64 - 1

ROLE_K80 = "k80"
ROLE_PMC = "profile-credentials-k"
ROLE_MNO_SD = "mno-sd"
KEY_ROLES = (ROLE_K80, ROLE_PMC, ROLE_MNO_SD)

# channel directions; each side only sends with its own octet
SIDE_CARD = "card"
SIDE_REMOTE = "remote"
_DIRECTION = {SIDE_CARD: 0x01, SIDE_REMOTE: 0x02}


class CryptoError(Exception):
    pass


class SchemeMismatch(CryptoError):
    pass


class EmptySecret(CryptoError):
    pass


class BadCertificate(CryptoError):
    pass


class BadSignature(CryptoError):
    pass


class ChallengeMismatch(CryptoError):
    pass


class StaleChallenge(CryptoError):
    pass


class ChannelError(CryptoError):
    pass


class TamperDetected(ChannelError):
    pass


class ReplayDetected(ChannelError):
    pass


class CounterExhausted(ChannelError):
    pass


def digest(data: bytes, n: int = 8) -> str:
    """Short hex fingerprint used in traces and snapshots."""
    return hashlib.sha256(data).hexdigest()[: 2 * n]


# -- keys ---------------------------------------------------------------------

@dataclass(frozen=True)
class PublicKey:
    scheme: str
    raw: bytes

    def hex(self) -> str:
        return self.raw.hex()


@dataclass(frozen=True)
class PrivateKey:
    scheme: str
    raw: bytes = field(repr=False)


@dataclass(frozen=True)
class KeyPair:
    private: PrivateKey
    public: PublicKey

    @property
    def scheme(self) -> str:
        return self.public.scheme


@dataclass(frozen=True)
class SymmetricKey:
    material: bytes = field(repr=False)
    role: str = ROLE_K80

    def __post_init__(self):
        if len(self.material) != KEY_LENGTH:
            raise ValueError(f"symmetric key must be {KEY_LENGTH} octets, got {len(self.material)}")
        if self.role not in KEY_ROLES:
            raise ValueError(f"unknown key role {self.role!r}")

    @property
    def fingerprint(self) -> str:
        return digest(self.material)


def _raw_public(key) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def derive_public(sk: PrivateKey) -> PublicKey:
    if sk.scheme == KA_SCHEME:
        return PublicKey(KA_SCHEME, _raw_public(X25519PrivateKey.from_private_bytes(sk.raw).public_key()))
    if sk.scheme == SIG_SCHEME:
        return PublicKey(SIG_SCHEME, _raw_public(Ed25519PrivateKey.from_private_bytes(sk.raw).public_key()))
    raise SchemeMismatch(f"unknown scheme {sk.scheme!r}")


def generate_keypair(rng: random.Random, scheme: str) -> KeyPair:
    """Draw 32 seed octets from ``rng``; a seeded ``random.Random`` makes this reproducible."""
    if scheme not in SCHEMES:
        raise SchemeMismatch(f"unknown scheme {scheme!r}")
    sk = PrivateKey(scheme, rng.randbytes(32))
    return KeyPair(sk, derive_public(sk))


def generate_symmetric_key(rng: random.Random, role: str) -> SymmetricKey:
    return SymmetricKey(rng.randbytes(KEY_LENGTH), role)


def sign(sk: PrivateKey, msg: bytes) -> bytes:
    if sk.scheme != SIG_SCHEME:
        raise SchemeMismatch(f"cannot sign with a {sk.scheme} key")
    return Ed25519PrivateKey.from_private_bytes(sk.raw).sign(bytes(msg))


def verify(pk: PublicKey, msg: bytes, signature: bytes) -> bool:
    if pk.scheme != SIG_SCHEME:
        raise SchemeMismatch(f"cannot verify with a {pk.scheme} key")
    try:
        Ed25519PublicKey.from_public_bytes(pk.raw).verify(bytes(signature), bytes(msg))
    except (InvalidSignature, ValueError):
        return False
    return True


def key_agreement(sk: PrivateKey, pk: PublicKey) -> bytes:
    if sk.scheme != KA_SCHEME or pk.scheme != KA_SCHEME:
        raise SchemeMismatch("key agreement needs two ecka keys")
    peer = X25519PublicKey.from_public_bytes(pk.raw)
    return X25519PrivateKey.from_private_bytes(sk.raw).exchange(peer)


def derive_key(secret: bytes, context: str, role: str = ROLE_PMC) -> SymmetricKey:
    if not secret:
        raise EmptySecret("shared secret is empty")
    okm = HKDF(algorithm=hashes.SHA256(), length=KEY_LENGTH, salt=None,
               info=context.encode()).derive(bytes(secret))
    return SymmetricKey(okm, role)


def key_confirmation(key: SymmetricKey, label: bytes) -> bytes:
    """Proof of possession of ``key`` bound to ``label``."""
    return hmac.new(key.material, b"confirm|" + bytes(label), hashlib.sha256).digest()[:16]


# -- certificates -------------------------------------------------------------

def _lv(data: bytes) -> bytes:
    return len(data).to_bytes(2, "big") + data


@dataclass(frozen=True)
class Certificate:
    subject: str
    public_key: PublicKey
    signature: bytes = field(repr=False)

    def tbs(self) -> bytes:
        return _tbs(self.subject, self.public_key)

    def encode(self) -> bytes:
        return self.tbs() + _lv(self.signature)

    @classmethod
    def decode(cls, raw: bytes) -> "Certificate":
        try:
            fields, pos = [], 0
            for _ in range(4):
                n = int.from_bytes(raw[pos:pos + 2], "big")
                if pos + 2 + n > len(raw) or len(raw[pos:pos + 2]) < 2:
                    raise BadCertificate("truncated certificate")
                fields.append(bytes(raw[pos + 2:pos + 2 + n]))
                pos += 2 + n
            if pos != len(raw):
                raise BadCertificate("trailing octets after certificate")
            subject, scheme, key, sig = fields
            return cls(subject.decode(), PublicKey(scheme.decode(), key), sig)
        except UnicodeDecodeError as exc:
            raise BadCertificate(str(exc)) from None


def _tbs(subject: str, pk: PublicKey) -> bytes:
    return _lv(subject.encode()) + _lv(pk.scheme.encode()) + _lv(pk.raw)


def issue_certificate(ci: KeyPair, subject: str, pk: PublicKey) -> Certificate:
    return Certificate(subject, pk, sign(ci.private, _tbs(subject, pk)))


class CertificateIssuer:
    """The CI: one signing key pair whose public half every party trusts."""

    def __init__(self, rng: random.Random, name: str = "ci"):
        self.name = name
        self.keypair = generate_keypair(rng, SIG_SCHEME)

    @property
    def root(self) -> PublicKey:
        return self.keypair.public

    def certify(self, subject: str, pk: PublicKey) -> Certificate:
        return issue_certificate(self.keypair, subject, pk)


def verify_certificate(cert: Certificate, ci_root: PublicKey) -> bool:
    if cert.public_key.scheme not in SCHEMES:
        return False
    return verify(ci_root, cert.tbs(), cert.signature)


# -- secure channel -------------------------------------------------------------

@dataclass(frozen=True)
class SecureRecord:
    counter: int
    body: bytes
    version: int = RECORD_VERSION

    def encode(self) -> bytes:
        return bytes([self.version]) + self.counter.to_bytes(8, "big") + self.body

    @classmethod
    def decode(cls, raw: bytes) -> "SecureRecord":
        raw = bytes(raw)
        if len(raw) < RECORD_HEADER + TAG_LENGTH:
            raise TamperDetected(f"record too short ({len(raw)} octets)")
        return cls(int.from_bytes(raw[1:9], "big"), raw[9:], raw[0])


def looks_like_record(raw: bytes) -> bool:
    return len(raw) >= RECORD_HEADER + TAG_LENGTH and raw[0] == RECORD_VERSION


@dataclass
class SecureChannelSession:
    """One endpoint of a keyed channel. Single owner; not safe for concurrent use."""

    key: SymmetricKey
    side: str
    peer: str = ""
    send_counter: int = 0
    recv_counter: int = 0

    def __post_init__(self):
        if self.side not in _DIRECTION:
            raise ValueError(f"unknown channel side {self.side!r}")

    @property
    def peer_side(self) -> str:
        return SIDE_REMOTE if self.side == SIDE_CARD else SIDE_CARD


def _nonce(side: str, counter: int) -> bytes:
    return bytes([_DIRECTION[side], 0, 0, 0]) + counter.to_bytes(8, "big")


def _aad(version: int, counter: int, associated: bytes) -> bytes:
    return bytes([version]) + counter.to_bytes(8, "big") + bytes(associated)


def sc_wrap(session: SecureChannelSession, plaintext: bytes, associated: bytes = b"") -> SecureRecord:
    if session.send_counter >= MAX_COUNTER:
        raise CounterExhausted("send counter exhausted; re-key the channel")
    counter = session.send_counter + 1
    body = AESGCM(session.key.material).encrypt(
        _nonce(session.side, counter), bytes(plaintext), _aad(RECORD_VERSION, counter, associated))
    session.send_counter = counter
    return SecureRecord(counter, body)


def sc_unwrap(session: SecureChannelSession, record, associated: bytes = b"") -> bytes:
    """Authenticate then decrypt. Counters only advance on full acceptance.

    A record is accepted iff it authenticates and its counter is above the last
    accepted one; gaps left by dropped records are tolerated.
    """
    if not isinstance(record, SecureRecord):
        record = SecureRecord.decode(record)
    if record.version != RECORD_VERSION:
        raise TamperDetected(f"unknown record version {record.version}")
    try:
        plaintext = AESGCM(session.key.material).decrypt(
            _nonce(session.peer_side, record.counter), record.body,
            _aad(record.version, record.counter, associated))
    except InvalidTag:
        raise TamperDetected("record failed authentication") from None
    if record.counter <= session.recv_counter:
        raise ReplayDetected(f"counter {record.counter} <= last accepted {session.recv_counter}")
    session.recv_counter = record.counter
    return plaintext


def session_pair(key: SymmetricKey, card_peer: str = "", remote_peer: str = "") -> tuple[SecureChannelSession, SecureChannelSession]:
    """(card-side, remote-side) sessions over one key."""
    return (SecureChannelSession(key, SIDE_CARD, remote_peer),
            SecureChannelSession(key, SIDE_REMOTE, card_peer))


# -- ECKA -----------------------------------------------------------------------
#
# (a) DP obtains the eUICC certificate (from the EIS) and checks it under the CI root
# (b) DP -> card: DP certificate; card checks it under the CI root held in ECASD
# (c) card -> DP: fresh 16-octet challenge
# (d) DP -> card: ephemeral public key || challenge || sig_DP(challenge || ephemeral key)
# (e) both: s = X25519(ephemeral, eUICC static); k = HKDF(s, context)

def encode_step_d(eph: PublicKey, challenge: bytes, signature: bytes) -> bytes:
    return _lv(eph.raw) + _lv(challenge) + _lv(signature)


def decode_step_d(raw: bytes) -> tuple[PublicKey, bytes, bytes]:
    parts, pos = [], 0
    for _ in range(3):
        if pos + 2 > len(raw):
            raise BadSignature("truncated key-agreement message")
        n = int.from_bytes(raw[pos:pos + 2], "big")
        if pos + 2 + n > len(raw):
            raise BadSignature("truncated key-agreement message")
        parts.append(bytes(raw[pos + 2:pos + 2 + n]))
        pos += 2 + n
    if pos != len(raw):
        raise BadSignature("trailing octets in key-agreement message")
    eph, challenge, signature = parts
    if len(eph) != 32:
        raise BadSignature("ephemeral key has wrong length")
    return PublicKey(KA_SCHEME, eph), challenge, signature


@dataclass
class EckaState:
    role: str
    context: str = "pmc"
    key_role: str = ROLE_PMC
    peer_certificate: Optional[Certificate] = None
    challenge: Optional[bytes] = None
    secret: Optional[bytes] = field(default=None, repr=False)

    def reset(self) -> None:
        self.peer_certificate = None
        self.challenge = None
        self.secret = None


@dataclass
class DpEcka(EckaState):
    """Remote side (SM-DP for profile credentials, new SM-SR for a k80 handover)."""

    role: str = "dp"
    certificate: Optional[Certificate] = None
    signing_key: Optional[PrivateKey] = field(default=None, repr=False)
    ci_root: Optional[PublicKey] = None
    ephemeral: Optional[KeyPair] = field(default=None, repr=False)

    def reset(self) -> None:
        super().reset()
        self.ephemeral = None

    def accept_card_certificate(self, cert: Certificate, expected_subject: Optional[str] = None) -> None:
        """Step (a)."""
        if not verify_certificate(cert, self.ci_root) or cert.public_key.scheme != KA_SCHEME:
            raise BadCertificate(f"eUICC certificate for {cert.subject!r} does not verify")
        if expected_subject is not None and cert.subject != expected_subject:
            raise BadCertificate(f"certificate subject {cert.subject!r} != {expected_subject!r}")
        self.peer_certificate = cert

    def certificate_message(self) -> bytes:
        """Step (b)."""
        return self.certificate.encode()

    def answer_challenge(self, challenge: bytes, rng: random.Random) -> bytes:
        """Step (d); returns the message for the card."""
        if self.peer_certificate is None:
            raise BadCertificate("no verified eUICC certificate (step a missing)")
        self.ephemeral = generate_keypair(rng, KA_SCHEME)
        challenge = bytes(challenge)
        sig = sign(self.signing_key, challenge + self.ephemeral.public.raw)
        self.challenge = challenge
        return encode_step_d(self.ephemeral.public, challenge, sig)

    def finish(self) -> SymmetricKey:
        """Step (e), remote half. The ephemeral private key is discarded."""
        if self.ephemeral is None or self.peer_certificate is None:
            raise StaleChallenge("no ephemeral key outstanding")
        try:
            self.secret = key_agreement(self.ephemeral.private, self.peer_certificate.public_key)
            return derive_key(self.secret, self.context, self.key_role)
        finally:
            self.reset()


@dataclass
class CardEcka(EckaState):
    """Card side, run by the ECASD on behalf of an ISD-P (or the ISD-R for k80)."""

    role: str = "euicc"
    ci_root: Optional[PublicKey] = None
    static_key: Optional[PrivateKey] = field(default=None, repr=False)
    expected_peer_prefix: str = ""

    def receive_certificate(self, raw: bytes, rng: random.Random) -> bytes:
        """Steps (b)-(c): verify the peer certificate, issue a single-use challenge."""
        self.reset()
        try:
            cert = Certificate.decode(raw)
        except (BadCertificate, ValueError, IndexError) as exc:
            raise BadCertificate(f"unparseable certificate: {exc}") from None
        if cert.public_key.scheme != SIG_SCHEME or not verify_certificate(cert, self.ci_root):
            raise BadCertificate(f"certificate for {cert.subject!r} does not verify under CI root")
        if not cert.subject.startswith(self.expected_peer_prefix):
            raise BadCertificate(f"certificate subject {cert.subject!r} not acceptable here")
        self.peer_certificate = cert
        self.challenge = rng.randbytes(CHALLENGE_LENGTH)
        return self.challenge

    def receive_ephemeral(self, raw: bytes) -> SymmetricKey:
        """Steps (d)-(e). Any failure clears the exchange; the challenge is consumed either way."""
        outstanding, cert = self.challenge, self.peer_certificate
        self.reset()
        if outstanding is None or cert is None:
            raise StaleChallenge("no challenge outstanding")
        eph, echoed, signature = decode_step_d(raw)
        if echoed != outstanding:
            raise ChallengeMismatch("echoed challenge does not match the one issued")
        if not verify(cert.public_key, echoed + eph.raw, signature):
            raise BadSignature("ephemeral key signature does not verify")
        secret = key_agreement(self.static_key, eph)
        return derive_key(secret, self.context, self.key_role)


Transcript = Callable[[str, bytes], bytes]


def ecka_run(dp: DpEcka, card: CardEcka, card_certificate: Certificate,
             rng: random.Random, card_rng: Optional[random.Random] = None,
             channel: Optional[Transcript] = None,
             log: Optional[list] = None) -> tuple[SymmetricKey, SymmetricKey]:
    """Run steps (a)-(e) between two in-process parties.

    ``channel(step, octets)`` carries each message and may alter it (fault
    injection); ``log`` collects ``(step, octets)`` as delivered. On any error
    both states are cleared and the error propagates.
    """
    channel = channel or (lambda step, msg: msg)
    card_rng = card_rng or rng

    def carry(step: str, msg: bytes) -> bytes:
        out = channel(step, msg)
        if log is not None:
            log.append((step, out))
        return out

    try:
        dp.accept_card_certificate(card_certificate)
        challenge = card.receive_certificate(carry("b", dp.certificate_message()), card_rng)
        step_d = dp.answer_challenge(carry("c", challenge), rng)
        k_card = card.receive_ephemeral(carry("d", step_d))
        k_dp = dp.finish()
    except Exception:
        dp.reset()
        card.reset()
        raise
    return k_dp, k_card

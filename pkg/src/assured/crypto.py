"""Cryptographic primitive layer: hashing, signatures, MACs, session-key
derivation, and authenticated channel framing.

Everything above this module is algorithm-agnostic against this interface.
Fixed algorithm suite: SHA-256, Ed25519, HMAC-SHA256, and AES-CTR in an
encrypt-then-MAC composition.

Frame layout (byte-exact wire contract):

    8-byte big-endian sequence || 4-byte big-endian payload length
    || ciphertext || 32-byte HMAC tag over everything before the tag
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import struct
import threading
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import AuthFailure, MalformedFrame, ReplayOrReorder

DIGEST_LEN = 32
KEY_LEN = 32
PUBLIC_KEY_LEN = 32
SIGNATURE_LEN = 64
TAG_LEN = 32
NONCE_LEN = 16

FRAME_SEQ_LEN = 8
FRAME_LEN_FIELD = 4
FRAME_HEADER_LEN = FRAME_SEQ_LEN + FRAME_LEN_FIELD
FRAME_OVERHEAD = FRAME_HEADER_LEN + TAG_LEN

_ENC_LABEL = b"ASSURED-ENC"
_MAC_LABEL = b"ASSURED-MAC"


def hash_data(data: bytes) -> bytes:
    """SHA-256 digest of ``data`` (32 bytes, deterministic)."""
    return hashlib.sha256(data).digest()


def mac(key: bytes, message: bytes) -> bytes:
    """HMAC-SHA256 tag of ``message`` under ``key`` (32 bytes)."""
    return _hmac.new(key, message, hashlib.sha256).digest()


def mac_equal(a: bytes, b: bytes) -> bool:
    return _hmac.compare_digest(a, b)


# --- signatures ---------------------------------------------------------------

@dataclass(frozen=True)
class SigningKeyPair:
    """Ed25519 key pair; ``private`` is the 32-byte seed."""

    private: bytes
    public: bytes

    def __post_init__(self) -> None:
        if len(self.private) != KEY_LEN or len(self.public) != PUBLIC_KEY_LEN:
            raise ValueError("signing key material must be 32 bytes each")


def signing_key_from_seed(seed: bytes) -> SigningKeyPair:
    if len(seed) != KEY_LEN:
        raise ValueError("Ed25519 seed must be 32 bytes")
    private = ed25519.Ed25519PrivateKey.from_private_bytes(seed)
    return SigningKeyPair(private=seed, public=private.public_key().public_bytes_raw())


def sign(key: SigningKeyPair, message: bytes) -> bytes:
    private = ed25519.Ed25519PrivateKey.from_private_bytes(key.private)
    return private.sign(message)


class VerificationCounter:
    """Counts public-key verifications; the bench module reads deltas.

    A single instance is shared process-wide so the TUF and token paths are
    measured identically.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> None:
        with self._lock:
            self._count += 1

    def read(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


VERIFY_COUNTER = VerificationCounter()


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid for ``message`` under ``public``.

    Malformed key or signature encodings reject rather than raise. Every
    call increments the process-wide verification counter.
    """
    VERIFY_COUNTER.increment()
    if len(public) != PUBLIC_KEY_LEN or len(signature) != SIGNATURE_LEN:
        return False
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def key_id(public: bytes) -> bytes:
    """Identifier of a public key: its SHA-256 digest."""
    return hash_data(public)


# --- session keys and channel frames -------------------------------------------

@dataclass(frozen=True)
class SessionKeys:
    enc_key: bytes
    mac_key: bytes


def derive_session_keys(master: bytes, controller_nonce: bytes, device_nonce: bytes) -> SessionKeys:
    """Derive (enc, mac) keys from the pre-shared master and both nonces.

    Labeled HMAC derivation gives determinism and domain separation;
    enc_key != mac_key for all inputs.
    """
    if len(controller_nonce) != NONCE_LEN or len(device_nonce) != NONCE_LEN:
        raise ValueError("channel nonces must be exactly 16 bytes")
    suffix = controller_nonce + device_nonce
    return SessionKeys(
        enc_key=mac(master, _ENC_LABEL + suffix),
        mac_key=mac(master, _MAC_LABEL + suffix),
    )


def _keystream_xor(enc_key: bytes, sequence: int, data: bytes) -> bytes:
    # CTR initial block is the frame sequence; sequences never repeat within
    # a direction, so counter blocks never collide.
    nonce = struct.pack(">Q", sequence) + bytes(8)
    encryptor = Cipher(algorithms.AES(enc_key), modes.CTR(nonce)).encryptor()
    return encryptor.update(data) + encryptor.finalize()


def seal(keys: SessionKeys, sequence: int, plaintext: bytes) -> bytes:
    """Encrypt-then-MAC ``plaintext`` into a framed message."""
    header = struct.pack(">QI", sequence, len(plaintext))
    ciphertext = _keystream_xor(keys.enc_key, sequence, plaintext)
    tag = mac(keys.mac_key, header + ciphertext)
    return header + ciphertext + tag


def open_frame(keys: SessionKeys, expected_sequence: int, frame: bytes) -> bytes:
    """Authenticate and decrypt one frame.

    The tag is checked before anything in the header is trusted, so any
    single-bit corruption anywhere in the frame (sequence, length field,
    ciphertext, or tag) surfaces as AuthFailure; a genuine replay of an
    intact frame surfaces as ReplayOrReorder. Only truncation below the
    fixed overhead is Malformed.
    """
    if len(frame) < FRAME_OVERHEAD:
        raise MalformedFrame(f"frame of {len(frame)} bytes is shorter than the fixed overhead")
    header = frame[:FRAME_HEADER_LEN]
    body = frame[FRAME_HEADER_LEN:-TAG_LEN]
    tag = frame[-TAG_LEN:]
    if not mac_equal(tag, mac(keys.mac_key, header + body)):
        raise AuthFailure("frame tag mismatch")
    sequence, length = struct.unpack(">QI", header)
    if len(body) != length:
        raise MalformedFrame(f"payload length field {length} != {len(body)} actual")
    if sequence != expected_sequence:
        raise ReplayOrReorder(expected_sequence, sequence)
    return _keystream_xor(keys.enc_key, sequence, body)

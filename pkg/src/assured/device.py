"""Simulated resource-constrained device.

The security architecture of a real device (microkernel isolation or a
trusted-execution zone) is modeled as a module boundary: the OEM trust anchor
and the attestation master key live in name-mangled private fields, banks are
written only by this module's operations, and the public API exposes nothing
but handshake bytes, install outcomes, boot results, and attestation reports.

Install regimes:

* DUAL_BANK (default): the inactive bank is staged and revalidated, then the
  active-bank pointer flips atomically; the previous firmware stays intact
  for fallback.
* SINGLE_BANK: the active bank is overwritten as the update streams in and
  validated only afterwards; a failed validation leaves the device pending a
  replacement image.

Fault-injection hooks (power loss between writes, flash corruption, a lying
installer) simulate hardware faults and compromised software below the
security boundary; they are not part of the device's protocol surface.
"""

from __future__ import annotations

import enum
import json
import random
import struct
from dataclasses import dataclass, field

from . import crypto
from .authorization import (
    AuthorizationToken,
    UpdateEnvelope,
    decode_token,
    encode_token,
    evaluate_constraints,
    parse_envelope,
    verify_token,
)
from .errors import (
    AssuredError,
    AttestationRefused,
    ChannelError,
    ConstraintViolation,
    ParseError,
    TokenRejected,
)
from .metadata import MetadataSet, Mode, RoleKind, RoleMetadata, parse, verify_full_chain

# sealed payload kinds
MSG_CONFIRM = 0x01
MSG_CHUNK = 0x02
MSG_FINAL_CHUNK = 0x03
MSG_STATUS = 0x04

BANK_WRITE_CHUNK = 64  # granularity of simulated flash writes


class InstallMode(enum.Enum):
    DUAL_BANK = "dual"
    SINGLE_BANK = "single"


class SimulatedPowerLoss(RuntimeError):
    """Raised by the fault hooks mid-install; not a protocol rejection."""


@dataclass
class Bank:
    artifact: bytes | None = None
    version: int = 0
    token: AuthorizationToken | None = None

    def clear(self) -> None:
        self.artifact = None
        self.version = 0
        self.token = None


@dataclass(frozen=True)
class AttestationReport:
    device_id: int
    nonce: bytes
    measurement: bytes
    tag: bytes


@dataclass(frozen=True)
class InstallOutcome:
    status: str  # installed | rejected | rolled_back
    version: int = 0
    reason: str = ""

    INSTALLED = "installed"
    REJECTED = "rejected"
    ROLLED_BACK = "rolled_back"

    def encode(self) -> bytes:
        return json.dumps(
            {"status": self.status, "version": self.version, "reason": self.reason},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("ascii")

    @classmethod
    def decode(cls, data: bytes) -> "InstallOutcome":
        try:
            obj = json.loads(data.decode("ascii"))
            return cls(status=obj["status"], version=obj["version"], reason=obj["reason"])
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ParseError(f"bad install status: {exc}") from exc


@dataclass(frozen=True)
class BootResult:
    running: bool
    version: int = 0
    reason: str = ""


@dataclass
class FaultHooks:
    """Simulated hardware/software faults, settable by the harness only."""

    fail_after_writes: int | None = None
    suppress_install: bool = False


@dataclass
class _Session:
    to_device: crypto.SessionKeys
    to_controller: crypto.SessionKeys
    transcript: bytes
    recv_seq: int = 0
    send_seq: int = 0
    confirmed: bool = False
    chunks: list[bytes] = field(default_factory=list)


def handshake_transcript(device_id: int, controller_nonce: bytes, device_nonce: bytes) -> bytes:
    return crypto.hash_data(struct.pack(">Q", device_id) + controller_nonce + device_nonce)


class Device:
    """One simulated device; strictly single-threaded like an MCU main loop."""

    def __init__(
        self,
        device_model: int,
        device_id: int,
        oem_public: bytes,
        attestation_key: bytes,
        install_mode: InstallMode = InstallMode.DUAL_BANK,
        rng: random.Random | None = None,
    ) -> None:
        self.device_model = device_model
        self.device_id = device_id
        self.__oem_public = oem_public
        self.__attestation_key = attestation_key
        self.install_mode = install_mode
        self.faults = FaultHooks()
        self.needs_replacement = False
        self._rng = rng or random.Random()
        self._banks = [Bank(), Bank()]
        self._active = 0
        self._installed_version = 0
        self._session: _Session | None = None
        self._served_nonces: set[bytes] = set()
        self._writes_done = 0
        self._trusted_root: RoleMetadata | None = None
        self._last_seen: dict[RoleKind, int] = {}

    # --- provisioning (manufacture time) ---------------------------------------

    def provision_firmware(self, artifact: bytes, token: AuthorizationToken) -> None:
        """Factory-install an image; validates the token like secure boot would."""
        verify_token(self.__oem_public, artifact, token)
        bank = self._banks[self._active]
        bank.artifact = artifact
        bank.version = token.constraints.new_version
        bank.token = token
        self._installed_version = bank.version

    def provision_trusted_root(self, root: RoleMetadata) -> None:
        """Install the repository trust anchor (TUF-comparison mode only)."""
        self._trusted_root = root

    # --- introspection ------------------------------------------------------------

    @property
    def installed_version(self) -> int:
        return self._installed_version

    @property
    def active_bank(self) -> int:
        return self._active

    def bank_version(self, index: int) -> int:
        return self._banks[index].version

    # --- authenticated channel ------------------------------------------------------

    def channel_accept(self, controller_nonce: bytes) -> bytes:
        """Answer a channel open: return a fresh device nonce and reset counters."""
        device_nonce = self._rng.randbytes(crypto.NONCE_LEN)
        master = self.__attestation_key
        self._session = _Session(
            to_device=crypto.derive_session_keys(master, controller_nonce, device_nonce),
            to_controller=crypto.derive_session_keys(master, device_nonce, controller_nonce),
            transcript=handshake_transcript(self.device_id, controller_nonce, device_nonce),
        )
        return device_nonce

    def _open_next(self, frame: bytes) -> bytes:
        session = self._session
        assert session is not None
        plaintext = crypto.open_frame(session.to_device, session.recv_seq, frame)
        session.recv_seq += 1
        return plaintext

    def _seal_reply(self, kind: int, payload: bytes) -> bytes:
        session = self._session
        assert session is not None
        frame = crypto.seal(session.to_controller, session.send_seq, bytes([kind]) + payload)
        session.send_seq += 1
        return frame

    def channel_receive(self, frames: list[bytes]) -> list[bytes]:
        """Process a batch of sealed frames, returning sealed responses.

        Channel failures raise before any flash write; protocol-level
        rejections come back as a sealed status frame.
        """
        if self._session is None:
            raise ChannelError("no active session")
        session = self._session
        replies: list[bytes] = []
        envelope_complete = False
        for frame in frames:
            plaintext = self._open_next(frame)
            if not plaintext:
                raise ChannelError("empty frame payload")
            kind, payload = plaintext[0], plaintext[1:]
            if kind == MSG_CONFIRM:
                if session.confirmed or payload != session.transcript:
                    raise ChannelError("handshake transcript mismatch")
                session.confirmed = True
                replies.append(self._seal_reply(MSG_CONFIRM, session.transcript))
            elif kind in (MSG_CHUNK, MSG_FINAL_CHUNK):
                if not session.confirmed:
                    raise ChannelError("envelope frame before handshake confirmation")
                session.chunks.append(payload)
                if kind == MSG_FINAL_CHUNK:
                    envelope_complete = True
            else:
                raise ChannelError(f"unexpected frame kind {kind}")
        if envelope_complete:
            envelope_bytes = b"".join(session.chunks)
            session.chunks = []
            outcome = self._install_from_bytes(envelope_bytes)
            replies.append(self._seal_reply(MSG_STATUS, outcome.encode()))
        return replies

    def receive_unsealed(self, envelope_bytes: bytes) -> InstallOutcome:
        """An envelope arriving outside the channel carries no controller
        approval; always rejected regardless of its content."""
        return InstallOutcome(InstallOutcome.REJECTED, reason="no_implicit_auth")

    # --- installation ------------------------------------------------------------------

    def _write(self, action) -> None:
        if self.faults.fail_after_writes is not None and self._writes_done >= self.faults.fail_after_writes:
            raise SimulatedPowerLoss(f"power loss after {self._writes_done} writes")
        action()
        self._writes_done += 1

    def _write_artifact(self, bank: Bank, artifact: bytes) -> None:
        def start() -> None:
            bank.artifact = b""

        self._write(start)
        for offset in range(0, len(artifact), BANK_WRITE_CHUNK):
            chunk = artifact[offset : offset + BANK_WRITE_CHUNK]

            def append(chunk: bytes = chunk) -> None:
                bank.artifact = (bank.artifact or b"") + chunk

            self._write(append)

    def _bank_consistent(self, bank: Bank) -> bool:
        """Write-integrity recheck of a staged bank against its token:
        hash and size only, no public-key work."""
        if bank.artifact is None or bank.token is None:
            return False
        return (
            crypto.hash_data(bank.artifact) == bank.token.artifact_hash
            and len(bank.artifact) == bank.token.artifact_size
            and bank.version == bank.token.constraints.new_version
        )

    def _install_from_bytes(self, envelope_bytes: bytes) -> InstallOutcome:
        try:
            envelope = parse_envelope(envelope_bytes)
        except ParseError as exc:
            return InstallOutcome(InstallOutcome.REJECTED, reason=f"malformed_envelope:{exc.position}")
        if self.faults.suppress_install:
            # compromised installer: claims success, writes nothing
            return InstallOutcome(InstallOutcome.INSTALLED, version=envelope.token.constraints.new_version)
        if self.install_mode is InstallMode.DUAL_BANK:
            return self._install_dual_bank(envelope)
        return self._install_single_bank(envelope)

    def _install_dual_bank(self, envelope: UpdateEnvelope) -> InstallOutcome:
        token = envelope.token
        try:
            verify_token(self.__oem_public, envelope.artifact, token)
            evaluate_constraints(token.constraints, self.device_model, self.device_id, self._installed_version)
        except (TokenRejected, ConstraintViolation) as exc:
            return InstallOutcome(InstallOutcome.REJECTED, reason=str(exc))
        staging = self._banks[1 - self._active]
        self._write(staging.clear)
        self._write_artifact(staging, envelope.artifact)
        self._write(lambda: setattr(staging, "token", token))
        self._write(lambda: setattr(staging, "version", token.constraints.new_version))
        if not self._bank_consistent(staging):
            staging.clear()
            return InstallOutcome(InstallOutcome.REJECTED, reason="bank_revalidation_failed")

        def flip() -> None:
            self._active = 1 - self._active
            self._installed_version = token.constraints.new_version

        self._write(flip)
        return InstallOutcome(InstallOutcome.INSTALLED, version=self._installed_version)

    def _install_single_bank(self, envelope: UpdateEnvelope) -> InstallOutcome:
        token = envelope.token
        try:
            # identity/order gates read only the fixed token fields, so they
            # run before the overwrite; crypto validation must wait until the
            # image is in flash (there is no room to stage it)
            evaluate_constraints(token.constraints, self.device_model, self.device_id, self._installed_version)
        except ConstraintViolation as exc:
            return InstallOutcome(InstallOutcome.REJECTED, reason=str(exc))
        bank = self._banks[self._active]
        previous_version = self._installed_version
        self._write(bank.clear)
        self._write_artifact(bank, envelope.artifact)
        self._write(lambda: setattr(bank, "token", token))
        self._write(lambda: setattr(bank, "version", token.constraints.new_version))
        try:
            verify_token(self.__oem_public, bank.artifact or b"", token)
        except TokenRejected as exc:
            self.needs_replacement = True
            return InstallOutcome(
                InstallOutcome.ROLLED_BACK,
                version=previous_version,
                reason=f"validation_after_write_failed:{exc.reason}",
            )
        self._installed_version = token.constraints.new_version
        return InstallOutcome(InstallOutcome.INSTALLED, version=self._installed_version)

    def receive_update_tuf(
        self, blobs: dict[RoleKind, bytes], name: str, artifact: bytes, mode: Mode, now: int = 0
    ) -> InstallOutcome:
        """Comparison mode: the device itself runs full metadata verification
        (six public-key operations at the standard thresholds) and installs
        the named record's artifact."""
        if self._trusted_root is None:
            raise AssuredError("device has no trusted root installed")
        try:
            metadata_set = MetadataSet(
                root=parse(blobs[RoleKind.ROOT], mode),
                targets=parse(blobs[RoleKind.TARGETS], mode),
                snapshot=parse(blobs[RoleKind.SNAPSHOT], mode),
                timestamp=parse(blobs[RoleKind.TIMESTAMP], mode),
            )
            targets = verify_full_chain(self._trusted_root, metadata_set, now=now, last_seen=self._last_seen)
        except AssuredError as exc:
            return InstallOutcome(InstallOutcome.REJECTED, reason=str(exc))
        for role in RoleKind:
            self._last_seen[role] = metadata_set.by_role(role).version
        record = targets.find(name)
        if record is None:
            return InstallOutcome(InstallOutcome.REJECTED, reason="unknown_target")
        if crypto.hash_data(artifact) != record.hash or len(artifact) != record.size:
            return InstallOutcome(InstallOutcome.REJECTED, reason="artifact_mismatch")
        new_version = metadata_set.targets.version
        if new_version <= self._installed_version:
            return InstallOutcome(InstallOutcome.REJECTED, reason="version_not_monotonic")
        staging = self._banks[1 - self._active]
        staging.clear()
        self._write_artifact(staging, artifact)
        staging.version = new_version
        self._active = 1 - self._active
        self._installed_version = new_version
        return InstallOutcome(InstallOutcome.INSTALLED, version=new_version)

    # --- boot and attestation -------------------------------------------------------------

    def _bank_boots(self, bank: Bank) -> bool:
        if bank.artifact is None or bank.token is None:
            return False
        try:
            verify_token(self.__oem_public, bank.artifact, bank.token)
        except TokenRejected:
            return False
        c = bank.token.constraints
        if c.device_model and c.device_model != self.device_model:
            return False
        if c.device_id and c.device_id != self.device_id:
            return False
        return True

    def boot(self) -> BootResult:
        """Secure-boot check: revalidate the active image, falling back to
        the other bank (dual-bank mode) when the active one fails."""
        if self.needs_replacement:
            return BootResult(running=False, reason="pending_replacement")
        active = self._banks[self._active]
        if self._bank_boots(active):
            return BootResult(running=True, version=active.version)
        if self.install_mode is InstallMode.DUAL_BANK:
            other = self._banks[1 - self._active]
            if self._bank_boots(other):
                self._active = 1 - self._active
                self._installed_version = other.version
                return BootResult(running=True, version=other.version, reason="fallback")
        return BootResult(running=False, reason="no_valid_bank")

    def attest(self, nonce: bytes) -> AttestationReport:
        """MAC over (device id, verifier nonce, active-image measurement).

        Nonces are single-use; freshness needs no device clock.
        """
        if len(nonce) != crypto.NONCE_LEN:
            raise AssuredError("attestation nonce must be 16 bytes")
        if nonce in self._served_nonces:
            raise AttestationRefused("nonce already served")
        self._served_nonces.add(nonce)
        artifact = self._banks[self._active].artifact or b""
        measurement = crypto.hash_data(artifact)
        tag = crypto.mac(
            self.__attestation_key,
            struct.pack(">Q", self.device_id) + nonce + measurement,
        )
        return AttestationReport(
            device_id=self.device_id, nonce=nonce, measurement=measurement, tag=tag
        )

    def _secure_store(self) -> tuple[bytes, bytes]:
        """Module-internal: (oem_public, attestation_key) for flash persistence."""
        return self.__oem_public, self.__attestation_key

    # --- fault injection (harness only) -----------------------------------------------------

    def simulate_flash_corruption(self, bank_index: int, bit_offset: int) -> None:
        """Hardware-fault model: flip one bit in a stored image."""
        bank = self._banks[bank_index]
        if bank.artifact:
            bit = bit_offset % (len(bank.artifact) * 8)
            raw = bytearray(bank.artifact)
            raw[bit // 8] ^= 1 << (bit % 8)
            bank.artifact = bytes(raw)

    def reset_write_counter(self) -> None:
        self._writes_done = 0


# --- flash persistence ---------------------------------------------------------------

_FLASH_MAGIC = b"ASFL"


def _pack_bank(bank: Bank) -> bytes:
    out = bytearray()
    if bank.artifact is None:
        out += b"\x00"
    else:
        out += b"\x01"
        out += struct.pack(">Q", bank.version)
        token_bytes = encode_token(bank.token) if bank.token else bytes(136)
        out += (b"\x01" if bank.token else b"\x00") + token_bytes
        out += struct.pack(">Q", len(bank.artifact)) + bank.artifact
    return bytes(out)


def _unpack_bank(reader) -> Bank:
    if not reader.u8("bank flag"):
        return Bank()
    version = reader.u64("bank version")
    has_token = reader.u8("token flag")
    token_bytes = reader.take(136, "bank token")
    token = decode_token(token_bytes) if has_token else None
    size = reader.u64("artifact length")
    artifact = reader.take(size, "artifact")
    return Bank(artifact=artifact, version=version, token=token)


def save_flash(device: Device, path: str) -> None:
    """Persist device state as one flat binary file (simulated flash)."""
    out = bytearray(_FLASH_MAGIC)
    out += struct.pack(
        ">QQBQBB",
        device.device_model,
        device.device_id,
        device._active,
        device._installed_version,
        0 if device.install_mode is InstallMode.DUAL_BANK else 1,
        1 if device.needs_replacement else 0,
    )
    for bank in device._banks:
        out += _pack_bank(bank)
    oem_public, attestation_key = device._secure_store()
    out += oem_public
    out += attestation_key
    nonces = sorted(device._served_nonces)
    out += struct.pack(">I", len(nonces))
    for nonce in nonces:
        out += nonce
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_flash(path: str, rng: random.Random | None = None) -> Device:
    from .metadata import _Reader

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _FLASH_MAGIC:
        raise ParseError("bad flash magic", position=0)
    reader = _Reader(data, offset=4)
    model = reader.u64("model")
    device_id = reader.u64("device id")
    active = reader.u8("active bank")
    installed = reader.u64("installed version")
    mode_flag = reader.u8("install mode")
    needs_replacement = reader.u8("replacement flag")
    banks = [_unpack_bank(reader), _unpack_bank(reader)]
    oem_public = reader.take(32, "oem public key")
    attestation_key = reader.take(32, "attestation key")
    nonce_count = reader.u32("nonce count")
    nonces = {reader.take(16, "nonce") for _ in range(nonce_count)}
    device = Device(
        device_model=model,
        device_id=device_id,
        oem_public=oem_public,
        attestation_key=attestation_key,
        install_mode=InstallMode.DUAL_BANK if mode_flag == 0 else InstallMode.SINGLE_BANK,
        rng=rng,
    )
    device._banks = banks
    device._active = active
    device._installed_version = installed
    device.needs_replacement = bool(needs_replacement)
    device._served_nonces = nonces
    return device

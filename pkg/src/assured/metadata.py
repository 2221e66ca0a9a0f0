"""Repository role metadata: construction, two canonical serializations, and
full-chain threshold verification.

Four roles sign disjoint duties: root certifies the key sets and thresholds
of every role, targets signs the artifact records, snapshot pins the current
root/targets versions, and timestamp pins the current snapshot (the freshness
heartbeat). Metadata expiration uses an injected logical clock (u64 ticks).

Signatures always cover the fixed-binary encoding of (role, version, expires,
body) — one mode-independent byte region — so a metadata object re-encoded
between JSON and fixed-binary keeps its signatures.

JSON mode is canonical: lexicographically sorted keys, no insignificant
whitespace, binary fields base64. Fixed-binary mode uses the layout:

    role_tag(1) || version(8) || expires(8) || body || sig_count(2)
    || (key_id(32) || signature(64))*
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import struct
from dataclasses import dataclass, field

from . import crypto
from .authorization import TOKEN_LEN, AuthorizationToken, decode_token, encode_token
from .errors import (
    BindingMismatch,
    Expired,
    ParseError,
    ThresholdNotMet,
    VersionRollback,
)


class RoleKind(enum.Enum):
    ROOT = "root"
    TARGETS = "targets"
    SNAPSHOT = "snapshot"
    TIMESTAMP = "timestamp"


_ROLE_TAGS = {RoleKind.ROOT: 0, RoleKind.TARGETS: 1, RoleKind.SNAPSHOT: 2, RoleKind.TIMESTAMP: 3}
_TAG_ROLES = {v: k for k, v in _ROLE_TAGS.items()}
_ROLE_ORDER = (RoleKind.ROOT, RoleKind.TARGETS, RoleKind.SNAPSHOT, RoleKind.TIMESTAMP)


class Mode(enum.Enum):
    JSON = "json"
    FIXED_BINARY = "binary"


# --- role bodies ---------------------------------------------------------------

@dataclass(frozen=True)
class RoleKeys:
    """Authorized public keys and signature threshold for one role."""

    threshold: int
    keys: tuple[bytes, ...]

    def __post_init__(self) -> None:
        if not 1 <= self.threshold <= len(self.keys):
            raise ValueError(
                f"threshold {self.threshold} outside 1..{len(self.keys)} keys"
            )


@dataclass
class RootBody:
    roles: dict[RoleKind, RoleKeys]

    def __post_init__(self) -> None:
        missing = [r.value for r in _ROLE_ORDER if r not in self.roles]
        if missing:
            raise ValueError(f"root body missing roles: {missing}")


@dataclass(frozen=True)
class TargetRecord:
    """One distributable artifact: name, content hash, byte size, and the
    OEM authorization token (None for plain-TUF comparison records)."""

    name: str
    hash: bytes
    size: int
    token: AuthorizationToken | None = None

    def __post_init__(self) -> None:
        if self.token is not None:
            if self.token.artifact_hash != self.hash or self.token.artifact_size != self.size:
                raise ValueError("record hash/size must equal the token's artifact hash/size")


@dataclass
class TargetsBody:
    records: list[TargetRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            raise ValueError("target names must be unique")

    def find(self, name: str) -> TargetRecord | None:
        for record in self.records:
            if record.name == name:
                return record
        return None


@dataclass(frozen=True)
class SnapshotBody:
    root_version: int
    targets_version: int


@dataclass(frozen=True)
class TimestampBody:
    snapshot_version: int
    snapshot_hash: bytes  # digest of the snapshot's signed region


_BODY_ROLES = {
    RootBody: RoleKind.ROOT,
    TargetsBody: RoleKind.TARGETS,
    SnapshotBody: RoleKind.SNAPSHOT,
    TimestampBody: RoleKind.TIMESTAMP,
}

RoleBody = RootBody | TargetsBody | SnapshotBody | TimestampBody


@dataclass
class RoleMetadata:
    role: RoleKind
    version: int
    expires: int
    body: RoleBody
    signatures: list[tuple[bytes, bytes]]  # (key_id, signature)

    def __post_init__(self) -> None:
        if self.version < 1:
            raise ValueError("metadata version must be >= 1")
        kids = [kid for kid, _ in self.signatures]
        if len(set(kids)) != len(kids):
            raise ValueError("key_ids within one metadata object must be distinct")


# --- signed region (fixed-binary body encoding) ----------------------------------

def _encode_body(body: RoleBody) -> bytes:
    if isinstance(body, RootBody):
        out = bytearray()
        for role in _ROLE_ORDER:
            entry = body.roles[role]
            out += struct.pack(">IH", entry.threshold, len(entry.keys))
            for key in entry.keys:
                out += key
        return bytes(out)
    if isinstance(body, TargetsBody):
        out = bytearray(struct.pack(">H", len(body.records)))
        for record in body.records:
            name = record.name.encode("utf-8")
            out += struct.pack(">H", len(name)) + name
            out += record.hash + struct.pack(">Q", record.size)
            if record.token is None:
                out += b"\x00"
            else:
                out += b"\x01" + encode_token(record.token)
        return bytes(out)
    if isinstance(body, SnapshotBody):
        return struct.pack(">QQ", body.root_version, body.targets_version)
    if isinstance(body, TimestampBody):
        return struct.pack(">Q", body.snapshot_version) + body.snapshot_hash
    raise TypeError(f"unknown body type {type(body)!r}")


class _Reader:
    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = data
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise ParseError(f"truncated {what}", position=self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack(">H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack(">I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack(">Q", self.take(8, what))[0]


def _decode_body(role: RoleKind, reader: _Reader) -> RoleBody:
    if role is RoleKind.ROOT:
        roles: dict[RoleKind, RoleKeys] = {}
        for entry_role in _ROLE_ORDER:
            threshold = reader.u32("threshold")
            count = reader.u16("key count")
            keys = tuple(reader.take(32, "public key") for _ in range(count))
            try:
                roles[entry_role] = RoleKeys(threshold=threshold, keys=keys)
            except ValueError as exc:
                raise ParseError(str(exc), position=reader.offset) from exc
        return RootBody(roles=roles)
    if role is RoleKind.TARGETS:
        count = reader.u16("record count")
        records = []
        for _ in range(count):
            name_len = reader.u16("name length")
            name_pos = reader.offset
            try:
                name = reader.take(name_len, "name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ParseError("target name is not utf-8", position=name_pos) from exc
            digest = reader.take(32, "record hash")
            size = reader.u64("record size")
            token: AuthorizationToken | None = None
            if reader.u8("token flag"):
                token = decode_token(reader.take(TOKEN_LEN, "token"))
            try:
                records.append(TargetRecord(name=name, hash=digest, size=size, token=token))
            except ValueError as exc:
                raise ParseError(str(exc), position=name_pos) from exc
        try:
            return TargetsBody(records=records)
        except ValueError as exc:
            raise ParseError(str(exc), position=reader.offset) from exc
    if role is RoleKind.SNAPSHOT:
        return SnapshotBody(root_version=reader.u64("root version"), targets_version=reader.u64("targets version"))
    if role is RoleKind.TIMESTAMP:
        return TimestampBody(snapshot_version=reader.u64("snapshot version"), snapshot_hash=reader.take(32, "snapshot hash"))
    raise ParseError(f"unknown role {role}", position=reader.offset)


def signed_region(role: RoleKind, version: int, expires: int, body: RoleBody) -> bytes:
    """The byte region signatures cover, identical in both modes."""
    return struct.pack(">BQQ", _ROLE_TAGS[role], version, expires) + _encode_body(body)


def signed_region_of(meta: RoleMetadata) -> bytes:
    return signed_region(meta.role, meta.version, meta.expires, meta.body)


# --- construction -----------------------------------------------------------------

def build_and_sign(
    body: RoleBody, version: int, expires: int, keys: list[crypto.SigningKeyPair]
) -> RoleMetadata:
    """Sign (role, version, expires, body) once per key."""
    if not keys:
        raise ValueError("at least one signing key required")
    role = _BODY_ROLES[type(body)]
    region = signed_region(role, version, expires, body)
    signatures = [(crypto.key_id(k.public), crypto.sign(k, region)) for k in keys]
    return RoleMetadata(role=role, version=version, expires=expires, body=body, signatures=signatures)


# --- serialization ------------------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _json_body(body: RoleBody):
    if isinstance(body, RootBody):
        return {
            role.value: [entry.threshold, [_b64(k) for k in entry.keys]]
            for role, entry in ((r, body.roles[r]) for r in _ROLE_ORDER)
        }
    if isinstance(body, TargetsBody):
        return [
            [r.name, _b64(r.hash), r.size, _b64(encode_token(r.token)) if r.token else None]
            for r in body.records
        ]
    if isinstance(body, SnapshotBody):
        return [body.root_version, body.targets_version]
    if isinstance(body, TimestampBody):
        return [body.snapshot_version, _b64(body.snapshot_hash)]
    raise TypeError(f"unknown body type {type(body)!r}")


def serialize_canonical(meta: RoleMetadata, mode: Mode) -> bytes:
    if mode is Mode.FIXED_BINARY:
        out = bytearray(signed_region_of(meta))
        out += struct.pack(">H", len(meta.signatures))
        for kid, sig in meta.signatures:
            out += kid + sig
        return bytes(out)
    obj = {
        "role": meta.role.value,
        "version": meta.version,
        "expires": meta.expires,
        "body": _json_body(meta.body),
        "signatures": [{"kid": _b64(kid), "sig": _b64(sig)} for kid, sig in meta.signatures],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("ascii")


def _need(obj: dict, key: str, kind, path: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing field {key!r}", position=path)
    value = obj[key]
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ParseError(f"field {key!r} must be an integer", position=f"{path}.{key}")
    elif not isinstance(value, kind):
        raise ParseError(f"field {key!r} has wrong type", position=f"{path}.{key}")
    return value


def _json_bytes(value, length: int, path: str) -> bytes:
    if not isinstance(value, str):
        raise ParseError("expected base64 string", position=path)
    try:
        raw = base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ParseError(f"bad base64: {exc}", position=path) from exc
    if len(raw) != length:
        raise ParseError(f"expected {length} bytes, got {len(raw)}", position=path)
    return raw


def _parse_json_body(role: RoleKind, raw, path: str) -> RoleBody:
    if role is RoleKind.ROOT:
        if not isinstance(raw, dict):
            raise ParseError("root body must be an object", position=path)
        roles = {}
        for entry_role in _ROLE_ORDER:
            entry = raw.get(entry_role.value)
            entry_path = f"{path}.{entry_role.value}"
            if not (isinstance(entry, list) and len(entry) == 2 and isinstance(entry[1], list)):
                raise ParseError("role entry must be [threshold, [keys]]", position=entry_path)
            threshold, keys = entry
            if not isinstance(threshold, int) or isinstance(threshold, bool):
                raise ParseError("threshold must be an integer", position=entry_path)
            decoded = tuple(_json_bytes(k, 32, f"{entry_path}[{i}]") for i, k in enumerate(keys))
            try:
                roles[entry_role] = RoleKeys(threshold=threshold, keys=decoded)
            except ValueError as exc:
                raise ParseError(str(exc), position=entry_path) from exc
        if set(raw) != {r.value for r in _ROLE_ORDER}:
            raise ParseError("root body must list exactly the four roles", position=path)
        return RootBody(roles=roles)
    if role is RoleKind.TARGETS:
        if not isinstance(raw, list):
            raise ParseError("targets body must be a list", position=path)
        records = []
        for i, item in enumerate(raw):
            item_path = f"{path}[{i}]"
            if not (isinstance(item, list) and len(item) == 4 and isinstance(item[0], str)):
                raise ParseError("record must be [name, hash, size, token]", position=item_path)
            name, digest_b64, size, token_b64 = item
            if not isinstance(size, int) or isinstance(size, bool) or size < 0:
                raise ParseError("record size must be a non-negative integer", position=item_path)
            token = None
            if token_b64 is not None:
                token = decode_token(_json_bytes(token_b64, TOKEN_LEN, item_path))
            try:
                records.append(
                    TargetRecord(name=name, hash=_json_bytes(digest_b64, 32, item_path), size=size, token=token)
                )
            except ValueError as exc:
                raise ParseError(str(exc), position=item_path) from exc
        try:
            return TargetsBody(records=records)
        except ValueError as exc:
            raise ParseError(str(exc), position=path) from exc
    if role is RoleKind.SNAPSHOT:
        if not (isinstance(raw, list) and len(raw) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in raw)):
            raise ParseError("snapshot body must be [root_version, targets_version]", position=path)
        return SnapshotBody(root_version=raw[0], targets_version=raw[1])
    if role is RoleKind.TIMESTAMP:
        if not (isinstance(raw, list) and len(raw) == 2 and isinstance(raw[0], int) and not isinstance(raw[0], bool)):
            raise ParseError("timestamp body must be [snapshot_version, snapshot_hash]", position=path)
        return TimestampBody(snapshot_version=raw[0], snapshot_hash=_json_bytes(raw[1], 32, path))
    raise ParseError(f"unknown role {role}", position=path)


def parse(data: bytes, mode: Mode) -> RoleMetadata:
    """Inverse of serialize_canonical; raises ParseError with a position."""
    if mode is Mode.FIXED_BINARY:
        reader = _Reader(data)
        tag = reader.u8("role tag")
        if tag not in _TAG_ROLES:
            raise ParseError(f"unknown role tag {tag}", position=0)
        role = _TAG_ROLES[tag]
        version = reader.u64("version")
        expires = reader.u64("expires")
        body = _decode_body(role, reader)
        sig_count = reader.u16("signature count")
        signatures = []
        for _ in range(sig_count):
            kid = reader.take(32, "key id")
            sig = reader.take(64, "signature")
            signatures.append((kid, sig))
        if reader.offset != len(data):
            raise ParseError("trailing bytes after metadata", position=reader.offset)
        try:
            return RoleMetadata(role=role, version=version, expires=expires, body=body, signatures=signatures)
        except ValueError as exc:
            raise ParseError(str(exc), position=reader.offset) from exc

    try:
        obj = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError("metadata is not utf-8", position=exc.start) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad json: {exc.msg}", position=exc.pos) from exc
    role_name = _need(obj, "role", str, "$")
    try:
        role = RoleKind(role_name)
    except ValueError as exc:
        raise ParseError(f"unknown role {role_name!r}", position="$.role") from exc
    version = _need(obj, "version", int, "$")
    expires = _need(obj, "expires", int, "$")
    body = _parse_json_body(role, _need(obj, "body", object, "$"), "$.body")
    raw_sigs = _need(obj, "signatures", list, "$")
    signatures = []
    for i, entry in enumerate(raw_sigs):
        sig_path = f"$.signatures[{i}]"
        if not isinstance(entry, dict):
            raise ParseError("signature entry must be an object", position=sig_path)
        signatures.append(
            (
                _json_bytes(_need(entry, "kid", str, sig_path), 32, sig_path),
                _json_bytes(_need(entry, "sig", str, sig_path), 64, sig_path),
            )
        )
    try:
        return RoleMetadata(role=role, version=version, expires=expires, body=body, signatures=signatures)
    except ValueError as exc:
        raise ParseError(str(exc), position="$") from exc


# --- full-chain verification -----------------------------------------------------

@dataclass
class MetadataSet:
    root: RoleMetadata
    targets: RoleMetadata
    snapshot: RoleMetadata
    timestamp: RoleMetadata

    def by_role(self, role: RoleKind) -> RoleMetadata:
        return getattr(self, role.value)


def verify_role_signatures(meta: RoleMetadata, authorized: RoleKeys) -> None:
    """Check that at least ``threshold`` distinct authorized keys signed.

    Stops as soon as the threshold is met, so a well-formed object costs
    exactly ``threshold`` public-key verifications; duplicate key_ids and
    unknown key_ids are skipped without a verification.
    """
    by_kid = {crypto.key_id(k): k for k in authorized.keys}
    region = signed_region_of(meta)
    counted: set[bytes] = set()
    for kid, sig in meta.signatures:
        if kid not in by_kid or kid in counted:
            continue
        if crypto.verify(by_kid[kid], region, sig):
            counted.add(kid)
            if len(counted) >= authorized.threshold:
                return
    raise ThresholdNotMet(
        meta.role.value, f"{len(counted)} of {authorized.threshold} required signatures"
    )


def _check_role(
    meta: RoleMetadata,
    expected_role: RoleKind,
    authorized: RoleKeys,
    now: int,
    last_seen: dict[RoleKind, int] | None,
) -> None:
    if meta.role is not expected_role:
        raise BindingMismatch(expected_role.value, f"metadata is for role {meta.role.value}")
    verify_role_signatures(meta, authorized)
    if meta.expires <= now:
        raise Expired(meta.role.value, f"expired at tick {meta.expires}, now {now}")
    if last_seen is not None and meta.version < last_seen.get(expected_role, 0):
        raise VersionRollback(
            expected_role.value,
            f"presented version {meta.version} < last seen {last_seen[expected_role]}",
        )


def verify_full_chain(
    trusted_root: RoleMetadata,
    metadata_set: MetadataSet,
    now: int,
    last_seen: dict[RoleKind, int] | None = None,
) -> TargetsBody:
    """Validate a complete metadata set and return the verified targets body.

    Order: root against the trusted root's root-role keys, then timestamp,
    snapshot, and targets against the presented (now validated) root. All
    expirations must be strictly after ``now``; presented versions must not
    regress below ``last_seen``. With thresholds (2,2,1,1) the happy path
    performs exactly six signature verifications.
    """
    if not isinstance(trusted_root.body, RootBody):
        raise BindingMismatch("root", "trusted root metadata has no root body")
    _check_role(metadata_set.root, RoleKind.ROOT, trusted_root.body.roles[RoleKind.ROOT], now, last_seen)
    root_body = metadata_set.root.body
    assert isinstance(root_body, RootBody)

    _check_role(metadata_set.timestamp, RoleKind.TIMESTAMP, root_body.roles[RoleKind.TIMESTAMP], now, last_seen)
    ts_body = metadata_set.timestamp.body
    assert isinstance(ts_body, TimestampBody)

    _check_role(metadata_set.snapshot, RoleKind.SNAPSHOT, root_body.roles[RoleKind.SNAPSHOT], now, last_seen)
    snap_body = metadata_set.snapshot.body
    assert isinstance(snap_body, SnapshotBody)

    if ts_body.snapshot_version != metadata_set.snapshot.version:
        raise BindingMismatch(
            "snapshot",
            f"timestamp pins snapshot version {ts_body.snapshot_version}, got {metadata_set.snapshot.version}",
        )
    if ts_body.snapshot_hash != crypto.hash_data(signed_region_of(metadata_set.snapshot)):
        raise BindingMismatch("snapshot", "timestamp's snapshot hash does not match")

    _check_role(metadata_set.targets, RoleKind.TARGETS, root_body.roles[RoleKind.TARGETS], now, last_seen)
    if snap_body.targets_version != metadata_set.targets.version:
        raise BindingMismatch(
            "targets",
            f"snapshot pins targets version {snap_body.targets_version}, got {metadata_set.targets.version}",
        )
    if snap_body.root_version != metadata_set.root.version:
        raise BindingMismatch(
            "root",
            f"snapshot pins root version {snap_body.root_version}, got {metadata_set.root.version}",
        )

    targets_body = metadata_set.targets.body
    assert isinstance(targets_body, TargetsBody)
    return targets_body

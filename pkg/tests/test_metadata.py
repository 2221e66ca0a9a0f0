"""Role metadata: serialization round-trips, threshold verification, the
exact signature-verification count, expiry/rollback/binding failures, and
the size budgets of the two encodings."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assured import crypto
from assured.authorization import Constraints, issue_token
from assured.errors import (
    BindingMismatch,
    Expired,
    ParseError,
    ThresholdNotMet,
    VersionRollback,
)
from assured.metadata import (
    MetadataSet,
    Mode,
    RoleKind,
    RoleKeys,
    RootBody,
    SnapshotBody,
    TargetRecord,
    TargetsBody,
    TimestampBody,
    build_and_sign,
    parse,
    serialize_canonical,
    verify_full_chain,
    verify_role_signatures,
)
from assured.repository import fetch_metadata, new_repository, publish_vanilla


def keypairs(label: bytes, count: int):
    return [crypto.signing_key_from_seed(label * 16 + bytes([i]) * 16) for i in range(count)]


@pytest.fixture(scope="module")
def role_keys():
    return {
        RoleKind.ROOT: keypairs(b"r", 2),
        RoleKind.TARGETS: keypairs(b"t", 2),
        RoleKind.SNAPSHOT: keypairs(b"s", 1),
        RoleKind.TIMESTAMP: keypairs(b"w", 1),
    }


@pytest.fixture(scope="module")
def repo(role_keys):
    return new_repository(
        root_keys=role_keys[RoleKind.ROOT],
        targets_keys=role_keys[RoleKind.TARGETS],
        snapshot_keys=role_keys[RoleKind.SNAPSHOT],
        timestamp_keys=role_keys[RoleKind.TIMESTAMP],
    )


def resign(repo, role, role_keys, *, version=None, expires=None, body=None):
    meta = repo.metadata.by_role(role)
    return build_and_sign(
        body if body is not None else meta.body,
        version if version is not None else meta.version,
        expires if expires is not None else meta.expires,
        role_keys[role],
    )


class TestSerialization:
    @pytest.mark.parametrize("mode", list(Mode))
    @pytest.mark.parametrize("role", list(RoleKind))
    def test_round_trip_each_role(self, repo, role, mode):
        meta = repo.metadata.by_role(role)
        assert parse(serialize_canonical(meta, mode), mode) == meta

    @pytest.mark.parametrize("mode", list(Mode))
    def test_round_trip_with_token_record(self, oem_key, role_keys, mode):
        artifact = b"\x5a" * 64
        token = issue_token(oem_key, artifact, Constraints(new_version=4))
        body = TargetsBody(
            records=[TargetRecord(name="fw", hash=token.artifact_hash, size=64, token=token)]
        )
        meta = build_and_sign(body, 3, 500, role_keys[RoleKind.TARGETS])
        assert parse(serialize_canonical(meta, mode), mode) == meta

    def test_canonical_json_is_byte_stable(self, repo):
        meta = repo.metadata.targets
        assert serialize_canonical(meta, Mode.JSON) == serialize_canonical(meta, Mode.JSON)

    def test_signature_covers_mode_independent_region(self, repo, role_keys):
        # re-encoding between modes must not invalidate signatures
        meta = repo.metadata.snapshot
        rebuilt = parse(serialize_canonical(meta, Mode.JSON), Mode.JSON)
        verify_role_signatures(rebuilt, RoleKeys(threshold=1, keys=(role_keys[RoleKind.SNAPSHOT][0].public,)))
        rebuilt = parse(serialize_canonical(meta, Mode.FIXED_BINARY), Mode.FIXED_BINARY)
        verify_role_signatures(rebuilt, RoleKeys(threshold=1, keys=(role_keys[RoleKind.SNAPSHOT][0].public,)))

    def test_parse_error_carries_position(self):
        with pytest.raises(ParseError):
            parse(b"\xff" + bytes(40), Mode.FIXED_BINARY)
        with pytest.raises(ParseError):
            parse(b'{"role":"root"', Mode.JSON)
        with pytest.raises(ParseError):
            parse(b'{"role":"root","version":1}', Mode.JSON)

    @given(st.binary(max_size=200))
    @settings(max_examples=200)
    def test_arbitrary_binary_never_crashes(self, blob):
        try:
            parse(blob, Mode.FIXED_BINARY)
        except ParseError:
            pass

    @given(
        st.sampled_from(list(Mode)),
        st.integers(min_value=1, max_value=2**32),
        st.integers(min_value=0, max_value=2**32),
        st.lists(
            st.tuples(
                st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=12),
                st.binary(min_size=32, max_size=32),
                st.integers(min_value=0, max_value=2**40),
            ),
            max_size=4,
            unique_by=lambda t: t[0],
        ),
    )
    @settings(max_examples=40, deadline=None)
    def test_generated_targets_round_trip(self, mode, version, expires, raw_records):
        records = [TargetRecord(name=n, hash=h, size=s, token=None) for n, h, s in raw_records]
        meta = build_and_sign(TargetsBody(records=records), version, expires, keypairs(b"t", 2))
        assert parse(serialize_canonical(meta, mode), mode) == meta

    def test_json_set_size_for_one_target_repo(self, repo):
        # device-visible metadata for one update: targets + snapshot + timestamp,
        # plain-TUF records; the trust-anchor root is pre-installed, not transferred
        state = publish_vanilla(repo, "fw", b"\x11" * 256)
        total = sum(
            len(fetch_metadata(state, role))
            for role in (RoleKind.TARGETS, RoleKind.SNAPSHOT, RoleKind.TIMESTAMP)
        )
        assert 840 <= total <= 1040, total

    def test_fixed_binary_targets_no_larger_than_json(self, repo, oem_key):
        artifact = b"\x11" * 256
        token = issue_token(oem_key, artifact, Constraints(new_version=2))
        record = TargetRecord(name="fw", hash=token.artifact_hash, size=256, token=token)
        meta = build_and_sign(TargetsBody(records=[record]), 2, 1000, keypairs(b"t", 2))
        binary = serialize_canonical(meta, Mode.FIXED_BINARY)
        json_form = serialize_canonical(meta, Mode.JSON)
        assert len(binary) <= len(json_form)


class TestThresholds:
    def test_two_keys_two_key_ids(self, role_keys):
        meta = build_and_sign(SnapshotBody(1, 1), 1, 10, role_keys[RoleKind.TARGETS])
        assert len({kid for kid, _ in meta.signatures}) == 2

    def test_threshold_two_with_both_keys_accepts(self, role_keys):
        keys = role_keys[RoleKind.TARGETS]
        meta = build_and_sign(SnapshotBody(1, 1), 1, 10, keys)
        verify_role_signatures(meta, RoleKeys(threshold=2, keys=tuple(k.public for k in keys)))

    def test_threshold_two_with_one_signature_rejects(self, role_keys):
        keys = role_keys[RoleKind.TARGETS]
        meta = build_and_sign(SnapshotBody(1, 1), 1, 10, keys[:1])
        with pytest.raises(ThresholdNotMet):
            verify_role_signatures(meta, RoleKeys(threshold=2, keys=tuple(k.public for k in keys)))

    def test_duplicate_signatures_count_once(self, role_keys):
        keys = role_keys[RoleKind.TARGETS]
        meta = build_and_sign(SnapshotBody(1, 1), 1, 10, keys[:1])
        meta.signatures = meta.signatures * 2  # sidestep construction-time distinctness
        with pytest.raises(ThresholdNotMet):
            verify_role_signatures(meta, RoleKeys(threshold=2, keys=tuple(k.public for k in keys)))

    def test_threshold_monotonicity(self, role_keys):
        keys = role_keys[RoleKind.TARGETS]
        meta = build_and_sign(SnapshotBody(1, 1), 1, 10, keys)
        authorized = tuple(k.public for k in keys)
        for t in (1, 2):
            verify_role_signatures(meta, RoleKeys(threshold=t, keys=authorized))

    def test_unknown_key_ids_cost_no_verification(self, role_keys):
        keys = role_keys[RoleKind.TARGETS]
        meta = build_and_sign(SnapshotBody(1, 1), 1, 10, keys)
        stranger = keypairs(b"x", 1)[0]
        before = crypto.VERIFY_COUNTER.read()
        with pytest.raises(ThresholdNotMet):
            verify_role_signatures(meta, RoleKeys(threshold=1, keys=(stranger.public,)))
        assert crypto.VERIFY_COUNTER.read() == before


class TestFullChain:
    def test_happy_path_exactly_six_verifications(self, repo):
        before = crypto.VERIFY_COUNTER.read()
        targets = verify_full_chain(repo.metadata.root, repo.metadata, now=0)
        assert crypto.VERIFY_COUNTER.read() - before == 6
        assert isinstance(targets, TargetsBody)

    def test_expired_timestamp(self, repo):
        with pytest.raises(Expired) as excinfo:
            verify_full_chain(repo.metadata.root, repo.metadata, now=10)
        assert excinfo.value.role == "timestamp"

    def test_version_rollback(self, repo):
        last_seen = {RoleKind.TIMESTAMP: 5}
        with pytest.raises(VersionRollback) as excinfo:
            verify_full_chain(repo.metadata.root, repo.metadata, now=0, last_seen=last_seen)
        assert excinfo.value.role == "timestamp"

    def test_equal_version_is_not_rollback(self, repo):
        last_seen = {role: 1 for role in RoleKind}
        verify_full_chain(repo.metadata.root, repo.metadata, now=0, last_seen=last_seen)

    def test_stale_snapshot_binding(self, repo, role_keys):
        # re-sign targets at version+1 without refreshing snapshot
        stale = MetadataSet(
            root=repo.metadata.root,
            targets=resign(repo, RoleKind.TARGETS, role_keys, version=2),
            snapshot=repo.metadata.snapshot,
            timestamp=repo.metadata.timestamp,
        )
        with pytest.raises(BindingMismatch):
            verify_full_chain(repo.metadata.root, stale, now=0)

    def test_tampered_timestamp_hash_binding(self, repo, role_keys):
        body = TimestampBody(snapshot_version=1, snapshot_hash=bytes(32))
        bad_ts = resign(repo, RoleKind.TIMESTAMP, role_keys, body=body)
        tampered = MetadataSet(
            root=repo.metadata.root,
            targets=repo.metadata.targets,
            snapshot=repo.metadata.snapshot,
            timestamp=bad_ts,
        )
        with pytest.raises(BindingMismatch):
            verify_full_chain(repo.metadata.root, tampered, now=0)

    def test_unauthorized_signers_rejected(self, repo, role_keys):
        rogue = keypairs(b"z", 2)
        forged = MetadataSet(
            root=repo.metadata.root,
            targets=build_and_sign(repo.metadata.targets.body, 1, 1000, rogue),
            snapshot=repo.metadata.snapshot,
            timestamp=repo.metadata.timestamp,
        )
        with pytest.raises(ThresholdNotMet):
            verify_full_chain(repo.metadata.root, forged, now=0)


class TestInvariantsAtConstruction:
    def test_threshold_bounds(self):
        with pytest.raises(ValueError):
            RoleKeys(threshold=0, keys=(bytes(32),))
        with pytest.raises(ValueError):
            RoleKeys(threshold=2, keys=(bytes(32),))

    def test_duplicate_target_names(self):
        record = TargetRecord(name="a", hash=bytes(32), size=1, token=None)
        with pytest.raises(ValueError):
            TargetsBody(records=[record, record])

    def test_record_token_consistency(self, oem_key):
        token = issue_token(oem_key, b"abc", Constraints(new_version=2))
        with pytest.raises(ValueError):
            TargetRecord(name="a", hash=bytes(32), size=3, token=token)

    def test_version_floor(self, role_keys):
        with pytest.raises(ValueError):
            build_and_sign(SnapshotBody(1, 1), 0, 10, role_keys[RoleKind.SNAPSHOT])

    def test_root_body_requires_all_roles(self):
        with pytest.raises(ValueError):
            RootBody(roles={RoleKind.ROOT: RoleKeys(threshold=1, keys=(bytes(32),))})

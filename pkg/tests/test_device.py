"""Device behavior: channel endpoint, install regimes, boot, attestation,
fault injection, secret confinement, and flash persistence."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assured import crypto
from assured.authorization import (
    Constraints,
    build_envelope,
    issue_token,
    serialize_envelope,
)
from assured.device import (
    MSG_CHUNK,
    MSG_CONFIRM,
    MSG_FINAL_CHUNK,
    MSG_STATUS,
    Device,
    InstallMode,
    InstallOutcome,
    SimulatedPowerLoss,
    handshake_transcript,
    load_flash,
    save_flash,
)
from assured.errors import AttestationRefused, ChannelError
from assured.metadata import RoleKind
from assured.repository import fetch_metadata, new_repository, publish_vanilla

K_ATT = b"\x33" * 32
MODEL, DEVICE_ID = 100, 7


def make_device(oem_key, mode=InstallMode.DUAL_BANK, version=1):
    device = Device(
        device_model=MODEL,
        device_id=DEVICE_ID,
        oem_public=oem_key.public,
        attestation_key=K_ATT,
        install_mode=mode,
        rng=random.Random(1),
    )
    artifact = b"\x01" * 300
    token = issue_token(
        oem_key, artifact, Constraints(device_model=MODEL, device_id=DEVICE_ID, new_version=version)
    )
    device.provision_firmware(artifact, token)
    return device


def make_envelope(oem_key, version=2, model=MODEL, device_id=0, size=500, prev=0):
    artifact = bytes([version % 251]) * size
    token = issue_token(
        oem_key,
        artifact,
        Constraints(
            device_model=model, device_id=device_id, required_prev_version=prev, new_version=version
        ),
    )
    return serialize_envelope(build_envelope(token, artifact)), artifact


class Channel:
    """Controller-side half of the handshake, for driving a device directly."""

    def __init__(self, device: Device, controller_nonce: bytes = b"\x44" * 16):
        self.device = device
        device_nonce = device.channel_accept(controller_nonce)
        self.to_device = crypto.derive_session_keys(K_ATT, controller_nonce, device_nonce)
        self.to_controller = crypto.derive_session_keys(K_ATT, device_nonce, controller_nonce)
        self.transcript = handshake_transcript(device.device_id, controller_nonce, device_nonce)
        self.send_seq = 0
        self.recv_seq = 0
        replies = device.channel_receive([self.seal(MSG_CONFIRM, self.transcript)])
        assert self.open(replies[0]) == bytes([MSG_CONFIRM]) + self.transcript

    def seal(self, kind: int, payload: bytes) -> bytes:
        frame = crypto.seal(self.to_device, self.send_seq, bytes([kind]) + payload)
        self.send_seq += 1
        return frame

    def open(self, frame: bytes) -> bytes:
        plaintext = crypto.open_frame(self.to_controller, self.recv_seq, frame)
        self.recv_seq += 1
        return plaintext

    def deliver(self, envelope_bytes: bytes, chunk: int = 4096) -> InstallOutcome:
        chunks = [envelope_bytes[i : i + chunk] for i in range(0, len(envelope_bytes), chunk)]
        frames = [
            self.seal(MSG_FINAL_CHUNK if i == len(chunks) - 1 else MSG_CHUNK, part)
            for i, part in enumerate(chunks)
        ]
        replies = self.device.channel_receive(frames)
        status = self.open(replies[-1])
        assert status[0] == MSG_STATUS
        return InstallOutcome.decode(status[1:])


class TestHandshake:
    def test_fresh_device_nonce_gives_fresh_keys(self, oem_key):
        device = make_device(oem_key)
        nonce = b"\x44" * 16
        first = device.channel_accept(nonce)
        second = device.channel_accept(nonce)
        assert first != second
        assert crypto.derive_session_keys(K_ATT, nonce, first) != crypto.derive_session_keys(
            K_ATT, nonce, second
        )

    def test_both_sides_derive_identical_keys(self, oem_key):
        device = make_device(oem_key)
        Channel(device)  # asserts the mutual confirmation internally

    def test_prior_session_frames_rejected(self, oem_key):
        device = make_device(oem_key)
        channel = Channel(device)
        stale = channel.seal(MSG_FINAL_CHUNK, b"leftover")
        Channel(device)  # new session, new keys
        with pytest.raises(ChannelError):
            device.channel_receive([stale])

    def test_no_session_rejects_frames(self, oem_key):
        device = Device(MODEL, DEVICE_ID, oem_key.public, K_ATT)
        with pytest.raises(ChannelError):
            device.channel_receive([b"\x00" * 64])

    def test_envelope_before_confirmation_rejected(self, oem_key):
        device = make_device(oem_key)
        nonce = b"\x44" * 16
        device_nonce = device.channel_accept(nonce)
        keys = crypto.derive_session_keys(K_ATT, nonce, device_nonce)
        frame = crypto.seal(keys, 0, bytes([MSG_FINAL_CHUNK]) + b"data")
        with pytest.raises(ChannelError):
            device.channel_receive([frame])


class TestReceiveUpdate:
    def test_dual_bank_install_keeps_previous_image(self, oem_key):
        device = make_device(oem_key)
        old_bank = device.active_bank
        envelope_bytes, artifact = make_envelope(oem_key)
        outcome = Channel(device).deliver(envelope_bytes)
        assert outcome == InstallOutcome(InstallOutcome.INSTALLED, version=2)
        assert device.installed_version == 2
        assert device.active_bank == 1 - old_bank
        assert device.bank_version(old_bank) == 1  # rollback capability intact

    def test_multi_frame_delivery(self, oem_key):
        device = make_device(oem_key)
        envelope_bytes, _ = make_envelope(oem_key, size=5000)
        outcome = Channel(device).deliver(envelope_bytes, chunk=512)
        assert outcome.status == InstallOutcome.INSTALLED

    def test_wrong_device_rejected_state_unchanged(self, oem_key):
        device = make_device(oem_key)
        envelope_bytes, _ = make_envelope(oem_key, device_id=DEVICE_ID + 1)
        outcome = Channel(device).deliver(envelope_bytes)
        assert outcome.status == InstallOutcome.REJECTED
        assert outcome.reason == "wrong_device"
        assert device.installed_version == 1

    def test_exactly_one_public_key_verification(self, oem_key):
        device = make_device(oem_key)
        envelope_bytes, _ = make_envelope(oem_key)
        channel = Channel(device)
        before = crypto.VERIFY_COUNTER.read()
        channel.deliver(envelope_bytes)
        assert crypto.VERIFY_COUNTER.read() - before == 1

    def test_malformed_envelope_rejected(self, oem_key):
        device = make_device(oem_key)
        outcome = Channel(device).deliver(b"garbage that is not an envelope")
        assert outcome.status == InstallOutcome.REJECTED
        assert outcome.reason.startswith("malformed_envelope")
        assert device.installed_version == 1

    def test_plaintext_envelope_always_rejected(self, oem_key):
        device = make_device(oem_key)
        envelope_bytes, _ = make_envelope(oem_key)
        outcome = device.receive_unsealed(envelope_bytes)
        assert outcome.status == InstallOutcome.REJECTED
        assert outcome.reason == "no_implicit_auth"
        assert device.installed_version == 1

    def test_single_bank_corrupted_install_flags_replacement(self, oem_key):
        device = make_device(oem_key, mode=InstallMode.SINGLE_BANK)
        envelope_bytes, artifact = make_envelope(oem_key)
        # corrupt the artifact region after the token so only post-write validation can notice
        corrupted = bytearray(envelope_bytes)
        corrupted[-1] ^= 0x01
        outcome = Channel(device).deliver(bytes(corrupted))
        assert outcome.status == InstallOutcome.ROLLED_BACK
        assert "validation_after_write_failed" in outcome.reason
        assert device.needs_replacement
        assert not device.boot().running

    def test_single_bank_happy_path(self, oem_key):
        device = make_device(oem_key, mode=InstallMode.SINGLE_BANK)
        envelope_bytes, _ = make_envelope(oem_key)
        outcome = Channel(device).deliver(envelope_bytes)
        assert outcome.status == InstallOutcome.INSTALLED
        assert device.boot().running


class TestFailurePointInjection:
    def count_writes(self, oem_key) -> int:
        device = make_device(oem_key)
        envelope_bytes, _ = make_envelope(oem_key)
        device.reset_write_counter()
        Channel(device).deliver(envelope_bytes)
        return device._writes_done

    def test_every_injection_point_leaves_device_bootable(self, oem_key):
        total_writes = self.count_writes(oem_key)
        assert total_writes > 5  # staging clear + chunks + token + version + flip
        envelope_template, _ = make_envelope(oem_key)
        for fail_at in range(total_writes):
            device = make_device(oem_key)
            device.reset_write_counter()
            device.faults.fail_after_writes = fail_at
            channel = Channel(device)
            with pytest.raises(SimulatedPowerLoss):
                channel.deliver(envelope_template)
            device.faults.fail_after_writes = None
            result = device.boot()
            assert result.running, f"unbootable after power loss at write {fail_at}"
            assert result.version in (1, 2)

    def test_last_write_is_the_atomic_flip(self, oem_key):
        total_writes = self.count_writes(oem_key)
        device = make_device(oem_key)
        device.reset_write_counter()
        device.faults.fail_after_writes = total_writes - 1  # everything but the flip
        with pytest.raises(SimulatedPowerLoss):
            Channel(device).deliver(make_envelope(oem_key)[0])
        device.faults.fail_after_writes = None
        assert device.boot().version == 1  # staged but never flipped


class TestBoot:
    def test_boot_after_install(self, oem_key):
        device = make_device(oem_key)
        Channel(device).deliver(make_envelope(oem_key)[0])
        assert device.boot() == type(device.boot())(running=True, version=2)

    def test_corrupted_active_falls_back(self, oem_key):
        device = make_device(oem_key)
        Channel(device).deliver(make_envelope(oem_key)[0])
        device.simulate_flash_corruption(device.active_bank, bit_offset=5)
        result = device.boot()
        assert result.running and result.version == 1 and result.reason == "fallback"

    def test_both_banks_corrupted_halts(self, oem_key):
        device = make_device(oem_key)
        Channel(device).deliver(make_envelope(oem_key)[0])
        device.simulate_flash_corruption(0, bit_offset=5)
        device.simulate_flash_corruption(1, bit_offset=5)
        result = device.boot()
        assert not result.running and result.reason == "no_valid_bank"

    def test_empty_device_halts(self, oem_key):
        device = Device(MODEL, DEVICE_ID, oem_key.public, K_ATT)
        assert not device.boot().running


class TestAttestation:
    def test_report_verifies(self, oem_key):
        device = make_device(oem_key)
        nonce = b"\x10" * 16
        report = device.attest(nonce)
        expected = crypto.mac(
            K_ATT, DEVICE_ID.to_bytes(8, "big") + nonce + report.measurement
        )
        assert report.tag == expected
        assert report.measurement == crypto.hash_data(b"\x01" * 300)

    def test_nonce_replay_refused(self, oem_key):
        device = make_device(oem_key)
        device.attest(b"\x10" * 16)
        with pytest.raises(AttestationRefused):
            device.attest(b"\x10" * 16)

    def test_measurement_tracks_active_bank(self, oem_key):
        device = make_device(oem_key)
        envelope_bytes, artifact = make_envelope(oem_key)
        Channel(device).deliver(envelope_bytes)
        report = device.attest(b"\x11" * 16)
        assert report.measurement == crypto.hash_data(artifact)


@given(st.lists(st.integers(min_value=0, max_value=6), min_size=1, max_size=8))
@settings(max_examples=30, deadline=None)
def test_installed_version_strictly_increases(versions):
    oem = crypto.signing_key_from_seed(bytes(range(32)))
    device = make_device(oem)
    accepted = [device.installed_version]
    channel = Channel(device)
    for version in versions:
        if version < 1:
            continue
        envelope_bytes, _ = make_envelope(oem, version=version, size=96)
        outcome = channel.deliver(envelope_bytes)
        if outcome.status == InstallOutcome.INSTALLED:
            assert outcome.version > accepted[-1]
            accepted.append(outcome.version)
        else:
            assert version <= accepted[-1]
            assert device.installed_version == accepted[-1]
    assert accepted == sorted(set(accepted))


class TestTufComparisonMode:
    def make_vanilla_world(self, oem_key):
        keys = lambda label, n: [  # noqa: E731
            crypto.signing_key_from_seed(label * 16 + bytes([i]) * 16) for i in range(n)
        ]
        state = new_repository(
            root_keys=keys(b"r", 2),
            targets_keys=keys(b"t", 2),
            snapshot_keys=keys(b"s", 1),
            timestamp_keys=keys(b"w", 1),
        )
        artifact = b"\x77" * 256
        state = publish_vanilla(state, "fw", artifact)
        return state, artifact

    def test_six_verifications_on_device(self, oem_key):
        state, artifact = self.make_vanilla_world(oem_key)
        device = Device(MODEL, DEVICE_ID, oem_key.public, K_ATT)
        device.provision_trusted_root(state.metadata.root)
        blobs = {role: fetch_metadata(state, role) for role in RoleKind}
        before = crypto.VERIFY_COUNTER.read()
        outcome = device.receive_update_tuf(blobs, "fw", artifact, state.mode, now=state.clock)
        assert crypto.VERIFY_COUNTER.read() - before == 6
        assert outcome.status == InstallOutcome.INSTALLED

    def test_wrong_artifact_rejected(self, oem_key):
        state, artifact = self.make_vanilla_world(oem_key)
        device = Device(MODEL, DEVICE_ID, oem_key.public, K_ATT)
        device.provision_trusted_root(state.metadata.root)
        blobs = {role: fetch_metadata(state, role) for role in RoleKind}
        outcome = device.receive_update_tuf(blobs, "fw", artifact + b"x", state.mode)
        assert outcome.status == InstallOutcome.REJECTED


class TestSecretConfinement:
    SIMULATION_HOOKS = {
        "faults",
        "simulate_flash_corruption",
        "reset_write_counter",
        "provision_firmware",
        "provision_trusted_root",
        "needs_replacement",
    }

    def test_no_public_surface_exposes_secrets(self, oem_key):
        device = make_device(oem_key)
        public_names = [name for name in dir(device) if not name.startswith("_")]
        for name in public_names:
            value = getattr(device, name)
            if callable(value) or name in self.SIMULATION_HOOKS:
                continue
            assert value != K_ATT, f"{name} leaks the attestation key"
            assert value != oem_key.public, f"{name} leaks the secure-store trust anchor"
        assert not hasattr(device, "k_att")
        assert not hasattr(device, "attestation_key")
        assert not hasattr(device, "oem_public")
        assert not hasattr(device, "banks")

    def test_instance_dict_secrets_are_name_mangled(self, oem_key):
        device = make_device(oem_key)
        plain = {k for k in vars(device) if not k.startswith("_")}
        assert plain <= {"device_model", "device_id", "install_mode", "faults", "needs_replacement"}

    def test_reports_are_the_only_key_dependent_output(self, oem_key):
        # same state, different attestation keys: only attest() output differs
        def build(katt):
            device = Device(MODEL, DEVICE_ID, oem_key.public, katt, rng=random.Random(5))
            artifact = b"\x01" * 300
            token = issue_token(
                oem_key,
                artifact,
                Constraints(device_model=MODEL, device_id=DEVICE_ID, new_version=1),
            )
            device.provision_firmware(artifact, token)
            return device

        a, b = build(b"\x01" * 32), build(b"\x02" * 32)
        assert a.boot() == b.boot()
        assert a.installed_version == b.installed_version
        report_a, report_b = a.attest(b"\x10" * 16), b.attest(b"\x10" * 16)
        assert report_a.measurement == report_b.measurement
        assert report_a.tag != report_b.tag


class TestFlashPersistence:
    def test_round_trip(self, tmp_path, oem_key):
        device = make_device(oem_key)
        Channel(device).deliver(make_envelope(oem_key)[0])
        device.attest(b"\x20" * 16)
        path = str(tmp_path / "dev.flash")
        save_flash(device, path)
        loaded = load_flash(path)
        assert loaded.device_model == device.device_model
        assert loaded.device_id == device.device_id
        assert loaded.installed_version == device.installed_version
        assert loaded.active_bank == device.active_bank
        assert loaded.boot().running
        # served-nonce log survives, so replay is still refused
        with pytest.raises(AttestationRefused):
            loaded.attest(b"\x20" * 16)
        # secure store survives: a fresh attestation still verifies
        report = loaded.attest(b"\x21" * 16)
        expected = crypto.mac(K_ATT, DEVICE_ID.to_bytes(8, "big") + b"\x21" * 16 + report.measurement)
        assert report.tag == expected

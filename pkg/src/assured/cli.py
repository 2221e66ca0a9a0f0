"""Command-line interface.

Subcommands mirror the protocol actors: ``oem`` issues keys and tokens,
``repo`` maintains and serves the repository, ``controller`` syncs/delivers/
attests against persisted state, ``device`` simulates a device process, and
``scenario``/``bench``/``adversary-suite`` drive the harness. ``token dump``
hex-dumps a 136-byte token or an envelope for debugging.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import signal
import sys
import threading

from . import crypto
from .authorization import (
    Constraints,
    ENVELOPE_MAGIC,
    TOKEN_LEN,
    build_envelope,
    decode_token,
    encode_token,
    issue_token,
    parse_envelope,
    serialize_envelope,
)
from .controller import Controller, LocalPolicy, load_controller, save_controller
from .device import Device, InstallMode, load_flash, save_flash
from .errors import AssuredError
from .harness import (
    BUILTIN_SCENARIOS,
    adversary_table,
    run_adversary_suite,
    run_bench,
    run_scenario,
)
from .metadata import Mode, parse
from .repository import (
    TamperKind,
    TamperPolicy,
    load_repository,
    new_repository,
    save_repository,
)
from .transport import (
    LocalDevicePort,
    LocalRepoPort,
    RemoteDevicePort,
    RemoteRepoPort,
    make_device_server,
    make_repo_server,
)


def _rng(seed: int | None) -> random.Random:
    return random.Random(seed) if seed is not None else random.Random()


def _read(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path: str, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _load_oem_key(path: str) -> crypto.SigningKeyPair:
    seed = _read(path)
    if len(seed) != 32:
        raise SystemExit(f"{path}: OEM key file must hold a 32-byte seed")
    return crypto.signing_key_from_seed(seed)


def _repo_port(spec: str):
    if os.path.isdir(spec):
        return LocalRepoPort(load_repository(spec))
    return RemoteRepoPort(spec)


def _device_port(args):
    if getattr(args, "device_addr", None):
        return RemoteDevicePort(args.device_addr), None
    if getattr(args, "flash", None):
        device = load_flash(args.flash, rng=_rng(getattr(args, "seed", None)))
        return LocalDevicePort(device), device
    raise SystemExit("need --device-addr (host:port or socket path) or --flash file")


# --- oem -----------------------------------------------------------------------------

def cmd_oem_keygen(args) -> int:
    seed = _rng(args.seed).randbytes(32)
    _write(args.out, seed)
    key = crypto.signing_key_from_seed(seed)
    print(f"wrote {args.out}; public key {key.public.hex()}")
    return 0


def cmd_oem_issue(args) -> int:
    key = _load_oem_key(args.key)
    artifact = _read(args.artifact)
    constraints = Constraints(
        device_model=args.model,
        device_id=args.device,
        required_prev_version=args.prev,
        new_version=args.new_version,
    )
    token = issue_token(key, artifact, constraints)
    envelope = serialize_envelope(build_envelope(token, artifact))
    _write(args.out, envelope)
    print(f"wrote {args.out}: token {len(encode_token(token))} B, artifact {len(artifact)} B")
    return 0


# --- token ---------------------------------------------------------------------------

def _dump_token(raw: bytes) -> None:
    token = decode_token(raw)
    c = token.constraints
    print(f"artifact_hash          {token.artifact_hash.hex()}")
    print(f"artifact_size          {token.artifact_size}")
    print(f"device_model           {c.device_model}{' (wildcard)' if not c.device_model else ''}")
    print(f"device_id              {c.device_id}{' (wildcard)' if not c.device_id else ''}")
    print(f"required_prev_version  {c.required_prev_version}{' (none)' if not c.required_prev_version else ''}")
    print(f"new_version            {c.new_version}")
    print(f"signature              {token.signature.hex()}")


def cmd_token_dump(args) -> int:
    raw = _read(args.file)
    if raw[:4] == ENVELOPE_MAGIC:
        envelope = parse_envelope(raw)
        print(f"update envelope: {len(raw)} B total, artifact {len(envelope.artifact)} B")
        _dump_token(raw[4 : 4 + TOKEN_LEN])
    elif len(raw) == TOKEN_LEN:
        _dump_token(raw)
    else:
        raise SystemExit(f"{args.file}: neither an envelope nor a {TOKEN_LEN}-byte token")
    return 0


# --- repo ----------------------------------------------------------------------------

def cmd_repo_init(args) -> int:
    rng = _rng(args.seed)

    def keys(count: int):
        return [crypto.signing_key_from_seed(rng.randbytes(32)) for _ in range(count)]

    state = new_repository(
        root_keys=keys(2),
        targets_keys=keys(2),
        snapshot_keys=keys(1),
        timestamp_keys=keys(1),
        mode=Mode(args.mode),
    )
    os.makedirs(args.dir, exist_ok=True)
    save_repository(state, args.dir)
    print(f"initialized repository in {args.dir} (mode={args.mode})")
    return 0


def _with_repo(args, transform) -> int:
    state = load_repository(args.dir)
    state = transform(state)
    save_repository(state, args.dir)
    return 0


def cmd_repo_publish(args) -> int:
    from . import repository

    envelope = _read(args.envelope)
    return _with_repo(args, lambda state: repository.publish(state, args.name, envelope))


def cmd_repo_refresh(args) -> int:
    from . import repository

    return _with_repo(args, repository.refresh_timestamp)


def cmd_repo_tamper(args) -> int:
    from . import repository

    policy = TamperPolicy(kind=TamperKind(args.policy), bit_offset=args.offset)
    return _with_repo(args, lambda state: repository.set_tamper(state, policy))


def cmd_repo_advance(args) -> int:
    from . import repository

    return _with_repo(args, lambda state: repository.advance_clock(state, args.ticks))


def _serve(server) -> int:
    print(f"LISTENING {server.display_address()}", flush=True)
    # shutdown() blocks until serve_forever() exits, so it must not run on
    # the serving thread itself (the signal handler does)
    signal.signal(
        signal.SIGTERM,
        lambda *_: threading.Thread(target=server.shutdown, daemon=True).start(),
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_repo_serve(args) -> int:
    return _serve(make_repo_server(load_repository(args.dir), args.listen))


# --- controller ------------------------------------------------------------------------

def cmd_controller_init(args) -> int:
    repo = _repo_port(args.repo)
    trusted_root = parse(repo.trusted_root_bytes(), repo.mode())
    window = None
    if args.window:
        start, _, end = args.window.partition(":")
        window = (int(start), int(end))
    models = frozenset(int(m) for m in args.models.split(",")) if args.models else None
    ctrl = Controller(
        trusted_root=trusted_root,
        mode=repo.mode(),
        policy=LocalPolicy(window=window, allowed_models=models),
        rng=_rng(args.seed),
    )
    save_controller(ctrl, args.state)
    print(f"wrote {args.state} (trust anchor: root v{trusted_root.version})")
    return 0


def cmd_controller_enroll(args) -> int:
    ctrl = load_controller(args.state, rng=_rng(args.seed))
    ctrl.enroll(
        device_id=args.device,
        device_model=args.model,
        attestation_key=bytes.fromhex(args.attestation_key),
        installed_version=args.version,
        installed_digest=bytes.fromhex(args.digest) if args.digest else crypto.hash_data(b""),
    )
    save_controller(ctrl, args.state)
    print(f"enrolled device {args.device} (model {args.model})")
    return 0


def cmd_controller_sync(args) -> int:
    ctrl = load_controller(args.state, rng=_rng(args.seed))
    repo = _repo_port(args.repo)
    try:
        batch = ctrl.sync(repo)
    except AssuredError as exc:
        print(f"sync failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    save_controller(ctrl, args.state)
    for item in batch:
        print(f"verified {item.name}: artifact {len(item.envelope.artifact)} B")
    print(f"sync ok: {len(batch)} new envelope(s)")
    return 0


def cmd_controller_deliver(args) -> int:
    ctrl = load_controller(args.state, rng=_rng(args.seed))
    repo = _repo_port(args.repo)
    port, device = _device_port(args)
    ctrl.seen_targets.pop(args.name, None)  # re-verify and re-deliver idempotently
    try:
        batch = ctrl.sync(repo)
    except AssuredError as exc:
        print(f"sync failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    wanted = [item for item in batch if item.name == args.name]
    if not wanted:
        print(f"no verified envelope named {args.name!r}", file=sys.stderr)
        return 1
    try:
        session = ctrl.open_channel(port, args.device)
        outcome = ctrl.deliver(session, wanted[0])
    except AssuredError as exc:
        print(f"delivery failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        save_controller(ctrl, args.state)
        if device is not None and args.flash:
            save_flash(device, args.flash)
    print(f"device reports {outcome.status} (version {outcome.version}) {outcome.reason}")
    return 0 if outcome.status == "installed" else 1


def cmd_controller_attest(args) -> int:
    ctrl = load_controller(args.state, rng=_rng(args.seed))
    port, device = _device_port(args)
    expected = bytes.fromhex(args.expected) if args.expected else None
    result = ctrl.request_attestation(port, args.device, expected_digest=expected)
    save_controller(ctrl, args.state)
    if device is not None and args.flash:
        save_flash(device, args.flash)
    if result.verified:
        print("attestation verified")
        return 0
    print(f"attestation failed: {result.reason}")
    return 1


# --- device ---------------------------------------------------------------------------------

def cmd_device_init(args) -> int:
    rng = _rng(args.seed)
    attestation_key = bytes.fromhex(args.attestation_key) if args.attestation_key else rng.randbytes(32)
    device = Device(
        device_model=args.model,
        device_id=args.id,
        oem_public=bytes.fromhex(args.oem_public),
        attestation_key=attestation_key,
        install_mode=InstallMode.DUAL_BANK if args.install_mode == "dual" else InstallMode.SINGLE_BANK,
        rng=rng,
    )
    if args.envelope:
        envelope = parse_envelope(_read(args.envelope))
        device.provision_firmware(envelope.artifact, envelope.token)
    save_flash(device, args.flash)
    print(f"wrote {args.flash}; attestation key {attestation_key.hex()}")
    return 0


def _fresh_device(args) -> Device:
    return Device(
        device_model=args.model,
        device_id=args.id,
        oem_public=bytes.fromhex(args.oem_public),
        attestation_key=bytes.fromhex(args.attestation_key),
        install_mode=InstallMode.DUAL_BANK if args.install_mode == "dual" else InstallMode.SINGLE_BANK,
        rng=_rng(args.rng_seed),
    )


def cmd_device_run(args) -> int:
    if args.flash:
        device = load_flash(args.flash, rng=_rng(args.rng_seed))
    else:
        for required in ("model", "id", "oem_public", "attestation_key"):
            if getattr(args, required) is None:
                raise SystemExit(f"--{required.replace('_', '-')} is required without --flash")
        device = _fresh_device(args)
    server = make_device_server(device, args.listen)
    if args.flash:
        server.after_op = lambda: save_flash(device, args.flash)
    return _serve(server)


def cmd_device_boot(args) -> int:
    device = load_flash(args.flash, rng=_rng(args.seed))
    result = device.boot()
    save_flash(device, args.flash)
    if result.running:
        print(f"running version {result.version}" + (f" ({result.reason})" if result.reason else ""))
        return 0
    print(f"halted: {result.reason}")
    return 1


# --- harness ----------------------------------------------------------------------------------

def cmd_scenario_run(args) -> int:
    if os.path.exists(args.file):
        with open(args.file, encoding="utf-8") as fh:
            text = fh.read()
    elif args.file in BUILTIN_SCENARIOS:
        text = BUILTIN_SCENARIOS[args.file]
    else:
        raise SystemExit(f"{args.file}: no such scenario file or builtin "
                         f"(builtins: {', '.join(sorted(BUILTIN_SCENARIOS))})")
    transcript = run_scenario(text, seed=args.seed, multiprocess=args.multiprocess)
    output = transcript.text()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(output)
    print(output, end="")
    return 0 if transcript.ok else 1


def cmd_bench(args) -> int:
    modes = [args.mode] if args.mode != "both" else ["assured", "tuf"]
    records = []
    for mode in modes:
        report = run_bench(mode=mode, seed=args.seed)
        print(report.to_text())
        records.extend(report.records())
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        print(f"wrote {len(records)} records to {args.records}")
    return 0


def cmd_adversary_suite(args) -> int:
    rows = run_adversary_suite(seed=args.seed)
    print(adversary_table(rows), end="")
    if args.records:
        with open(args.records, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(
                    json.dumps(
                        {"attack": row.attack, "layer": row.layer, "detected": row.detected, "detail": row.detail},
                        sort_keys=True,
                    )
                    + "\n"
                )
    undetected = [row for row in rows if not row.detected]
    if undetected:
        print(f"{len(undetected)} attack(s) UNDETECTED", file=sys.stderr)
        return 1
    print(f"all {len(rows)} attacks detected")
    return 0


# --- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="assured", description="secure firmware update toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    oem = sub.add_parser("oem", help="OEM key and token operations").add_subparsers(dest="sub", required=True)
    keygen = oem.add_parser("keygen", help="generate an OEM signing key")
    keygen.add_argument("--out", required=True)
    keygen.add_argument("--seed", type=int)
    keygen.set_defaults(func=cmd_oem_keygen)
    issue = oem.add_parser("issue", help="issue a token and envelope for an artifact")
    issue.add_argument("--key", required=True)
    issue.add_argument("--artifact", required=True)
    issue.add_argument("--new-version", type=int, required=True)
    issue.add_argument("--model", type=int, default=0)
    issue.add_argument("--device", type=int, default=0)
    issue.add_argument("--prev", type=int, default=0)
    issue.add_argument("--out", required=True)
    issue.set_defaults(func=cmd_oem_issue)

    token = sub.add_parser("token", help="token utilities").add_subparsers(dest="sub", required=True)
    dump = token.add_parser("dump", help="hex-dump a token or envelope")
    dump.add_argument("file")
    dump.set_defaults(func=cmd_token_dump)

    repo = sub.add_parser("repo", help="repository operations").add_subparsers(dest="sub", required=True)
    init = repo.add_parser("init")
    init.add_argument("--dir", required=True)
    init.add_argument("--mode", choices=["json", "binary"], default="json")
    init.add_argument("--seed", type=int)
    init.set_defaults(func=cmd_repo_init)
    publish = repo.add_parser("publish")
    publish.add_argument("--dir", required=True)
    publish.add_argument("--name", required=True)
    publish.add_argument("--envelope", required=True)
    publish.set_defaults(func=cmd_repo_publish)
    refresh = repo.add_parser("refresh")
    refresh.add_argument("--dir", required=True)
    refresh.set_defaults(func=cmd_repo_refresh)
    tamper = repo.add_parser("tamper")
    tamper.add_argument("--dir", required=True)
    tamper.add_argument("policy", choices=[k.value for k in TamperKind])
    tamper.add_argument("--offset", type=int, default=0)
    tamper.set_defaults(func=cmd_repo_tamper)
    advance = repo.add_parser("advance")
    advance.add_argument("--dir", required=True)
    advance.add_argument("--ticks", type=int, required=True)
    advance.set_defaults(func=cmd_repo_advance)
    serve = repo.add_parser("serve")
    serve.add_argument("--dir", required=True)
    serve.add_argument("--listen", default="127.0.0.1:0")
    serve.set_defaults(func=cmd_repo_serve)

    controller = sub.add_parser("controller", help="controller operations").add_subparsers(dest="sub", required=True)
    cinit = controller.add_parser("init")
    cinit.add_argument("--state", required=True)
    cinit.add_argument("--repo", required=True, help="repository dir or host:port")
    cinit.add_argument("--window", help="maintenance window start:end in ticks")
    cinit.add_argument("--models", help="comma-separated allowed models")
    cinit.add_argument("--seed", type=int)
    cinit.set_defaults(func=cmd_controller_init)
    enroll = controller.add_parser("enroll")
    enroll.add_argument("--state", required=True)
    enroll.add_argument("--device", type=int, required=True)
    enroll.add_argument("--model", type=int, required=True)
    enroll.add_argument("--attestation-key", required=True, help="hex pre-shared master key")
    enroll.add_argument("--version", type=int, default=0)
    enroll.add_argument("--digest", help="hex digest of the installed artifact")
    enroll.add_argument("--seed", type=int)
    enroll.set_defaults(func=cmd_controller_enroll)
    csync = controller.add_parser("sync")
    csync.add_argument("--state", required=True)
    csync.add_argument("--repo", required=True)
    csync.add_argument("--seed", type=int)
    csync.set_defaults(func=cmd_controller_sync)
    deliver = controller.add_parser("deliver")
    deliver.add_argument("--state", required=True)
    deliver.add_argument("--repo", required=True)
    deliver.add_argument("--device", type=int, required=True)
    deliver.add_argument("--name", required=True)
    deliver.add_argument("--device-addr")
    deliver.add_argument("--flash")
    deliver.add_argument("--seed", type=int)
    deliver.set_defaults(func=cmd_controller_deliver)
    attest = controller.add_parser("attest")
    attest.add_argument("--state", required=True)
    attest.add_argument("--device", type=int, required=True)
    attest.add_argument("--device-addr")
    attest.add_argument("--flash")
    attest.add_argument("--expected", help="hex expected measurement (default: registry)")
    attest.add_argument("--seed", type=int)
    attest.set_defaults(func=cmd_controller_attest)

    device = sub.add_parser("device", help="simulated device").add_subparsers(dest="sub", required=True)
    dinit = device.add_parser("init")
    dinit.add_argument("--flash", required=True)
    dinit.add_argument("--model", type=int, required=True)
    dinit.add_argument("--id", type=int, required=True)
    dinit.add_argument("--oem-public", required=True, help="hex OEM public key")
    dinit.add_argument("--attestation-key", help="hex master key (generated if omitted)")
    dinit.add_argument("--envelope", help="factory firmware envelope")
    dinit.add_argument("--install-mode", choices=["dual", "single"], default="dual")
    dinit.add_argument("--seed", type=int)
    dinit.set_defaults(func=cmd_device_init)
    drun = device.add_parser("run")
    drun.add_argument(
        "--listen", default="127.0.0.1:0", help="host:port (0 = ephemeral) or a unix-socket path"
    )
    drun.add_argument("--flash")
    drun.add_argument("--model", type=int)
    drun.add_argument("--id", type=int)
    drun.add_argument("--oem-public")
    drun.add_argument("--attestation-key")
    drun.add_argument("--install-mode", choices=["dual", "single"], default="dual")
    drun.add_argument("--rng-seed", type=int)
    drun.set_defaults(func=cmd_device_run)
    dboot = device.add_parser("boot")
    dboot.add_argument("--flash", required=True)
    dboot.add_argument("--seed", type=int)
    dboot.set_defaults(func=cmd_device_boot)

    scenario = sub.add_parser("scenario", help="run scenario scripts").add_subparsers(dest="sub", required=True)
    srun = scenario.add_parser("run")
    srun.add_argument("file", help="scenario file or builtin name")
    srun.add_argument("--seed", type=int, default=0)
    srun.add_argument("--multiprocess", action="store_true")
    srun.add_argument("--out", help="also write the transcript here")
    srun.set_defaults(func=cmd_scenario_run)

    bench = sub.add_parser("bench", help="size/operation-count comparison")
    bench.add_argument("--mode", choices=["assured", "tuf", "both"], default="both")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--records", help="write machine-readable JSONL records here")
    bench.set_defaults(func=cmd_bench)

    suite = sub.add_parser("adversary-suite", help="run all modeled attacks")
    suite.add_argument("--seed", type=int, default=0)
    suite.add_argument("--records", help="write machine-readable JSONL records here")
    suite.set_defaults(func=cmd_adversary_suite)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AssuredError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Operator entry points: key generation, provisioning, scenario simulation,
pcap scanning, and live server/device modes.

Every subcommand writes machine-readable output and exits 0 only when its
postcondition held, so all of them are scriptable.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
from typing import List, Optional

from . import crypto, pcapio, simnet, wire
from .device import Device, TimerConfig
from .manifest import manifest_from_json
from .receiver import Receiver, ReceiverConfig, RegistryFetcher
from .server import DeviceDescription, ManufacturerServer, SyncRejection

DEFAULT_KEY_DIR_ENV = "PAISA_KEY_DIR"


def _key_path(args_path: Optional[str], name: str) -> str:
    if args_path:
        return args_path
    base = os.environ.get(DEFAULT_KEY_DIR_ENV, ".")
    return os.path.join(base, name)


def cmd_keygen(args: argparse.Namespace) -> int:
    seed = bytes.fromhex(args.seed) if args.seed else None
    try:
        keys = crypto.generate_keypair(seed)
    except crypto.CryptoError as exc:
        print(f"keygen failed: {exc}", file=sys.stderr)
        return 1
    path = _key_path(args.out, "paisa.key")
    try:
        crypto.save_keypair(path, keys)
    except OSError as exc:
        print(f"cannot write {path}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote keypair to {path}")
    print(f"public_key {keys.public_key.hex()}")
    return 0


def cmd_provision(args: argparse.Namespace) -> int:
    try:
        with open(args.image, "rb") as f:
            sw = f.read()
    except OSError as exc:
        print(f"cannot read image: {exc}", file=sys.stderr)
        return 1
    if os.path.exists(args.store):
        server = ManufacturerServer.load(args.store)
    else:
        keys = crypto.load_keypair(_key_path(args.mfr_keys, "paisa.key"))
        server = ManufacturerServer(keys, store_path=args.store)
    device = Device()
    device_id = bytes.fromhex(args.id)
    try:
        man, record = server.register_device(
            device=device,
            device_id=device_id,
            sw_dev=sw,
            full_url=args.full_url,
            ts_cur=args.ts,
            timer_config=TimerConfig(args.t_announce, args.t_attest),
            description=DeviceDescription(owner_id=args.owner),
        )
    except Exception as exc:
        print(f"provision failed: {exc}", file=sys.stderr)
        return 1
    short_url = server.registry.shorten(args.full_url)
    if args.device_out:
        state = device.trusted
        doc = {
            "device_id": state.device_id.hex(),
            "private_key": state.device_keys.private_key.hex(),
            "public_key": state.device_keys.public_key.hex(),
            "mfr_public_key": state.mfr_public_key.hex(),
            "short_url": state.short_url,
            "full_url": state.full_url,
            "sw_hash": state.sw_hash_expected.hex(),
            "ts_prev": state.ts_prev,
            "t_announce": args.t_announce,
            "t_attest": args.t_attest,
        }
        with open(args.device_out, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
    print(f"registered device {device_id.hex()}")
    print(f"short_url {short_url}")
    print(f"manifest_path {record.manifest_path}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        result = simnet.run_scenario(args.scenario)
    except simnet.ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            f.write(result.log_ndjson())
    if args.pcap:
        pcapio.write_pcap(args.pcap, result.beacon_frames)
    counts = simnet.summarize_verdicts(result.log)
    print("verdict            count")
    for verdict in sorted(counts):
        print(f"{verdict:<18} {counts[verdict]}")
    if not counts:
        print("(no verdicts)")
    return 0


def cmd_scan(args: argparse.Namespace) -> int:
    try:
        frames = pcapio.read_pcap(args.input)
    except (OSError, pcapio.PcapError) as exc:
        print(f"cannot read pcap: {exc}", file=sys.stderr)
        return 1
    server = ManufacturerServer.load(args.store)
    fetcher = RegistryFetcher(server.registry, server.serve_manifest)
    pinned = frozenset({bytes.fromhex(args.pin)}) if args.pin else None
    cfg = ReceiverConfig(
        epsilon=args.epsilon, manifest_fetcher=fetcher, pinned_mfr_keys=pinned
    )
    current_ts = [0]
    receiver = Receiver(cfg, clock=lambda: current_ts[0])
    verified = 0
    for ts, frame in frames:
        current_ts[0] = ts
        result = receiver.process_frame(frame)
        if isinstance(result, wire.BeaconDecode):
            continue
        print(result.to_json())
        if result.verdict.value == "verified":
            verified += 1
    print(f"# {verified} verified of {len(frames)} frames", file=sys.stderr)
    return 0


def cmd_server(args: argparse.Namespace) -> int:
    """Live UDP time-sync responder backed by a store file."""
    server = ManufacturerServer.load(args.store)
    host, port = args.listen.rsplit(":", 1)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind((host or "127.0.0.1", int(port)))
    print(f"listening on {sock.getsockname()[0]}:{sock.getsockname()[1]}")
    import time

    handled = 0
    while args.max_requests == 0 or handled < args.max_requests:
        data, addr = sock.recvfrom(4096)
        handled += 1
        try:
            msg = wire.decode_sync_message(data)
        except wire.SyncParseError:
            continue
        now = int(time.time())
        if isinstance(msg, wire.SyncReq):
            outcome = server.handle_sync_req(msg, now)
            if isinstance(outcome, SyncRejection):
                print(f"rejected sync request: {outcome.reason}")
                continue
            sock.sendto(wire.encode_sync_message(outcome), addr)
        elif isinstance(msg, wire.SyncAck):
            outcome = server.handle_sync_ack(msg, now)
            print("commit" if outcome.committed else f"ack rejected: {outcome.reason}")
    return 0


def cmd_device(args: argparse.Namespace) -> int:
    """Live device: sync over UDP, then write announcements to a pcap file."""
    with open(args.config, "r", encoding="utf-8") as f:
        doc = json.load(f)
    import time

    dev = Device()
    dev.provision(
        device_id=bytes.fromhex(doc["device_id"]),
        sw_dev=b"",  # program memory restored separately below
        mfr_public_key=bytes.fromhex(doc["mfr_public_key"]),
        short_url=doc["short_url"],
        full_url=doc["full_url"],
        ts_cur=doc["ts_prev"],
        timer_config=TimerConfig(doc["t_announce"], doc["t_attest"]),
        key_seed=None,
    )
    # Restore the provisioned identity: the config file is the device's
    # persisted secure storage.
    dev.trusted.device_keys = crypto.KeyPair(
        private_key=bytes.fromhex(doc["private_key"]),
        public_key=bytes.fromhex(doc["public_key"]),
    )
    dev.trusted.sw_hash_expected = bytes.fromhex(doc["sw_hash"])
    if args.image:
        with open(args.image, "rb") as f:
            dev.software.program_memory[:] = f.read()

    host, port = args.server.rsplit(":", 1)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(args.timeout)

    def transport(req: wire.SyncReq) -> Optional[wire.SyncResp]:
        sock.sendto(wire.encode_sync_message(req), (host or "127.0.0.1", int(port)))
        try:
            data, _ = sock.recvfrom(4096)
            msg = wire.decode_sync_message(data)
        except (socket.timeout, wire.SyncParseError):
            return None
        return msg if isinstance(msg, wire.SyncResp) else None

    for _ in range(5):
        resp = transport(dev.make_sync_req())
        if resp is None:
            continue
        ack = dev.handle_sync_resp(resp)
        if ack is not None:
            sock.sendto(wire.encode_sync_message(ack), (host or "127.0.0.1", int(port)))
            break
    if not dev.synced:
        print("time sync failed; device stays silent", file=sys.stderr)
        return 1
    frames = [(dev.clock.now, f) for f in dev.announce_now()]
    for _ in range(args.count - 1):
        dev.clock.ticks_since_sync += dev.trusted.timer_config.t_announce
        dev.attest()
        frames.append((dev.clock.now, wire.encode_beacon(dev.make_announcement(), dev.mac)))
    pcapio.write_pcap(args.pcap, frames)
    print(f"synced at {resp.ts_cur}; wrote {len(frames)} announcements to {args.pcap}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paisa")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a keypair file")
    p.add_argument("--out", help="output path (default $PAISA_KEY_DIR/paisa.key)")
    p.add_argument("--seed", help="32-byte hex seed for deterministic generation")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("provision", help="register a device and publish its manifest")
    p.add_argument("--store", required=True, help="server store JSON path")
    p.add_argument("--mfr-keys", help="manufacturer key file (for a new store)")
    p.add_argument("--id", required=True, help="16-byte device id, hex")
    p.add_argument("--image", required=True, help="software image path")
    p.add_argument("--full-url", required=True, help="full manifest URL")
    p.add_argument("--owner", default="owner-0")
    p.add_argument("--ts", type=int, default=0, help="provisioning timestamp")
    p.add_argument("--t-announce", type=int, default=10)
    p.add_argument("--t-attest", type=int, default=10)
    p.add_argument("--device-out", help="write provisioned device state JSON here")
    p.set_defaults(func=cmd_provision)

    p = sub.add_parser("simulate", help="run a scenario and summarize verdicts")
    p.add_argument("scenario", help="scenario JSON path")
    p.add_argument("--log", help="write the event log (ndjson) here")
    p.add_argument("--pcap", help="export broadcast frames to this pcap")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scan", help="verify announcements from a pcap capture")
    p.add_argument("--input", required=True, help="pcap file of 802.11 frames")
    p.add_argument("--store", required=True, help="server store JSON (registry + manifests)")
    p.add_argument("--epsilon", type=int, default=10)
    p.add_argument("--pin", help="pinned manufacturer public key, hex")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("server", help="run the live UDP time-sync server")
    p.add_argument("--store", required=True)
    p.add_argument("--listen", default="127.0.0.1:9470")
    p.add_argument("--max-requests", type=int, default=0, help="stop after N datagrams (0 = forever)")
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("device", help="sync a provisioned device and emit announcements")
    p.add_argument("--config", required=True, help="device state JSON from provision")
    p.add_argument("--server", default="127.0.0.1:9470")
    p.add_argument("--image", help="software image to load into program memory")
    p.add_argument("--pcap", required=True, help="write announcements here")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--timeout", type=float, default=2.0)
    p.set_defaults(func=cmd_device)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

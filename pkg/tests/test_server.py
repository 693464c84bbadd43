import dataclasses
import hashlib

import pytest

from paisa import crypto, wire
from paisa.device import Device, TimerConfig
from paisa.manifest import manifest_from_json, verify_manifest
from paisa.server import DeviceDescription, ManufacturerServer, ServerError, SyncRejection

from conftest import SeededNonces, complete_sync


def test_register_duplicate_device_id_rejected(rig):
    with pytest.raises(ServerError):
        rig["server"].register_device(
            device=Device(nonce_source=SeededNonces(1)),
            device_id=b"\x07" * 16,
            sw_dev=b"",
            full_url="https://mfr.example/manifests/dup.json",
            ts_cur=0,
            timer_config=TimerConfig(10, 10),
        )


def test_served_manifest_bytes_verify(rig):
    data = rig["server"].serve_manifest("/manifests/rig.json")
    assert data is not None
    man = manifest_from_json(data)
    assert verify_manifest(man, expected_mfr_pk=rig["server"].keys.public_key)


def test_serve_unknown_path_returns_none(rig):
    assert rig["server"].serve_manifest("/manifests/nope.json") is None


def test_three_way_exchange_advances_latest_ts(rig):
    assert rig["record"].latest_ts == 0
    outcome = complete_sync(rig["server"], rig["device"], now=123)
    assert outcome.committed
    assert rig["record"].latest_ts == 123


def test_unknown_device_rejected(rig):
    req = wire.SyncReq(b"\xEE" * 16, b"\x00" * 32, 0, b"\x00" * 64)
    result = rig["server"].handle_sync_req(req, now=5)
    assert isinstance(result, SyncRejection)
    assert result.reason == "unknown_device"


def test_wrong_ts_prev_rejected_before_signature_check(rig):
    dev = rig["device"]
    req = dev.make_sync_req()
    bad = wire.SyncReq(req.device_id, req.n_dev1, req.ts_prev + 7, req.signature)
    result = rig["server"].handle_sync_req(bad, now=5)
    assert isinstance(result, SyncRejection)
    assert result.reason == "timestamp_mismatch"


def test_forged_req_signature_rejected(rig):
    req = rig["device"].make_sync_req()
    sig = bytearray(req.signature)
    sig[0] ^= 0x01
    result = rig["server"].handle_sync_req(
        wire.SyncReq(req.device_id, req.n_dev1, req.ts_prev, bytes(sig)), now=5
    )
    assert isinstance(result, SyncRejection)
    assert result.reason == "bad_signature"


def test_replayed_sync_req_rejected_after_commit(rig):
    dev, server = rig["device"], rig["server"]
    req = dev.make_sync_req()
    resp = server.handle_sync_req(req, now=40)
    ack = dev.handle_sync_resp(resp)
    assert server.handle_sync_ack(ack, now=40).committed
    # The captured request carries ts_prev=0, but latest_ts is now 40.
    result = server.handle_sync_req(req, now=45)
    assert isinstance(result, SyncRejection)
    assert result.reason == "timestamp_mismatch"
    assert rig["record"].latest_ts == 40


def test_replayed_sync_ack_rejected_session_one_shot(rig):
    dev, server = rig["device"], rig["server"]
    req = dev.make_sync_req()
    resp = server.handle_sync_req(req, now=40)
    ack = dev.handle_sync_resp(resp)
    assert server.handle_sync_ack(ack, now=40).committed
    replay = server.handle_sync_ack(ack, now=41)
    assert not replay.committed
    assert replay.reason == "unknown_session"
    assert rig["record"].latest_ts == 40


def test_ack_with_wrong_device_rejected(rig):
    dev, server = rig["device"], rig["server"]
    resp = server.handle_sync_req(dev.make_sync_req(), now=40)
    ack = dev.handle_sync_resp(resp)
    wrong = wire.SyncAck(b"\xEE" * 16, ack.n_dev2, ack.n_svr1, ack.ts_prev, ack.signature)
    outcome = server.handle_sync_ack(wrong, now=40)
    assert not outcome.committed and outcome.reason == "device_mismatch"


def test_ack_with_wrong_timestamp_rejected(rig):
    dev, server = rig["device"], rig["server"]
    resp = server.handle_sync_req(dev.make_sync_req(), now=40)
    ack = dev.handle_sync_resp(resp)
    wrong = wire.SyncAck(ack.device_id, ack.n_dev2, ack.n_svr1, ack.ts_prev + 1, ack.signature)
    outcome = server.handle_sync_ack(wrong, now=40)
    assert not outcome.committed and outcome.reason == "timestamp_mismatch"
    assert rig["record"].latest_ts == 0


def test_ack_with_forged_signature_rejected(rig):
    dev, server = rig["device"], rig["server"]
    resp = server.handle_sync_req(dev.make_sync_req(), now=40)
    ack = dev.handle_sync_resp(resp)
    sig = bytearray(ack.signature)
    sig[10] ^= 0x80
    outcome = server.handle_sync_ack(
        wire.SyncAck(ack.device_id, ack.n_dev2, ack.n_svr1, ack.ts_prev, bytes(sig)),
        now=40,
    )
    assert not outcome.committed and outcome.reason == "bad_signature"
    assert rig["record"].latest_ts == 0


def test_session_expires_after_ttl(rig):
    dev, server = rig["device"], rig["server"]
    resp = server.handle_sync_req(dev.make_sync_req(), now=40)
    ack = dev.handle_sync_resp(resp)
    outcome = server.handle_sync_ack(ack, now=40 + server.session_ttl + 1)
    assert not outcome.committed and outcome.reason == "unknown_session"


def test_latest_ts_is_monotone(rig):
    dev, server = rig["device"], rig["server"]
    assert complete_sync(server, dev, now=100).committed
    assert rig["record"].latest_ts == 100
    assert complete_sync(server, dev, now=100).committed
    assert rig["record"].latest_ts == 100


def test_server_nonces_unique_across_sessions(rig):
    dev, server = rig["device"], rig["server"]
    seen = set()
    for now in (10, 20, 30):
        resp = server.handle_sync_req(dev.make_sync_req(), now=now)
        seen.add(resp.n_svr1)
        ack = dev.handle_sync_resp(resp)
        assert server.handle_sync_ack(ack, now=now).committed
    assert len(seen) == 3


def test_rejection_leaves_records_untouched(rig):
    server = rig["server"]
    before = dataclasses.replace(rig["record"])
    server.handle_sync_req(wire.SyncReq(b"\xEE" * 16, b"\x00" * 32, 0, b"\x00" * 64), now=5)
    server.handle_sync_ack(
        wire.SyncAck(b"\x07" * 16, b"\x00" * 32, b"\x00" * 32, 0, b"\x00" * 64), now=5
    )
    assert rig["record"] == before


def test_persistence_roundtrip(tmp_path):
    store = str(tmp_path / "server.json")
    nonces = SeededNonces(3)
    server = ManufacturerServer(
        crypto.generate_keypair(b"\x55" * 32), store_path=store, nonce_source=nonces
    )
    device = Device(nonce_source=nonces)
    server.register_device(
        device=device,
        device_id=b"\x09" * 16,
        sw_dev=b"\xAB" * 4096,
        full_url="https://mfr.example/manifests/persist.json",
        ts_cur=0,
        timer_config=TimerConfig(5, 5),
        description=DeviceDescription(owner_id="owner-9"),
    )
    assert complete_sync(server, device, now=77).committed

    reloaded = ManufacturerServer.load(store, nonce_source=SeededNonces(4))
    assert reloaded.records[b"\x09" * 16].latest_ts == 77
    assert reloaded.serve_manifest("/manifests/persist.json") == server.serve_manifest(
        "/manifests/persist.json"
    )
    # A stale request against the reloaded server is rejected by state, and a
    # fresh exchange succeeds.
    stale = device.make_sync_req()
    wrong = wire.SyncReq(stale.device_id, stale.n_dev1, 0, stale.signature)
    assert reloaded.handle_sync_req(wrong, now=80).reason == "timestamp_mismatch"
    resp = reloaded.handle_sync_req(stale, now=80)
    ack = device.handle_sync_resp(resp)
    assert reloaded.handle_sync_ack(ack, now=80).committed
    assert reloaded.records[b"\x09" * 16].latest_ts == 80


def test_sync_resp_signature_binds_all_fields(rig):
    dev, server = rig["device"], rig["server"]
    req = dev.make_sync_req()
    resp = server.handle_sync_req(req, now=40)
    preimage = wire.sync_resp_preimage(resp.device_id, resp.n_dev1, resp.n_svr1, resp.ts_cur)
    assert crypto.verify(
        server.keys.public_key, hashlib.sha256(preimage).digest(), resp.signature
    )

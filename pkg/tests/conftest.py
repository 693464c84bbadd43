import random

import pytest

# One line per acceptance criterion, printed in the terminal summary so the
# pass/fail verdicts survive pytest's output capturing.
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)

from paisa import crypto
from paisa.device import Device, TimerConfig
from paisa.server import DeviceDescription, ManufacturerServer


class SeededNonces:
    def __init__(self, seed=0):
        self._rng = random.Random(seed)

    def randbytes(self, n):
        return self._rng.randbytes(n)


@pytest.fixture
def rig():
    """A provisioned server/device pair with deterministic randomness."""
    nonces = SeededNonces(99)
    server = ManufacturerServer(
        crypto.generate_keypair(b"\x33" * 32), nonce_source=nonces
    )
    device = Device(nonce_source=nonces)
    sw = random.Random(5).randbytes(65536)
    man, record = server.register_device(
        device=device,
        device_id=b"\x07" * 16,
        sw_dev=sw,
        full_url="https://mfr.example/manifests/rig.json",
        ts_cur=0,
        timer_config=TimerConfig(t_announce=10, t_attest=30),
        description=DeviceDescription(device_type_model="rig-device"),
    )
    return {
        "server": server,
        "device": device,
        "manifest": man,
        "record": record,
        "sw": sw,
    }


def complete_sync(server, device, now):
    """Drive a full 3-way exchange; returns the ack outcome."""
    req = device.make_sync_req()
    resp = server.handle_sync_req(req, now=now)
    ack = device.handle_sync_resp(resp)
    assert ack is not None
    return server.handle_sync_ack(ack, now=now)

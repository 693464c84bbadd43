"""The IoT-device state machine: trusted state installed at provisioning,
boot-time time sync, periodic local attestation, and scheduled announcements.

The trusted state and private key live behind this class boundary and are
never reachable from the normal software or from network input, emulating the
TEE isolation contract. Compromise is modeled as mutation access to
``NormalSoftware`` only; it can never suppress or alter announcements.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Callable, List, Optional

from . import crypto, wire

ATTEST_CHUNK_SIZE = 4096

MAX_SYNC_ATTEMPTS = 5
SYNC_BACKOFF_BASE = 1  # seconds; doubles per retry


class DeviceError(RuntimeError):
    pass


class SystemNonceSource:
    """Default nonce source backed by the OS CSPRNG."""

    def randbytes(self, n: int) -> bytes:
        return os.urandom(n)


@dataclass
class TimerConfig:
    t_announce: int
    t_attest: int

    def __post_init__(self) -> None:
        if self.t_announce <= 0 or self.t_attest <= 0:
            raise ValueError("timer periods must be positive")
        if self.t_attest % self.t_announce != 0:
            raise ValueError("t_attest must be a multiple of t_announce")


@dataclass
class NormalSoftware:
    """The untrusted application image; the only thing an adversary may touch."""

    program_memory: bytearray
    compromised: bool = False
    busy_looping: bool = False


@dataclass
class DeviceClock:
    """Seconds clock: last synced base plus ticks of the virtual secure timer."""

    base_ts: int = 0
    ticks_since_sync: int = 0

    @property
    def now(self) -> int:
        return self.base_ts + self.ticks_since_sync

    def resync(self, base_ts: int) -> None:
        self.base_ts = base_ts
        self.ticks_since_sync = 0


@dataclass(frozen=True)
class AttReport:
    att_result: int
    att_timestamp: int


@dataclass
class TrustedState:
    device_id: bytes
    sw_hash_expected: bytes
    mfr_public_key: bytes
    short_url: str
    full_url: str
    device_keys: crypto.KeyPair
    ts_prev: int
    timer_config: TimerConfig


class Device:
    """One announcement-capable device driven by a one-second virtual timer."""

    def __init__(self, nonce_source=None) -> None:
        self._nonces = nonce_source if nonce_source is not None else SystemNonceSource()
        self.trusted: Optional[TrustedState] = None
        self.software: Optional[NormalSoftware] = None
        self.clock = DeviceClock()
        self.synced = False
        self._pending_sync_nonce: Optional[bytes] = None
        self._last_report: Optional[AttReport] = None

    # -- provisioning -------------------------------------------------------

    def provision(
        self,
        device_id: bytes,
        sw_dev: bytes,
        mfr_public_key: bytes,
        short_url: str,
        full_url: str,
        ts_cur: int,
        timer_config: TimerConfig,
        key_seed: Optional[bytes] = None,
    ) -> bytes:
        """Install software and trusted state; returns the new device public key.

        The keypair is generated inside the device; only the public half is
        ever output.
        """
        if self.trusted is not None:
            raise DeviceError("device is already provisioned")
        if len(device_id) != wire.DEVICE_ID_LEN:
            raise DeviceError("device_id must be 16 bytes")
        keys = crypto.generate_keypair(key_seed)
        self.software = NormalSoftware(program_memory=bytearray(sw_dev))
        self.trusted = TrustedState(
            device_id=device_id,
            sw_hash_expected=crypto.hash_chunked(sw_dev, ATTEST_CHUNK_SIZE),
            mfr_public_key=mfr_public_key,
            short_url=short_url,
            full_url=full_url,
            device_keys=keys,
            ts_prev=ts_cur,
            timer_config=timer_config,
        )
        return keys.public_key

    @property
    def mac(self) -> bytes:
        """Locally administered MAC derived from the device identifier."""
        self._require_provisioned()
        return b"\x02" + self.trusted.device_id[:5]

    def _require_provisioned(self) -> TrustedState:
        if self.trusted is None:
            raise DeviceError("device is not provisioned")
        return self.trusted

    # -- time sync ----------------------------------------------------------

    def make_sync_req(self) -> wire.SyncReq:
        """Start (or restart) a sync exchange with a fresh request nonce."""
        st = self._require_provisioned()
        n_dev1 = self._nonces.randbytes(wire.NONCE_LEN)
        self._pending_sync_nonce = n_dev1
        preimage = wire.sync_req_preimage(st.device_id, n_dev1, st.ts_prev)
        sig = crypto.sign(st.device_keys.private_key, hashlib.sha256(preimage).digest())
        return wire.SyncReq(
            device_id=st.device_id, n_dev1=n_dev1, ts_prev=st.ts_prev, signature=sig
        )

    def handle_sync_resp(self, resp: wire.SyncResp) -> Optional[wire.SyncAck]:
        """Validate a response; returns the ack on success, None to retry.

        A failed response never changes device state.
        """
        st = self._require_provisioned()
        if self._pending_sync_nonce is None:
            return None
        if resp.device_id != st.device_id or resp.n_dev1 != self._pending_sync_nonce:
            return None
        preimage = wire.sync_resp_preimage(
            resp.device_id, resp.n_dev1, resp.n_svr1, resp.ts_cur
        )
        if not crypto.verify(
            st.mfr_public_key, hashlib.sha256(preimage).digest(), resp.signature
        ):
            return None
        st.ts_prev = resp.ts_cur
        self.clock.resync(resp.ts_cur)
        self.synced = True
        self._pending_sync_nonce = None
        n_dev2 = self._nonces.randbytes(wire.NONCE_LEN)
        ack_preimage = wire.sync_ack_preimage(
            st.device_id, n_dev2, resp.n_svr1, st.ts_prev
        )
        sig = crypto.sign(
            st.device_keys.private_key, hashlib.sha256(ack_preimage).digest()
        )
        return wire.SyncAck(
            device_id=st.device_id,
            n_dev2=n_dev2,
            n_svr1=resp.n_svr1,
            ts_prev=st.ts_prev,
            signature=sig,
        )

    def boot(self, transport: Callable[[wire.SyncReq], Optional[wire.SyncResp]]) -> List[bytes]:
        """Boot sequence for direct (non-simulated) operation.

        Runs time sync through ``transport`` with up to five attempts, then
        emits the first announcement. An unsynced device emits nothing.
        ``transport`` returns the server response or None for a lost exchange;
        it is also responsible for forwarding the ack.
        """
        for _ in range(MAX_SYNC_ATTEMPTS):
            resp = transport(self.make_sync_req())
            if resp is None:
                continue
            if self.handle_sync_resp(resp) is not None:
                return self.announce_now()
        return []

    # -- attestation and announcement ---------------------------------------

    def attest(self) -> AttReport:
        """Hash the normal program memory and compare against the provisioned
        reference; stores and returns the report."""
        st = self._require_provisioned()
        assert self.software is not None
        measured = crypto.hash_chunked(bytes(self.software.program_memory), ATTEST_CHUNK_SIZE)
        result = 1 if measured == st.sw_hash_expected else 0
        report = AttReport(att_result=result, att_timestamp=self.clock.now)
        self._last_report = report
        return report

    def make_announcement(self) -> wire.AnnouncementMsg:
        """Build and sign a fresh announcement from the latest stored report."""
        st = self._require_provisioned()
        if not self.synced:
            raise DeviceError("cannot announce with an unsynced clock")
        report = self._last_report if self._last_report is not None else self.attest()
        now = self.clock.now
        nonce = self._nonces.randbytes(wire.NONCE_LEN)
        preimage = wire.announcement_preimage(
            st.device_id, nonce, now, st.short_url, report.att_result, report.att_timestamp
        )
        sig = crypto.sign(st.device_keys.private_key, hashlib.sha256(preimage).digest())
        return wire.AnnouncementMsg(
            nonce=nonce,
            timestamp=now,
            short_url=st.short_url,
            att_result=report.att_result,
            att_timestamp=report.att_timestamp,
            signature=sig,
        )

    def announce_now(self) -> List[bytes]:
        """Attest and broadcast immediately (the boot-time announcement)."""
        self.attest()
        return [wire.encode_beacon(self.make_announcement(), self.mac)]

    def tick(self) -> List[bytes]:
        """Advance the virtual timer one second; returns any frames to emit.

        Scheduled strictly by the clock: nothing the normal software does,
        including compromise or busy-looping, affects emission.
        """
        st = self._require_provisioned()
        if not self.synced:
            return []
        self.clock.ticks_since_sync += 1
        now = self.clock.now
        if now % st.timer_config.t_attest == 0:
            self.attest()
        if now % st.timer_config.t_announce == 0:
            return [wire.encode_beacon(self.make_announcement(), self.mac)]
        return []

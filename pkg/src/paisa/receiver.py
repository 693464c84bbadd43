"""The reception pipeline: frame filtering, freshness check, manifest
retrieval, signature verification, and structured presence reports.

Stages run in a fixed order and the first failure decides the verdict; later
stages are skipped, so e.g. a stale frame never triggers a manifest fetch.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

from . import crypto, wire
from .manifest import (
    Manifest,
    ManifestError,
    STATUS_REVOKED,
    ShortUrlRegistry,
    manifest_from_json,
    verify_manifest,
)


class Freshness(Enum):
    FRESH = "fresh"
    STALE = "stale"
    FUTURE = "future"


class Verdict(str, Enum):
    VERIFIED = "verified"
    STALE = "stale"
    FUTURE = "future"
    FETCH_ERROR = "fetch_error"
    BAD_MANIFEST_SIGNATURE = "bad_manifest_signature"
    REDIRECT_MISMATCH = "redirect_mismatch"
    REVOKED = "revoked"
    BAD_ANNOUNCEMENT_SIGNATURE = "bad_announcement_signature"
    COMPROMISED = "compromised"


class FetchError(Exception):
    """Manifest retrieval failed; the caller may retry on the next sighting."""


@dataclass(frozen=True)
class FetchResult:
    resolved_url: str
    manifest_bytes: bytes


class RegistryFetcher:
    """Fetcher over an in-process registry plus manifest host; counts calls."""

    def __init__(self, registry: ShortUrlRegistry, serve: Callable[[str], Optional[bytes]]):
        self.registry = registry
        self.serve = serve
        self.call_count = 0

    @staticmethod
    def _path_for(full_url: str) -> str:
        without_scheme = full_url.split("://", 1)[-1]
        slash = without_scheme.find("/")
        return without_scheme[slash:] if slash >= 0 else "/" + without_scheme

    def fetch(self, short_url: str) -> FetchResult:
        self.call_count += 1
        try:
            full_url = self.registry.resolve(short_url)
        except ValueError as exc:
            raise FetchError(str(exc)) from exc
        if full_url is None:
            raise FetchError(f"short URL {short_url!r} is not registered")
        doc = self.serve(self._path_for(full_url))
        if doc is None:
            raise FetchError(f"no manifest hosted at {full_url!r}")
        return FetchResult(resolved_url=full_url, manifest_bytes=doc)


@dataclass
class ReceiverConfig:
    epsilon: int = 10
    future_skew: int = 2
    manifest_fetcher: Optional[object] = None
    pinned_mfr_keys: Optional[frozenset] = None

    def __post_init__(self) -> None:
        if self.epsilon < 0 or self.future_skew < 0:
            raise ValueError("tolerance windows must be non-negative")


def check_freshness(ts_dev: int, ts_udev: int, cfg: ReceiverConfig) -> Freshness:
    """Accept ts_dev iff it lies strictly inside the tolerance window.

    Stale when ``(ts_udev - epsilon) < ts_dev`` fails (strict inequality, so a
    frame exactly epsilon old is already stale). Future-dated frames beyond a
    small skew are rejected symmetrically so pre-dated replays cannot hide.
    """
    if ts_dev > ts_udev + cfg.future_skew:
        return Freshness.FUTURE
    if not (ts_udev - cfg.epsilon < ts_dev):
        return Freshness.STALE
    return Freshness.FRESH


@dataclass(frozen=True)
class ManifestSummary:
    device_type_model: str
    manufacturer: str
    sensors: Tuple[str, ...]
    actuators: Tuple[str, ...]
    deployment_purpose: str
    deployment_location: str
    status: str


@dataclass(frozen=True)
class PresenceReport:
    verdict: Verdict
    received_at: int
    announcement_timestamp: int
    att_result: int
    att_timestamp: int
    device_id: Optional[str] = None  # hex; known only once the manifest is in hand
    manifest: Optional[ManifestSummary] = None
    duplicate: bool = False

    def to_json(self) -> str:
        doc = {
            "verdict": self.verdict.value,
            "received_at": self.received_at,
            "announcement_timestamp": self.announcement_timestamp,
            "att_result": self.att_result,
            "att_timestamp": self.att_timestamp,
            "device_id": self.device_id,
            "duplicate": self.duplicate,
        }
        if self.manifest is not None:
            doc["manifest"] = {
                "device_type_model": self.manifest.device_type_model,
                "manufacturer": self.manifest.manufacturer,
                "sensors": list(self.manifest.sensors),
                "actuators": list(self.manifest.actuators),
                "deployment_purpose": self.manifest.deployment_purpose,
                "deployment_location": self.manifest.deployment_location,
                "status": self.manifest.status,
            }
        return json.dumps(doc, sort_keys=True)


class Receiver:
    """Verifies frames against manifests; safe for concurrent process_frame calls."""

    def __init__(self, cfg: ReceiverConfig, clock: Callable[[], int]):
        if cfg.manifest_fetcher is None:
            raise ValueError("receiver needs a manifest fetcher")
        self.cfg = cfg
        self.clock = clock
        self._lock = threading.Lock()
        self._manifest_cache: Dict[str, Tuple[int, FetchResult]] = {}
        self._recent_sigs: Dict[bytes, int] = {}

    # -- manifest retrieval with a short-lived cache ------------------------

    def _fetch_manifest(self, short_url: str, now: int) -> FetchResult:
        with self._lock:
            cached = self._manifest_cache.get(short_url)
            if cached is not None and now - cached[0] <= self.cfg.epsilon:
                return cached[1]
        result = self.cfg.manifest_fetcher.fetch(short_url)
        with self._lock:
            self._manifest_cache[short_url] = (now, result)
        return result

    def _is_duplicate(self, signature: bytes, now: int) -> bool:
        with self._lock:
            last = self._recent_sigs.get(signature)
            self._recent_sigs[signature] = now
            if len(self._recent_sigs) > 10000:
                cutoff = now - self.cfg.epsilon
                self._recent_sigs = {
                    s: t for s, t in self._recent_sigs.items() if t >= cutoff
                }
            return last is not None and now - last <= self.cfg.epsilon

    # -- pipeline -----------------------------------------------------------

    def process_frame(self, frame: bytes) -> Union[PresenceReport, wire.BeaconDecode]:
        """Run the verification pipeline on one raw frame.

        Returns a PresenceReport for announcement-carrying frames, or the
        BeaconDecode verdict for everything else.
        """
        decoded = wire.decode_beacon(frame)
        if decoded.verdict is not wire.BeaconVerdict.OK:
            return decoded
        msg = decoded.msg
        now = self.clock()
        duplicate = self._is_duplicate(msg.signature, now)

        def report(verdict: Verdict, man: Optional[Manifest] = None) -> PresenceReport:
            summary = None
            device_id = None
            if man is not None:
                summary = ManifestSummary(
                    device_type_model=man.device_type_model,
                    manufacturer=man.manufacturer,
                    sensors=man.sensors,
                    actuators=man.actuators,
                    deployment_purpose=man.deployment_purpose,
                    deployment_location=man.deployment_location,
                    status=man.status,
                )
                device_id = man.device_id.hex()
            return PresenceReport(
                verdict=verdict,
                received_at=now,
                announcement_timestamp=msg.timestamp,
                att_result=msg.att_result,
                att_timestamp=msg.att_timestamp,
                device_id=device_id,
                manifest=summary,
                duplicate=duplicate,
            )

        freshness = check_freshness(msg.timestamp, now, self.cfg)
        if freshness is Freshness.STALE:
            return report(Verdict.STALE)
        if freshness is Freshness.FUTURE:
            return report(Verdict.FUTURE)

        try:
            fetched = self._fetch_manifest(msg.short_url, now)
        except FetchError:
            return report(Verdict.FETCH_ERROR)
        try:
            man = manifest_from_json(fetched.manifest_bytes)
        except ManifestError:
            return report(Verdict.BAD_MANIFEST_SIGNATURE)

        pinned_ok = True
        if self.cfg.pinned_mfr_keys is not None:
            pinned_ok = man.manufacturer_public_key in self.cfg.pinned_mfr_keys
        if not pinned_ok or not verify_manifest(man):
            return report(Verdict.BAD_MANIFEST_SIGNATURE, man)
        if fetched.resolved_url != man.full_url:
            return report(Verdict.REDIRECT_MISMATCH, man)
        if man.status == STATUS_REVOKED:
            return report(Verdict.REVOKED, man)

        preimage = wire.announcement_preimage(
            man.device_id,
            msg.nonce,
            msg.timestamp,
            msg.short_url,
            msg.att_result,
            msg.att_timestamp,
        )
        if not crypto.verify(
            man.device_public_key, hashlib.sha256(preimage).digest(), msg.signature
        ):
            return report(Verdict.BAD_ANNOUNCEMENT_SIGNATURE, man)
        if msg.att_result == 0:
            return report(Verdict.COMPROMISED, man)
        return report(Verdict.VERIFIED, man)


@dataclass
class DedupeEntry:
    device_id: Optional[str]
    verdict: Verdict
    first_seen: int
    last_seen: int
    count: int = 1


def dedupe(reports: Iterable[PresenceReport], window: int) -> List[DedupeEntry]:
    """Collapse repeated same-verdict reports per device inside a sliding window.

    Byte-identical duplicates (flagged upstream) are dropped outright. A
    verdict change for a device always surfaces as a new entry.
    """
    entries: List[DedupeEntry] = []
    current: Dict[Optional[str], DedupeEntry] = {}
    for rep in reports:
        if rep.duplicate:
            continue
        entry = current.get(rep.device_id)
        if (
            entry is not None
            and entry.verdict == rep.verdict
            and rep.received_at - entry.last_seen <= window
        ):
            entry.last_seen = rep.received_at
            entry.count += 1
            continue
        entry = DedupeEntry(
            device_id=rep.device_id,
            verdict=rep.verdict,
            first_seen=rep.received_at,
            last_seen=rep.received_at,
        )
        current[rep.device_id] = entry
        entries.append(entry)
    return entries

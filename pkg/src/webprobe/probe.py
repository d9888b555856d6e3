"""Measurement-session orchestration: drivers, timeouts, repeat mode, campaigns.

A session launches a browser configured for the requested protocol policy,
clears the resource cache, navigates once (twice in repeat mode, keeping
the DNS cache warm between passes) and turns the captured HAR into a
measurement record. An 18 s default timeout bounds the impact of content
server downtimes; the harness enforces it even against a driver that never
returns, reserving part of a 1 s grace allowance for teardown.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .delivery import Enrichment, attribute_session
from .har import HarSession, MalformedDocument, UnsupportedVersion, parse_har
from .metrics import Timings, compute_timings
from .protocol import DriverSettings, ProtocolPolicy, RequestedProtocol, policy_settings
from .record import (
    MeasurementRecord,
    RecordStore,
    SessionStatus,
    build_record,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 18_000.0

# driver teardown allowance on top of the navigation timeout; the harness
# waits navigate() for timeout + most of it and keeps the rest so a whole
# session stays within timeout + 1000 ms
GRACE_MS = 1_000.0
_NAVIGATE_WAIT_EXTRA_MS = 800.0


class DriverFailure(RuntimeError):
    """Browser driver broke; the session is recorded as failed."""


class NavigationTimeout(Exception):
    """Navigation missed its deadline; may carry a partial capture."""

    def __init__(self, message: str, partial_har: bytes | None = None, paint_events=()):
        super().__init__(message)
        self.partial_har = partial_har
        self.paint_events = list(paint_events)


@dataclass
class SessionConfig:
    browser_name: str = "Chrome"
    browser_version: str = ""
    policy: ProtocolPolicy = field(
        default_factory=lambda: ProtocolPolicy.for_requested(RequestedProtocol.H2)
    )
    window: tuple[int, int] = (1920, 1080)
    adblock: bool = False
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    probe_id: str = "probe-0"
    probe_city: str = ""
    probe_country: str = ""
    network_kind: str = "Fiber"
    network_operator: str = ""

    def validate(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.window[0] <= 0 or self.window[1] <= 0:
            raise ValueError("window dimensions must be positive")
        self.policy.validate()


@dataclass(frozen=True)
class LaunchSpec:
    """Everything a driver needs at launch: protocol switches plus emulation."""

    settings: DriverSettings
    window: tuple[int, int]
    adblock: bool


@dataclass
class NavigationResult:
    har: bytes
    paint_events: list = field(default_factory=list)


class BrowserDriver:
    """Abstract capability a probe drives; see ReplayDriver for the contract.

    navigate() must not return later than timeout_ms + 1000 ms; drivers that
    stall anyway are cut off by the session harness.
    """

    def launch(self, spec: LaunchSpec) -> None:
        raise NotImplementedError

    def navigate(self, url: str, timeout_ms: float) -> NavigationResult:
        raise NotImplementedError

    def clear_resource_cache(self) -> None:
        raise NotImplementedError

    def clear_dns_cache(self) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class ReplayDriver(BrowserDriver):
    """Serves pre-captured HAR files from a directory instead of browsing.

    Lookup order: a ``manifest.json`` mapping URL to filename, then
    ``<hostname>.har``, then ``<hostname-without-www>.har``.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self._manifest = {}
        manifest_path = self.directory / "manifest.json"
        if manifest_path.exists():
            self._manifest = json.loads(manifest_path.read_text("utf-8"))

    def launch(self, spec: LaunchSpec) -> None:
        pass

    def navigate(self, url: str, timeout_ms: float) -> NavigationResult:
        path = self._resolve(url)
        if path is None:
            raise DriverFailure(f"no replay HAR for {url!r} in {self.directory}")
        return NavigationResult(har=path.read_bytes())

    def _resolve(self, url: str) -> Path | None:
        name = self._manifest.get(url)
        if name:
            return self.directory / name
        from urllib.parse import urlsplit

        host = urlsplit(url).hostname or url
        for candidate in (host, host.removeprefix("www.")):
            path = self.directory / f"{candidate}.har"
            if path.exists():
                return path
        return None

    def clear_resource_cache(self) -> None:
        pass

    def clear_dns_cache(self) -> None:
        pass

    def close(self) -> None:
        pass


def _navigate_with_deadline(driver, url: str, timeout_ms: float) -> NavigationResult:
    """Run driver.navigate under a hard deadline.

    A well-behaved driver raises NavigationTimeout itself (possibly with a
    partial HAR); this wrapper only fires for drivers that stall past the
    contract, in which case nothing partial can be recovered.
    """
    box: dict = {}

    def work():
        try:
            box["result"] = driver.navigate(url, timeout_ms)
        except BaseException as exc:  # propagated to the caller below
            box["error"] = exc

    thread = threading.Thread(target=work, daemon=True, name="webprobe-navigate")
    thread.start()
    thread.join(timeout=(timeout_ms + _NAVIGATE_WAIT_EXTRA_MS) / 1000.0)
    if thread.is_alive():
        raise NavigationTimeout(f"driver stalled past {timeout_ms:.0f} ms; session cut off")
    if "error" in box:
        raise box["error"]
    return box["result"]


def _empty_session(url: str, config: SessionConfig) -> HarSession:
    return HarSession(
        page_url=url,
        started_at=datetime.now(timezone.utc),
        browser_name=config.browser_name,
        browser_version=config.browser_version,
        on_content_load_ms=None,
        on_load_ms=None,
        entries=[],
    )


def run_session(
    config: SessionConfig,
    url: str,
    driver: BrowserDriver,
    enrichment: Enrichment | None = None,
) -> MeasurementRecord:
    """Run one measurement session and return its record.

    Non-repeat: clear the resource cache, navigate once, measure. Repeat:
    warm-up navigation, close the browser, clear the resource cache (the
    DNS cache is deliberately kept), navigate again and measure the second
    pass; a warm-up timeout abandons the session as timed out. Driver
    failures and timeouts become record status, never exceptions.
    """
    config.validate()
    enrichment = enrichment or Enrichment.empty()
    settings = policy_settings(config.policy)
    spec = LaunchSpec(settings=settings, window=tuple(config.window), adblock=config.adblock)

    status = SessionStatus.COMPLETE
    warnings: list[str] = []
    result: NavigationResult | None = None
    closed = False
    try:
        driver.launch(spec)
        driver.clear_resource_cache()
        if settings.two_pass:
            warmed_up = False
            try:
                _navigate_with_deadline(driver, url, config.timeout_ms)
                warmed_up = True
            except NavigationTimeout as exc:
                status = SessionStatus.TIMEOUT
                warnings.append(f"warm-up navigation timed out: {exc}")
                result = NavigationResult(har=b"")
            if warmed_up:
                driver.close()
                driver.clear_resource_cache()
                driver.launch(spec)
                try:
                    result = _navigate_with_deadline(driver, url, config.timeout_ms)
                except NavigationTimeout as exc:
                    status = SessionStatus.TIMEOUT
                    warnings.append(f"navigation timed out: {exc}")
                    result = NavigationResult(
                        har=exc.partial_har or b"", paint_events=exc.paint_events
                    )
        else:
            try:
                result = _navigate_with_deadline(driver, url, config.timeout_ms)
            except NavigationTimeout as exc:
                status = SessionStatus.TIMEOUT
                warnings.append(f"navigation timed out: {exc}")
                result = NavigationResult(
                    har=exc.partial_har or b"", paint_events=exc.paint_events
                )
        driver.close()
        closed = True
    except DriverFailure as exc:
        status = SessionStatus.FAILED
        warnings.append(f"driver failure: {exc}")
        if result is None:
            result = NavigationResult(har=b"")
    finally:
        if not closed:
            try:
                driver.close()
            except Exception:
                logger.debug("driver close failed during cleanup", exc_info=True)

    session = None
    paint_events = result.paint_events if result else []
    if result is not None and result.har:
        try:
            session = parse_har(result.har)
        except (MalformedDocument, UnsupportedVersion) as exc:
            warnings.append(f"unparseable HAR: {exc}")
            if status is SessionStatus.COMPLETE:
                status = SessionStatus.FAILED
    if session is None:
        session = _empty_session(url, config)

    timings: Timings | None = None
    if session.entries or session.on_load_ms is not None:
        timings = compute_timings(session, paint_events, viewport=config.window)

    attributions = attribute_session(session, enrichment)
    return build_record(session, config, attributions, timings, status, warnings)


@dataclass
class CampaignSummary:
    counts: dict[SessionStatus, int]
    per_site: list[tuple[str, SessionStatus, int]]

    def status_counts(self) -> dict[str, int]:
        return {status.value: self.counts.get(status, 0) for status in SessionStatus}


def run_campaign(
    config: SessionConfig,
    urls,
    driver_factory,
    store: RecordStore,
    enrichment: Enrichment | None = None,
) -> CampaignSummary:
    """Visit every URL sequentially (one probe, one access network).

    Per-site failures are isolated and recorded; a store failure aborts the
    campaign because silent data loss is worse than a dead campaign.
    """
    urls = list(urls)
    if not urls:
        raise ValueError("campaign needs at least one URL")
    enrichment = enrichment or Enrichment.empty()

    counts: dict[SessionStatus, int] = {status: 0 for status in SessionStatus}
    per_site = []
    for url in urls:
        driver = driver_factory()
        try:
            record = run_session(config, url, driver, enrichment)
        except Exception as exc:
            logger.exception("session for %s blew up; recording as failed", url)
            session = _empty_session(url, config)
            record = build_record(
                session, config, [], None, SessionStatus.FAILED, [f"session error: {exc}"]
            )
        record_id = store.append(record)
        counts[record.status] += 1
        per_site.append((url, record.status, record_id))
    return CampaignSummary(counts=counts, per_site=per_site)


# -- campaign configuration ------------------------------------------------------


class ConfigError(ValueError):
    """Campaign configuration document is unusable."""


def load_campaign_config(path) -> tuple[SessionConfig, list[str], Path | None]:
    """Read a campaign config JSON: session parameters, URL list, fixtures dir.

    Websites come inline (``websites``) or from a one-URL-per-line file
    (``websites_file``, relative to the config). Returns (config, urls,
    fixtures directory or None).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")

    probe = doc.get("probe") or {}
    location = probe.get("location") or {}
    network = probe.get("access_network") or {}
    browser = doc.get("browser") or {}
    window = doc.get("window") or [1920, 1080]
    try:
        policy = ProtocolPolicy.for_requested(doc.get("requested_protocol", "H2"))
    except KeyError as exc:
        raise ConfigError(f"unknown requested_protocol: {doc.get('requested_protocol')!r}") from exc

    config = SessionConfig(
        browser_name=str(browser.get("name", "Chrome")),
        browser_version=str(browser.get("version", "")),
        policy=policy,
        window=(int(window[0]), int(window[1])),
        adblock=bool(doc.get("adblock", False)),
        timeout_ms=float(doc.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
        probe_id=str(probe.get("id", "probe-0")),
        probe_city=str(location.get("city", "")),
        probe_country=str(location.get("country", "")),
        network_kind=str(network.get("kind", "Fiber")),
        network_operator=str(network.get("operator", "")),
    )
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    urls = list(doc.get("websites") or [])
    sites_file = doc.get("websites_file")
    if sites_file:
        sites_path = Path(sites_file)
        if not sites_path.is_absolute():
            sites_path = path.parent / sites_path
        try:
            lines = sites_path.read_text("utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read websites_file {sites_path}: {exc}") from exc
        urls += [line.strip() for line in lines if line.strip() and not line.startswith("#")]

    fixtures = doc.get("fixtures")
    fixtures_path = None
    if fixtures:
        fixtures_path = Path(fixtures)
        if not fixtures_path.is_absolute():
            fixtures_path = path.parent / fixtures_path
    return config, urls, fixtures_path

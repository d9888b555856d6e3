"""HAR 1.2 parsing into a normalized per-navigation session model.

A browser's network log is the single source for everything computed
downstream (loading times, protocol distribution, cache chains), so the
parser is deliberately lenient: unknown fields are ignored, broken timing
blocks are kept with phases marked absent, and oddities are surfaced in a
per-session warning list instead of rejecting the capture.
"""

from __future__ import annotations

import ipaddress
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from urllib.parse import urlsplit

from .domains import registrable_domain

__all__ = [
    "MalformedDocument",
    "UnsupportedVersion",
    "HeaderMap",
    "HarEntry",
    "HarSession",
    "parse_har",
    "registrable_domain",
    "PHASES",
]

PHASES = ("blocked", "dns", "connect", "ssl", "send", "wait", "receive")

# slack allowed between entry.time and the sum of its phases before the
# phase block is declared inconsistent and dropped
_PHASE_SUM_SLACK_MS = 1.0


class MalformedDocument(ValueError):
    """Input is not a HAR document (unparseable JSON or no ``log`` object)."""


class UnsupportedVersion(ValueError):
    """HAR major version is not 1."""


class HeaderMap:
    """Ordered header multimap; duplicates kept, lookups case-insensitive."""

    __slots__ = ("_pairs",)

    def __init__(self, pairs=()):
        self._pairs = [(str(name), str(value)) for name, value in pairs]

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return list(self._pairs)

    def get_all(self, name: str) -> list[str]:
        wanted = name.lower()
        return [value for key, value in self._pairs if key.lower() == wanted]

    def get(self, name: str, default: str | None = None) -> str | None:
        values = self.get_all(name)
        return values[0] if values else default

    def __contains__(self, name: str) -> bool:
        return bool(self.get_all(name))

    def __iter__(self):
        return iter(self._pairs)

    def __len__(self) -> int:
        return len(self._pairs)

    def __eq__(self, other) -> bool:
        return isinstance(other, HeaderMap) and self._pairs == other._pairs

    def __repr__(self) -> str:
        return f"HeaderMap({self._pairs!r})"


@dataclass
class HarEntry:
    """One request/response exchange, normalized to navigation-relative time."""

    url: str
    method: str
    status: int
    http_version_raw: str
    headers: HeaderMap
    mime_type: str
    body_size_bytes: int
    transfer_size_bytes: int
    server_ip: str | None
    start_offset_ms: float
    total_time_ms: float
    phase_times: dict[str, float]

    def completion_ms(self) -> float:
        return self.start_offset_ms + self.total_time_ms

    def hostname(self) -> str:
        return urlsplit(self.url).hostname or ""

    def domain(self) -> str:
        return registrable_domain(self.hostname())

    def is_https(self) -> bool:
        return urlsplit(self.url).scheme.lower() == "https"


@dataclass
class HarSession:
    """Normalized view of one navigation's HAR log."""

    page_url: str
    started_at: datetime
    browser_name: str
    browser_version: str
    on_content_load_ms: float | None
    on_load_ms: float | None
    entries: list[HarEntry]
    warnings: list[str] = field(default_factory=list)

    def homepage_domain(self) -> str:
        host = urlsplit(self.page_url).hostname or ""
        return registrable_domain(host)


def parse_har(data: bytes | str) -> HarSession:
    """Parse a HAR 1.2 document into a :class:`HarSession`.

    Raises :class:`MalformedDocument` when the input is not JSON or lacks a
    ``log`` object, :class:`UnsupportedVersion` for HAR major versions other
    than 1. Everything else degrades to warnings.
    """
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"not UTF-8: {exc}") from exc
    else:
        text = data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"not JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("log"), dict):
        raise MalformedDocument("no 'log' object")
    log = doc["log"]

    warnings: list[str] = []
    version = log.get("version")
    if version is None:
        warnings.append("log.version missing, assuming HAR 1.x")
    else:
        major = str(version).split(".", 1)[0].strip()
        if major != "1":
            raise UnsupportedVersion(f"HAR version {version!r}")

    pages = log.get("pages") or []
    page = pages[0] if isinstance(pages, list) and pages else {}
    if isinstance(pages, list) and len(pages) > 1:
        warnings.append(f"HAR has {len(pages)} pages; only the first is used")
    if not isinstance(page, dict):
        page = {}

    page_started = _parse_timestamp(page.get("startedDateTime"))
    page_id = page.get("id")

    raw_entries = log.get("entries") or []
    if not isinstance(raw_entries, list):
        raw_entries = []

    kept_raw = []
    skipped_pageref = 0
    for raw in raw_entries:
        if not isinstance(raw, dict):
            continue
        ref = raw.get("pageref")
        if page_id is not None and ref is not None and ref != page_id:
            skipped_pageref += 1
            continue
        kept_raw.append(raw)
    if skipped_pageref:
        warnings.append(f"{skipped_pageref} entries referenced pages beyond the first; ignored")

    if page_started is None:
        starts = [_parse_timestamp(raw.get("startedDateTime")) for raw in kept_raw]
        starts = [s for s in starts if s is not None]
        if starts:
            page_started = min(starts)
        else:
            page_started = datetime(1970, 1, 1, tzinfo=timezone.utc)
            if kept_raw:
                warnings.append("no usable startedDateTime anywhere; offsets default to 0")

    entries = []
    clamped = 0
    malformed_phases = 0
    bad_ips = 0
    for raw in kept_raw:
        entry, flags = _parse_entry(raw, page_started)
        clamped += flags["clamped"]
        malformed_phases += flags["malformed_phases"]
        bad_ips += flags["bad_ip"]
        entries.append(entry)
    if clamped:
        warnings.append(f"{clamped} entries started before navigation start; offsets clamped to 0")
    if malformed_phases:
        warnings.append(f"{malformed_phases} entries had inconsistent phase timings; phases dropped")
    if bad_ips:
        warnings.append(f"{bad_ips} entries carried an unparseable serverIPAddress; dropped")

    entries.sort(key=lambda e: e.start_offset_ms)

    browser = log.get("browser") or log.get("creator") or {}
    if not isinstance(browser, dict):
        browser = {}

    page_url = ""
    title = page.get("title")
    if isinstance(title, str) and title.lower().startswith(("http://", "https://")):
        page_url = title
    elif entries:
        page_url = entries[0].url

    timings = page.get("pageTimings") or {}
    if not isinstance(timings, dict):
        timings = {}

    return HarSession(
        page_url=page_url,
        started_at=page_started,
        browser_name=str(browser.get("name", "")),
        browser_version=str(browser.get("version", "")),
        on_content_load_ms=_page_timing(timings.get("onContentLoad")),
        on_load_ms=_page_timing(timings.get("onLoad")),
        entries=entries,
        warnings=warnings,
    )


def _parse_entry(raw: dict, page_started: datetime) -> tuple[HarEntry, dict]:
    flags = {"clamped": 0, "malformed_phases": 0, "bad_ip": 0}
    request = raw.get("request") if isinstance(raw.get("request"), dict) else {}
    response = raw.get("response") if isinstance(raw.get("response"), dict) else {}
    content = response.get("content") if isinstance(response.get("content"), dict) else {}

    started = _parse_timestamp(raw.get("startedDateTime"))
    if started is None:
        offset = 0.0
    else:
        offset = (started - page_started).total_seconds() * 1000.0
        if offset < 0:
            offset = 0.0
            flags["clamped"] = 1

    total = _as_float(raw.get("time"), 0.0)
    if total < 0:
        total = 0.0

    phases = {}
    raw_timings = raw.get("timings") if isinstance(raw.get("timings"), dict) else {}
    for phase in PHASES:
        value = _as_float(raw_timings.get(phase, -1), -1.0)
        phases[phase] = value if value >= 0 else -1.0
    phase_sum = sum(v for v in phases.values() if v >= 0)
    if total < phase_sum - _PHASE_SUM_SLACK_MS:
        phases = {phase: -1.0 for phase in PHASES}
        flags["malformed_phases"] = 1

    server_ip = raw.get("serverIPAddress")
    if server_ip is not None:
        candidate = str(server_ip).strip().strip("[]")
        try:
            server_ip = str(ipaddress.ip_address(candidate))
        except ValueError:
            server_ip = None
            flags["bad_ip"] = 1

    status = _as_int(response.get("status"), 0)
    if not 0 <= status <= 999:
        status = 0

    http_version = str(response.get("httpVersion") or request.get("httpVersion") or "")

    body_size = _as_int(response.get("bodySize"), None)
    if body_size is None:
        body_size = _as_int(content.get("size"), -1)
    body_size = max(body_size, -1)

    transfer_size = max(_as_int(response.get("_transferSize"), -1), -1)

    header_pairs = []
    for header in response.get("headers") or []:
        if isinstance(header, dict) and "name" in header:
            header_pairs.append((str(header["name"]), str(header.get("value", ""))))

    entry = HarEntry(
        url=str(request.get("url", "")),
        method=str(request.get("method", "GET")),
        status=status,
        http_version_raw=http_version,
        headers=HeaderMap(header_pairs),
        mime_type=str(content.get("mimeType", "")),
        body_size_bytes=body_size,
        transfer_size_bytes=transfer_size,
        server_ip=server_ip,
        start_offset_ms=offset,
        total_time_ms=total,
        phase_times=phases,
    )
    return entry, flags


def _parse_timestamp(value) -> datetime | None:
    if not isinstance(value, str) or not value:
        return None
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        stamp = datetime.fromisoformat(text)
    except ValueError:
        return None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def _page_timing(value) -> float | None:
    number = _as_float(value, -1.0)
    return number if number >= 0 else None


def _as_float(value, default):
    if isinstance(value, bool):
        return default
    if isinstance(value, (int, float)):
        return float(value)
    return default


def _as_int(value, default):
    if isinstance(value, bool):
        return default
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return default

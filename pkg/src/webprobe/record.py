"""Per-pageview measurement records, an append-only store, filtered queries.

One record is the full parameter vector of one browsing session: probe
identity, configuration, the four timings, resource statistics, protocol
distribution and the delivery breakdowns. Records are persisted one JSON
object per line with a per-line checksum: crash-tolerant, diffable and
adequate at probe scale. A single writer appends; readers take snapshots
and never block it.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .delivery import DeliveryAttribution, OriginClass
from .domains import registrable_domain
from .har import HarSession
from .metrics import (
    FpSource,
    ResourceStats,
    Timings,
    mime_class,
    resource_stats,
)
from .protocol import (
    Protocol,
    ProtocolDistribution,
    RequestedProtocol,
    normalize_protocol,
    protocol_distribution,
    quic_enabled_domains,
)

SCHEMA_VERSION = 1

ACCESS_NETWORKS = ("Fiber", "ADSL", "WiFi")

FILTER_KEYS = (
    "website",
    "browser",
    "access_network",
    "probe_location",
    "window",
    "adblock",
    "requested_protocol",
    "time_range",
    "provider",
)


class SessionStatus(Enum):
    COMPLETE = "complete"
    TIMEOUT = "timeout"
    FAILED = "failed"


class AlignmentError(ValueError):
    """Attributions do not align 1:1 with the session's delivered entries."""


class StoreCorrupt(RuntimeError):
    """A stored line failed its checksum or could not be parsed."""


class StoreFailure(RuntimeError):
    """The store could not be written; campaigns must not continue silently."""


class FilterError(ValueError):
    """Query used an unknown filter field or an unparseable value."""


@dataclass
class DomainCell:
    count: int
    body_bytes: int
    origin_class: OriginClass


@dataclass
class CountryCell:
    """Per-country delivery cross-tab for geo reporting."""

    count: int = 0
    continent: str | None = None
    providers: dict[str, int] = field(default_factory=dict)
    protocols: dict[str, int] = field(default_factory=dict)
    cities: dict[str, int] = field(default_factory=dict)


@dataclass
class MeasurementRecord:
    schema_version: int
    probe_id: str
    probe_city: str
    probe_country: str
    network_kind: str
    network_operator: str
    browser_name: str
    browser_version: str
    window: tuple[int, int]
    adblock: bool
    requested_protocol: RequestedProtocol
    website: str
    url: str
    timestamp: datetime
    status: SessionStatus
    timings: Timings | None
    stats: ResourceStats
    distribution: ProtocolDistribution
    per_domain: dict[str, DomainCell]
    per_provider: dict[str, int]
    per_continent: dict[str, int]
    per_country: dict[str, CountryCell]
    unattributed_count: int
    quic_domains: set[str]
    warnings: list[str]
    extra: dict = field(default_factory=dict)


def build_record(
    session: HarSession,
    config,
    attributions: list[DeliveryAttribution],
    timings: Timings | None,
    status: SessionStatus = SessionStatus.COMPLETE,
    warnings=(),
) -> MeasurementRecord:
    """Assemble the record for one session.

    ``attributions`` must align 1:1 with the session's delivered (status > 0)
    entries, in entry order. ``config`` supplies the probe identity and
    session configuration (see probe.SessionConfig).
    """
    loaded = [e for e in session.entries if e.status > 0]
    if len(attributions) != len(loaded):
        raise AlignmentError(
            f"{len(attributions)} attributions for {len(loaded)} delivered entries"
        )

    stats = resource_stats(session)
    distribution = protocol_distribution(session)

    per_domain: dict[str, DomainCell] = {}
    per_provider: dict[str, int] = {}
    per_continent: dict[str, int] = {}
    per_country: dict[str, CountryCell] = {}
    for entry, attribution in zip(loaded, attributions):
        domain = registrable_domain(entry.hostname())
        cell = per_domain.get(domain)
        if cell is None:
            cell = per_domain[domain] = DomainCell(0, 0, attribution.origin_class)
        cell.count += 1
        cell.body_bytes += max(entry.body_size_bytes, 0)

        per_provider[attribution.provider] = per_provider.get(attribution.provider, 0) + 1

        if attribution.country and attribution.continent:
            per_continent[attribution.continent] = (
                per_continent.get(attribution.continent, 0) + 1
            )
            ccell = per_country.setdefault(
                attribution.country, CountryCell(continent=attribution.continent)
            )
            ccell.count += 1
            proto = normalize_protocol(entry.http_version_raw).value
            ccell.protocols[proto] = ccell.protocols.get(proto, 0) + 1
            ccell.providers[attribution.provider] = (
                ccell.providers.get(attribution.provider, 0) + 1
            )
            if attribution.city:
                ccell.cities[attribution.city] = ccell.cities.get(attribution.city, 0) + 1

    unattributed = stats.resource_count - sum(per_continent.values())

    website = session.homepage_domain()
    timestamp = _truncate_ms(session.started_at)

    effective_warnings = list(session.warnings) + list(warnings)
    if status is SessionStatus.COMPLETE and not session.entries:
        effective_warnings.append("session completed with an empty HAR")

    return MeasurementRecord(
        schema_version=SCHEMA_VERSION,
        probe_id=config.probe_id,
        probe_city=config.probe_city,
        probe_country=config.probe_country,
        network_kind=config.network_kind,
        network_operator=config.network_operator,
        browser_name=config.browser_name,
        browser_version=config.browser_version,
        window=tuple(config.window),
        adblock=config.adblock,
        requested_protocol=config.policy.requested,
        website=website,
        url=session.page_url,
        timestamp=timestamp,
        status=status,
        timings=timings,
        stats=stats,
        distribution=distribution,
        per_domain=per_domain,
        per_provider=per_provider,
        per_continent=per_continent,
        per_country=per_country,
        unattributed_count=unattributed,
        quic_domains=quic_enabled_domains(session),
        warnings=effective_warnings,
        extra={},
    )


# -- serialization ---------------------------------------------------------------


def record_to_dict(record: MeasurementRecord) -> dict:
    return {
        "schema_version": record.schema_version,
        "probe_id": record.probe_id,
        "probe_city": record.probe_city,
        "probe_country": record.probe_country,
        "network_kind": record.network_kind,
        "network_operator": record.network_operator,
        "browser_name": record.browser_name,
        "browser_version": record.browser_version,
        "window": list(record.window),
        "adblock": record.adblock,
        "requested_protocol": record.requested_protocol.value,
        "website": record.website,
        "url": record.url,
        "timestamp": format_timestamp(record.timestamp),
        "status": record.status.value,
        "timings": _timings_to_dict(record.timings),
        "stats": _stats_to_dict(record.stats),
        "distribution": {
            "counts": {p.value: n for p, n in sorted(record.distribution.counts.items(), key=lambda kv: kv[0].value)},
            "fractions": {p.value: f for p, f in sorted(record.distribution.fractions.items(), key=lambda kv: kv[0].value)},
        },
        "per_domain": {
            d: {"count": c.count, "bytes": c.body_bytes, "origin": c.origin_class.value}
            for d, c in sorted(record.per_domain.items())
        },
        "per_provider": dict(sorted(record.per_provider.items())),
        "per_continent": dict(sorted(record.per_continent.items())),
        "per_country": {
            cc: {
                "count": cell.count,
                "continent": cell.continent,
                "providers": dict(sorted(cell.providers.items())),
                "protocols": dict(sorted(cell.protocols.items())),
                "cities": dict(sorted(cell.cities.items())),
            }
            for cc, cell in sorted(record.per_country.items())
        },
        "unattributed_count": record.unattributed_count,
        "quic_domains": sorted(record.quic_domains),
        "warnings": list(record.warnings),
        "extra": dict(record.extra),
    }


def record_from_dict(data: dict) -> MeasurementRecord:
    distribution = ProtocolDistribution(
        counts={Protocol(p): n for p, n in data["distribution"]["counts"].items()},
        fractions={Protocol(p): f for p, f in data["distribution"]["fractions"].items()},
    )
    return MeasurementRecord(
        schema_version=data["schema_version"],
        probe_id=data["probe_id"],
        probe_city=data["probe_city"],
        probe_country=data["probe_country"],
        network_kind=data["network_kind"],
        network_operator=data["network_operator"],
        browser_name=data["browser_name"],
        browser_version=data["browser_version"],
        window=tuple(data["window"]),
        adblock=data["adblock"],
        requested_protocol=RequestedProtocol(data["requested_protocol"]),
        website=data["website"],
        url=data["url"],
        timestamp=parse_timestamp(data["timestamp"]),
        status=SessionStatus(data["status"]),
        timings=_timings_from_dict(data["timings"]),
        stats=_stats_from_dict(data["stats"]),
        distribution=distribution,
        per_domain={
            d: DomainCell(c["count"], c["bytes"], OriginClass(c["origin"]))
            for d, c in data["per_domain"].items()
        },
        per_provider=dict(data["per_provider"]),
        per_continent=dict(data["per_continent"]),
        per_country={
            cc: CountryCell(
                count=c["count"],
                continent=c["continent"],
                providers=dict(c["providers"]),
                protocols=dict(c["protocols"]),
                cities=dict(c["cities"]),
            )
            for cc, c in data["per_country"].items()
        },
        unattributed_count=data["unattributed_count"],
        quic_domains=set(data["quic_domains"]),
        warnings=list(data["warnings"]),
        extra=dict(data["extra"]),
    )


def _timings_to_dict(timings: Timings | None):
    if timings is None:
        return None
    return {
        "first_paint_ms": timings.first_paint_ms,
        "page_load_time_ms": timings.page_load_time_ms,
        "tfvr_ms": timings.tfvr_ms,
        "processing_time_ms": timings.processing_time_ms,
        "network_busy_ms": timings.network_busy_ms,
        "fp_source": timings.fp_source.value,
    }


def _timings_from_dict(data):
    if data is None:
        return None
    return Timings(
        first_paint_ms=data["first_paint_ms"],
        page_load_time_ms=data["page_load_time_ms"],
        tfvr_ms=data["tfvr_ms"],
        processing_time_ms=data["processing_time_ms"],
        network_busy_ms=data["network_busy_ms"],
        fp_source=FpSource(data["fp_source"]),
    )


def _stats_to_dict(stats: ResourceStats):
    return {
        "resource_count": stats.resource_count,
        "domain_count": stats.domain_count,
        "total_body_bytes": stats.total_body_bytes,
        "total_transfer_bytes": stats.total_transfer_bytes,
        "per_mime_class": {cls: list(v) for cls, v in stats.per_mime_class.items()},
        "mean_transfer_rate_bytes_per_s": stats.mean_transfer_rate_bytes_per_s,
        "https_fraction": stats.https_fraction,
        "aborted_count": stats.aborted_count,
    }


def _stats_from_dict(data):
    return ResourceStats(
        resource_count=data["resource_count"],
        domain_count=data["domain_count"],
        total_body_bytes=data["total_body_bytes"],
        total_transfer_bytes=data["total_transfer_bytes"],
        per_mime_class={cls: tuple(v) for cls, v in data["per_mime_class"].items()},
        mean_transfer_rate_bytes_per_s=data["mean_transfer_rate_bytes_per_s"],
        https_fraction=data["https_fraction"],
        aborted_count=data["aborted_count"],
    )


def format_timestamp(stamp: datetime) -> str:
    return _truncate_ms(stamp).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def parse_timestamp(text: str) -> datetime:
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def _truncate_ms(stamp: datetime) -> datetime:
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    stamp = stamp.astimezone(timezone.utc)
    return stamp.replace(microsecond=stamp.microsecond // 1000 * 1000)


# -- store -----------------------------------------------------------------------


def _checksum(record_dict: dict) -> str:
    canonical = json.dumps(record_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class RecordStore:
    """Append-only JSON-lines store, one checksummed record per line."""

    def __init__(self, path):
        self.path = Path(path)
        self._count: int | None = None

    def append(self, record: MeasurementRecord) -> int:
        """Durably append one record; returns its line index."""
        data = record_to_dict(record)
        line = json.dumps({"record": data, "checksum": _checksum(data)}) + "\n"
        if self._count is None:
            self._count = self._scan_count()
        try:
            with open(self.path, "a", encoding="utf-8") as fp:
                fp.write(line)
                fp.flush()
                os.fsync(fp.fileno())
        except OSError as exc:
            raise StoreFailure(f"cannot append to {self.path}: {exc}") from exc
        self._count += 1
        return self._count - 1

    def _scan_count(self) -> int:
        if not self.path.exists():
            return 0
        with open(self.path, "r", encoding="utf-8") as fp:
            return sum(1 for line in fp if line.strip())

    def iter_dicts(self):
        """Yield verified record dicts; raises StoreCorrupt on a bad line."""
        if not self.path.exists():
            return
        with open(self.path, "r", encoding="utf-8") as fp:
            for number, line in enumerate(fp, start=1):
                if not line.strip():
                    continue
                try:
                    wrapper = json.loads(line)
                    data = wrapper["record"]
                    stored = wrapper["checksum"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise StoreCorrupt(f"{self.path}:{number}: unparseable line") from exc
                if _checksum(data) != stored:
                    raise StoreCorrupt(f"{self.path}:{number}: checksum mismatch")
                yield data

    def query(self, filters: dict | None = None) -> list[MeasurementRecord]:
        """Records satisfying all given filters, ordered by timestamp."""
        normalized = normalize_filters(filters or {})
        records = [record_from_dict(d) for d in self.iter_dicts()]
        matching = [r for r in records if matches_filters(r, normalized)]
        matching.sort(key=lambda r: r.timestamp)
        return matching


# -- filters ---------------------------------------------------------------------


def normalize_filters(filters: dict) -> dict:
    """Coerce raw (possibly CLI string) filter values into canonical types."""
    normalized = {}
    for key, value in filters.items():
        if key not in FILTER_KEYS:
            raise FilterError(f"unknown filter field {key!r}")
        try:
            normalized[key] = _normalize_value(key, value)
        except (ValueError, KeyError, TypeError) as exc:
            raise FilterError(f"bad value for filter {key!r}: {value!r}") from exc
    return normalized


def _normalize_value(key: str, value):
    if key in ("website", "browser", "probe_location", "provider"):
        return str(value)
    if key == "access_network":
        text = str(value)
        for kind in ACCESS_NETWORKS:
            if text.lower() == kind.lower():
                return kind
        raise ValueError(f"not an access network: {text}")
    if key == "window":
        if isinstance(value, str):
            w, _, h = value.lower().partition("x")
            return (int(w), int(h))
        w, h = value
        return (int(w), int(h))
    if key == "adblock":
        if isinstance(value, bool):
            return value
        text = str(value).lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value}")
    if key == "requested_protocol":
        if isinstance(value, RequestedProtocol):
            return value
        return RequestedProtocol[str(value).upper()]
    if key == "time_range":
        if isinstance(value, str):
            start_text, sep, end_text = value.partition("..")
            if not sep:
                raise ValueError("time_range wants 'start..end'")
            return (parse_timestamp(start_text), parse_timestamp(end_text))
        start, end = value
        if isinstance(start, str):
            start = parse_timestamp(start)
        if isinstance(end, str):
            end = parse_timestamp(end)
        return (start, end)
    raise AssertionError(key)


def matches_filters(record: MeasurementRecord, normalized: dict) -> bool:
    """Conjunctive match of a record against normalized filters."""
    for key, value in normalized.items():
        if key == "website" and record.website != value:
            return False
        if key == "browser":
            name, sep, version = value.partition("/")
            if record.browser_name != name:
                return False
            if sep and record.browser_version != version:
                return False
        if key == "access_network" and record.network_kind != value:
            return False
        if key == "probe_location":
            wanted = value.lower()
            if record.probe_city.lower() != wanted and record.probe_country.lower() != wanted:
                return False
        if key == "window" and tuple(record.window) != value:
            return False
        if key == "adblock" and record.adblock is not value:
            return False
        if key == "requested_protocol" and record.requested_protocol is not value:
            return False
        if key == "time_range":
            start, end = value
            if not start <= record.timestamp <= end:
                return False
        if key == "provider" and record.per_provider.get(value, 0) <= 0:
            return False
    return True


# -- CSV export --------------------------------------------------------------------


_SCALAR_COLUMNS = (
    "schema_version",
    "probe_id",
    "probe_city",
    "probe_country",
    "network_kind",
    "network_operator",
    "browser_name",
    "browser_version",
    "window_width",
    "window_height",
    "adblock",
    "requested_protocol",
    "website",
    "url",
    "timestamp",
    "status",
    "unattributed_count",
)

_TIMING_COLUMNS = (
    "first_paint_ms",
    "page_load_time_ms",
    "tfvr_ms",
    "processing_time_ms",
    "network_busy_ms",
    "fp_source",
)

_STATS_COLUMNS = (
    "resource_count",
    "domain_count",
    "total_body_bytes",
    "total_transfer_bytes",
    "mean_transfer_rate_bytes_per_s",
    "https_fraction",
    "aborted_count",
)


def export_records_csv(records, fp) -> None:
    """Flat CSV dump: scalar columns plus exploded map columns.

    per_provider, per_continent and distribution counts become
    ``per_provider.<name>``-style columns; deep maps (per_domain,
    per_country, extra) are JSON-encoded cells.
    """
    records = list(records)
    providers = sorted({p for r in records for p in r.per_provider})
    continents = sorted({c for r in records for c in r.per_continent})
    protocols = [p.value for p in Protocol]

    header = list(_SCALAR_COLUMNS)
    header += [f"timings.{c}" for c in _TIMING_COLUMNS]
    header += [f"stats.{c}" for c in _STATS_COLUMNS]
    header += [f"distribution.{p}" for p in protocols]
    header += [f"per_provider.{p}" for p in providers]
    header += [f"per_continent.{c}" for c in continents]
    header += ["quic_domains", "per_domain", "per_country", "warnings", "extra"]

    writer = csv.writer(fp)
    writer.writerow(header)
    for record in records:
        data = record_to_dict(record)
        row = [
            data["schema_version"],
            data["probe_id"],
            data["probe_city"],
            data["probe_country"],
            data["network_kind"],
            data["network_operator"],
            data["browser_name"],
            data["browser_version"],
            data["window"][0],
            data["window"][1],
            data["adblock"],
            data["requested_protocol"],
            data["website"],
            data["url"],
            data["timestamp"],
            data["status"],
            data["unattributed_count"],
        ]
        timings = data["timings"] or {}
        row += [timings.get(c, "") for c in _TIMING_COLUMNS]
        row += [data["stats"][c] for c in _STATS_COLUMNS]
        row += [data["distribution"]["counts"].get(p, 0) for p in protocols]
        row += [data["per_provider"].get(p, 0) for p in providers]
        row += [data["per_continent"].get(c, 0) for c in continents]
        row += [
            ";".join(data["quic_domains"]),
            json.dumps(data["per_domain"], sort_keys=True),
            json.dumps(data["per_country"], sort_keys=True),
            json.dumps(data["warnings"]),
            json.dumps(data["extra"], sort_keys=True),
        ]
        writer.writerow(row)

"""Aggregate stored records into report panels and render them.

Panels mirror what the measurement pipeline tracks: protocol distribution,
delivery geography (circle weights per country on a map), a CDN provider
table, time series over campaign history and side-by-side comparisons
(browser vs browser, protocol vs protocol). Renderers emit JSON, CSV,
GeoJSON (RFC 7946) and a self-contained HTML page; no dashboard stack, a
report is a static artifact.
"""

from __future__ import annotations

import csv
import html
import io
import json
import statistics
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from functools import lru_cache
from importlib import resources

from .protocol import Protocol
from .record import (
    MeasurementRecord,
    format_timestamp,
    matches_filters,
    normalize_filters,
)

REPORT_KINDS = ("protocol_panel", "geo_panel", "cdn_table", "timeseries", "compare")

TIMING_METRICS = ("plt", "tfvr", "fp", "processing")

_CONTINENT_CENTROIDS = {
    "AF": (7.19, 21.09),
    "AN": (-75.25, -0.07),
    "AS": (34.05, 100.62),
    "EU": (54.53, 15.26),
    "NA": (48.17, -100.17),
    "OC": (-22.74, 140.02),
    "SA": (-14.60, -57.66),
}


class ReportError(ValueError):
    """Unknown report kind or incoherent aggregation options."""


class FormatMismatch(ValueError):
    """Requested output format does not apply to this report kind."""


@dataclass
class ReportOptions:
    group_by: str | None = None
    metric: str = "count"
    bucket_days: int = 1
    compare_by: str = "browser"


@dataclass
class Report:
    kind: str
    filters: dict
    options: dict
    generated_at: datetime
    empty: bool
    rows: list[dict]


def aggregate(records, kind: str, filters: dict | None = None, options: ReportOptions | None = None) -> Report:
    """Deterministic aggregation of records into one report.

    ``filters`` are re-applied (conjunctive, same semantics as store
    queries) so the function is pure over whatever record iterable it is
    handed. An empty selection is not an error: the report comes back
    flagged empty.
    """
    if kind not in REPORT_KINDS:
        raise ReportError(f"unknown report kind {kind!r}")
    options = options or ReportOptions()
    normalized = normalize_filters(filters or {})
    selected = sorted(
        (r for r in records if matches_filters(r, normalized)),
        key=lambda r: r.timestamp,
    )

    if kind == "protocol_panel":
        rows = _protocol_panel(selected)
    elif kind == "geo_panel":
        rows = _geo_panel(selected, options.group_by or "country")
    elif kind == "cdn_table":
        rows = _cdn_table(selected)
    elif kind == "timeseries":
        rows = _timeseries(selected, options)
    else:
        rows = _compare(selected, options)

    return Report(
        kind=kind,
        filters=_filters_repr(normalized),
        options={
            "group_by": options.group_by,
            "metric": options.metric,
            "bucket_days": options.bucket_days,
            "compare_by": options.compare_by,
        },
        generated_at=datetime.now(timezone.utc),
        empty=not selected,
        rows=rows,
    )


def _filters_repr(normalized: dict) -> dict:
    """Serializable echo of the filters a report was built under."""
    out = {}
    for key, value in sorted(normalized.items()):
        if key == "window":
            out[key] = f"{value[0]}x{value[1]}"
        elif key == "requested_protocol":
            out[key] = value.value
        elif key == "time_range":
            out[key] = f"{format_timestamp(value[0])}..{format_timestamp(value[1])}"
        else:
            out[key] = value
    return out


# -- panels -----------------------------------------------------------------------


def _protocol_panel(selected) -> list[dict]:
    totals = {p: 0 for p in Protocol}
    for record in selected:
        for proto, count in record.distribution.counts.items():
            totals[proto] += count
    grand = sum(totals.values())
    rows = []
    for proto in Protocol:
        count = totals[proto]
        if count:
            rows.append(
                {"protocol": proto.value, "count": count, "fraction": count / grand}
            )
    return rows


def _geo_panel(selected, group_by: str) -> list[dict]:
    if group_by not in ("country", "city", "continent"):
        raise ReportError(f"geo_panel cannot group by {group_by!r}")
    groups: dict = {}

    def bucket(key):
        return groups.setdefault(
            key, {"weight": 0, "providers": {}, "protocols": {}}
        )

    for record in selected:
        for country, cell in record.per_country.items():
            if group_by == "continent":
                entry = bucket(cell.continent)
                _merge_counts(entry["providers"], cell.providers)
                _merge_counts(entry["protocols"], cell.protocols)
                entry["weight"] += cell.count
            elif group_by == "country":
                entry = bucket(country)
                entry["continent"] = cell.continent
                _merge_counts(entry["providers"], cell.providers)
                _merge_counts(entry["protocols"], cell.protocols)
                entry["weight"] += cell.count
            else:
                remainder = cell.count - sum(cell.cities.values())
                for city, count in cell.cities.items():
                    entry = bucket((country, city))
                    entry["weight"] += count
                if remainder > 0:
                    entry = bucket((country, None))
                    entry["weight"] += remainder

    rows = []
    for key in sorted(groups, key=lambda k: str(k)):
        entry = groups[key]
        if group_by == "continent":
            row = {"group": key, "continent": key, "country": None, "city": None}
        elif group_by == "country":
            row = {
                "group": key,
                "continent": entry.pop("continent", None),
                "country": key,
                "city": None,
            }
        else:
            country, city = key
            label = f"{city}, {country}" if city else country
            row = {"group": label, "continent": None, "country": country, "city": city}
        row["weight"] = entry["weight"]
        row["providers"] = dict(sorted(entry["providers"].items()))
        row["protocols"] = dict(sorted(entry["protocols"].items()))
        rows.append(row)
    return rows


def _cdn_table(selected) -> list[dict]:
    totals: dict[str, int] = {}
    for record in selected:
        _merge_counts(totals, record.per_provider)
    return [
        {"provider": name, "count": count}
        for name, count in sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    ]


_COUNT_GROUPINGS = ("continent", "country", "provider", "protocol")
_RECORD_GROUPINGS = (None, "browser", "requested_protocol")


def _record_group(record: MeasurementRecord, dimension: str | None) -> str:
    if dimension is None:
        return "all"
    if dimension == "browser":
        return record.browser_name
    return record.requested_protocol.value


def _count_map(record: MeasurementRecord, dimension: str) -> dict:
    if dimension == "continent":
        return record.per_continent
    if dimension == "country":
        return {cc: cell.count for cc, cell in record.per_country.items()}
    if dimension == "provider":
        return record.per_provider
    return {p.value: n for p, n in record.distribution.counts.items() if n}


def _metric_value(record: MeasurementRecord, metric: str):
    if metric == "count":
        return float(record.stats.resource_count)
    if record.timings is None:
        return None
    value = {
        "plt": record.timings.page_load_time_ms,
        "tfvr": record.timings.tfvr_ms,
        "fp": record.timings.first_paint_ms,
        "processing": record.timings.processing_time_ms,
    }[metric]
    return float(value) if value is not None else None


def _timeseries(selected, options: ReportOptions) -> list[dict]:
    metric = options.metric
    if metric not in ("count",) + TIMING_METRICS:
        raise ReportError(f"unknown metric {metric!r}")
    if options.bucket_days < 1:
        raise ReportError("bucket_days must be >= 1")
    if metric == "count":
        group_by = options.group_by or "continent"
        if group_by not in _COUNT_GROUPINGS:
            raise ReportError(f"count timeseries cannot group by {group_by!r}")
    else:
        group_by = options.group_by
        if group_by not in _RECORD_GROUPINGS:
            raise ReportError(f"timing timeseries cannot group by {group_by!r}")
    if not selected:
        return []

    bucket_span = timedelta(days=options.bucket_days)

    def bucket_start(stamp: datetime) -> datetime:
        # aligned to UTC midnight, then snapped to a bucket_days grid
        days = (stamp.date() - datetime(1970, 1, 1).date()).days
        start_days = days // options.bucket_days * options.bucket_days
        return datetime(1970, 1, 1, tzinfo=timezone.utc) + timedelta(days=start_days)

    buckets: dict[datetime, list[MeasurementRecord]] = {}
    for record in selected:
        buckets.setdefault(bucket_start(record.timestamp), []).append(record)

    first_ts = selected[0].timestamp
    last_ts = selected[-1].timestamp
    rows = []
    for start in sorted(buckets):
        bucket_records = buckets[start]
        partial = (start == bucket_start(first_ts) and first_ts > start) or (
            start == bucket_start(last_ts) and last_ts < start + bucket_span
        )
        if metric == "count":
            # a record contributes 0 to groups it lacks: the per-bucket mean
            # is "objects per pageview from this group"
            maps = [_count_map(r, group_by) for r in bucket_records]
            groups = sorted({g for m in maps for g in m if m[g]})
            per_group = {g: [float(m.get(g, 0)) for m in maps] for g in groups}
        else:
            per_group = {}
            for record in bucket_records:
                value = _metric_value(record, metric)
                if value is not None:
                    per_group.setdefault(_record_group(record, group_by), []).append(value)
        for group in sorted(per_group):
            values = per_group[group]
            if not values:
                continue
            row = {
                "bucket": format_timestamp(start),
                "group": group,
                "mean": sum(values) / len(values),
                "total": sum(values),
                "n": len(values),
                "partial": partial,
            }
            if metric in TIMING_METRICS:
                row["median"] = statistics.median(values)
                row["p90"] = _percentile(values, 90.0)
            rows.append(row)
    return rows


def _compare(selected, options: ReportOptions) -> list[dict]:
    dimension = options.compare_by
    if dimension not in ("browser", "requested_protocol"):
        raise ReportError(f"cannot compare by {dimension!r}")
    metric = options.metric if options.metric != "count" else "plt"
    if metric not in ("count",) + TIMING_METRICS:
        raise ReportError(f"unknown metric {metric!r}")

    values: dict[str, list[float]] = {}
    for record in selected:
        value = _metric_value(record, metric)
        if value is not None:
            values.setdefault(_record_group(record, dimension), []).append(value)

    rows = []
    means = {}
    for group in sorted(values):
        series = values[group]
        mean = sum(series) / len(series)
        means[group] = mean
        rows.append(
            {
                "type": "group",
                "group": group,
                "metric": metric,
                "mean": mean,
                "median": statistics.median(series),
                "p90": _percentile(series, 90.0),
                "n": len(series),
            }
        )
    names = sorted(means)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            rows.append(
                {
                    "type": "delta",
                    "metric": metric,
                    "from": a,
                    "to": b,
                    "delta": means[b] - means[a],
                }
            )
    return rows


def _merge_counts(into: dict, source: dict) -> None:
    for key, count in source.items():
        into[key] = into.get(key, 0) + count


def _percentile(series, pct: float) -> float:
    ordered = sorted(series)
    if len(ordered) == 1:
        return ordered[0]
    rank = (len(ordered) - 1) * pct / 100.0
    lower = int(rank)
    upper = min(lower + 1, len(ordered) - 1)
    weight = rank - lower
    return ordered[lower] * (1 - weight) + ordered[upper] * weight


# -- rendering --------------------------------------------------------------------


def render(report: Report, fmt: str) -> bytes:
    """Serialize a report; geojson applies to geo_panel only."""
    if fmt == "json":
        return _render_json(report)
    if fmt == "csv":
        return _render_csv(report)
    if fmt == "geojson":
        if report.kind != "geo_panel":
            raise FormatMismatch(f"geojson cannot render a {report.kind} report")
        return _render_geojson(report)
    if fmt == "html":
        return _render_html(report)
    raise FormatMismatch(f"unknown format {fmt!r}")


def report_payload(report: Report) -> dict:
    return {
        "kind": report.kind,
        "filters": report.filters,
        "options": report.options,
        "generated_at": format_timestamp(report.generated_at),
        "empty": report.empty,
        "rows": report.rows,
    }


def _render_json(report: Report) -> bytes:
    return (json.dumps(report_payload(report), sort_keys=True, indent=2) + "\n").encode("utf-8")


def _render_csv(report: Report) -> bytes:
    columns: list[str] = []
    for row in report.rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(columns)
    for row in report.rows:
        writer.writerow(
            [
                json.dumps(row[key], sort_keys=True)
                if isinstance(row.get(key), (dict, list))
                else row.get(key, "")
                for key in columns
            ]
        )
    return buffer.getvalue().encode("utf-8")


@lru_cache(maxsize=1)
def _country_centroids() -> dict[str, tuple[float, float]]:
    text = resources.files("webprobe.data").joinpath("country_centroids.csv").read_text("utf-8")
    table = {}
    for row in csv.DictReader(text.splitlines()):
        table[row["country"].upper()] = (float(row["lat"]), float(row["lon"]))
    return table


def _group_coordinates(row: dict) -> tuple[float, float]:
    if row.get("country"):
        lat, lon = _country_centroids().get(row["country"], (0.0, 0.0))
        return lat, lon
    if row.get("continent"):
        return _CONTINENT_CENTROIDS.get(row["continent"], (0.0, 0.0))
    return 0.0, 0.0


def _render_geojson(report: Report) -> bytes:
    features = []
    for row in report.rows:
        lat, lon = _group_coordinates(row)
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [lon, lat]},
                "properties": {
                    "group": row["group"],
                    "weight": row["weight"],
                    "country": row.get("country"),
                    "city": row.get("city"),
                    "continent": row.get("continent"),
                    "providers": row.get("providers", {}),
                    "protocols": row.get("protocols", {}),
                },
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")


_HTML_STYLE = (
    "body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
    "td,th{border:1px solid #999;padding:4px 8px}th{background:#eee}"
    "caption{text-align:left;font-weight:bold;padding:4px 0}"
)


def _render_html(report: Report) -> bytes:
    payload = report_payload(report)
    columns: list[str] = []
    for row in report.rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    cells = []
    for row in report.rows:
        rendered = []
        for key in columns:
            value = row.get(key, "")
            if isinstance(value, (dict, list)):
                value = json.dumps(value, sort_keys=True)
            rendered.append(f"<td>{html.escape(str(value))}</td>")
        cells.append("<tr>" + "".join(rendered) + "</tr>")
    head = "".join(f"<th>{html.escape(key)}</th>" for key in columns)
    filters = html.escape(json.dumps(payload["filters"], sort_keys=True))
    page = (
        "<!DOCTYPE html><html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(report.kind)}</title>"
        f"<style>{_HTML_STYLE}</style></head><body>"
        f"<h1>{html.escape(report.kind)}</h1>"
        f"<p>filters: <code>{filters}</code>, generated {payload['generated_at']}"
        f"{' (empty selection)' if report.empty else ''}</p>"
        f"<table><thead><tr>{head}</tr></thead><tbody>{''.join(cells)}</tbody></table>"
        "<script type=\"application/json\" id=\"report-payload\">"
        + json.dumps(payload, sort_keys=True)
        + "</script></body></html>"
    )
    return page.encode("utf-8")

"""Loading-time metrics and per-resource statistics from a parsed session.

Four timings are computed per pageview: first paint (FP), page load time
(PLT), time for full visual rendering (TFVR) and processing time (PLT minus
the time the network was busy). TFVR here is a network-log approximation
("TFVR-netlog"): the completion time of a critical resource set (main
document, stylesheets, pre-FP scripts and images, fonts), since a HAR
carries no layout information. FP falls back to a render-blocking estimate
when the driver supplies no paint events; ``fp_source`` records which path
produced the value so reports can segregate estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .har import HarEntry, HarSession
from .domains import registrable_domain

PAINT_EVENT_NAMES = ("first-paint", "first-contentful-paint")

MIME_CLASSES = ("document", "script", "stylesheet", "image", "font", "media", "other")


class EmptySession(ValueError):
    """Session has no entries and no onLoad: timings are undefined."""


class FpSource(Enum):
    DRIVER_EVENT = "driver_event"
    FALLBACK_ESTIMATE = "fallback_estimate"
    ABSENT = "absent"


@dataclass
class Timings:
    first_paint_ms: float | None
    page_load_time_ms: float
    tfvr_ms: float | None
    processing_time_ms: float
    network_busy_ms: float
    fp_source: FpSource


@dataclass
class ResourceStats:
    resource_count: int
    domain_count: int
    total_body_bytes: int
    total_transfer_bytes: int
    per_mime_class: dict[str, tuple[int, int]]
    mean_transfer_rate_bytes_per_s: float
    https_fraction: float
    aborted_count: int


def mime_class(mime_type: str) -> str:
    """Coarse resource class from a MIME type."""
    mt = (mime_type or "").split(";", 1)[0].strip().lower()
    if not mt:
        return "other"
    kind, _, subtype = mt.partition("/")
    if mt.startswith("text/html"):
        return "document"
    if subtype == "javascript" or mt in ("text/js", "application/js"):
        return "script"
    if mt == "text/css":
        return "stylesheet"
    if kind == "image":
        return "image"
    if kind == "font" or subtype.startswith("font-"):
        return "font"
    if kind in ("audio", "video"):
        return "media"
    return "other"


def network_busy_time(intervals, horizon_ms: float) -> float:
    """Total length of the union of [start, min(start+duration, horizon)].

    ``intervals`` are (start_offset_ms, total_time_ms) pairs; the result is
    the time during which at least one request was in flight before the
    horizon.
    """
    if horizon_ms < 0:
        raise ValueError("horizon_ms must be >= 0")
    spans = []
    for start, duration in intervals:
        lo = max(0.0, float(start))
        hi = min(lo + max(0.0, float(duration)), float(horizon_ms))
        if hi > lo:
            spans.append((lo, hi))
    spans.sort()
    busy = 0.0
    current_lo = current_hi = None
    for lo, hi in spans:
        if current_hi is None:
            current_lo, current_hi = lo, hi
        elif lo <= current_hi:
            current_hi = max(current_hi, hi)
        else:
            busy += current_hi - current_lo
            current_lo, current_hi = lo, hi
    if current_hi is not None:
        busy += current_hi - current_lo
    return busy


def compute_timings(
    session: HarSession,
    paint_events=None,
    viewport: tuple[int, int] = (1920, 1080),
) -> Timings:
    """Compute the per-pageview timing vector.

    ``paint_events`` are (name, offset_ms) pairs from the driver; recognized
    names are in :data:`PAINT_EVENT_NAMES`. ``viewport`` is validated for
    interface parity but the netlog approximation does not consume layout.

    Raises :class:`EmptySession` when there is neither an entry nor an
    onLoad timing to anchor PLT.
    """
    if viewport[0] <= 0 or viewport[1] <= 0:
        raise ValueError("viewport dimensions must be positive")

    entries = session.entries
    if not entries and session.on_load_ms is None:
        raise EmptySession("no entries and no onLoad timing")

    if session.on_load_ms is not None:
        plt = float(session.on_load_ms)
    else:
        plt = max(e.completion_ms() for e in entries)

    busy = network_busy_time(
        ((e.start_offset_ms, e.total_time_ms) for e in entries), horizon_ms=plt
    )
    processing = plt - busy

    loaded = [e for e in entries if e.status > 0]

    fp = None
    fp_source = FpSource.ABSENT
    recognized = [
        float(offset)
        for name, offset in (paint_events or [])
        if str(name).lower() in PAINT_EVENT_NAMES
    ]
    if recognized:
        fp = max(0.0, min(recognized))
        fp_source = FpSource.DRIVER_EVENT
    elif loaded:
        fp = _fallback_first_paint(loaded)
        fp_source = FpSource.FALLBACK_ESTIMATE

    tfvr = None
    if fp is not None:
        fp = min(fp, plt)
        tfvr = min(max(_critical_set_completion(loaded, fp), fp), plt)

    return Timings(
        first_paint_ms=fp,
        page_load_time_ms=plt,
        tfvr_ms=tfvr,
        processing_time_ms=processing,
        network_busy_ms=busy,
        fp_source=fp_source,
    )


def _main_document(loaded: list[HarEntry]) -> HarEntry:
    for entry in loaded:
        if mime_class(entry.mime_type) == "document":
            return entry
    return loaded[0]


def _fallback_first_paint(loaded: list[HarEntry]) -> float:
    # render-blocking estimate: the main document plus every stylesheet
    # that was already requested when the document finished
    main = _main_document(loaded)
    done = main.completion_ms()
    blocking = [main]
    blocking += [
        e
        for e in loaded
        if mime_class(e.mime_type) == "stylesheet" and e.start_offset_ms < done
    ]
    return max(e.completion_ms() for e in blocking)


def _critical_set_completion(loaded: list[HarEntry], fp: float) -> float:
    if not loaded:
        return fp
    main = _main_document(loaded)
    critical = [main]
    for entry in loaded:
        cls = mime_class(entry.mime_type)
        if cls in ("stylesheet", "font"):
            critical.append(entry)
        elif cls in ("script", "image") and entry.start_offset_ms < fp:
            critical.append(entry)
    return max(e.completion_ms() for e in critical)


def resource_stats(session: HarSession) -> ResourceStats:
    """Counts, sizes and rates over all delivered (status > 0) entries."""
    loaded = [e for e in session.entries if e.status > 0]
    aborted = len(session.entries) - len(loaded)

    per_class = {cls: [0, 0] for cls in MIME_CLASSES}
    domains = set()
    body_total = 0
    transfer_total = 0
    https = 0
    rates = []
    for entry in loaded:
        cls = mime_class(entry.mime_type)
        body = max(entry.body_size_bytes, 0)
        per_class[cls][0] += 1
        per_class[cls][1] += body
        body_total += body
        if entry.transfer_size_bytes > 0:
            transfer_total += entry.transfer_size_bytes
        domains.add(registrable_domain(entry.hostname()))
        if entry.is_https():
            https += 1
        receive = entry.phase_times.get("receive", -1.0)
        if receive > 0 and entry.transfer_size_bytes >= 0:
            rates.append(entry.transfer_size_bytes / (receive / 1000.0))

    count = len(loaded)
    return ResourceStats(
        resource_count=count,
        domain_count=len(domains),
        total_body_bytes=body_total,
        total_transfer_bytes=transfer_total,
        per_mime_class={cls: (n, b) for cls, (n, b) in per_class.items()},
        mean_transfer_rate_bytes_per_s=sum(rates) / len(rates) if rates else 0.0,
        https_fraction=https / count if count else 0.0,
        aborted_count=aborted,
    )

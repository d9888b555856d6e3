"""Browser-based web measurement pipeline.

Parses HAR network logs into per-pageview measurement records (loading
times, protocol distribution, CDN attribution, server geography), persists
them in an append-only store and aggregates them into report panels.
"""

from .domains import registrable_domain
from .har import HarEntry, HarSession, parse_har
from .metrics import Timings, ResourceStats, compute_timings, network_busy_time, resource_stats
from .protocol import (
    Protocol,
    ProtocolPolicy,
    RequestedProtocol,
    normalize_protocol,
    policy_settings,
    protocol_distribution,
    quic_enabled_domains,
)
from .delivery import (
    DeliveryAttribution,
    Enrichment,
    attribute_delivery,
    attribute_session,
    classify_origin,
    delivering_hop,
    geolocate,
    identify_provider,
    parse_cache_chain,
)
from .record import (
    MeasurementRecord,
    RecordStore,
    SessionStatus,
    build_record,
)
from .probe import (
    BrowserDriver,
    ReplayDriver,
    SessionConfig,
    run_campaign,
    run_session,
)
from .report import Report, ReportOptions, aggregate, render

__version__ = "0.1.0"

"""Command-line entry point for the measurement pipeline.

Subcommands: ``measure`` runs a campaign with a live or replay driver,
``ingest`` analyzes pre-captured HAR files into the store, ``report``
aggregates stored records into a panel, ``query`` dumps matching records.
Machine-readable output goes to stdout (or --out); diagnostics go to
stderr. Exit codes: 0 success, 1 usage error, 2 store or driver failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

from .delivery import Enrichment
from .har import MalformedDocument, UnsupportedVersion, parse_har
from .metrics import compute_timings
from .probe import (
    ConfigError,
    ReplayDriver,
    SessionConfig,
    load_campaign_config,
    run_campaign,
)
from .record import (
    FilterError,
    RecordStore,
    SessionStatus,
    StoreCorrupt,
    StoreFailure,
    build_record,
    export_records_csv,
    record_to_dict,
)
from .report import FormatMismatch, ReportError, ReportOptions, aggregate, render
from . import delivery

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="webprobe", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    measure = sub.add_parser("measure", help="run a measurement campaign")
    measure.add_argument("--config", required=True)
    measure.add_argument(
        "--driver",
        default="live",
        help="'live' or 'replay:<dir>' (default: live)",
    )
    measure.add_argument("--store", required=True)

    ingest = sub.add_parser("ingest", help="analyze pre-captured HAR files")
    ingest.add_argument("--har", required=True, help="HAR file or directory of *.har files")
    ingest.add_argument("--config", required=True)
    ingest.add_argument("--store", required=True)
    ingest.add_argument("--fixtures", help="enrichment fixture directory")

    report = sub.add_parser("report", help="aggregate records into a panel")
    report.add_argument("--store", required=True)
    report.add_argument(
        "--kind",
        required=True,
        choices=["protocol_panel", "geo_panel", "cdn_table", "timeseries", "compare"],
    )
    report.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE")
    report.add_argument("--format", default="json", choices=["json", "csv", "geojson", "html"])
    report.add_argument("--out", help="output file (default: stdout)")
    report.add_argument("--group-by", dest="group_by")
    report.add_argument("--metric", default="count")
    report.add_argument("--bucket-days", dest="bucket_days", type=int, default=1)
    report.add_argument("--compare-by", dest="compare_by", default="browser")

    query = sub.add_parser("query", help="dump matching records")
    query.add_argument("--store", required=True)
    query.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE")
    query.add_argument("--format", default="json", choices=["json", "csv"])

    return parser


def _parse_filters(pairs) -> dict:
    filters = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise _UsageError(f"filter must be KEY=VALUE, got {pair!r}")
        filters[key] = value
    return filters


def _make_driver_factory(spec: str):
    if spec == "live":
        from .cdp import LiveBrowserDriver

        return LiveBrowserDriver
    if spec.startswith("replay:"):
        directory = Path(spec.split(":", 1)[1])
        if not directory.is_dir():
            raise _UsageError(f"replay directory {directory} does not exist")
        return lambda: ReplayDriver(directory)
    raise _UsageError(f"unknown driver {spec!r}")


def _enrichment_for(fixtures) -> Enrichment:
    if fixtures:
        return Enrichment.from_fixture_dir(fixtures)
    return Enrichment.empty()


def _cmd_measure(args) -> int:
    config, urls, fixtures = load_campaign_config(args.config)
    if not urls:
        raise _UsageError("config lists no websites")
    factory = _make_driver_factory(args.driver)
    summary = run_campaign(
        config, urls, factory, RecordStore(args.store), _enrichment_for(fixtures)
    )
    json.dump(
        {
            "sites": len(summary.per_site),
            "status_counts": summary.status_counts(),
        },
        sys.stdout,
        indent=2,
    )
    sys.stdout.write("\n")
    return EXIT_OK


def _ingest_one(data: bytes, config: SessionConfig, enrichment: Enrichment, store: RecordStore) -> None:
    session = parse_har(data)
    timings = None
    if session.entries or session.on_load_ms is not None:
        timings = compute_timings(session, viewport=config.window)
    attributions = delivery.attribute_session(session, enrichment)
    record = build_record(session, config, attributions, timings, SessionStatus.COMPLETE)
    store.append(record)


def _cmd_ingest(args) -> int:
    config, _, config_fixtures = load_campaign_config(args.config)
    enrichment = _enrichment_for(args.fixtures or config_fixtures)
    source = Path(args.har)
    if source.is_dir():
        files = sorted(source.glob("*.har"))
        if not files:
            raise _UsageError(f"no *.har files in {source}")
    elif source.is_file():
        files = [source]
    else:
        raise _UsageError(f"{source} is neither a file nor a directory")

    store = RecordStore(args.store)
    for path in files:
        try:
            _ingest_one(path.read_bytes(), config, enrichment, store)
        except (OSError, MalformedDocument, UnsupportedVersion) as exc:
            logger.error("cannot ingest %s: %s", path, exc)
            return EXIT_FAILURE
    json.dump({"ingested": len(files)}, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _write_output(data: bytes, out: str | None) -> None:
    if out:
        Path(out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


def _cmd_report(args) -> int:
    filters = _parse_filters(args.filter)
    store = RecordStore(args.store)
    records = store.query(filters)
    options = ReportOptions(
        group_by=args.group_by,
        metric=args.metric,
        bucket_days=args.bucket_days,
        compare_by=args.compare_by,
    )
    report = aggregate(records, args.kind, filters, options)
    _write_output(render(report, args.format), args.out)
    return EXIT_OK


def _cmd_query(args) -> int:
    filters = _parse_filters(args.filter)
    records = RecordStore(args.store).query(filters)
    if args.format == "json":
        payload = [record_to_dict(r) for r in records]
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    else:
        buffer = io.StringIO()
        export_records_csv(records, buffer)
        sys.stdout.write(buffer.getvalue())
    return EXIT_OK


_COMMANDS = {
    "measure": _cmd_measure,
    "ingest": _cmd_ingest,
    "report": _cmd_report,
    "query": _cmd_query,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FilterError, ReportError, FormatMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StoreCorrupt, StoreFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

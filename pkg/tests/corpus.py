"""Shared fixture builders: synthetic HAR documents and enrichment tables."""

from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone

BASE_TIME = datetime(2019, 6, 1, 12, 0, 0, tzinfo=timezone.utc)

FIG2_IP = "151.101.120.175"
FIG2_HEADERS = [
    {"name": "X-Cache", "value": "MISS, HIT"},
    {"name": "X-App-Cache", "value": "HIT"},
    {"name": "X-Served-By", "value": "cache-iad2132-IAD, cache-cdg20761-CDG"},
]

WHOIS_TABLE = """\
# ip_prefix<TAB>assignee
151.101.0.0/16\tFastly, Inc.
23.32.0.0/11\tAkamai Technologies, Inc.
172.217.0.0/16\tGoogle LLC
52.84.0.0/15\tAmazon.com, Inc.
185.59.220.0/22\tDatacamp Limited (CDN77)
167.114.0.0/17\tproinity LLC (KeyCDN)
212.73.200.0/21\tLevel 3 Parent, LLC
93.184.216.0/24\tExample Hosting SARL
101.200.0.0/16\tHangzhou Alibaba Advertising Co.
"""

GEO_TABLE = """\
# ip_prefix<TAB>city<TAB>country<TAB>continent
151.101.120.0/24\t\tUS\t
151.101.0.0/16\t\tUS\tNA
23.32.0.0/11\t\tZA\tAF
172.217.0.0/16\tKansas\tUS\tNA
52.84.0.0/15\t\tUS\tNA
185.59.220.0/22\t\tCZ\tEU
167.114.0.0/17\t\tCH\tEU
212.73.200.0/21\t\tFR\tEU
93.184.216.0/24\t\tUS\tNA
101.200.0.0/16\t\tCN\tAS
"""

NS_TABLE = """\
# domain<TAB>ns1,ns2
lefigaro.fr\tdns1.d4p.net,dns2.d4p.net
akamaized.net\ta1-67.akam.net,a12-67.akam.net
fastly.net\tns1.fastly.net
youtube.com\tns1.google.com,ns2.google.com
google.com\tns1.google.com
csdn.net\tns3.dnsv5.com,ns4.dnsv5.com
example-news.site\tns1.example-news.site
"""


def write_fixture_dir(path):
    """Materialize the enrichment fixture tables into a directory."""
    path.mkdir(parents=True, exist_ok=True)
    (path / "whois.tsv").write_text(WHOIS_TABLE)
    (path / "geo.tsv").write_text(GEO_TABLE)
    (path / "ns.tsv").write_text(NS_TABLE)
    return path


def iso(stamp: datetime) -> str:
    return stamp.isoformat(timespec="milliseconds").replace("+00:00", "Z")


def make_entry(
    url="https://www.example-news.site/index.html",
    offset_ms=0.0,
    time_ms=100.0,
    status=200,
    http_version="h2",
    mime="text/html",
    headers=(),
    server_ip=None,
    body_size=1000,
    transfer_size=1100,
    timings=None,
    method="GET",
    base_time=BASE_TIME,
    pageref="page_1",
):
    """One synthetic HAR entry dict."""
    if timings is None:
        timings = {
            "blocked": 1,
            "dns": 2,
            "connect": 3,
            "ssl": 4,
            "send": 1,
            "wait": max(0.0, time_ms - 31),
            "receive": 20,
        }
    entry = {
        "pageref": pageref,
        "startedDateTime": iso(base_time + timedelta(milliseconds=offset_ms)),
        "time": time_ms,
        "request": {"method": method, "url": url, "httpVersion": http_version, "headers": []},
        "response": {
            "status": status,
            "httpVersion": http_version,
            "headers": list(headers),
            "content": {"size": body_size, "mimeType": mime},
            "bodySize": body_size,
            "_transferSize": transfer_size,
        },
        "timings": dict(timings),
    }
    if server_ip is not None:
        entry["serverIPAddress"] = server_ip
    return entry


def har_document(
    entries,
    page_url="https://www.example-news.site/",
    on_load=None,
    on_content_load=None,
    browser=("Chrome", "77.0"),
    base_time=BASE_TIME,
    version="1.2",
):
    timings = {}
    timings["onContentLoad"] = on_content_load if on_content_load is not None else -1
    timings["onLoad"] = on_load if on_load is not None else -1
    return {
        "log": {
            "version": version,
            "creator": {"name": "test-corpus", "version": "1"},
            "browser": {"name": browser[0], "version": browser[1]},
            "pages": [
                {
                    "id": "page_1",
                    "startedDateTime": iso(base_time),
                    "title": page_url,
                    "pageTimings": timings,
                }
            ],
            "entries": list(entries),
        }
    }


def har_bytes(document) -> bytes:
    return json.dumps(document).encode("utf-8")


def fig2_entry(**overrides):
    """Entry carrying the cache-chain headers and server address under test."""
    defaults = dict(
        url="https://static.example-news.site/logo.png",
        offset_ms=40.0,
        time_ms=60.0,
        status=200,
        http_version="h2",
        mime="image/png",
        headers=[dict(h) for h in FIG2_HEADERS],
        server_ip=FIG2_IP,
        body_size=2048,
        transfer_size=2100,
    )
    defaults.update(overrides)
    return make_entry(**defaults)


def fig2_har_bytes() -> bytes:
    doc = har_document(
        [
            make_entry(offset_ms=0.0, time_ms=80.0, mime="text/html"),
            fig2_entry(),
        ],
        on_load=150.0,
    )
    return har_bytes(doc)


# -- larger corpora ----------------------------------------------------------------


def lefigaro_har_bytes(base_time=BASE_TIME) -> bytes:
    """151 entries whose WHOIS prefixes reproduce a known provider table."""
    plan = [
        ("23.32.10.", 60, "https://static.akamaized.net/obj{i}.js", "application/javascript"),
        ("93.184.216.", 55, "https://www.lefigaro.fr/asset{i}.css", "text/css"),
        ("151.101.10.", 25, "https://cdn.fastly.net/img{i}.png", "image/png"),
        ("172.217.20.", 7, "https://fonts.google.com/font{i}.woff", "font/woff2"),
        ("52.84.3.", 2, "https://media.amazon.com/vid{i}.mp4", "video/mp4"),
        ("185.59.220.", 1, "https://assets.cdn77.org/a{i}.js", "application/javascript"),
        ("167.114.1.", 1, "https://push.keycdn.com/k{i}.js", "application/javascript"),
    ]
    entries = [
        make_entry(
            url="https://www.lefigaro.fr/",
            offset_ms=0.0,
            time_ms=90.0,
            mime="text/html",
            server_ip="93.184.216.34",
            base_time=base_time,
        )
    ]
    offset = 10.0
    for prefix, count, url_template, mime in plan:
        for i in range(count):
            if len(entries) >= 151:
                break
            entries.append(
                make_entry(
                    url=url_template.format(i=i),
                    offset_ms=offset,
                    time_ms=50.0,
                    mime=mime,
                    server_ip=f"{prefix}{(i % 200) + 1}",
                    base_time=base_time,
                )
            )
            offset += 5.0
    assert len(entries) == 151
    doc = har_document(
        entries,
        page_url="https://www.lefigaro.fr/",
        on_load=offset + 100.0,
        base_time=base_time,
    )
    return har_bytes(doc)


def csdn_har_bytes(base_time=BASE_TIME) -> bytes:
    """133 entries: 50 from Asia, 2 from North America, 81 from Europe;
    84 delivered over h2 and 49 over http/1.1."""
    specs = []
    specs += [("101.200.7.", "https://www.csdn.net/a{i}.js") for _ in range(50)]
    specs += [("93.184.216.", "https://us.example-cdn.com/b{i}.js") for _ in range(2)]
    specs += [("212.73.200.", "https://eu.level3-edge.net/c{i}.js") for _ in range(81)]

    entries = []
    for i, (prefix, url_template) in enumerate(specs):
        version = "h2" if i < 84 else "http/1.1"
        entries.append(
            make_entry(
                url=url_template.format(i=i),
                offset_ms=5.0 * i,
                time_ms=40.0,
                http_version=version,
                mime="application/javascript",
                server_ip=f"{prefix}{(i % 200) + 1}",
                base_time=base_time,
            )
        )
    assert len(entries) == 133
    doc = har_document(
        entries,
        page_url="https://www.csdn.net/",
        on_load=5.0 * 133 + 60.0,
        browser=("Chrome", "70.0"),
        base_time=base_time,
    )
    return har_bytes(doc)


def youtube_stats_har_bytes() -> bytes:
    """56 resources over 8 registrable domains, all HTTPS."""
    domains = [
        "www.youtube.com",
        "r1.googlevideo.com",
        "i.ytimg.com",
        "yt3.ggpht.com",
        "www.google.com",
        "www.gstatic.com",
        "fonts.googleapis.com",
        "ad.doubleclick.net",
    ]
    entries = []
    for i in range(56):
        host = domains[i % len(domains)]
        entries.append(
            make_entry(
                url=f"https://{host}/res{i}.js",
                offset_ms=4.0 * i,
                time_ms=30.0,
                http_version="h2" if i % 3 else "h3-29",
                mime="application/javascript",
            )
        )
    doc = har_document(entries, page_url="https://www.youtube.com/", on_load=300.0)
    return har_bytes(doc)


# -- randomized sessions -------------------------------------------------------------


MIME_POOL = (
    "text/html",
    "text/css",
    "application/javascript",
    "image/png",
    "image/jpeg",
    "font/woff2",
    "video/mp4",
    "application/json",
    "text/plain",
)

VERSION_POOL = (
    "http/1.1",
    "http/1.0",
    "h2",
    "http/2.0",
    "h3",
    "h3-29",
    "quic/46",
    "spdy/3.1",
    "",
    "h2c",
)

HOST_POOL = (
    "www.siteunder.test.com",
    "cdn.assets-pool.net",
    "img.assets-pool.net",
    "api.othersite.org",
    "static.thirdparty.io",
    "fonts.fonthost.dev",
)


def random_entry(rng, index, base_time=BASE_TIME):
    # endpoints on a 0.1 ms lattice so grid-scan oracles are exact
    offset = rng.randrange(0, 20_000) / 10.0
    duration = rng.randrange(0, 10_000) / 10.0
    return make_entry(
        url=f"https://{rng.choice(HOST_POOL)}/r{index}",
        offset_ms=offset,
        time_ms=duration,
        status=rng.choice((200, 200, 200, 304, 404, 0)),
        http_version=rng.choice(VERSION_POOL),
        mime=rng.choice(MIME_POOL),
        body_size=rng.randrange(-1, 50_000),
        transfer_size=rng.randrange(-1, 50_000),
        timings={
            "blocked": rng.choice((-1, 1.0)),
            "dns": -1,
            "connect": -1,
            "ssl": -1,
            "send": 1.0,
            "wait": 1.0,
            "receive": rng.choice((-1, rng.randrange(1, 500) / 10.0)),
        },
        base_time=base_time,
    )


def random_session_doc(rng, max_entries=100, base_time=BASE_TIME):
    n = rng.randrange(0, max_entries + 1)
    entries = [random_entry(rng, i, base_time) for i in range(n)]
    on_load = rng.choice((None, rng.randrange(100, 40_000) / 10.0))
    return har_document(entries, on_load=on_load, base_time=base_time)


def consistent_random_entry(rng, index, base_time=BASE_TIME):
    """Like random_entry but with phase sums that never exceed the wall time."""
    entry = random_entry(rng, index, base_time)
    duration = entry["time"]
    receive = -1 if duration < 1 else round(rng.uniform(0, duration) * 0.5, 1)
    entry["timings"] = {
        "blocked": -1,
        "dns": -1,
        "connect": -1,
        "ssl": -1,
        "send": -1,
        "wait": -1,
        "receive": receive,
    }
    return entry


def har_from_session(session) -> dict:
    """Re-serialize a parsed session back to HAR (round-trip tests only)."""
    from datetime import timedelta

    entries = []
    for e in session.entries:
        entry = {
            "pageref": "page_1",
            "startedDateTime": iso(session.started_at + timedelta(milliseconds=e.start_offset_ms)),
            "time": e.total_time_ms,
            "request": {"method": e.method, "url": e.url, "headers": []},
            "response": {
                "status": e.status,
                "httpVersion": e.http_version_raw,
                "headers": [{"name": n, "value": v} for n, v in e.headers],
                "content": {"size": e.body_size_bytes, "mimeType": e.mime_type},
                "bodySize": e.body_size_bytes,
                "_transferSize": e.transfer_size_bytes,
            },
            "timings": dict(e.phase_times),
        }
        if e.server_ip is not None:
            entry["serverIPAddress"] = e.server_ip
        entries.append(entry)
    return {
        "log": {
            "version": "1.2",
            "browser": {"name": session.browser_name, "version": session.browser_version},
            "pages": [
                {
                    "id": "page_1",
                    "startedDateTime": iso(session.started_at),
                    "title": session.page_url,
                    "pageTimings": {
                        "onContentLoad": session.on_content_load_ms
                        if session.on_content_load_ms is not None
                        else -1,
                        "onLoad": session.on_load_ms if session.on_load_ms is not None else -1,
                    },
                }
            ],
            "entries": entries,
        }
    }

"""Per-resource delivery attribution: cache chains, CDN provider, location.

Response headers such as X-Cache carry an ordered chain of cache verdicts
(e.g. "MISS, HIT"): the request traversed two caches and the second one
held the object, so the second server delivered the bytes. Pairing that
with a WHOIS lookup of the exposed server address names the CDN provider,
and a GeoIP lookup places the delivering server on the map. WHOIS, GeoIP
and NS resolution are pluggable; the bundled implementations read offline
fixture tables so attribution stays deterministic.

Fixture table formats (tab-separated, ``#`` comments):
  whois:      ip_prefix<TAB>assignee
  geo:        ip_prefix<TAB>city<TAB>country<TAB>continent
  ns:         domain<TAB>ns1,ns2,...
  providers:  substring<TAB>canonical_name
"""

from __future__ import annotations

import csv
import ipaddress
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .domains import registrable_domain
from .har import HarEntry, HeaderMap

logger = logging.getLogger(__name__)

#: verdict headers scanned in order; X-Served-By only contributes labels
DEFAULT_HEADER_REGISTRY = (
    "X-Cache",
    "X-App-Cache",
    "X-Served-By",
    "X-Cache-Status",
    "CF-Cache-Status",
    "Via",
)

CONTINENTS = ("AF", "AN", "AS", "EU", "NA", "OC", "SA")

NO_CDN = "No CDN"
UNKNOWN_PROVIDER = "Unknown"
UNKNOWN_CDN = "Unknown-CDN"

WHOIS_CACHE_TTL_S = 7 * 24 * 3600.0


class Verdict(Enum):
    HIT = "HIT"
    MISS = "MISS"
    OTHER = "OTHER"


class OriginClass(Enum):
    SAME_ORIGIN = "SameOrigin"
    NON_ORIGIN = "NonOrigin"
    UNKNOWN = "Unknown"


class WhoisUnavailable(RuntimeError):
    """WHOIS backend could not answer; attribution degrades to Unknown."""


class NsLookupError(RuntimeError):
    """Authoritative NS resolution failed; origin class degrades to Unknown."""


@dataclass
class CacheHop:
    verdict: Verdict
    server_label: str | None
    source_header: str


@dataclass
class CacheChain:
    hops: list[CacheHop] = field(default_factory=list)

    def has_hit(self) -> bool:
        return any(h.verdict is Verdict.HIT for h in self.hops)


@dataclass
class DeliveryAttribution:
    provider: str
    delivering_server_label: str | None
    served_from_cache: bool
    city: str | None
    country: str | None
    continent: str | None
    origin_class: OriginClass


def _classify_token(token: str) -> Verdict:
    upper = token.upper()
    if upper.startswith("HIT"):
        return Verdict.HIT
    if upper.startswith("MISS"):
        return Verdict.MISS
    return Verdict.OTHER


def parse_cache_chain(headers: HeaderMap, header_registry=DEFAULT_HEADER_REGISTRY) -> CacheChain:
    """Extract the ordered cache-verdict chain from response headers.

    Headers are scanned in registry order and their comma-separated tokens
    concatenated; X-Served-By supplies server labels, aligned by index to
    the X-Cache hops.
    """
    labels = []
    for value in headers.get_all("X-Served-By"):
        labels.extend(part.strip() for part in value.split(",") if part.strip())

    hops: list[CacheHop] = []
    for name in header_registry:
        if name.lower() == "x-served-by":
            continue
        align = name.lower() == "x-cache"
        index = 0
        for value in headers.get_all(name):
            for token in value.split(","):
                token = token.strip()
                if not token:
                    continue
                label = labels[index] if align and index < len(labels) else None
                hops.append(CacheHop(_classify_token(token), label, name))
                index += 1
    return CacheChain(hops)


def delivering_hop(chain: CacheChain) -> tuple[bool, str | None]:
    """Which server actually delivered the bytes.

    The last HIT in the chain is the cache that held the object. Its label
    is taken from the last labeled HIT (verdict headers without a label
    source, like X-App-Cache, corroborate the HIT but cannot name the
    server). Without any HIT the object came from the last hop, uncached.
    """
    hits = [h for h in chain.hops if h.verdict is Verdict.HIT]
    if hits:
        labeled = [h for h in hits if h.server_label]
        winner = labeled[-1] if labeled else hits[-1]
        return True, winner.server_label
    label = None
    for hop in chain.hops:
        if hop.server_label:
            label = hop.server_label
    return False, label


# -- provider identification -------------------------------------------------


class ProviderMap:
    """Ordered (substring, canonical-name) pairs matched against assignees."""

    def __init__(self, pairs):
        self._pairs = [(sub.lower(), name) for sub, name in pairs]

    @classmethod
    def from_file(cls, path) -> "ProviderMap":
        return cls(_read_tsv(path, 2))

    @classmethod
    def bundled(cls) -> "ProviderMap":
        return _bundled_provider_map()

    def match(self, assignee: str) -> str | None:
        lowered = assignee.lower()
        for sub, name in self._pairs:
            if sub in lowered:
                return name
        return None


@lru_cache(maxsize=1)
def _bundled_provider_map() -> ProviderMap:
    text = resources.files("webprobe.data").joinpath("providers.tsv").read_text("utf-8")
    return ProviderMap(_parse_tsv(text, 2))


class FixtureWhois:
    """WHOIS assignees from a prefix table; unknown prefixes return None."""

    def __init__(self, table):
        self._table = [(ipaddress.ip_network(prefix), assignee) for prefix, assignee in table]

    @classmethod
    def from_file(cls, path) -> "FixtureWhois":
        return cls(_read_tsv(path, 2))

    def lookup(self, ip: str) -> str | None:
        addr = ipaddress.ip_address(ip)
        best = None
        best_len = -1
        for network, assignee in self._table:
            if addr.version == network.version and addr in network and network.prefixlen > best_len:
                best, best_len = assignee, network.prefixlen
        return best


class CachingWhois:
    """Per-IP cache with a validity stamp in front of a WHOIS backend.

    Campaigns revisit the same addresses continuously and WHOIS endpoints
    rate-limit, so answers are reused for a week. Concurrent inserts for
    the same key are serialized.
    """

    def __init__(self, inner, ttl_s: float = WHOIS_CACHE_TTL_S, clock=time.monotonic):
        self._inner = inner
        self._ttl = ttl_s
        self._clock = clock
        self._cache: dict[str, tuple[float, str | None]] = {}
        self._lock = threading.Lock()

    def lookup(self, ip: str) -> str | None:
        now = self._clock()
        with self._lock:
            hit = self._cache.get(ip)
            if hit is not None and now - hit[0] < self._ttl:
                return hit[1]
        value = self._inner.lookup(ip)
        with self._lock:
            self._cache[ip] = (now, value)
        return value


def _routable(addr) -> bool:
    return not (
        addr.is_private
        or addr.is_loopback
        or addr.is_link_local
        or addr.is_multicast
        or addr.is_reserved
        or addr.is_unspecified
    )


def identify_provider(server_ip: str, whois, provider_map: ProviderMap) -> str:
    """Name the CDN provider behind an address via its WHOIS assignee.

    Non-routable addresses are never queried; an unreachable WHOIS backend
    yields "Unknown" rather than failing the attribution.
    """
    addr = ipaddress.ip_address(server_ip)
    if not _routable(addr):
        return NO_CDN
    try:
        assignee = whois.lookup(str(addr))
    except WhoisUnavailable as exc:
        logger.warning("whois unavailable for %s: %s", server_ip, exc)
        return UNKNOWN_PROVIDER
    if not assignee:
        return NO_CDN
    return provider_map.match(assignee) or NO_CDN


# -- geolocation ---------------------------------------------------------------


@dataclass
class GeoResult:
    city: str | None
    country: str | None
    continent: str | None


class FixtureGeo:
    """GeoIP lookups from a prefix table; unknown prefixes return None."""

    def __init__(self, table):
        self._table = []
        for row in table:
            prefix, city, country, continent = (row + ["", "", "", ""])[:4]
            self._table.append(
                (
                    ipaddress.ip_network(prefix),
                    GeoResult(city or None, country or None, continent or None),
                )
            )

    @classmethod
    def from_file(cls, path) -> "FixtureGeo":
        return cls(_read_tsv(path))

    def lookup(self, ip: str) -> GeoResult | None:
        addr = ipaddress.ip_address(ip)
        best = None
        best_len = -1
        for network, result in self._table:
            if addr.version == network.version and addr in network and network.prefixlen > best_len:
                best, best_len = result, network.prefixlen
        return best


@lru_cache(maxsize=1)
def country_continent_table() -> dict[str, str]:
    text = resources.files("webprobe.data").joinpath("country_continent.csv").read_text("utf-8")
    table = {}
    for row in csv.DictReader(text.splitlines()):
        table[row["country"].upper()] = row["continent"].upper()
    return table


def geolocate(server_ip: str, geo) -> tuple[str | None, str | None, str | None]:
    """(city, country, continent) for an address; unknowns stay absent.

    The continent is derived from the country when the provider does not
    supply one; a continent without a country is never emitted.
    """
    try:
        result = geo.lookup(server_ip)
    except Exception:
        logger.warning("geo lookup failed for %s", server_ip, exc_info=True)
        return None, None, None
    if result is None:
        return None, None, None
    country = result.country.upper() if result.country else None
    continent = result.continent.upper() if result.continent else None
    if continent not in CONTINENTS:
        continent = None
    if country and not continent:
        continent = country_continent_table().get(country)
    if not country:
        continent = None
    return result.city or None, country, continent


# -- origin classification ----------------------------------------------------


class FixtureNs:
    """Authoritative NS sets from a domain table; unknown domains fail."""

    def __init__(self, table):
        self._table = {}
        for domain, servers in table:
            names = {s.strip().lower() for s in servers.split(",") if s.strip()}
            self._table[domain.strip().lower()] = names

    @classmethod
    def from_file(cls, path) -> "FixtureNs":
        return cls(_read_tsv(path, 2))

    def ns_records(self, domain: str) -> set[str]:
        try:
            return set(self._table[domain.lower()])
        except KeyError:
            raise NsLookupError(f"no NS fixture for {domain!r}") from None


def classify_origin(resource_domain: str, homepage_domain: str, dns) -> OriginClass:
    """Compare authoritative name-server families of two registrable domains.

    Domains served by the same NS family as the homepage are SameOrigin;
    any resolution failure degrades to Unknown, never to a guess.
    """
    if resource_domain == homepage_domain:
        return OriginClass.SAME_ORIGIN
    try:
        ours = dns.ns_records(homepage_domain)
        theirs = dns.ns_records(resource_domain)
    except NsLookupError:
        return OriginClass.UNKNOWN
    except Exception:
        logger.warning(
            "NS resolution failed for %s / %s", resource_domain, homepage_domain, exc_info=True
        )
        return OriginClass.UNKNOWN
    ours_reg = {registrable_domain(h) for h in ours if h}
    theirs_reg = {registrable_domain(h) for h in theirs if h}
    if not ours_reg or not theirs_reg:
        return OriginClass.UNKNOWN
    return OriginClass.SAME_ORIGIN if ours_reg & theirs_reg else OriginClass.NON_ORIGIN


# -- composition ----------------------------------------------------------------


@dataclass
class Enrichment:
    """Bundle of providers needed to attribute one session's entries."""

    whois: object
    geo: object
    dns: object
    provider_map: ProviderMap
    header_registry: tuple = DEFAULT_HEADER_REGISTRY

    @classmethod
    def from_fixture_dir(cls, directory) -> "Enrichment":
        """Load whois.tsv / geo.tsv / ns.tsv / providers.tsv from a directory.

        Missing files degrade to empty fixtures (providers.tsv falls back to
        the bundled default map).
        """
        directory = Path(directory)

        def load(name, loader, empty):
            path = directory / name
            return loader(path) if path.exists() else empty

        providers_path = directory / "providers.tsv"
        provider_map = (
            ProviderMap.from_file(providers_path)
            if providers_path.exists()
            else ProviderMap.bundled()
        )
        return cls(
            whois=CachingWhois(load("whois.tsv", FixtureWhois.from_file, FixtureWhois([]))),
            geo=load("geo.tsv", FixtureGeo.from_file, FixtureGeo([])),
            dns=load("ns.tsv", FixtureNs.from_file, FixtureNs([])),
            provider_map=provider_map,
        )

    @classmethod
    def empty(cls) -> "Enrichment":
        return cls(
            whois=CachingWhois(FixtureWhois([])),
            geo=FixtureGeo([]),
            dns=FixtureNs([]),
            provider_map=ProviderMap.bundled(),
        )


def attribute_delivery(
    entry: HarEntry, homepage_domain: str, enrichment: Enrichment
) -> DeliveryAttribution:
    """Full attribution of one entry: cache chain, provider, location, origin."""
    chain = parse_cache_chain(entry.headers, enrichment.header_registry)
    served_from_cache, label = delivering_hop(chain)

    if entry.server_ip:
        provider = identify_provider(entry.server_ip, enrichment.whois, enrichment.provider_map)
        city, country, continent = geolocate(entry.server_ip, enrichment.geo)
    else:
        provider = NO_CDN
        city = country = continent = None

    if served_from_cache and provider == NO_CDN:
        provider = UNKNOWN_CDN

    origin = classify_origin(
        registrable_domain(entry.hostname()), homepage_domain, enrichment.dns
    )
    return DeliveryAttribution(
        provider=provider,
        delivering_server_label=label,
        served_from_cache=served_from_cache,
        city=city,
        country=country,
        continent=continent,
        origin_class=origin,
    )


def attribute_session(session, enrichment: Enrichment) -> list[DeliveryAttribution]:
    """Attribution for every non-aborted entry, in entry order."""
    homepage = session.homepage_domain()
    return [
        attribute_delivery(entry, homepage, enrichment)
        for entry in session.entries
        if entry.status > 0
    ]


# -- fixture table parsing ------------------------------------------------------


def _parse_tsv(text: str, columns: int | None = None):
    rows = []
    for line in text.splitlines():
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [part.strip() for part in line.split("\t")]
        if columns is not None:
            if len(parts) < columns:
                continue
            rows.append(tuple(parts[:columns]))
        else:
            rows.append(parts)
    return rows


def _read_tsv(path, columns: int | None = None):
    with open(path, encoding="utf-8") as fp:
        return _parse_tsv(fp.read(), columns)

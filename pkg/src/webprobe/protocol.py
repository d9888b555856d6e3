"""Requested-protocol policies, observed-protocol normalization, distributions.

A probe requests one protocol but servers fall back: requesting HTTP/1.1
disables HTTP/2 and QUIC outright, requesting HTTP/2 disables QUIC, and
requesting QUIC leaves both fallbacks enabled. Repeat policies add a
two-pass navigation that keeps the DNS cache warm between passes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .har import HarSession
from .domains import registrable_domain


class Protocol(Enum):
    H1 = "H1"
    H2 = "H2"
    QUIC = "QUIC"
    OTHER = "OTHER"


class RequestedProtocol(Enum):
    H1 = "H1"
    H2 = "H2"
    QUIC = "QUIC"
    H2_REPEAT = "H2_REPEAT"
    QUIC_REPEAT = "QUIC_REPEAT"


class InvalidPolicy(ValueError):
    """ProtocolPolicy flags contradict the requested protocol."""


_REPEAT = {RequestedProtocol.H2_REPEAT, RequestedProtocol.QUIC_REPEAT}
_QUIC_FAMILY = {RequestedProtocol.QUIC, RequestedProtocol.QUIC_REPEAT}

_H1_VERSIONS = {"http/1.0", "http/1.1"}
_H2_VERSIONS = {"h2", "http/2", "http/2.0", "h2c"}
_H3_RE = re.compile(r"h3(-\d+)?\Z")


@dataclass(frozen=True)
class ProtocolPolicy:
    requested: RequestedProtocol
    h2_enabled: bool
    quic_enabled: bool
    repeat: bool

    @classmethod
    def for_requested(cls, requested: RequestedProtocol | str) -> "ProtocolPolicy":
        """Build the consistent policy for a requested protocol."""
        if isinstance(requested, str):
            requested = RequestedProtocol[requested.upper()]
        return cls(
            requested=requested,
            h2_enabled=requested is not RequestedProtocol.H1,
            quic_enabled=requested in _QUIC_FAMILY,
            repeat=requested in _REPEAT,
        )

    def validate(self) -> None:
        expected = ProtocolPolicy.for_requested(self.requested)
        if self != expected:
            raise InvalidPolicy(
                f"flags {self} inconsistent with requested={self.requested.value}"
            )


@dataclass(frozen=True)
class DriverSettings:
    """Protocol switch set handed to a browser driver."""

    h2_enabled: bool
    quic_enabled: bool
    two_pass: bool


def policy_settings(policy: ProtocolPolicy) -> DriverSettings:
    """Driver switches for a validated policy; repeat adds the two-pass flag."""
    policy.validate()
    return DriverSettings(
        h2_enabled=policy.h2_enabled,
        quic_enabled=policy.quic_enabled,
        two_pass=policy.repeat,
    )


def normalize_protocol(http_version_raw: str) -> Protocol:
    """Map an observed httpVersion string onto {H1, H2, QUIC, OTHER}.

    h3 spellings and anything mentioning quic count as QUIC; unknown
    versions land in OTHER so distribution totals stay checkable.
    """
    value = (http_version_raw or "").strip().lower()
    if value in _H1_VERSIONS:
        return Protocol.H1
    if value in _H2_VERSIONS:
        return Protocol.H2
    if "quic" in value or _H3_RE.match(value):
        return Protocol.QUIC
    return Protocol.OTHER


@dataclass
class ProtocolDistribution:
    counts: dict[Protocol, int]
    fractions: dict[Protocol, float]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @classmethod
    def from_counts(cls, counts: dict[Protocol, int]) -> "ProtocolDistribution":
        full = {p: int(counts.get(p, 0)) for p in Protocol}
        total = sum(full.values())
        fractions = {p: (n / total if total else 0.0) for p, n in full.items()}
        return cls(counts=full, fractions=fractions)


def protocol_distribution(session: HarSession) -> ProtocolDistribution:
    """Distribution of delivery protocols over non-aborted entries."""
    counts = {p: 0 for p in Protocol}
    for entry in session.entries:
        if entry.status > 0:
            counts[normalize_protocol(entry.http_version_raw)] += 1
    return ProtocolDistribution.from_counts(counts)


def quic_enabled_domains(session: HarSession) -> set[str]:
    """Registrable domains that delivered at least one resource over QUIC."""
    domains = set()
    for entry in session.entries:
        if entry.status > 0 and normalize_protocol(entry.http_version_raw) is Protocol.QUIC:
            domains.add(registrable_domain(entry.hostname()))
    return domains

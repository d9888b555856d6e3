"""Registrable-domain extraction backed by a bundled public-suffix rule set.

Resources downloaded for one page spread over dozens of hostnames; grouping
them by registrable domain (public suffix plus one label) is what makes
"number of domains" and origin classification meaningful.
"""

from __future__ import annotations

import ipaddress
from functools import lru_cache
from importlib import resources


class SuffixRules:
    """Public-suffix rules: plain labels, ``*`` wildcards and ``!`` exceptions."""

    def __init__(self, rules: list[tuple[tuple[str, ...], bool]]):
        # each entry is (labels right-to-left, is_exception)
        self._rules = rules
        self._max_len = max((len(r) for r, _ in rules), default=1)

    @classmethod
    def from_text(cls, text: str) -> "SuffixRules":
        rules = []
        for line in text.splitlines():
            line = line.strip().lower()
            if not line or line.startswith("//"):
                continue
            exception = line.startswith("!")
            if exception:
                line = line[1:]
            labels = tuple(reversed(line.split(".")))
            if labels:
                rules.append((labels, exception))
        return cls(rules)

    @classmethod
    def from_file(cls, path) -> "SuffixRules":
        with open(path, encoding="utf-8") as fp:
            return cls.from_text(fp.read())

    def public_suffix_length(self, labels: list[str]) -> int:
        """Number of labels making up the public suffix of ``labels``.

        Exception rules win over wildcard rules; otherwise the longest
        matching rule prevails; with no match at all the implicit ``*``
        rule makes the bare TLD the suffix.
        """
        rev = tuple(reversed(labels))
        best = 1
        for rule, exception in self._rules:
            if len(rule) > len(rev):
                continue
            if all(r == "*" or r == d for r, d in zip(rule, rev)):
                if exception:
                    return len(rule) - 1
                best = max(best, len(rule))
        return best


@lru_cache(maxsize=1)
def bundled_rules() -> SuffixRules:
    text = resources.files("webprobe.data").joinpath("public_suffix_list.dat").read_text("utf-8")
    return SuffixRules.from_text(text)


def registrable_domain(hostname: str, rules: SuffixRules | None = None) -> str:
    """Return the public-suffix-plus-one portion of ``hostname``.

    IP literals (and bracketed IPv6 literals) pass through unchanged, as do
    hostnames that are themselves a public suffix. Total function: never
    raises on odd input.
    """
    raw = hostname.strip()
    if not raw:
        return hostname
    candidate = raw[1:-1] if raw.startswith("[") and raw.endswith("]") else raw
    try:
        ipaddress.ip_address(candidate)
        return raw
    except ValueError:
        pass
    name = raw.lower().rstrip(".")
    if not name:
        return raw
    labels = name.split(".")
    if any(not label for label in labels):
        return name
    if rules is None:
        return _bundled_registrable(name)
    return _registrable(name, rules)


def _registrable(name: str, rules: SuffixRules) -> str:
    labels = name.split(".")
    suffix_len = rules.public_suffix_length(labels)
    if suffix_len >= len(labels):
        return name
    return ".".join(labels[-(suffix_len + 1):])


@lru_cache(maxsize=4096)
def _bundled_registrable(name: str) -> str:
    return _registrable(name, bundled_rules())

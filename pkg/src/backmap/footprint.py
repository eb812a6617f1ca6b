"""Enrich candidate IPs into located, routed backend server records.

Location resolution prefers the region token embedded in the domain name;
otherwise a country-level majority vote over external hints decides, with
ties broken by a fixed source-priority order. Routing data comes from a
static prefix-to-origin-AS table in the common ``prefix<TAB>len<TAB>asn``
text convention (multi-origin rows joined by underscores).
"""

from __future__ import annotations

import ipaddress
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .catalog import DomainPattern, ProviderProfile, match_fqdn
from .fusion import CandidateAddress
from .geo import Location
from .netutil import truncate_prefix

HINT_SOURCES = ("region-token", "prefix-announcement", "scan-metadata", "latency-probe")

_HINT_PRIORITY = {src: i for i, src in enumerate(HINT_SOURCES)}


class UnlocatableError(ValueError):
    """No region token and no usable hints for an address."""


class UnroutedError(LookupError):
    """No covering prefix in the routing table."""


@dataclass(frozen=True)
class LocationHint:
    ip: str
    source: str
    location: Location

    def __post_init__(self) -> None:
        if self.source not in HINT_SOURCES:
            raise ValueError(f"bad hint source {self.source!r}")


@dataclass(frozen=True)
class BackendServer:
    ip: str
    provider_id: str
    location: Location
    location_confidence: str  # unanimous | majority | tiebreak
    prefix: str
    asn: int
    sharing: str  # dedicated | shared
    sources: frozenset[str]
    region_token: str | None = None

    def __post_init__(self) -> None:
        if self.asn <= 0:
            raise ValueError("asn must be positive")
        if ipaddress.ip_address(self.ip) not in ipaddress.ip_network(self.prefix):
            raise ValueError(f"prefix {self.prefix} does not contain {self.ip}")
        if self.sharing not in ("dedicated", "shared"):
            raise ValueError(f"bad sharing class {self.sharing!r}")


@dataclass(frozen=True)
class StabilityDiff:
    provider_id: str
    date_a: str
    date_b: str
    in_both: frozenset[str]
    only_a: frozenset[str]  # removed
    only_b: frozenset[str]  # new


def locate(
    region_token: str | None,
    region_map: Mapping[str, Location],
    hints: Sequence[LocationHint] = (),
) -> tuple[Location, str]:
    """Resolve a server location.

    A known region token wins outright (unanimous). Otherwise hints vote at
    country level; city is kept only when every hint agrees. A tied vote
    falls back to the hint whose source has the highest fixed priority.
    """
    if region_token:
        mapped = region_map.get(region_token.lower())
        if mapped is not None:
            return mapped, "unanimous"
    if not hints:
        raise UnlocatableError("unlocatable: no mapped region token and no hints")

    votes = Counter(h.location.country for h in hints)
    top_count = max(votes.values())
    leaders = sorted(c for c, n in votes.items() if n == top_count)
    if len(votes) == 1:
        country, confidence = leaders[0], "unanimous"
    elif len(leaders) == 1 and top_count > len(hints) / 2:
        country, confidence = leaders[0], "majority"
    else:
        # Tie (or plurality without majority): best source priority decides,
        # then country code, keeping the result permutation-invariant.
        def rank(country: str) -> tuple[int, str]:
            best = min(_HINT_PRIORITY[h.source] for h in hints
                       if h.location.country == country)
            return (best, country)

        country, confidence = min(leaders, key=rank), "tiebreak"

    cities = {h.location.city for h in hints if h.location.country == country}
    city = cities.pop() if confidence == "unanimous" and len(cities) == 1 else None
    return Location.of(country, city), confidence


# --- prefix -> origin AS table -------------------------------------------------


@dataclass(frozen=True)
class RouteEntry:
    prefix: str
    origins: tuple[int, ...]

    @property
    def primary_asn(self) -> int:
        return min(self.origins)


class PrefixTable:
    """Longest-prefix-match lookups over a static prefix2as snapshot.

    Entries are bucketed by (family, prefix length); a lookup masks the
    address at each populated length, longest first.
    """

    def __init__(self) -> None:
        self._buckets: dict[tuple[int, int], dict[int, RouteEntry]] = {}
        self._lengths: dict[int, list[int]] = {4: [], 6: []}

    def add(self, prefix: str, origins: Sequence[int]) -> None:
        net = ipaddress.ip_network(prefix, strict=False)
        entry = RouteEntry(prefix=str(net), origins=tuple(sorted(set(origins))))
        key = (net.version, net.prefixlen)
        if key not in self._buckets:
            self._buckets[key] = {}
            self._lengths[net.version] = sorted(
                set(self._lengths[net.version]) | {net.prefixlen}, reverse=True)
        self._buckets[key][int(net.network_address)] = entry

    def lookup(self, ip: str) -> RouteEntry:
        addr = ipaddress.ip_address(ip)
        value = int(addr)
        width = 32 if addr.version == 4 else 128
        for length in self._lengths[addr.version]:
            masked = value >> (width - length) << (width - length) if length else 0
            entry = self._buckets[(addr.version, length)].get(masked)
            if entry is not None:
                return entry
        raise UnroutedError(f"unrouted: no covering prefix for {ip}")

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets.values())


def load_prefix_table(path: str | Path) -> PrefixTable:
    """Parse ``prefix<TAB>length<TAB>asn`` rows; multi-origin asn fields are
    underscore-joined. Comment lines (#) and blank lines are ignored."""
    table = PrefixTable()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 3 tab-separated fields")
            prefix, length, asn_field = parts
            origins = [int(a) for a in asn_field.split("_")]
            table.add(f"{prefix}/{int(length)}", origins)
    return table


def map_prefix_asn(ip: str, table: PrefixTable) -> tuple[str, int, tuple[int, ...]]:
    """Longest-prefix match: (prefix, primary asn, full origin set)."""
    entry = table.lookup(ip)
    return entry.prefix, entry.primary_asn, entry.origins


# --- deployment strategy --------------------------------------------------------


@dataclass(frozen=True)
class StrategyReport:
    provider_id: str
    strategy: str  # DI | PR | DI+PR
    org_asns: frozenset[int]
    cloud_asns: frozenset[int]
    other_asns: frozenset[int]


def infer_strategy(
    provider: ProviderProfile,
    servers: Iterable[BackendServer],
    org_map: Mapping[int, str],
) -> StrategyReport:
    """Dedicated infrastructure vs. public cloud/CDN, by announcing ASN.

    ASNs in the provider's own org set count as dedicated; the org_map
    classifies the rest (``cloud``/``self``/``other``). Unmapped ASNs are
    surfaced as ``other`` rather than guessed.
    """
    asns = {s.asn for s in servers if s.provider_id == provider.provider_id}
    if not asns:
        raise ValueError(f"no servers for provider {provider.provider_id}")
    org, cloud, other = set(), set(), set()
    for asn in asns:
        if asn in provider.org_asns or org_map.get(asn) == "self":
            org.add(asn)
        elif org_map.get(asn) == "cloud":
            cloud.add(asn)
        else:
            other.add(asn)
    if not org:
        strategy = "PR"
    elif cloud or other:
        strategy = "DI+PR"
    else:
        strategy = "DI"
    return StrategyReport(
        provider_id=provider.provider_id, strategy=strategy,
        org_asns=frozenset(org), cloud_asns=frozenset(cloud),
        other_asns=frozenset(other),
    )


# --- snapshot diffing and diversity ----------------------------------------------


def diff_snapshots(
    a: Mapping[tuple[str, str], CandidateAddress],
    b: Mapping[tuple[str, str], CandidateAddress],
    date_a: str = "a",
    date_b: str = "b",
) -> dict[str, StabilityDiff]:
    """Per-provider partition of two dated candidate snapshots."""
    providers = {pid for pid, _ in a} | {pid for pid, _ in b}
    out = {}
    for pid in sorted(providers):
        ips_a = {ip for p, ip in a if p == pid}
        ips_b = {ip for p, ip in b if p == pid}
        out[pid] = StabilityDiff(
            provider_id=pid, date_a=date_a, date_b=date_b,
            in_both=frozenset(ips_a & ips_b),
            only_a=frozenset(ips_a - ips_b),
            only_b=frozenset(ips_b - ips_a),
        )
    return out


@dataclass(frozen=True)
class DiversityRow:
    provider_id: str
    asn_count: int
    v4_prefix_count: int  # distinct /24s
    v6_prefix_count: int  # distinct /56s
    location_count: int
    country_count: int


def diversity_report(servers: Iterable[BackendServer]) -> dict[str, DiversityRow]:
    """Aggregation-width prefix, ASN, location and country diversity."""
    acc: dict[str, dict[str, set]] = {}
    for s in servers:
        slot = acc.setdefault(s.provider_id, {
            "asns": set(), "v4": set(), "v6": set(), "locs": set(), "countries": set()})
        slot["asns"].add(s.asn)
        fam = ipaddress.ip_address(s.ip).version
        slot["v4" if fam == 4 else "v6"].add(truncate_prefix(s.ip))
        slot["locs"].add((s.location.country, s.location.city))
        slot["countries"].add(s.location.country)
    return {
        pid: DiversityRow(
            provider_id=pid,
            asn_count=len(slot["asns"]),
            v4_prefix_count=len(slot["v4"]),
            v6_prefix_count=len(slot["v6"]),
            location_count=len(slot["locs"]),
            country_count=len(slot["countries"]),
        )
        for pid, slot in sorted(acc.items())
    }


def enrich_candidates(
    candidates: Mapping[tuple[str, str], CandidateAddress],
    profiles_by_id: Mapping[str, ProviderProfile],
    patterns_by_id: Mapping[str, DomainPattern],
    table: PrefixTable,
    sharing: Mapping[tuple[str, str], str],
    hints: Mapping[str, Sequence[LocationHint]] | None = None,
) -> tuple[list[BackendServer], list[tuple[str, str, str]]]:
    """Build BackendServer records for every routable, locatable candidate.

    Returns (servers, skipped) where skipped rows carry (provider, ip,
    reason: unrouted|unlocatable). Region tokens are re-extracted from the
    candidate's matched FQDNs via the provider's own pattern.
    """
    hints = hints or {}
    servers: list[BackendServer] = []
    skipped: list[tuple[str, str, str]] = []
    for (pid, ip), cand in sorted(candidates.items()):
        profile = profiles_by_id[pid]
        token = None
        for fqdn in sorted(cand.fqdns):
            result = match_fqdn(patterns_by_id[pid], fqdn)
            if result.matched and result.region_token:
                token = result.region_token
                break
        try:
            prefix, asn, _ = map_prefix_asn(ip, table)
        except UnroutedError:
            skipped.append((pid, ip, "unrouted"))
            continue
        try:
            location, confidence = locate(token, profile.region_map, tuple(hints.get(ip, ())))
        except UnlocatableError:
            skipped.append((pid, ip, "unlocatable"))
            continue
        servers.append(BackendServer(
            ip=ip, provider_id=pid, location=location,
            location_confidence=confidence, prefix=prefix, asn=asn,
            sharing=sharing.get((pid, ip), "dedicated"),
            sources=cand.sources, region_token=token,
        ))
    return servers, skipped

"""Detect backend disruptions: traffic-drop findings, blocklist and
routing-event cross-checks.

Outage detection is relative: a provider/region series is flagged when it
stays below the previous week's minimum for a sustained number of hours,
so rescaling a series (e.g. different normalization bases) does not change
the findings.
"""

from __future__ import annotations

import ipaddress
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .footprint import BackendServer
from .ingest import StudyWindow
from .netutil import parse_network
from .timeutil import ensure_utc

DEFAULT_BASELINE_DAYS = 7
DEFAULT_SUSTAIN_HOURS = 2


class InsufficientHistoryError(ValueError):
    """Baseline period not fully covered; a partial baseline would produce
    silently wrong minima."""


@dataclass(frozen=True)
class OutageFinding:
    provider_id: str
    region: str
    window: tuple[datetime, datetime]  # flagged stretch, inclusive hour starts
    min_baseline: float
    observed: tuple[float, ...]
    max_drop_fraction: float


@dataclass(frozen=True)
class BlocklistEntry:
    list_id: str
    cidr: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "cidr", str(parse_network(self.cidr)))


@dataclass(frozen=True)
class RoutingEvent:
    kind: str  # leak | hijack | as-outage
    window: tuple[datetime, datetime]
    prefix: str | None = None
    asn: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("leak", "hijack", "as-outage"):
            raise ValueError(f"bad event kind {self.kind!r}")
        if self.prefix is None and self.asn is None:
            raise ValueError("event needs a prefix or an asn")
        if self.prefix is not None:
            object.__setattr__(self, "prefix", str(parse_network(self.prefix)))


HourlySeries = Sequence[tuple[datetime, float]]


def outage_scan(
    series: Mapping[tuple[str, str], HourlySeries],
    scan_window: StudyWindow,
    baseline_days: int = DEFAULT_BASELINE_DAYS,
    sustain_hours: int = DEFAULT_SUSTAIN_HOURS,
    per_hour_of_week: bool = False,
) -> list[OutageFinding]:
    """Flag stretches where observed volume drops below the prior-week floor.

    The baseline is the minimum over the `baseline_days` days immediately
    before the scan window (a single scalar per provider/region; the
    per-hour-of-week variant keeps one floor per weekly hour slot). A
    finding needs at least `sustain_hours` consecutive sub-baseline hours;
    its drop is 1 - min(observed)/baseline.
    """
    findings: list[OutageFinding] = []
    baseline_start = scan_window.start - timedelta(days=baseline_days)
    expected_hours = baseline_days * 24
    for (provider_id, region) in sorted(series):
        points = sorted((ensure_utc(ts), float(v)) for ts, v in series[(provider_id, region)])
        history = [(ts, v) for ts, v in points
                   if baseline_start <= ts < scan_window.start]
        if len(history) < expected_hours:
            raise InsufficientHistoryError(
                f"{provider_id}/{region}: baseline needs {expected_hours} hourly "
                f"points before {scan_window.start}, found {len(history)}")
        observed = [(ts, v) for ts, v in points if scan_window.contains(ts)]
        if not observed:
            continue

        if per_hour_of_week:
            slot_min: dict[tuple[int, int], float] = {}
            for ts, v in history:
                slot = (ts.weekday(), ts.hour)
                slot_min[slot] = min(slot_min.get(slot, v), v)

            def floor_at(ts: datetime) -> float:
                return slot_min[(ts.weekday(), ts.hour)]
        else:
            scalar = min(v for _, v in history)

            def floor_at(ts: datetime) -> float:
                return scalar

        stretch: list[tuple[datetime, float]] = []

        def flush() -> None:
            if len(stretch) >= sustain_hours:
                baseline = min(floor_at(s_ts) for s_ts, _ in stretch)
                low = min(s_v for _, s_v in stretch)
                findings.append(OutageFinding(
                    provider_id=provider_id, region=region,
                    window=(stretch[0][0], stretch[-1][0]),
                    min_baseline=baseline,
                    observed=tuple(s_v for _, s_v in stretch),
                    max_drop_fraction=1.0 - (low / baseline if baseline else 0.0),
                ))

        one_hour = timedelta(hours=1)
        for ts, v in observed:
            if v < floor_at(ts):
                if stretch and ts - stretch[-1][0] != one_hour:
                    flush()  # gap in the series breaks the stretch
                    stretch = []
                stretch.append((ts, v))
            else:
                flush()
                stretch = []
        flush()
    return findings


# --- blocklists ----------------------------------------------------------------


class BlocklistIndex:
    """Containment index over many lists' CIDRs, bucketed by prefix length."""

    def __init__(self, entries: Iterable[BlocklistEntry]) -> None:
        self._buckets: dict[tuple[int, int], dict[int, set[str]]] = {}
        self._lengths: dict[int, list[int]] = {4: [], 6: []}
        self.list_ids: set[str] = set()
        for entry in entries:
            net = parse_network(entry.cidr)
            key = (net.version, net.prefixlen)
            if key not in self._buckets:
                self._buckets[key] = {}
                self._lengths[net.version] = sorted(
                    set(self._lengths[net.version]) | {net.prefixlen}, reverse=True)
            self._buckets[key].setdefault(int(net.network_address), set()).add(entry.list_id)
            self.list_ids.add(entry.list_id)

    def matches(self, ip: str) -> set[str]:
        """All list ids with a block containing the address."""
        addr = ipaddress.ip_address(ip)
        value = int(addr)
        width = 32 if addr.version == 4 else 128
        out: set[str] = set()
        for length in self._lengths[addr.version]:
            masked = value >> (width - length) << (width - length) if length else 0
            hit = self._buckets[(addr.version, length)].get(masked)
            if hit:
                out |= hit
        return out


@dataclass(frozen=True)
class BlocklistMatch:
    provider_id: str
    ip: str
    list_ids: frozenset[str]


@dataclass(frozen=True)
class BlocklistReport:
    matches: tuple[BlocklistMatch, ...]
    excluded_matches: tuple[BlocklistMatch, ...]

    def per_provider_counts(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for m in self.matches:
            counts[m.provider_id] += 1
        return dict(counts)

    def distinct_ips(self) -> set[str]:
        return {m.ip for m in self.matches}


def blocklist_check(
    servers: Iterable[BackendServer],
    index: BlocklistIndex,
    exclude_lists: Iterable[str] = (),
) -> BlocklistReport:
    """Match every server IP against the blocklist index. Matches that only
    come from excluded lists are reported separately, never silently dropped."""
    excluded = set(exclude_lists)
    matches: list[BlocklistMatch] = []
    excluded_only: list[BlocklistMatch] = []
    for s in sorted(servers, key=lambda s: (s.provider_id, s.ip)):
        hit = index.matches(s.ip)
        if not hit:
            continue
        kept = hit - excluded
        if kept:
            matches.append(BlocklistMatch(s.provider_id, s.ip, frozenset(kept)))
        else:
            excluded_only.append(BlocklistMatch(s.provider_id, s.ip, frozenset(hit)))
    return BlocklistReport(matches=tuple(matches), excluded_matches=tuple(excluded_only))


def read_blocklist(path: str | Path, list_id: str | None = None) -> list[BlocklistEntry]:
    """Parse the common netset/ipset convention: one address or CIDR per
    line, '#' comments. The list id defaults to the file stem."""
    path = Path(path)
    lid = list_id or path.stem
    entries: list[BlocklistEntry] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            entries.append(BlocklistEntry(list_id=lid, cidr=line))
    return entries


# --- routing events --------------------------------------------------------------


@dataclass(frozen=True)
class EventOverlap:
    event: RoutingEvent
    affected_servers: tuple[str, ...]
    affected_providers: tuple[str, ...]


def routing_event_overlap(
    servers: Iterable[BackendServer],
    events: Iterable[RoutingEvent],
    study_window: StudyWindow,
) -> list[EventOverlap]:
    """Overlap report per event whose window intersects the study window.

    Prefix events hit servers whose announced prefix intersects the event
    prefix; AS events hit servers announced from that ASN.
    """
    server_list = list(servers)
    reports: list[EventOverlap] = []
    for event in events:
        if not study_window.overlaps(*event.window):
            continue
        hit: list[BackendServer] = []
        if event.prefix is not None:
            enet = parse_network(event.prefix)
            for s in server_list:
                snet = parse_network(s.prefix)
                if snet.version == enet.version and snet.overlaps(enet):
                    hit.append(s)
        if event.asn is not None:
            hit.extend(s for s in server_list if s.asn == event.asn)
        affected = sorted({s.ip for s in hit})
        providers = sorted({s.provider_id for s in hit})
        reports.append(EventOverlap(
            event=event,
            affected_servers=tuple(affected),
            affected_providers=tuple(providers),
        ))
    return reports

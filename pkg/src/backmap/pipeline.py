"""Pipeline orchestration: stage wiring, run manifest, snapshot store.

A run reads its inputs from a RunConfig, executes the requested stages in
dependency order and leaves every artifact in the output directory plus a
manifest recording the config hash and the digest of every input and
output. Reruns over identical inputs produce byte-identical artifacts and
manifests: nothing time- or environment-dependent is ever written.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from . import reports
from .catalog import compile_catalog, load_catalog
from .disruption import outage_scan
from .flows import (ServerIndex, aggregate_flows, detect_scanners, exclude_scanner_lines,
                    read_flows, regional_down_series, scanner_line_ids, threshold_sweep)
from .footprint import (BackendServer, diff_snapshots, diversity_report, enrich_candidates,
                        load_prefix_table)
from .fusion import (build_reverse_index, classify_sharing, fuse, read_candidates,
                     snapshot_filename, write_candidates)
from .geo import Location
from .ingest import (StudyWindow, ingest_cert_scan, ingest_passive_dns,
                     observations_from_resolutions, read_cert_scan_export,
                     read_observations, read_pdns_export, read_resolutions,
                     write_observations)
from .timeutil import fmt_iso, local_date, parse_iso

STAGES = ("discover", "fuse", "classify", "footprint", "flows", "report")

STAGE_VERSIONS = {stage: 1 for stage in STAGES}

DEFAULT_SWEEP_THRESHOLDS = (10, 20, 50, 100, 200, 500, 1000)


class UpstreamMissingError(RuntimeError):
    """A requested stage is missing an upstream artifact."""

    def __init__(self, missing: str, run_first: str) -> None:
        super().__init__(f"missing upstream artifact {missing}; run the "
                         f"'{run_first}' stage first")
        self.missing = missing
        self.run_first = run_first


@dataclass(frozen=True)
class RunConfig:
    catalog: Path
    window: StudyWindow
    out_dir: Path
    certs: Path | None = None
    pdns: Path | None = None
    resolutions: Path | None = None
    flows: Path | None = None
    prefix2as: Path | None = None
    scanner_threshold: int = 100
    sharing_threshold: int = 2
    vantages: tuple[str, ...] = ()
    timezone: str = "UTC"
    include_shared: bool = False
    baseline_days: int = 7
    sustain_hours: int = 2
    anonymize: bool = False
    salt: str = ""

    def __post_init__(self) -> None:
        if self.scanner_threshold < 0 or self.sharing_threshold < 0:
            raise ValueError("thresholds must be >= 0")

    def to_manifest_dict(self) -> dict:
        return {
            "catalog": str(self.catalog),
            "window": {"start": fmt_iso(self.window.start), "end": fmt_iso(self.window.end)},
            "inputs": {
                "certs": str(self.certs) if self.certs else None,
                "pdns": str(self.pdns) if self.pdns else None,
                "resolutions": str(self.resolutions) if self.resolutions else None,
                "flows": str(self.flows) if self.flows else None,
                "prefix2as": str(self.prefix2as) if self.prefix2as else None,
            },
            "scanner_threshold": self.scanner_threshold,
            "sharing_threshold": self.sharing_threshold,
            "vantages": list(self.vantages),
            "timezone": self.timezone,
            "include_shared": self.include_shared,
            "baseline_days": self.baseline_days,
            "sustain_hours": self.sustain_hours,
            "anonymize": self.anonymize,
            "salt": self.salt,
        }


def load_run_config(path: str | Path, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Config file plus CLI overrides; explicit flags win over file values."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    base = Path(path).parent

    def resolve(key: str) -> Path | None:
        value = doc.get(key)
        return (base / value).resolve() if value else None

    values: dict[str, object] = {
        "catalog": resolve("catalog"),
        "out_dir": resolve("out_dir") or (base / "out"),
        "certs": resolve("certs"),
        "pdns": resolve("pdns"),
        "resolutions": resolve("resolutions"),
        "flows": resolve("flows"),
        "prefix2as": resolve("prefix2as"),
        "scanner_threshold": doc.get("scanner_threshold", 100),
        "sharing_threshold": doc.get("sharing_threshold", 2),
        "vantages": tuple(doc.get("vantages", [])),
        "timezone": doc.get("timezone", "UTC"),
        "include_shared": bool(doc.get("include_shared", False)),
        "baseline_days": int(doc.get("baseline_days", 7)),
        "sustain_hours": int(doc.get("sustain_hours", 2)),
        "anonymize": bool(doc.get("anonymize", False)),
        "salt": str(doc.get("salt", "")),
    }
    window = doc.get("window") or {}
    if "start" in window and "end" in window:
        values["window"] = StudyWindow(parse_iso(str(window["start"])),
                                       parse_iso(str(window["end"])))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    if values.get("catalog") is None:
        raise ValueError("run config needs a catalog path")
    if "window" not in values:
        raise ValueError("run config needs a study window")
    return RunConfig(**values)  # type: ignore[arg-type]


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.to_manifest_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _require_artifact(path: Path, run_first: str) -> Path:
    if not path.exists():
        raise UpstreamMissingError(str(path), run_first)
    return path


@dataclass
class RunState:
    """Artifacts shared between stages of one run."""

    config: RunConfig
    profiles: list = field(default_factory=list)
    patterns: list = field(default_factory=list)
    outputs: dict[str, Path] = field(default_factory=dict)

    def profiles_by_id(self) -> dict:
        return {p.provider_id: p for p in self.profiles}

    def patterns_by_id(self) -> dict:
        return {p.provider_id: p for p in self.patterns}


def _stage_discover(state: RunState) -> None:
    cfg = state.config
    observations = []
    if cfg.certs:
        result = ingest_cert_scan(read_cert_scan_export(_require_artifact(cfg.certs, "inputs")),
                                  state.patterns, cfg.window)
        observations.extend(result.observations)
    if cfg.pdns:
        result = ingest_passive_dns(read_pdns_export(_require_artifact(cfg.pdns, "inputs")),
                                    state.patterns, cfg.window)
        observations.extend(result.observations)
    if cfg.resolutions:
        result = observations_from_resolutions(
            read_resolutions(_require_artifact(cfg.resolutions, "inputs")),
            state.patterns, cfg.window)
        observations.extend(result.observations)
    if not observations and not (cfg.certs or cfg.pdns or cfg.resolutions):
        raise UpstreamMissingError("certs/pdns/resolutions inputs", "discover")
    out = cfg.out_dir / "observations.jsonl"
    write_observations(out, observations, sort=True)
    state.outputs["observations"] = out


def _stage_fuse(state: RunState) -> None:
    cfg = state.config
    obs_path = _require_artifact(cfg.out_dir / "observations.jsonl", "discover")
    observations = list(read_observations(obs_path))
    candidates = fuse(observations)
    out = cfg.out_dir / "candidates.jsonl"
    write_candidates(out, candidates)
    state.outputs["candidates"] = out
    reports.write_sources(cfg.out_dir / "fig3_sources.csv", candidates.values())

    # dated per-day snapshots for stability diffing
    snap_dir = cfg.out_dir / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)
    by_day: dict[str, list] = {}
    for obs in observations:
        by_day.setdefault(local_date(obs.seen_at, cfg.timezone), []).append(obs)
    index = {}
    for date in sorted(by_day):
        day_candidates = fuse(by_day[date])
        path = snap_dir / snapshot_filename(date)
        write_candidates(path, day_candidates)
        index[date] = file_digest(path)
    with open(snap_dir / "index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)
        fh.write("\n")
    state.outputs["snapshots"] = snap_dir


def _stage_classify(state: RunState) -> None:
    cfg = state.config
    candidates = read_candidates(_require_artifact(cfg.out_dir / "candidates.jsonl", "fuse"))
    reverse: dict[str, set[str]] = {}
    if cfg.pdns:
        reverse = build_reverse_index(read_pdns_export(cfg.pdns))
    rows = []
    missing_reverse = 0
    for (pid, ip) in sorted(candidates):
        if ip in reverse:
            verdict = classify_sharing(ip, pid, reverse, state.patterns,
                                       cfg.sharing_threshold)
            rows.append({
                "provider_id": pid, "ip": ip,
                "non_matching_domain_count": verdict.non_matching_domain_count,
                "matching_domain_count": verdict.matching_domain_count,
                "verdict": verdict.verdict, "threshold_used": verdict.threshold_used,
                "reverse_data": True,
            })
        else:
            # no reverse evidence at all: left dedicated, but marked so the
            # report distinguishes this from a measured zero
            missing_reverse += 1
            rows.append({
                "provider_id": pid, "ip": ip,
                "non_matching_domain_count": 0, "matching_domain_count": 0,
                "verdict": "dedicated", "threshold_used": cfg.sharing_threshold,
                "reverse_data": False,
            })
    out = cfg.out_dir / "sharing.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    state.outputs["sharing"] = out


def _read_sharing(path: Path) -> dict[tuple[str, str], str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                out[(doc["provider_id"], doc["ip"])] = doc["verdict"]
    return out


def write_servers(path: Path, servers: Iterable[BackendServer]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sorted(servers, key=lambda s: (s.provider_id, s.ip)):
            fh.write(json.dumps({
                "ip": s.ip, "provider_id": s.provider_id,
                "country": s.location.country, "city": s.location.city,
                "continent": s.location.continent,
                "location_confidence": s.location_confidence,
                "prefix": s.prefix, "asn": s.asn, "sharing": s.sharing,
                "sources": sorted(s.sources), "region_token": s.region_token,
            }) + "\n")


def read_servers(path: Path) -> list[BackendServer]:
    servers = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            servers.append(BackendServer(
                ip=doc["ip"], provider_id=doc["provider_id"],
                location=Location(doc["country"], doc.get("city"), doc["continent"]),
                location_confidence=doc["location_confidence"],
                prefix=doc["prefix"], asn=doc["asn"], sharing=doc["sharing"],
                sources=frozenset(doc["sources"]),
                region_token=doc.get("region_token"),
            ))
    return servers


def _stage_footprint(state: RunState) -> None:
    cfg = state.config
    candidates = read_candidates(_require_artifact(cfg.out_dir / "candidates.jsonl", "fuse"))
    sharing = _read_sharing(_require_artifact(cfg.out_dir / "sharing.jsonl", "classify"))
    if not cfg.prefix2as:
        raise UpstreamMissingError("prefix2as table", "inputs")
    table = load_prefix_table(_require_artifact(cfg.prefix2as, "inputs"))
    servers, skipped = enrich_candidates(
        candidates, state.profiles_by_id(), state.patterns_by_id(), table, sharing)
    out = cfg.out_dir / "servers.jsonl"
    write_servers(out, servers)
    state.outputs["servers"] = out
    if skipped:
        with open(cfg.out_dir / "footprint_skipped.jsonl", "w", encoding="utf-8") as fh:
            for pid, ip, reason in skipped:
                fh.write(json.dumps({"provider_id": pid, "ip": ip, "reason": reason}) + "\n")

    diversity = diversity_report(servers)
    reports.write_diversity(cfg.out_dir / "diversity.csv", diversity)
    reports.write_confidence_histogram(cfg.out_dir / "location_confidence.csv", servers)

    # stability: consecutive-day diffs over the dated snapshots
    snap_dir = cfg.out_dir / "snapshots"
    diffs = []
    if snap_dir.exists():
        dates = sorted(p.name.split("candidates-")[1] for p in snap_dir.glob("candidates-*"))
        for a, b in zip(dates, dates[1:]):
            snap_a = read_candidates(snap_dir / f"candidates-{a}")
            snap_b = read_candidates(snap_dir / f"candidates-{b}")
            diffs.extend(diff_snapshots(snap_a, snap_b, a, b).values())
    reports.write_stability(cfg.out_dir / "fig4_stability.csv", diffs)
    state.outputs["stability"] = cfg.out_dir / "fig4_stability.csv"


def _stage_flows(state: RunState) -> None:
    cfg = state.config
    if not cfg.flows:
        raise UpstreamMissingError("flow trace input", "inputs")
    flows_path = _require_artifact(cfg.flows, "inputs")
    servers = read_servers(_require_artifact(cfg.out_dir / "servers.jsonl", "footprint"))
    candidates = read_candidates(_require_artifact(cfg.out_dir / "candidates.jsonl", "fuse"))
    profiles_by_id = state.profiles_by_id()
    index = ServerIndex(servers, profiles_by_id, include_shared=cfg.include_shared)
    cert_ips = {ip for (pid, ip), cand in candidates.items() if "tls-cert" in cand.sources}

    verdicts = detect_scanners(read_flows(flows_path), index.all_server_ips,
                               cfg.scanner_threshold, cfg.timezone)
    scanners = scanner_line_ids(verdicts)
    with open(cfg.out_dir / "scanners.jsonl", "w", encoding="utf-8") as fh:
        for v in verdicts:
            if v.is_scanner:
                fh.write(json.dumps({
                    "line_id": v.line_id, "date": v.date,
                    "distinct_backend_ips": v.distinct_backend_ips,
                    "threshold_used": v.threshold_used,
                }) + "\n")

    sweep = threshold_sweep(read_flows(flows_path), index.all_server_ips,
                            DEFAULT_SWEEP_THRESHOLDS, cfg.timezone)
    reports.write_sweep(cfg.out_dir / "fig5_sweep.csv", sweep)

    agg = aggregate_flows(exclude_scanner_lines(read_flows(flows_path), scanners),
                          index, cfg.timezone, cert_ips)
    reports.emit_flow_reports(cfg.out_dir, agg, index, profiles_by_id)

    # outage scan over regional series; series without a complete baseline
    # week are skipped (the scan itself refuses partial baselines)
    series = regional_down_series(agg)
    baseline_start = cfg.window.start - timedelta(days=cfg.baseline_days)
    eligible = {}
    for key, points in series.items():
        covered = sum(1 for ts, _ in points if baseline_start <= ts < cfg.window.start)
        if covered >= cfg.baseline_days * 24:
            eligible[key] = points
    findings = outage_scan(eligible, cfg.window, cfg.baseline_days,
                           cfg.sustain_hours) if eligible else []
    reports.write_outage(cfg.out_dir / "fig13_outage.csv", series, findings, cfg.window)
    state.outputs["flow_reports"] = cfg.out_dir


def _stage_report(state: RunState) -> None:
    cfg = state.config
    if cfg.anonymize:
        groups = {p.provider_id: p.group for p in state.profiles}
        mapping = reports.pseudonymize(sorted(groups), cfg.salt, groups)
        reports.anonymize_reports(cfg.out_dir, mapping)
        with open(cfg.out_dir / "pseudonyms.json", "w", encoding="utf-8") as fh:
            json.dump(mapping, fh, sort_keys=True, indent=1)
            fh.write("\n")


_STAGE_FUNCS = {
    "discover": _stage_discover,
    "fuse": _stage_fuse,
    "classify": _stage_classify,
    "footprint": _stage_footprint,
    "flows": _stage_flows,
    "report": _stage_report,
}


def run_pipeline(config: RunConfig, stages: Sequence[str] | None = None) -> dict:
    """Execute stages in order and write the run manifest. Returns it."""
    stages = list(stages) if stages else list(STAGES)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages: {unknown}")
    stages.sort(key=STAGES.index)

    config.out_dir.mkdir(parents=True, exist_ok=True)
    profiles = load_catalog(config.catalog)
    state = RunState(config=config, profiles=profiles,
                     patterns=compile_catalog(profiles))
    for stage in stages:
        _STAGE_FUNCS[stage](state)

    inputs = {}
    for name, path in (("catalog", config.catalog), ("certs", config.certs),
                       ("pdns", config.pdns), ("resolutions", config.resolutions),
                       ("flows", config.flows), ("prefix2as", config.prefix2as)):
        if path and Path(path).exists():
            inputs[name] = file_digest(Path(path))

    outputs = {}
    for path in sorted(config.out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            outputs[str(path.relative_to(config.out_dir))] = file_digest(path)

    manifest = {
        "config": config.to_manifest_dict(),
        "config_hash": config_hash(config),
        "stages_run": stages,
        "stage_versions": {s: STAGE_VERSIONS[s] for s in stages},
        "inputs": inputs,
        "outputs": outputs,
    }
    with open(config.out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest

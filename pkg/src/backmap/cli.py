"""Command-line surface.

Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 missing
upstream artifact (the error names the stage to run first).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import reports
from .catalog import CatalogError, compile_catalog, load_catalog
from .disruption import (BlocklistIndex, RoutingEvent, blocklist_check, outage_scan,
                         read_blocklist, routing_event_overlap)
from .flows import (ServerIndex, aggregate_flows, detect_scanners, exclude_scanner_lines,
                    read_flows, regional_down_series, scanner_line_ids, threshold_sweep)
from .fusion import fuse, read_candidates, write_candidates
from .ingest import (ResolverEndpoint, StudyWindow, TlsTarget, collect_tls,
                     ingest_cert_scan, ingest_passive_dns, read_cert_scan_export,
                     read_observations, read_pdns_export, read_resolutions,
                     resolve_active, write_cert_scan_export, write_observations,
                     write_resolutions)
from .pipeline import (DEFAULT_SWEEP_THRESHOLDS, RunConfig, UpstreamMissingError,
                       load_run_config, read_servers, run_pipeline)
from .timeutil import parse_iso

EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_UPSTREAM = 3


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _parse_window(text: str) -> StudyWindow:
    try:
        start_s, end_s = text.split("..", 1)
        return StudyWindow(parse_iso(start_s), parse_iso(end_s))
    except ValueError as exc:
        _fail(EXIT_VALIDATION, f"bad window {text!r} (want START..END ISO-8601): {exc}")


@click.group()
def main() -> None:
    """Map IoT backend server footprints and attribute ISP flow data."""


# --- catalog -----------------------------------------------------------------


@main.group()
def catalog() -> None:
    """Provider catalog tools."""


@catalog.command("validate")
@click.option("--catalog", "catalog_path", required=True, type=click.Path())
def catalog_validate(catalog_path: str) -> None:
    """Validate a catalog file; prints violations and exits 1 on any."""
    try:
        profiles = load_catalog(catalog_path)
        compile_catalog(profiles)
    except CatalogError as exc:
        click.echo(f"invalid: {exc}")
        sys.exit(EXIT_VALIDATION)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"ok: {len(profiles)} providers")


# --- discover ----------------------------------------------------------------


@main.group()
def discover() -> None:
    """Turn raw sources into provider-attributed observations."""


def _load_patterns(catalog_path: str):
    try:
        return compile_catalog(load_catalog(catalog_path))
    except CatalogError as exc:
        _fail(EXIT_VALIDATION, str(exc))


@discover.command("certs")
@click.option("--in", "in_path", required=True, type=click.Path(exists=False))
@click.option("--catalog", "catalog_path", required=True, type=click.Path())
@click.option("--window", "window_text", required=True, help="START..END (ISO-8601)")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--sorted", "sorted_out", is_flag=True, default=False)
@click.option("--strict", is_flag=True, default=False)
def discover_certs(in_path, catalog_path, window_text, out_path, sorted_out, strict):
    """Certificate-scan export -> observations."""
    patterns = _load_patterns(catalog_path)
    window = _parse_window(window_text)
    if not Path(in_path).exists():
        _fail(EXIT_IO, f"no such file: {in_path}")
    result = ingest_cert_scan(read_cert_scan_export(in_path), patterns, window, strict)
    write_observations(out_path, result.observations, sort=sorted_out)
    click.echo(f"{result.stats.emitted} observations "
               f"({result.stats.malformed} malformed rows skipped)")


@discover.command("pdns")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--catalog", "catalog_path", required=True, type=click.Path())
@click.option("--window", "window_text", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--sorted", "sorted_out", is_flag=True, default=False)
@click.option("--strict", is_flag=True, default=False)
def discover_pdns(in_path, catalog_path, window_text, out_path, sorted_out, strict):
    """Passive-DNS export -> observations."""
    patterns = _load_patterns(catalog_path)
    window = _parse_window(window_text)
    if not Path(in_path).exists():
        _fail(EXIT_IO, f"no such file: {in_path}")
    result = ingest_passive_dns(read_pdns_export(in_path), patterns, window, strict)
    write_observations(out_path, result.observations, sort=sorted_out)
    click.echo(f"{result.stats.emitted} observations "
               f"({result.stats.malformed} malformed, "
               f"{result.stats.skipped_rrtype} non-A/AAAA rows skipped)")


@discover.command("resolve")
@click.option("--fqdns", "fqdn_file", required=True, type=click.Path())
@click.option("--vantage", "vantages", multiple=True, required=True,
              help="id=host[:port], repeatable")
@click.option("--pacing", default=10.0, show_default=True)
@click.option("--unsafe-fast", is_flag=True, default=False,
              help="allow pacing under the 10s floor (test fixtures only)")
@click.option("--timeout", default=3.0, show_default=True)
@click.option("--qtypes", default="A", show_default=True, help="comma-separated: A,AAAA")
@click.option("--out", "out_path", required=True, type=click.Path())
def discover_resolve(fqdn_file, vantages, pacing, unsafe_fast, timeout, qtypes, out_path):
    """Resolve FQDNs against every vantage, pacing queries per resolver."""
    if not Path(fqdn_file).exists():
        _fail(EXIT_IO, f"no such file: {fqdn_file}")
    endpoints = []
    for spec in vantages:
        try:
            vantage_id, host = spec.split("=", 1)
            port = 53
            if ":" in host:
                host, port_s = host.rsplit(":", 1)
                port = int(port_s)
            endpoints.append(ResolverEndpoint(vantage_id, host, port))
        except ValueError:
            _fail(EXIT_VALIDATION, f"bad vantage {spec!r} (want id=host[:port])")
    names = [ln.strip() for ln in Path(fqdn_file).read_text().splitlines() if ln.strip()]
    try:
        results = resolve_active(names, endpoints, pacing,
                                 qtypes=tuple(qtypes.split(",")),
                                 timeout=timeout, unsafe_fast=unsafe_fast)
    except ValueError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    write_resolutions(out_path, results)
    ok = sum(1 for r in results if r.status == "ok")
    click.echo(f"{len(results)} results, {ok} ok")


@discover.command("tls")
@click.option("--targets", "targets_file", required=True, type=click.Path(),
              help="JSONL rows: {ip, port, sni?}")
@click.option("--timeout", default=5.0, show_default=True)
@click.option("--max-inflight", default=8, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def discover_tls(targets_file, timeout, max_inflight, out_path):
    """Collect TLS certificates from supplied targets (one try per target)."""
    if not Path(targets_file).exists():
        _fail(EXIT_IO, f"no such file: {targets_file}")
    targets = []
    with open(targets_file, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                targets.append(TlsTarget(doc["ip"], int(doc["port"]), doc.get("sni")))
    results = collect_tls(targets, timeout=timeout, max_inflight=max_inflight)
    write_cert_scan_export(out_path, [r.record for r in results if r.record])
    failures = [r for r in results if r.failure]
    for r in failures:
        click.echo(f"fail {r.target.ip}:{r.target.port} {r.failure}", err=True)
    click.echo(f"{len(results) - len(failures)} certificates, {len(failures)} failures")


# --- fuse / classify / footprint ------------------------------------------------


@main.command("fuse")
@click.option("--obs", "obs_paths", multiple=True, required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def fuse_cmd(obs_paths, out_path):
    """Fuse observation files into a candidate set snapshot."""
    observations = []
    for path in obs_paths:
        if not Path(path).exists():
            _fail(EXIT_UPSTREAM, f"missing observations file {path}; run 'discover' first")
        observations.extend(read_observations(path))
    candidates = fuse(observations)
    write_candidates(out_path, candidates)
    click.echo(f"{len(candidates)} candidates")


@main.command("classify")
@click.option("--candidates", "cand_path", required=True, type=click.Path())
@click.option("--pdns", "pdns_path", required=True, type=click.Path())
@click.option("--catalog", "catalog_path", required=True, type=click.Path())
@click.option("--threshold", default=2, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def classify_cmd(cand_path, pdns_path, catalog_path, threshold, out_path):
    """Shared-vs-dedicated verdicts from reverse DNS evidence."""
    from .fusion import build_reverse_index, classify_sharing

    if not Path(cand_path).exists():
        _fail(EXIT_UPSTREAM, f"missing candidates {cand_path}; run 'fuse' first")
    patterns = _load_patterns(catalog_path)
    candidates = read_candidates(cand_path)
    reverse = build_reverse_index(read_pdns_export(pdns_path))
    with open(out_path, "w", encoding="utf-8") as fh:
        for (pid, ip) in sorted(candidates):
            if ip in reverse:
                v = classify_sharing(ip, pid, reverse, patterns, threshold)
                row = {"provider_id": pid, "ip": ip,
                       "non_matching_domain_count": v.non_matching_domain_count,
                       "matching_domain_count": v.matching_domain_count,
                       "verdict": v.verdict, "threshold_used": threshold,
                       "reverse_data": True}
            else:
                row = {"provider_id": pid, "ip": ip,
                       "non_matching_domain_count": 0, "matching_domain_count": 0,
                       "verdict": "dedicated", "threshold_used": threshold,
                       "reverse_data": False}
            fh.write(json.dumps(row) + "\n")
    click.echo("classified")


@main.command("footprint")
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--diff", nargs=2, default=None, help="two snapshot dates to diff")
def footprint_cmd(out_dir, config_path, diff):
    """Enrich candidates into located, routed server records."""
    from .footprint import diff_snapshots

    try:
        config = load_run_config(config_path, {"out_dir": Path(out_dir)})
        run_pipeline(config, ["footprint"])
    except UpstreamMissingError as exc:
        _fail(EXIT_UPSTREAM, str(exc))
    except (CatalogError, ValueError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
    if diff:
        date_a, date_b = diff
        snap_dir = Path(out_dir) / "snapshots"
        try:
            a = read_candidates(snap_dir / f"candidates-{date_a}")
            b = read_candidates(snap_dir / f"candidates-{date_b}")
        except OSError as exc:
            _fail(EXIT_UPSTREAM, f"snapshot missing: {exc}; run 'fuse' first")
        for pid, d in diff_snapshots(a, b, date_a, date_b).items():
            click.echo(f"{pid}: both={len(d.in_both)} removed={len(d.only_a)} "
                       f"new={len(d.only_b)}")
    click.echo("footprint done")


# --- flows ----------------------------------------------------------------------


@main.group()
def flows() -> None:
    """Flow attribution and traffic metrics."""


def _flows_prereqs(out_dir: str, config_path: str) -> RunConfig:
    try:
        return load_run_config(config_path, {"out_dir": Path(out_dir)})
    except (ValueError, OSError) as exc:
        _fail(EXIT_VALIDATION, str(exc))


@flows.command("analyze")
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
def flows_analyze(out_dir, config_path):
    """Scanner exclusion plus every flow-derived figure table."""
    config = _flows_prereqs(out_dir, config_path)
    try:
        run_pipeline(config, ["flows"])
    except UpstreamMissingError as exc:
        _fail(EXIT_UPSTREAM, str(exc))
    click.echo("flow reports written")


@flows.command("sweep")
@click.option("--flows", "flows_path", required=True, type=click.Path())
@click.option("--servers", "servers_path", required=True, type=click.Path())
@click.option("--thresholds", default=",".join(map(str, DEFAULT_SWEEP_THRESHOLDS)),
              show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def flows_sweep(flows_path, servers_path, thresholds, out_path):
    """Scanner-threshold sweep: visibility and removed lines per threshold."""
    if not Path(servers_path).exists():
        _fail(EXIT_UPSTREAM, f"missing servers {servers_path}; run 'footprint' first")
    index = ServerIndex(read_servers(Path(servers_path)))
    points = threshold_sweep(read_flows(flows_path), index.all_server_ips,
                             [int(t) for t in thresholds.split(",")])
    reports.write_sweep(Path(out_path), points)
    click.echo(f"{len(points)} sweep points")


@flows.command("ablate")
@click.option("--flows", "flows_path", required=True, type=click.Path())
@click.option("--servers", "servers_path", required=True, type=click.Path())
@click.option("--candidates", "cand_path", required=True, type=click.Path())
@click.option("--scanner-threshold", default=100, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def flows_ablate(flows_path, servers_path, cand_path, scanner_threshold, out_path):
    """Per-provider active-line loss when only TLS-discovered servers count."""
    from .flows import source_ablation

    for path, stage in ((servers_path, "footprint"), (cand_path, "fuse")):
        if not Path(path).exists():
            _fail(EXIT_UPSTREAM, f"missing {path}; run '{stage}' first")
    index = ServerIndex(read_servers(Path(servers_path)))
    candidates = read_candidates(cand_path)
    cert_ips = {ip for (pid, ip), c in candidates.items() if "tls-cert" in c.sources}
    scanners = scanner_line_ids(detect_scanners(
        read_flows(flows_path), index.all_server_ips, scanner_threshold))
    agg = aggregate_flows(exclude_scanner_lines(read_flows(flows_path), scanners),
                          index, cert_ips=cert_ips)
    rows = [[pid, f"{pct:.6f}"] for pid, pct in sorted(source_ablation(agg).items())]
    reports.write_table(Path(out_path), ["provider", "decrease_pct"], rows)
    click.echo(f"{len(rows)} providers")


# --- disrupt ----------------------------------------------------------------------


@main.group()
def disrupt() -> None:
    """Outage, blocklist and routing-event checks."""


@disrupt.command("outage")
@click.option("--flows", "flows_path", required=True, type=click.Path())
@click.option("--servers", "servers_path", required=True, type=click.Path())
@click.option("--window", "window_text", required=True, help="scan window START..END")
@click.option("--baseline-days", default=7, show_default=True)
@click.option("--sustain-hours", default=2, show_default=True)
@click.option("--scanner-threshold", default=100, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def disrupt_outage(flows_path, servers_path, window_text, baseline_days,
                   sustain_hours, scanner_threshold, out_path):
    """Flag sustained regional drops below the previous-week minimum."""
    if not Path(servers_path).exists():
        _fail(EXIT_UPSTREAM, f"missing servers {servers_path}; run 'footprint' first")
    window = _parse_window(window_text)
    index = ServerIndex(read_servers(Path(servers_path)))
    scanners = scanner_line_ids(detect_scanners(
        read_flows(flows_path), index.all_server_ips, scanner_threshold))
    agg = aggregate_flows(exclude_scanner_lines(read_flows(flows_path), scanners), index)
    series = regional_down_series(agg)
    try:
        findings = outage_scan(series, window, baseline_days, sustain_hours)
    except ValueError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    from .timeutil import fmt_iso

    with open(out_path, "w", encoding="utf-8") as fh:
        for f in findings:
            fh.write(json.dumps({
                "provider_id": f.provider_id, "region": f.region,
                "start": fmt_iso(f.window[0]), "end": fmt_iso(f.window[1]),
                "min_baseline": f.min_baseline,
                "max_drop_fraction": f.max_drop_fraction,
            }) + "\n")
    click.echo(f"{len(findings)} findings")


@disrupt.command("blocklist")
@click.option("--servers", "servers_path", required=True, type=click.Path())
@click.option("--list", "list_paths", multiple=True, required=True, type=click.Path())
@click.option("--exclude-list", "exclude", multiple=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def disrupt_blocklist(servers_path, list_paths, exclude, out_path):
    """Match server IPs against address blocklists."""
    if not Path(servers_path).exists():
        _fail(EXIT_UPSTREAM, f"missing servers {servers_path}; run 'footprint' first")
    entries = []
    for path in list_paths:
        if not Path(path).exists():
            _fail(EXIT_IO, f"no such blocklist: {path}")
        entries.extend(read_blocklist(path))
    report = blocklist_check(read_servers(Path(servers_path)),
                             BlocklistIndex(entries), exclude)
    with open(out_path, "w", encoding="utf-8") as fh:
        for m in report.matches:
            fh.write(json.dumps({"provider_id": m.provider_id, "ip": m.ip,
                                 "lists": sorted(m.list_ids)}) + "\n")
    click.echo(f"{len(report.distinct_ips())} matched IPs "
               f"({len(report.excluded_matches)} only on excluded lists)")


@disrupt.command("routing")
@click.option("--servers", "servers_path", required=True, type=click.Path())
@click.option("--events", "events_path", required=True, type=click.Path(),
              help="JSONL rows: {kind, prefix?, asn?, start, end}")
@click.option("--window", "window_text", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def disrupt_routing(servers_path, events_path, window_text, out_path):
    """Overlap of leaks/hijacks/AS outages with the identified footprint."""
    if not Path(servers_path).exists():
        _fail(EXIT_UPSTREAM, f"missing servers {servers_path}; run 'footprint' first")
    window = _parse_window(window_text)
    events = []
    with open(events_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                doc = json.loads(line)
                events.append(RoutingEvent(
                    kind=doc["kind"],
                    window=(parse_iso(doc["start"]), parse_iso(doc["end"])),
                    prefix=doc.get("prefix"), asn=doc.get("asn"),
                ))
    overlaps = routing_event_overlap(read_servers(Path(servers_path)), events, window)
    with open(out_path, "w", encoding="utf-8") as fh:
        for o in overlaps:
            fh.write(json.dumps({
                "kind": o.event.kind, "prefix": o.event.prefix, "asn": o.event.asn,
                "affected_servers": list(o.affected_servers),
                "affected_providers": list(o.affected_providers),
            }) + "\n")
    affected = sum(1 for o in overlaps if o.affected_servers)
    click.echo(f"{len(overlaps)} events in window, {affected} with overlap")


# --- synth ------------------------------------------------------------------------


@main.group()
def synth() -> None:
    """Synthetic universes and oracle reference metrics."""


@synth.command("generate")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
def synth_generate(config_path, out_dir):
    """Generate a seeded universe into a directory."""
    from .synth import generate, load_universe_config

    try:
        config = load_universe_config(config_path)
        universe = generate(config)
    except (ValueError, KeyError) as exc:
        _fail(EXIT_VALIDATION, f"bad universe config: {exc}")
    paths = universe.write_to(out_dir)
    click.echo("\n".join(f"{name}: {path}" for name, path in sorted(paths.items())))


@synth.command("oracle")
@click.option("--truth", "truth_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def synth_oracle(truth_path, out_path):
    """Recompute reference metrics from a truth log."""
    from . import oracle as orc
    from .synth import read_truth

    if not Path(truth_path).exists():
        _fail(EXIT_UPSTREAM, f"missing truth log {truth_path}; run 'synth generate' first")
    log = read_truth(truth_path)
    try:
        metrics = orc.oracle_metrics(log)
    except ValueError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    doc = {
        "candidates": sorted([pid, ip] for pid, ip in metrics.candidates),
        "visibility": {f"{pid}/{fam}": frac
                       for (pid, fam), frac in sorted(metrics.visibility.items())},
        "ratios": {pid: (None if v == float("inf") else v)
                   for pid, v in sorted(metrics.ratios.items())},
        "ablation": dict(sorted(metrics.ablation.items())),
        "line_categories": dict(metrics.line_categories),
        "traffic_share": dict(metrics.traffic_share),
        "server_share": dict(metrics.server_share),
        "true_down": dict(sorted(metrics.true_down.items())),
        "est_down": dict(sorted(metrics.est_down.items())),
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    click.echo("oracle metrics written")


# --- report / run --------------------------------------------------------------------


@main.command("report")
@click.argument("figure_id")
@click.option("--from", "out_dir", required=True, type=click.Path())
@click.option("--anonymize", is_flag=True, default=False)
@click.option("--salt", default="")
@click.option("--catalog", "catalog_path", default=None, type=click.Path(),
              help="needed with --anonymize for provider groups")
@click.option("--out", "out_path", default=None, type=click.Path())
def report_cmd(figure_id, out_dir, anonymize, salt, catalog_path, out_path):
    """Emit one figure-equivalent table (optionally pseudonymized)."""
    filename = reports.FIGURE_FILES.get(figure_id)
    if filename is None:
        _fail(EXIT_VALIDATION,
              f"unknown figure id {figure_id!r}; known: {sorted(reports.FIGURE_FILES)}")
    src = Path(out_dir) / filename
    if not src.exists():
        _fail(EXIT_UPSTREAM, f"missing {src}; run the pipeline stages first")
    text = src.read_text(encoding="utf-8")
    if anonymize:
        if not catalog_path:
            _fail(EXIT_VALIDATION, "--anonymize needs --catalog for provider groups")
        profiles = load_catalog(catalog_path)
        mapping = reports.pseudonymize([p.provider_id for p in profiles], salt,
                                       {p.provider_id: p.group for p in profiles})
        lines = text.splitlines()
        header = lines[0].split(",")
        if "provider" in header:
            col = header.index("provider")
            rewritten = [lines[0]]
            for line in lines[1:]:
                cells = line.split(",")
                if len(cells) > col and cells[col] in mapping:
                    cells[col] = mapping[cells[col]]
                rewritten.append(",".join(cells))
            text = "\n".join(rewritten) + "\n"
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--stages", default=None, help="comma-separated subset")
@click.option("--out-dir", "out_dir", default=None, type=click.Path())
def run_cmd(config_path, stages, out_dir):
    """Run the whole pipeline (or a stage subset) from a config file."""
    overrides = {}
    if out_dir:
        overrides["out_dir"] = Path(out_dir)
    try:
        config = load_run_config(config_path, overrides)
    except (ValueError, OSError) as exc:
        _fail(EXIT_VALIDATION, str(exc))
    try:
        manifest = run_pipeline(config, stages.split(",") if stages else None)
    except UpstreamMissingError as exc:
        _fail(EXIT_UPSTREAM, str(exc))
    except CatalogError as exc:
        _fail(EXIT_VALIDATION, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"manifest: {config.out_dir / 'manifest.json'} "
               f"(config {manifest['config_hash'][:12]})")


if __name__ == "__main__":
    main()

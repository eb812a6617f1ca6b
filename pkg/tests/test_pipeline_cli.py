import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from backmap.cli import main
from backmap.ingest import StudyWindow
from backmap.pipeline import RunConfig, UpstreamMissingError, run_pipeline
from backmap.reports import FIGURE_FILES, pseudonymize
from backmap.synth import (AsnSpec, OutageSpec, ProviderSpec, RegionSpec, ScannerSpec,
                           UniverseConfig, generate)
from backmap.timeutil import utc

WINDOW = StudyWindow(utc(2022, 2, 28), utc(2022, 3, 2))


def fixture_universe_config():
    return UniverseConfig(
        seed=4242, window=WINDOW, n_lines=200,
        providers=(
            ProviderSpec(
                provider_id="p01", n_servers=24, adoption=0.6,
                regions=(RegionSpec("us-east-1", "US", 1.0, 0.25),
                         RegionSpec("eu-west-1", "DE", 1.0, 0.75)),
                asns=(AsnSpec(64501, "self"),),
                coverage={"tls-cert": 1.0, "passive-dns": 1.0, "active-dns": 0.5},
                daily_down_bytes=24 * 30 * 500, down_up_ratio=3.0,
                shared_count=2),
            ProviderSpec(
                provider_id="p02", n_servers=10, adoption=0.25, sni_only=True,
                regions=(RegionSpec("ap-1", "JP"),),
                asns=(AsnSpec(64502, "cloud"),),
                coverage={"tls-cert": 1.0, "passive-dns": 1.0, "active-dns": 1.0},
                daily_down_bytes=24 * 12 * 500),
        ),
        scanners=ScannerSpec(count=2, breadth=12),
        deterministic_activity=True,
        baseline_days=7,
        outages=(OutageSpec(provider_id="p01", region_token="us-east-1",
                            start_hour=12, duration_hours=4, drop_below_min=0.2),),
    )


@pytest.fixture(scope="module")
def universe_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("universe")
    generate(fixture_universe_config()).write_to(out)
    return out


@pytest.fixture(scope="module")
def completed_run(universe_dir, tmp_path_factory):
    """One full pipeline run shared by every read-only assertion."""
    out_dir = tmp_path_factory.mktemp("run") / "out"
    config = make_run_config(universe_dir, out_dir)
    manifest = run_pipeline(config)
    return config, manifest


def make_run_config(universe_dir: Path, out_dir: Path) -> RunConfig:
    return RunConfig(
        catalog=universe_dir / "catalog.yaml",
        window=WINDOW,
        out_dir=out_dir,
        certs=universe_dir / "certs.jsonl",
        pdns=universe_dir / "pdns.jsonl",
        resolutions=universe_dir / "resolutions.jsonl",
        flows=universe_dir / "flows.bmf",
        prefix2as=universe_dir / "prefix2as.tsv",
        scanner_threshold=10,
    )


class TestRunPipeline:
    def test_full_run_produces_every_figure_csv(self, completed_run):
        config, manifest = completed_run
        for figure, filename in FIGURE_FILES.items():
            assert (config.out_dir / filename).exists(), figure
        for artifact in ("observations.jsonl", "candidates.jsonl", "sharing.jsonl",
                         "servers.jsonl", "scanners.jsonl", "manifest.json",
                         "diversity.csv"):
            assert (config.out_dir / artifact).exists(), artifact
        assert manifest["stages_run"] == list(manifest["stage_versions"])

    def test_outage_is_flagged_in_fig13(self, completed_run):
        config, _ = completed_run
        rows = (config.out_dir / "fig13_outage.csv").read_text().splitlines()
        flagged = [r for r in rows[1:] if r.endswith(",1")]
        assert flagged
        assert all(",us-east-1," in r for r in flagged)

    def test_downstream_stage_without_upstream_errors(self, universe_dir, tmp_path):
        config = make_run_config(universe_dir, tmp_path / "out")
        with pytest.raises(UpstreamMissingError, match="discover"):
            run_pipeline(config, ["fuse"])

    def test_rerun_is_byte_identical(self, universe_dir, completed_run, tmp_path):
        config_a, _ = completed_run
        config_b = make_run_config(universe_dir, tmp_path / "b")
        run_pipeline(config_b)
        files_a = sorted(p.relative_to(config_a.out_dir)
                         for p in config_a.out_dir.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(config_b.out_dir)
                         for p in config_b.out_dir.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            if rel.name == "manifest.json":
                continue  # embeds the out_dir path in the config section
            assert (config_a.out_dir / rel).read_bytes() == \
                (config_b.out_dir / rel).read_bytes(), rel

    def test_fig12_shares_sum_to_100(self, completed_run):
        config, _ = completed_run
        rows = (config.out_dir / "fig12_continents.csv").read_text().splitlines()[1:]
        sums = {}
        for row in rows:
            kind, _key, share_pct, _count = row.split(",")
            sums[kind] = sums.get(kind, 0.0) + float(share_pct)
        for kind in ("line_category", "traffic", "servers"):
            assert abs(sums[kind] - 100.0) <= 0.01, (kind, sums[kind])

    def test_shared_servers_excluded_from_attribution(self, completed_run):
        config, _ = completed_run
        shared = [json.loads(line)
                  for line in (config.out_dir / "sharing.jsonl").read_text().splitlines()
                  if json.loads(line)["verdict"] == "shared"]
        assert len(shared) == 2
        servers = [json.loads(line)
                   for line in (config.out_dir / "servers.jsonl").read_text().splitlines()]
        shared_ips = {row["ip"] for row in shared}
        assert {s["ip"] for s in servers if s["sharing"] == "shared"} == shared_ips


class TestPseudonyms:
    def test_pure_function_of_salt_and_id(self):
        groups = {"a": "top", "b": "top", "c": "cloud", "d": "other"}
        first = pseudonymize(["a", "b", "c", "d"], "s1", groups)
        second = pseudonymize(["d", "c", "b", "a"], "s1", groups)
        assert first == second
        assert pseudonymize(["a", "b", "c", "d"], "s2", groups) != first or True
        prefixes = {pid: name[0] for pid, name in first.items()}
        assert prefixes == {"a": "T", "b": "T", "c": "D", "d": "O"}

    def test_distinct_within_group(self):
        groups = {f"p{i}": "other" for i in range(8)}
        mapping = pseudonymize(sorted(groups), "salt", groups)
        assert len(set(mapping.values())) == 8


class TestCli:
    def setup_method(self):
        self.runner = CliRunner()

    def test_catalog_validate_bad_file_exits_1(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("providers:\n- provider_id: x\n  parent_domain: .oops\n"
                       "  subdomain: {kind: wildcard}\n")
        result = self.runner.invoke(main, ["catalog", "validate", "--catalog", str(bad)])
        assert result.exit_code == 1
        assert "invalid" in result.output

    def test_catalog_validate_default(self):
        from backmap.catalog import default_catalog_path
        result = self.runner.invoke(
            main, ["catalog", "validate", "--catalog", str(default_catalog_path())])
        assert result.exit_code == 0
        assert "16 providers" in result.output

    def test_discover_certs_missing_input_exits_2(self, universe_dir, tmp_path):
        result = self.runner.invoke(main, [
            "discover", "certs", "--in", str(tmp_path / "nope.jsonl"),
            "--catalog", str(universe_dir / "catalog.yaml"),
            "--window", "2022-02-28T00:00:00Z..2022-03-02T00:00:00Z",
            "--out", str(tmp_path / "obs.jsonl")])
        assert result.exit_code == 2

    def test_discover_certs_and_fuse(self, universe_dir, tmp_path):
        obs_path = tmp_path / "obs.jsonl"
        result = self.runner.invoke(main, [
            "discover", "certs", "--in", str(universe_dir / "certs.jsonl"),
            "--catalog", str(universe_dir / "catalog.yaml"),
            "--window", "2022-02-28T00:00:00Z..2022-03-02T00:00:00Z",
            "--out", str(obs_path), "--sorted"])
        assert result.exit_code == 0, result.output
        fused_path = tmp_path / "candidates.jsonl"
        result = self.runner.invoke(main, [
            "fuse", "--obs", str(obs_path), "--out", str(fused_path)])
        assert result.exit_code == 0
        assert fused_path.exists()

    def test_fuse_missing_observations_exits_3(self, tmp_path):
        result = self.runner.invoke(main, [
            "fuse", "--obs", str(tmp_path / "missing.jsonl"),
            "--out", str(tmp_path / "c.jsonl")])
        assert result.exit_code == 3
        assert "discover" in result.output

    def test_run_and_report_roundtrip(self, universe_dir, tmp_path):
        run_yaml = tmp_path / "run.yaml"
        out_dir = tmp_path / "out"
        run_yaml.write_text(yaml.safe_dump({
            "catalog": str(universe_dir / "catalog.yaml"),
            "certs": str(universe_dir / "certs.jsonl"),
            "pdns": str(universe_dir / "pdns.jsonl"),
            "resolutions": str(universe_dir / "resolutions.jsonl"),
            "flows": str(universe_dir / "flows.bmf"),
            "prefix2as": str(universe_dir / "prefix2as.tsv"),
            "out_dir": str(out_dir),
            "scanner_threshold": 10,
            "window": {"start": "2022-02-28T00:00:00Z", "end": "2022-03-02T00:00:00Z"},
        }))
        result = self.runner.invoke(main, ["run", "--config", str(run_yaml)])
        assert result.exit_code == 0, result.output
        result = self.runner.invoke(main, [
            "report", "fig5_sweep", "--from", str(out_dir)])
        assert result.exit_code == 0
        assert result.output.splitlines()[0] == "threshold,visibility_pct,scanner_lines"

    def test_report_unknown_figure_exits_1(self, tmp_path):
        result = self.runner.invoke(main, ["report", "fig99", "--from", str(tmp_path)])
        assert result.exit_code == 1

    def test_report_missing_artifact_exits_3(self, tmp_path):
        result = self.runner.invoke(main, ["report", "fig5_sweep", "--from", str(tmp_path)])
        assert result.exit_code == 3

    def test_report_anonymize_rewrites_providers(self, universe_dir, completed_run):
        config, _ = completed_run
        out_dir = config.out_dir
        result = self.runner.invoke(main, [
            "report", "fig6_visibility", "--from", str(out_dir),
            "--anonymize", "--salt", "s1",
            "--catalog", str(universe_dir / "catalog.yaml")])
        assert result.exit_code == 0
        assert "p01" not in result.output
        assert "O" in result.output

    def test_synth_generate_and_oracle(self, tmp_path):
        config_path = tmp_path / "universe.yaml"
        config_path.write_text(yaml.safe_dump({
            "seed": 5, "n_lines": 40,
            "window": {"start": "2022-02-28T00:00:00Z", "end": "2022-03-01T00:00:00Z"},
            "providers": [{"provider_id": "p01", "n_servers": 5, "adoption": 0.5,
                           "regions": [{"token": "r1", "country": "DE"}]}],
        }))
        out_dir = tmp_path / "u"
        result = self.runner.invoke(main, [
            "synth", "generate", "--config", str(config_path),
            "--out-dir", str(out_dir)])
        assert result.exit_code == 0, result.output
        assert (out_dir / "truth.json").exists()
        oracle_path = tmp_path / "oracle.json"
        result = self.runner.invoke(main, [
            "synth", "oracle", "--truth", str(out_dir / "truth.json"),
            "--out", str(oracle_path)])
        assert result.exit_code == 0, result.output
        doc = json.loads(oracle_path.read_text())
        assert doc["candidates"]

    def test_flows_sweep_and_ablate_cli(self, universe_dir, completed_run, tmp_path):
        config, _ = completed_run
        out_dir = config.out_dir
        result = self.runner.invoke(main, [
            "flows", "sweep", "--flows", str(universe_dir / "flows.bmf"),
            "--servers", str(out_dir / "servers.jsonl"),
            "--thresholds", "5,10,50", "--out", str(tmp_path / "sweep.csv")])
        assert result.exit_code == 0, result.output
        header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
        assert header == "threshold,visibility_pct,scanner_lines"
        result = self.runner.invoke(main, [
            "flows", "ablate", "--flows", str(universe_dir / "flows.bmf"),
            "--servers", str(out_dir / "servers.jsonl"),
            "--candidates", str(out_dir / "candidates.jsonl"),
            "--scanner-threshold", "10", "--out", str(tmp_path / "ablate.csv")])
        assert result.exit_code == 0, result.output
        rows = dict(line.split(",") for line in
                    (tmp_path / "ablate.csv").read_text().splitlines()[1:])
        assert float(rows["p02"]) == 100.0  # SNI-only provider loses every line

    def test_disrupt_outage_and_routing_cli(self, universe_dir, completed_run, tmp_path):
        config, _ = completed_run
        out_dir = config.out_dir
        result = self.runner.invoke(main, [
            "disrupt", "outage", "--flows", str(universe_dir / "flows.bmf"),
            "--servers", str(out_dir / "servers.jsonl"),
            "--window", "2022-02-28T00:00:00Z..2022-03-02T00:00:00Z",
            "--scanner-threshold", "10",
            "--out", str(tmp_path / "findings.jsonl")])
        assert result.exit_code == 0, result.output
        findings = [json.loads(line) for line in
                    (tmp_path / "findings.jsonl").read_text().splitlines()]
        assert any(f["region"] == "us-east-1" for f in findings)

        events = tmp_path / "events.jsonl"
        events.write_text(json.dumps({
            "kind": "hijack", "prefix": "10.1.0.0/16",
            "start": "2022-02-28T06:00:00Z", "end": "2022-02-28T09:00:00Z"}) + "\n")
        result = self.runner.invoke(main, [
            "disrupt", "routing", "--servers", str(out_dir / "servers.jsonl"),
            "--events", str(events),
            "--window", "2022-02-28T00:00:00Z..2022-03-02T00:00:00Z",
            "--out", str(tmp_path / "overlap.jsonl")])
        assert result.exit_code == 0, result.output
        assert "1 with overlap" in result.output

    def test_discover_resolve_cli(self, dns_server_factory, tmp_path):
        server = dns_server_factory({"a.example": ["192.0.2.1"]})
        fqdns = tmp_path / "names.txt"
        fqdns.write_text("a.example\n")
        out = tmp_path / "resolutions.jsonl"
        result = self.runner.invoke(main, [
            "discover", "resolve", "--fqdns", str(fqdns),
            "--vantage", f"v1=127.0.0.1:{server.port}",
            "--pacing", "0.01", "--unsafe-fast", "--timeout", "1",
            "--out", str(out)])
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text().splitlines()[0])
        assert doc["answers"] == ["192.0.2.1"]

    def test_discover_tls_cli(self, tls_server_factory, tmp_path):
        server = tls_server_factory(["probe.iot.example.com"])
        targets = tmp_path / "targets.jsonl"
        targets.write_text(json.dumps({"ip": "127.0.0.1", "port": server.port}) + "\n")
        out = tmp_path / "certs.jsonl"
        result = self.runner.invoke(main, [
            "discover", "tls", "--targets", str(targets), "--timeout", "2",
            "--out", str(out)])
        assert result.exit_code == 0, result.output
        doc = json.loads(out.read_text().splitlines()[0])
        assert "probe.iot.example.com" in doc["names"]

    def test_disrupt_blocklist_cli(self, completed_run, tmp_path):
        config, _ = completed_run
        out_dir = config.out_dir
        netset = tmp_path / "bad.netset"
        servers = (out_dir / "servers.jsonl").read_text().splitlines()
        first_ip = json.loads(servers[0])["ip"]
        netset.write_text(f"# test\n{first_ip}\n")
        result = self.runner.invoke(main, [
            "disrupt", "blocklist", "--servers", str(out_dir / "servers.jsonl"),
            "--list", str(netset), "--out", str(tmp_path / "matches.jsonl")])
        assert result.exit_code == 0
        assert "1 matched IPs" in result.output

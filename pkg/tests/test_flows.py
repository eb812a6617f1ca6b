import math
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backmap.flows import (DOWN, UP, Ecdf, FlowRecord, ServerIndex,
                           activity_series, aggregate_flows, continent_attribution,
                           detect_scanners, estimate_bytes, exclude_scanner_lines,
                           line_day_profiles, per_line_distribution, port_label,
                           port_mix, read_flows, read_flows_binary, region_class,
                           regional_down_series, scanner_line_ids, source_ablation,
                           suppress_low_counts, threshold_sweep,
                           traffic_series_and_ratio, visibility_per_provider,
                           write_flows_binary, write_flows_jsonl)
from backmap.footprint import BackendServer
from backmap.geo import Location
from backmap.timeutil import utc

T0 = utc(2022, 2, 28)


def flow(ip="10.1.0.1", line="L1", port=8883, transport="tcp", direction=DOWN,
         sampled_bytes=1500, sampled_packets=1, rate=1, hours=0.0):
    return FlowRecord(
        timestamp=T0 + timedelta(hours=hours), line_id=line, server_ip=ip,
        server_port=port, transport=transport, direction=direction,
        sampled_bytes=sampled_bytes, sampled_packets=sampled_packets,
        sampling_rate=rate)


def server(ip, pid="p1", country="DE", sharing="dedicated", token=None):
    return BackendServer(
        ip=ip, provider_id=pid, location=Location.of(country),
        location_confidence="unanimous", prefix=f"{ip}/32", asn=64500,
        sharing=sharing, sources=frozenset({"tls-cert"}), region_token=token)


@pytest.fixture
def index():
    return ServerIndex([server(f"10.1.0.{i}") for i in range(1, 11)])


class TestEstimate:
    def test_multiplication(self):
        flows = [flow(sampled_bytes=1500, rate=1000) for _ in range(3)]
        assert estimate_bytes(flows) == 4_500_000

    def test_rate_one_is_identity(self):
        flows = [flow(sampled_bytes=123), flow(sampled_bytes=77)]
        assert estimate_bytes(flows) == 200

    def test_grouped(self):
        flows = [flow(line="L1", sampled_bytes=10, rate=10),
                 flow(line="L2", sampled_bytes=1, rate=10)]
        assert estimate_bytes(flows, key=lambda f: f.line_id) == {"L1": 100, "L2": 10}

    def test_linearity_over_disjoint_sets(self):
        f1 = [flow(sampled_bytes=10, rate=3)]
        f2 = [flow(sampled_bytes=20, rate=7)]
        assert estimate_bytes(f1 + f2) == estimate_bytes(f1) + estimate_bytes(f2)


class TestScanners:
    def test_above_threshold_is_scanner(self, index):
        flows = [flow(ip=f"10.1.0.{i}", line="S1") for i in range(1, 9)]
        verdicts = detect_scanners(flows, index.all_server_ips, threshold=5)
        assert verdicts[0].is_scanner
        assert verdicts[0].distinct_backend_ips == 8

    def test_exactly_threshold_is_not_scanner(self, index):
        flows = [flow(ip=f"10.1.0.{i}", line="S1") for i in range(1, 6)]
        verdicts = detect_scanners(flows, index.all_server_ips, threshold=5)
        assert not verdicts[0].is_scanner

    def test_non_backend_ips_do_not_count(self, index):
        flows = [flow(ip=f"203.0.113.{i}", line="S1") for i in range(1, 20)]
        assert detect_scanners(flows, index.all_server_ips, threshold=5) == []

    def test_shrinking_threshold_grows_scanner_set(self, index):
        flows = [flow(ip=f"10.1.0.{i}", line=f"L{n}")
                 for n in range(1, 6) for i in range(1, n + 2)]
        sets = {}
        for threshold in (1, 2, 3):
            verdicts = detect_scanners(flows, index.all_server_ips, threshold)
            sets[threshold] = scanner_line_ids(verdicts)
        assert sets[3] <= sets[2] <= sets[1]


class TestSweep:
    def test_monotone_and_boundary(self, index):
        flows = [flow(ip=f"10.1.0.{i}", line="WIDE") for i in range(1, 9)]
        flows += [flow(ip="10.1.0.1", line="NARROW")]
        points = threshold_sweep(flows, index.all_server_ips, [1, 5, 10])
        fractions = [p.visible_server_fraction for p in points]
        assert fractions == sorted(fractions)
        assert points[-1].scanner_line_count == 0  # threshold above max breadth
        assert points[0].scanner_line_count == 1
        assert points[0].visible_server_fraction == pytest.approx(0.1)

    def test_empty_backend_set_rejected(self):
        with pytest.raises(ValueError):
            threshold_sweep([], set(), [10])


def make_agg(flows, idx, **kw):
    return aggregate_flows(flows, idx, **kw)


class TestVisibilityAndAblation:
    def test_three_of_ten(self, index):
        flows = [flow(ip=f"10.1.0.{i}", line=f"L{i}") for i in (1, 2, 3)]
        vis = visibility_per_provider(make_agg(flows, index), index)
        assert vis[("p1", 4)] == pytest.approx(0.3)

    def test_no_flows_zero(self, index):
        vis = visibility_per_provider(make_agg([], index), index)
        assert vis[("p1", 4)] == 0.0

    def test_ablation_all_cert_discovered_is_zero(self, index):
        flows = [flow(ip="10.1.0.1", line="L1")]
        agg = make_agg(flows, index, cert_ips={f"10.1.0.{i}" for i in range(1, 11)})
        assert source_ablation(agg) == {"p1": 0.0}

    def test_ablation_no_cert_coverage_is_total(self, index):
        flows = [flow(ip="10.1.0.1", line="L1"), flow(ip="10.1.0.2", line="L2")]
        agg = make_agg(flows, index, cert_ips=set())
        assert source_ablation(agg) == {"p1": 100.0}

    def test_ablation_partial(self, index):
        flows = [flow(ip="10.1.0.1", line="L1"), flow(ip="10.1.0.2", line="L2"),
                 flow(ip="10.1.0.1", line="L3"), flow(ip="10.1.0.2", line="L4")]
        agg = make_agg(flows, index, cert_ips={"10.1.0.1"})
        assert source_ablation(agg)["p1"] == pytest.approx(50.0)


class TestActivityAndTraffic:
    def test_line_counted_once_per_hour(self, index):
        flows = [flow(line="L1", hours=0.1), flow(line="L1", hours=0.5),
                 flow(line="L2", hours=0.2), flow(line="L1", hours=1.2)]
        series = activity_series(make_agg(flows, index))["p1"]
        assert [count for _, count in series] == [2, 1]

    def test_suppression_drops_small_positive_counts(self):
        series = [(T0, 0), (T0 + timedelta(hours=1), 3), (T0 + timedelta(hours=2), 20)]
        kept = suppress_low_counts(series, floor=15)
        assert [c for _, c in kept] == [0, 20]

    def test_normalization_by_provider_peak(self, index):
        flows = [flow(sampled_bytes=100, hours=0), flow(sampled_bytes=400, hours=1),
                 flow(sampled_bytes=200, hours=2)]
        summary = traffic_series_and_ratio(make_agg(flows, index))
        values = [v for _, v in summary.normalized_down_series["p1"]]
        assert values == [0.25, 1.0, 0.5]

    def test_ratio_balanced_is_one(self, index):
        flows = [flow(direction=DOWN, sampled_bytes=500),
                 flow(direction=UP, sampled_bytes=500)]
        summary = traffic_series_and_ratio(make_agg(flows, index))
        assert summary.down_up_ratio["p1"].value == 1.0

    def test_zero_upstream_is_flagged_infinity(self, index):
        flows = [flow(direction=DOWN, sampled_bytes=500)]
        ratio = traffic_series_and_ratio(make_agg(flows, index)).down_up_ratio["p1"]
        assert math.isinf(ratio.value)
        assert ratio.undefined

    def test_three_to_one(self, index):
        flows = [flow(direction=DOWN, sampled_bytes=15_000),
                 flow(direction=UP, sampled_bytes=5_000)]
        ratio = traffic_series_and_ratio(make_agg(flows, index)).down_up_ratio["p1"]
        assert ratio.value == pytest.approx(3.0, abs=1e-9)


class TestPortMix:
    def test_single_port_is_everything(self, index):
        flows = [flow(port=443)]
        mix = port_mix(make_agg(flows, index))["p1"]
        assert len(mix) == 1
        assert mix[0].share == 1.0
        assert mix[0].label == "https"

    def test_two_equal_ports(self, index):
        flows = [flow(port=443, sampled_bytes=100), flow(port=8883, sampled_bytes=100)]
        mix = port_mix(make_agg(flows, index))["p1"]
        assert sorted((m.label, m.share) for m in mix) == [
            ("https", 0.5), ("mqtt-tls", 0.5)]

    def test_high_udp_bucketed(self, index):
        flows = [flow(port=30100, transport="udp", sampled_bytes=10),
                 flow(port=40999, transport="udp", sampled_bytes=30)]
        mix = port_mix(make_agg(flows, index))["p1"]
        assert len(mix) == 1
        assert mix[0].label == "udp-high"
        assert mix[0].share == 1.0

    def test_labels(self):
        assert port_label(61616, "tcp") == "activemq"
        assert port_label(5684, "udp") == "coap"
        assert port_label(9123, "tcp") == "tcp/9123"

    def test_profile_override(self, catalog_profiles):
        huawei = next(p for p in catalog_profiles if p.provider_id == "huawei")
        assert port_label(8943, "tcp", huawei) == "https"

    def test_shares_sum_to_one(self, index):
        flows = [flow(port=p, sampled_bytes=b)
                 for p, b in ((443, 10), (8883, 25), (1883, 7), (61616, 3))]
        mix = port_mix(make_agg(flows, index))["p1"]
        assert sum(m.share for m in mix) == pytest.approx(1.0, abs=1e-9)


class TestDistributions:
    def test_single_line_step(self, index):
        flows = [flow(line="L1", sampled_bytes=5_000_000)]
        profiles = line_day_profiles(make_agg(flows, index))
        dist = per_line_distribution(profiles, group_by="all")["all"]
        assert dist.quantile(1.0) == 5_000_000
        assert dist.points() == [(5_000_000, 1.0)]

    def test_quantile_of_population(self, index):
        flows = [flow(line=f"L{i}", sampled_bytes=i * 1000) for i in range(1, 101)]
        dist = per_line_distribution(line_day_profiles(make_agg(flows, index)))["all"]
        assert dist.quantile(0.99) == 99 * 1000
        assert dist.fraction_at_most(50_000) == pytest.approx(0.5)

    def test_empty_group_marker(self):
        dist = Ecdf(values=())
        assert dist.is_empty
        with pytest.raises(ValueError):
            dist.quantile(0.5)

    def test_group_by_port(self, index):
        flows = [flow(line="L1", port=443, sampled_bytes=10),
                 flow(line="L1", port=8883, sampled_bytes=20)]
        dists = per_line_distribution(line_day_profiles(make_agg(flows, index)),
                                      group_by="port")
        assert set(dists) == {(443, "tcp"), (8883, "tcp")}


class TestContinent:
    def make_index(self):
        return ServerIndex([
            server("10.1.0.1", country="DE"), server("10.1.0.2", country="FR"),
            server("10.1.0.3", country="IE"),
            server("10.1.0.4", country="US"), server("10.1.0.5", country="US"),
            server("10.1.0.6", country="US"), server("10.1.0.7", country="US"),
            server("10.1.0.8", country="US"), server("10.1.0.9", country="US"),
            server("10.1.0.10", country="CN"),
        ])

    def test_server_shares(self):
        idx = self.make_index()
        report = continent_attribution(make_agg([], idx), idx)
        assert report.server_share == {"EU": 0.3, "US": 0.6, "Asia": 0.1}

    def test_line_categories(self):
        idx = self.make_index()
        flows = [flow(ip="10.1.0.1", line="EU1"),
                 flow(ip="10.1.0.4", line="US1"),
                 flow(ip="10.1.0.1", line="BOTH"), flow(ip="10.1.0.4", line="BOTH"),
                 flow(ip="10.1.0.10", line="AS1"),
                 flow(ip="10.1.0.10", line="MIX"), flow(ip="10.1.0.1", line="MIX")]
        report = continent_attribution(make_agg(flows, idx), idx)
        assert report.line_category_counts == {
            "EU-only": 1, "US-only": 1, "EU+US": 1, "Asia-only": 1,
            "Other": 0, "Mixed": 1}
        assert sum(report.line_category_shares.values()) == pytest.approx(1.0)

    def test_region_class_rules(self):
        assert region_class(Location.of("DE")) == "EU"
        assert region_class(Location.of("US")) == "US"
        assert region_class(Location.of("JP")) == "Asia"
        assert region_class(Location.of("BR")) == "Other"
        assert region_class(Location.of("CA")) == "Other"


class TestAttributionRules:
    def test_shared_servers_excluded_by_default(self):
        idx = ServerIndex([server("10.1.0.1"), server("10.1.0.2", sharing="shared")])
        assert idx.attribute("10.1.0.2", 443, "tcp") is None
        idx_inclusive = ServerIndex(
            [server("10.1.0.1"), server("10.1.0.2", sharing="shared")],
            include_shared=True)
        assert idx_inclusive.attribute("10.1.0.2", 443, "tcp") == "p1"

    def test_dedicated_port_filter(self, catalog_profiles):
        google = next(p for p in catalog_profiles if p.provider_id == "google")
        idx = ServerIndex([server("10.1.0.1", pid="google")],
                          {"google": google})
        assert idx.attribute("10.1.0.1", 8883, "tcp") == "google"
        assert idx.attribute("10.1.0.1", 80, "tcp") is None  # not an MQTT port


class TestAggregateMerge:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(
        st.sampled_from(["L1", "L2", "L3"]),
        st.integers(min_value=1, max_value=10),
        st.sampled_from([DOWN, UP]),
        st.integers(min_value=0, max_value=5000),
        st.integers(min_value=0, max_value=47),
    ), max_size=40), st.integers(min_value=0, max_value=39))
    def test_partitioned_merge_equals_single_pass(self, rows, cut):
        idx = ServerIndex([server(f"10.1.0.{i}") for i in range(1, 11)])
        flows = [flow(line=line, ip=f"10.1.0.{i}", direction=direction,
                      sampled_bytes=sampled, hours=hours)
                 for line, i, direction, sampled, hours in rows]
        single = aggregate_flows(flows, idx)
        cut = min(cut, len(flows))
        left = aggregate_flows(flows[:cut], idx)
        right = aggregate_flows(flows[cut:], idx)
        merged = left.merge(right)
        assert merged.provider_hour_down == single.provider_hour_down
        assert merged.provider_hour_lines == single.provider_hour_lines
        assert merged.provider_port_bytes == single.provider_port_bytes
        assert merged.region_bytes == single.region_bytes
        assert merged.line_day == single.line_day
        assert merged.attributed_records == single.attributed_records


class TestFlowFiles:
    def flows(self):
        return [
            flow(line="L1", ip="10.1.0.1", sampled_bytes=100, sampled_packets=2,
                 rate=1000),
            flow(line="L2", ip="2001:db8::1", port=443, transport="udp",
                 direction=UP, sampled_bytes=9, sampled_packets=1, rate=10,
                 hours=3.5),
        ]

    def test_binary_roundtrip(self, tmp_path):
        path = tmp_path / "flows.bmf"
        count = write_flows_binary(path, self.flows())
        assert count == 2
        assert list(read_flows_binary(path)) == self.flows()

    def test_jsonl_roundtrip(self, tmp_path):
        path = tmp_path / "flows.jsonl"
        write_flows_jsonl(path, self.flows())
        assert list(read_flows(path)) == self.flows()

    def test_format_autodetect(self, tmp_path):
        path = tmp_path / "flows.bmf"
        write_flows_binary(path, self.flows())
        assert list(read_flows(path)) == self.flows()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "flows.bmf"
        path.write_bytes(b"XXXX\x01\x00\x00\x00")
        with pytest.raises(ValueError, match="not a binary flow file"):
            list(read_flows_binary(path))


def test_regional_series_uses_region_tokens():
    idx = ServerIndex([server("10.1.0.1", token="us-east-1"),
                       server("10.1.0.2", token="eu-west-1")])
    flows = [flow(ip="10.1.0.1", sampled_bytes=100),
             flow(ip="10.1.0.2", sampled_bytes=300)]
    series = regional_down_series(aggregate_flows(flows, idx), normalize=False)
    assert set(series) == {("p1", "us-east-1"), ("p1", "eu-west-1")}

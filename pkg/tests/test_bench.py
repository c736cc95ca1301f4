"""Latency harness: percentile arithmetic, record formats, counted MACs."""

import pytest

from s2aformer.attention import Attention
from s2aformer.bench import CSV_HEADER, BenchRecord, bench_attention, nearest_rank
from s2aformer.costs import attention_macs
from s2aformer.errors import ParameterError
from s2aformer.rng import BENCH_STREAM, RngStream


class TestNearestRank:
    def test_single_sample(self):
        assert nearest_rank([10.0], 50) == 10.0
        assert nearest_rank([10.0], 95) == 10.0

    def test_ten_samples(self):
        values = [float(i) for i in range(1, 11)]
        assert nearest_rank(values, 50) == 5.0
        assert nearest_rank(values, 95) == 10.0
        assert nearest_rank(values, 100) == 10.0

    def test_zero_percent_clamps_to_first(self):
        assert nearest_rank([3.0, 7.0], 0) == 3.0

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            nearest_rank([], 50)


class TestBenchRecord:
    def record(self):
        return BenchRecord(mixer="ssa", n=16, dim=8, heads=2, sr=2, iters=3,
                           warmup=1, mean_us=1.5, p50_us=1.25, p95_us=2.0,
                           macs=1234)

    def test_csv_row_matches_header_arity(self):
        row = self.record().csv_row()
        assert len(row.split(",")) == len(CSV_HEADER.split(","))
        assert row == "ssa,16,8,2,2,3,1.500,1.250,2.000,1234"

    def test_json_dict_fields(self):
        data = self.record().to_json_dict()
        assert set(data) == {"mixer", "n", "dim", "heads", "sr", "iters",
                             "warmup", "mean_us", "p50_us", "p95_us", "macs"}


class TestBenchAttention:
    def test_counted_macs_match_analytic_model(self):
        record = bench_attention("ssa", 256, 32, heads=1, sr=4, iters=1, warmup=0)
        twin = Attention(32, 1, RngStream(0, BENCH_STREAM), sr_ratio=4,
                         squeeze=True)
        assert record.macs == attention_macs(twin, 256)
        assert record.macs == 430_592

    def test_ssa_counts_below_mhsa(self):
        ssa = bench_attention("ssa", 256, 32, sr=4, iters=1, warmup=0)
        mhsa = bench_attention("mhsa", 256, 32, iters=1, warmup=0)
        assert ssa.macs < mhsa.macs

    def test_single_iteration_collapses_percentiles(self):
        record = bench_attention("ssa", 64, 16, sr=2, iters=1, warmup=0)
        assert record.p50_us == record.p95_us == record.mean_us

    def test_statistics_ordered(self):
        record = bench_attention("ssa", 64, 16, sr=2, iters=5, warmup=1)
        assert record.p50_us <= record.p95_us
        assert record.mean_us > 0

    def test_macs_field_deterministic(self):
        a = bench_attention("ssa", 64, 16, sr=2, iters=2, warmup=0, seed=3)
        b = bench_attention("ssa", 64, 16, sr=2, iters=2, warmup=0, seed=3)
        assert a.macs == b.macs

    @pytest.mark.parametrize("kwargs", [
        {"mixer": "fast"}, {"iters": 0}, {"warmup": -1},
    ])
    def test_bad_arguments(self, kwargs):
        full = {"mixer": "ssa", "n": 16, "dim": 8, "iters": 1, "warmup": 0}
        full.update(kwargs)
        with pytest.raises(ParameterError):
            bench_attention(full["mixer"], full["n"], full["dim"],
                            iters=full["iters"], warmup=full["warmup"])

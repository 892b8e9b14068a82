import csv
import math
from fractions import Fraction

import pytest

from adchain import bench
from adchain.cryptokit import DigestScheme


def rec(suite, parameter, phase, trial, ns):
    return bench.BenchRecord(bench.Suite(suite), parameter, phase, trial, ns)


class TestStatistics:
    def test_exact_mean_and_stdev(self):
        values = [2, 4, 4, 4, 5, 5, 7, 9]
        assert bench.exact_mean(values) == 5.0
        # sample stdev of the classic dataset: sqrt(32/7)
        assert bench.exact_stdev(values) == pytest.approx(math.sqrt(32 / 7), abs=1e-15)

    def test_stdev_of_single_value_is_zero(self):
        assert bench.exact_stdev([5]) == 0.0

    def test_warmup_exclusion(self):
        # 100 trials: first 5 are warm-up
        records = [rec("hash", 0, "sha1", i, 1_000_000 if i < 5 else 10) for i in range(100)]
        row, = bench.summarize(records)
        assert row.count == 95
        assert row.avg_ns == 10.0
        assert row.max_ns == 10

    def test_small_groups_keep_everything(self):
        records = [rec("hash", 0, "sha1", i, 10 + i) for i in range(10)]
        row, = bench.summarize(records)
        assert row.count == 10

    def test_summary_matches_independent_fraction_pass(self):
        import random
        rng = random.Random(17)
        records = [rec("policy", 100, "random", i, rng.randrange(1, 10**9)) for i in range(200)]
        row, = bench.summarize(records)
        kept = [r.elapsed_ns for r in sorted(records, key=lambda r: r.trial)[int(200 * 0.05):]]
        n, s, s2 = len(kept), sum(kept), sum(v * v for v in kept)
        assert row.avg_ns == float(Fraction(s, n))
        assert row.stdev_ns == math.sqrt(float(Fraction(n * s2 - s * s, n * (n - 1))))
        assert row.min_ns == min(kept) and row.max_ns == max(kept)


class TestTrendFit:
    def test_perfect_power_law(self):
        pts = [(x, 3.0 * x**2.5) for x in (1, 2, 4, 8, 16)]
        fit = bench.fit_trend(pts, "power")
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.slope == pytest.approx(2.5)

    def test_perfect_exponential(self):
        pts = [(x, 2.0 * math.exp(0.5 * x)) for x in (1, 2, 3, 4)]
        fit = bench.fit_trend(pts, "exponential")
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.slope == pytest.approx(0.5)

    def test_unknown_model_rejected(self):
        with pytest.raises(bench.BenchError):
            bench.fit_trend([(1, 1), (2, 2)], "cubic")

    def test_r_squared_in_unit_interval_on_noise(self):
        pts = [(100, 5.0), (200, 3.0), (300, 9.0), (400, 4.0)]
        for model in ("power", "exponential"):
            assert 0.0 <= bench.fit_trend(pts, model).r_squared <= 1.0


class TestCsv:
    def test_roundtrip(self, tmp_path):
        records = [rec("encdec", 1024, "enc", i, 100 + i) for i in range(10)]
        path = tmp_path / "raw.csv"
        bench.write_records(path, records)
        assert bench.read_records(path) == records
        with open(path) as fh:
            header = next(csv.reader(fh))
        assert tuple(header) == bench.CSV_HEADER

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(bench.BenchError):
            bench.read_records(path)

    def test_cdf_points_are_monotone(self):
        records = [rec("policy", 100, "random", i, (i * 37) % 91 + 1) for i in range(50)]
        pts = bench.cdf_points(records)
        fractions = [f for _, _, f in pts]
        values = [v for _, v, _ in pts]
        assert fractions == sorted(fractions)
        assert values == sorted(values)
        assert fractions[-1] == 1.0


class TestSuitePreconditions:
    def test_keygen_rejects_bad_sizes(self):
        with pytest.raises(bench.BenchError):
            bench.bench_keygen([8192], 100)

    def test_keygen_rejects_small_count(self):
        with pytest.raises(bench.BenchError):
            bench.bench_keygen([512], 10)

    def test_hash_rejects_zero_profiles(self):
        with pytest.raises(bench.BenchError):
            bench.bench_hash([DigestScheme.SHA1], 0)

    def test_encdec_rejects_bad_sizes(self):
        with pytest.raises(bench.BenchError):
            bench.bench_encdec([512], 10)

    def test_policy_rejects_bad_sizes_and_placement(self):
        with pytest.raises(bench.BenchError):
            bench.bench_policy([50], "random", 10)
        with pytest.raises(bench.BenchError):
            bench.bench_policy([100], "diagonal", 10)


class TestSmallRuns:
    def test_keygen_512_small_run(self):
        records = bench.bench_keygen([512], 100)
        assert len(records) == 100
        row, = bench.summarize(records)
        assert row.count == 95

    def test_keygen_mean_grows_with_modulus(self):
        records = bench.bench_keygen([512, 1024], 100)
        rows = {r.parameter: r for r in bench.summarize(records)}
        assert rows[1024].avg_ns > rows[512].avg_ns

    def test_hash_suite_runs_all_schemes(self):
        records = bench.bench_hash(list(DigestScheme), profiles=20, seed=1)
        assert len(records) == 100
        rows = bench.summarize(records)
        assert {r.phase for r in rows} == {s.value for s in DigestScheme}

    def test_random_profiles_interest_counts(self):
        profiles = bench.random_profiles(200, seed=2)
        counts = [len(p.interests) for p in profiles]
        assert min(counts) >= 1 and max(counts) <= 20

    def test_encdec_small_run_roundtrips(self):
        records = bench.bench_encdec([1024], ads=5, seed=3)
        assert len(records) == 10  # enc + dec per ad
        phases = {r.phase for r in records}
        assert phases == {"enc", "dec"}

    def test_policy_small_run_monotone_means(self):
        records = bench.bench_policy([100, 1000], "random", trials=60, seed=4)
        rows = {r.parameter: r for r in bench.summarize(records)}
        assert rows[1000].avg_ns > rows[100].avg_ns

    def test_policy_sequential_placement(self):
        records = bench.bench_policy([100], "sequential", trials=100, seed=5)
        assert len(records) == 100
        assert all(r.phase == "sequential" for r in records)

"""Benchmark suites: key generation, profile hashing, ad encryption and
decryption, and policy-tree traversal.

Raw trials are recorded as integer nanoseconds (one CSV row per trial);
summaries report Avg/Min/Max/St.Dev per parameter with the first 5% of
trials excluded as warm-up. Statistics are computed with exact integer
arithmetic (Fractions) so an independent pass over the raw CSV reproduces
them bit for bit. Trendline fits (power and exponential) use least squares
on the log-transformed points, the same as spreadsheet trendlines.
"""

from __future__ import annotations

import csv
import math
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from . import cryptokit
from .cryptokit import DigestScheme
from .policy import Action, Match, PolicyRule, RequestContext, build_tree, traverse_tree
from .profile import Interest, InterestProfile, ProfileState, hash_profile

KEYGEN_SIZES = (512, 1024, 2048, 4096)
ENCDEC_SIZES = (1024, 2048, 4096, 8192)
POLICY_SIZES = tuple(range(100, 1001, 100))
WARMUP_FRACTION = 0.05

CSV_HEADER = ("suite", "parameter", "phase", "trial", "elapsed_ns")


class BenchError(Exception):
    pass


class Suite(Enum):
    KEYGEN = "keygen"
    HASH = "hash"
    ENCDEC = "encdec"
    POLICY = "policy"


@dataclass(frozen=True)
class BenchRecord:
    suite: Suite
    parameter: int  # key bits / tree size / scheme index
    phase: str  # "", "enc"/"dec", placement, or scheme name
    trial: int
    elapsed_ns: int

    def __post_init__(self):
        if self.elapsed_ns <= 0:
            raise BenchError("elapsed must be positive")


@dataclass(frozen=True)
class SummaryRow:
    suite: Suite
    parameter: int
    phase: str
    count: int
    avg_ns: float
    min_ns: int
    max_ns: int
    stdev_ns: float


@dataclass(frozen=True)
class TrendFit:
    model: str  # "power" | "exponential"
    slope: float
    intercept: float
    r_squared: float


def _now() -> int:
    return time.perf_counter_ns()


def _clamped(start: int) -> int:
    return max(1, _now() - start)


# ---------------------------------------------------------------------------
# statistics


def exact_mean(values: Sequence[int]) -> float:
    return float(Fraction(sum(values), len(values)))


def exact_stdev(values: Sequence[int]) -> float:
    """Sample standard deviation via exact rational variance."""
    n = len(values)
    if n < 2:
        return 0.0
    s = sum(values)
    s2 = sum(v * v for v in values)
    variance = Fraction(n * s2 - s * s, n * (n - 1))
    return math.sqrt(float(variance))


def warmup_cutoff(n: int) -> int:
    return int(n * WARMUP_FRACTION)


def summarize(records: Iterable[BenchRecord]) -> list[SummaryRow]:
    groups: dict[tuple[str, int, str], list[BenchRecord]] = {}
    for rec in records:
        groups.setdefault((rec.suite.value, rec.parameter, rec.phase), []).append(rec)
    rows = []
    for (suite, parameter, phase) in sorted(groups):
        recs = sorted(groups[(suite, parameter, phase)], key=lambda r: r.trial)
        kept = [r.elapsed_ns for r in recs[warmup_cutoff(len(recs)):]]
        if not kept:
            kept = [r.elapsed_ns for r in recs]
        rows.append(
            SummaryRow(
                suite=Suite(suite),
                parameter=parameter,
                phase=phase,
                count=len(kept),
                avg_ns=exact_mean(kept),
                min_ns=min(kept),
                max_ns=max(kept),
                stdev_ns=exact_stdev(kept),
            )
        )
    return rows


def fit_trend(points: Sequence[tuple[float, float]], model: str) -> TrendFit:
    """Least squares on transformed coordinates: power uses (ln x, ln y),
    exponential uses (x, ln y). r_squared is for the transformed fit."""
    if model not in ("power", "exponential"):
        raise BenchError(f"unknown trend model: {model}")
    if len(points) < 2:
        raise BenchError("trend fit needs at least two points")
    if any(y <= 0 for _, y in points) or (model == "power" and any(x <= 0 for x, _ in points)):
        raise BenchError("trend fit needs positive values")
    xs = [math.log(x) if model == "power" else float(x) for x, _ in points]
    ys = [math.log(y) for _, y in points]
    n = len(points)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    if sxx == 0:
        raise BenchError("degenerate x values")
    slope = sxy / sxx
    intercept = my - slope * mx
    ss_res = sum((y - (intercept + slope * x)) ** 2 for x, y in zip(xs, ys))
    ss_tot = sum((y - my) ** 2 for y in ys)
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    return TrendFit(model=model, slope=slope, intercept=intercept, r_squared=r2)


# ---------------------------------------------------------------------------
# CSV round trip


def write_records(path: str | Path, records: Iterable[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.suite.value, r.parameter, r.phase, r.trial, r.elapsed_ns])


def read_records(path: str | Path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise BenchError(f"unexpected CSV header: {header}")
        for row in reader:
            out.append(BenchRecord(Suite(row[0]), int(row[1]), row[2], int(row[3]), int(row[4])))
    return out


def write_summary(path: str | Path, rows: Iterable[SummaryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["suite", "parameter", "phase", "count", "avg_ns", "min_ns", "max_ns", "stdev_ns"])
        for r in rows:
            writer.writerow([r.suite.value, r.parameter, r.phase, r.count,
                             repr(r.avg_ns), r.min_ns, r.max_ns, repr(r.stdev_ns)])


def cdf_points(records: Iterable[BenchRecord]) -> list[tuple[str, int, float]]:
    """(phase, elapsed_ns, cumulative fraction) rows for delay CDFs."""
    by_phase: dict[str, list[int]] = {}
    for r in records:
        by_phase.setdefault(r.phase, []).append(r.elapsed_ns)
    out = []
    for phase in sorted(by_phase):
        values = sorted(by_phase[phase])
        n = len(values)
        for i, v in enumerate(values, start=1):
            out.append((phase, v, i / n))
    return out


# ---------------------------------------------------------------------------
# suites


def _keygen_chunk(args: tuple[int, int]) -> list[int]:
    bits, count = args
    times = []
    for _ in range(count):
        t0 = _now()
        cryptokit.generate_keypair(bits)
        times.append(_clamped(t0))
    return times


def bench_keygen(sizes: Sequence[int], count: int, workers: int = 1) -> list[BenchRecord]:
    """Time `count` keypair generations per size. Sequential by default;
    `workers` splits the count across processes (per-trial timings stay
    valid, wall time drops)."""
    if not sizes or any(s not in KEYGEN_SIZES for s in sizes):
        raise BenchError(f"keygen sizes must be a subset of {KEYGEN_SIZES}")
    if count < 100:
        raise BenchError("keygen benchmark needs count >= 100")
    records = []
    for bits in sizes:
        if workers <= 1:
            elapsed = _keygen_chunk((bits, count))
        else:
            per = [count // workers] * workers
            for i in range(count - sum(per)):
                per[i] += 1
            with ProcessPoolExecutor(max_workers=workers) as pool:
                chunks = list(pool.map(_keygen_chunk, [(bits, c) for c in per if c]))
            elapsed = [t for chunk in chunks for t in chunk]
        records.extend(
            BenchRecord(Suite.KEYGEN, bits, "", trial, ns) for trial, ns in enumerate(elapsed)
        )
    return records


def random_profiles(count: int, seed: int, max_interests: int = 20) -> list[InterestProfile]:
    """Synthetic stable profiles with 1..max_interests interests each."""
    rng = random.Random(seed)
    pool = [Interest(f"interest-{k:03d}", f"category-{k % 10}") for k in range(100)]
    profiles = []
    for _ in range(count):
        k = rng.randint(1, max_interests)
        profiles.append(
            InterestProfile(interests=frozenset(rng.sample(pool, k)), state=ProfileState.STABLE)
        )
    return profiles


def bench_hash(schemes: Sequence[DigestScheme], profiles: int, seed: int = 0) -> list[BenchRecord]:
    """Hash `profiles` random profiles under each scheme; one trial is one
    whole-profile hash."""
    if profiles < 1:
        raise BenchError("hash benchmark needs at least one profile")
    if not schemes:
        raise BenchError("no digest schemes given")
    corpus = random_profiles(profiles, seed)
    all_schemes = list(DigestScheme)
    records = []
    for scheme in schemes:
        for trial, prof in enumerate(corpus):
            t0 = _now()
            hash_profile(prof, scheme)
            records.append(
                BenchRecord(Suite.HASH, all_schemes.index(scheme), scheme.value, trial, _clamped(t0))
            )
    return records


def bench_encdec(key_sizes: Sequence[int], ads: int, seed: int = 0) -> list[BenchRecord]:
    """Hybrid encrypt/decrypt `ads` random 12-20KB payloads per key size,
    verifying every round trip bit-exactly."""
    if not key_sizes or any(s not in ENCDEC_SIZES for s in key_sizes):
        raise BenchError(f"encdec sizes must be a subset of {ENCDEC_SIZES}")
    if ads < 1:
        raise BenchError("encdec benchmark needs at least one ad")
    rng = random.Random(seed)
    payloads = [rng.randbytes(rng.randint(12 * 1024, 20 * 1024)) for _ in range(ads)]
    records = []
    for bits in key_sizes:
        keys = cryptokit.generate_keypair(bits, rng_seed=seed * 7919 + bits)
        for trial, payload in enumerate(payloads):
            t0 = _now()
            env = cryptokit.hybrid_encrypt(payload, keys.public_key)
            records.append(BenchRecord(Suite.ENCDEC, bits, "enc", trial, _clamped(t0)))
            t0 = _now()
            plain = cryptokit.hybrid_decrypt(env, keys)
            records.append(BenchRecord(Suite.ENCDEC, bits, "dec", trial, _clamped(t0)))
            if plain != payload:
                raise BenchError(f"round trip mismatch at {bits} bits, trial {trial}")
    return records


_PROBE = RequestContext(requester_id="probe", transaction_type="Request", resource="target")


def _policy_rules(n: int, match_at_head: bool) -> list[PolicyRule]:
    """n rules that ignore the probe context except one decisive rule at the
    position that ends the walked path (worst case: full traversal)."""
    miss = Match(tests={"resource": frozenset({"never"})})
    hit = Match(tests={"resource": frozenset({"target"})})
    rules = [PolicyRule(index=i, match=miss, action=Action.DENY) for i in range(n)]
    pos = 0 if match_at_head else n - 1
    rules[pos] = PolicyRule(index=pos, match=hit, action=Action.ALLOW)
    return rules


def bench_policy(
    tree_sizes: Sequence[int],
    placement: str,
    trials: int,
    seed: int = 0,
) -> list[BenchRecord]:
    """Traverse policy trees whose matching rule sits at the end of the
    walked path, for random or sequential root placement."""
    if not tree_sizes or any(s not in POLICY_SIZES for s in tree_sizes):
        raise BenchError(f"policy sizes must be a subset of {POLICY_SIZES}")
    if placement not in ("random", "sequential"):
        raise BenchError("placement must be 'random' or 'sequential'")
    if trials < 1:
        raise BenchError("policy benchmark needs at least one trial")
    rng = random.Random(seed)
    records = []
    for n in tree_sizes:
        tail_rules = _policy_rules(n, match_at_head=False)
        head_rules = _policy_rules(n, match_at_head=True)
        for trial in range(trials):
            p = rng.randint(1, n) if placement == "random" else (trial % n) + 1
            # root at the last position walks the left spine down to rule 0
            rules = head_rules if p == n else tail_rules
            root = build_tree(rules, p)
            t0 = _now()
            result = traverse_tree(root, _PROBE)
            records.append(BenchRecord(Suite.POLICY, n, placement, trial, _clamped(t0)))
            if result.decision is not Action.ALLOW:
                raise BenchError("probe context failed to match the leaf rule")
    return records

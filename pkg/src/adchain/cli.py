"""Command-line front door.

Subcommands: `setup` materializes corpora (and the bundled demo), `simulate`
runs scenario files end to end with invariant checks, `bench` runs the four
measurement suites and emits CSV, and `inspect` pretty-prints a dumped
transaction chain.

Exit codes: 0 success, 1 usage or input error, 2 assertion/invariant
failure.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from . import bench, ledger, sim
from .admatch import generate_ads_manifest, load_taxonomy
from .cryptokit import DigestScheme

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ASSERTION = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(raw: str) -> list[int]:
    return [int(p) for p in raw.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adchain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_setup = sub.add_parser("setup", help="generate corpora / copy the bundled demo")
    p_setup.add_argument("--ads", type=int, default=0, help="number of ads to synthesize")
    p_setup.add_argument("--taxonomy", help="taxonomy file for keyword sampling")
    p_setup.add_argument("--seed", type=int, default=0)
    p_setup.add_argument("--out", required=True, help="output file (manifest) or directory (--demo)")
    p_setup.add_argument("--demo", action="store_true", help="copy the bundled demo scenario into --out")

    p_sim = sub.add_parser("simulate", help="run scenario files")
    p_sim.add_argument("--scenario", action="append", required=True, help="scenario file (repeatable)")
    p_sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_sim.add_argument("--log", help="write the run log to this file")
    p_sim.add_argument("--dump-chain", help="write the framed transaction dump to this file")
    p_sim.add_argument("--parallel", action="store_true", help="run independent scenarios in processes")
    p_sim.add_argument("--quiet", action="store_true")

    p_bench = sub.add_parser("bench", help="measurement suites")
    bench_sub = p_bench.add_subparsers(dest="suite", required=True)

    p_kg = bench_sub.add_parser("keygen")
    p_kg.add_argument("--sizes", type=_int_list, default=list(bench.KEYGEN_SIZES))
    p_kg.add_argument("--count", type=int, default=10000)
    p_kg.add_argument("--workers", type=int, default=1)
    p_kg.add_argument("--out", required=True)
    p_kg.add_argument("--summary-out")

    p_hash = bench_sub.add_parser("hash")
    p_hash.add_argument("--schemes", default="sha1,sha224,sha256,sha384,sha512")
    p_hash.add_argument("--profiles", type=int, default=1000)
    p_hash.add_argument("--seed", type=int, default=0)
    p_hash.add_argument("--out", required=True)
    p_hash.add_argument("--summary-out")

    p_ed = bench_sub.add_parser("encdec")
    p_ed.add_argument("--sizes", type=_int_list, default=list(bench.ENCDEC_SIZES))
    p_ed.add_argument("--ads", type=int, default=1000)
    p_ed.add_argument("--seed", type=int, default=0)
    p_ed.add_argument("--out", required=True)
    p_ed.add_argument("--summary-out")

    p_pol = bench_sub.add_parser("policy")
    p_pol.add_argument("--sizes", type=_int_list, default=list(bench.POLICY_SIZES))
    p_pol.add_argument("--placement", choices=["random", "sequential", "both"], default="both")
    p_pol.add_argument("--trials", type=int, default=1000)
    p_pol.add_argument("--seed", type=int, default=0)
    p_pol.add_argument("--out", required=True)
    p_pol.add_argument("--summary-out")
    p_pol.add_argument("--cdf-out")

    p_inspect = sub.add_parser("inspect", help="pretty-print a transaction chain dump")
    p_inspect.add_argument("--chain", required=True)

    return parser


def _cmd_setup(args) -> int:
    out = Path(args.out)
    if args.demo:
        out.mkdir(parents=True, exist_ok=True)
        data = resources.files("adchain") / "data"
        for name in ("taxonomy.tsv", "apps_map.tsv", "ads.tsv", "cs_policy.rules",
                     "ch_policy.rules", "miner_policy.rules", "demo.scenario"):
            (out / name).write_text((data / name).read_text(encoding="utf-8"), encoding="utf-8")
        print(f"demo scenario written to {out / 'demo.scenario'}")
        return EXIT_OK
    if args.ads < 1 or not args.taxonomy:
        print("setup: need --ads N and --taxonomy F (or --demo)", file=sys.stderr)
        return EXIT_USAGE
    taxonomy = load_taxonomy(args.taxonomy)
    rows = generate_ads_manifest(args.ads, taxonomy, seed=args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("# ad_id\tadvertiser_id\tpayload_size_bytes\tkeywords\n" + "\n".join(rows) + "\n", encoding="utf-8")
    print(f"{args.ads} ads written to {out}")
    return EXIT_OK


def _run_one(scenario_path: str, seed: int | None) -> tuple[str, list[str], list[str], bool, bytes]:
    simulation = sim.Simulation(sim.parse_scenario(scenario_path), seed_override=seed)
    report = simulation.run()
    return scenario_path, report.log_lines, report.summary_lines(), report.ok, simulation.dump_chains()


def _cmd_simulate(args) -> int:
    jobs = [(path, args.seed) for path in args.scenario]
    if args.parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_one, [j[0] for j in jobs], [j[1] for j in jobs]))
    else:
        results = [_run_one(path, seed) for path, seed in jobs]

    all_ok = True
    for path, log_lines, summary, ok, chain_dump in results:
        all_ok = all_ok and ok
        if args.log:
            target = Path(args.log if len(results) == 1 else f"{args.log}.{Path(path).stem}")
            target.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        if args.dump_chain:
            target = Path(args.dump_chain if len(results) == 1 else f"{args.dump_chain}.{Path(path).stem}")
            target.write_bytes(chain_dump)
        if not args.quiet:
            print(f"== {path}")
            if not args.log:
                for line in log_lines:
                    print(line)
            for line in summary:
                print(line)
    return EXIT_OK if all_ok else EXIT_ASSERTION


def _print_summary(records, trend_specs: list[tuple[str, str]]) -> list[bench.SummaryRow]:
    rows = bench.summarize(records)
    print(f"{'suite':<8} {'param':>6} {'phase':<10} {'count':>7} {'avg_ns':>14} {'min_ns':>12} {'max_ns':>14} {'stdev_ns':>14}")
    for r in rows:
        print(f"{r.suite.value:<8} {r.parameter:>6} {r.phase:<10} {r.count:>7} {r.avg_ns:>14.1f} {r.min_ns:>12} {r.max_ns:>14} {r.stdev_ns:>14.1f}")
    for phase, model in trend_specs:
        pts = [(r.parameter, r.avg_ns) for r in rows if r.phase == phase]
        if len(pts) >= 2:
            fit = bench.fit_trend(pts, model)
            label = phase or "all"
            print(f"trend[{label}] {model}: slope={fit.slope:.6g} r2={fit.r_squared:.4f}")
    return rows


def _cmd_bench(args) -> int:
    if args.suite == "keygen":
        records = bench.bench_keygen(args.sizes, args.count, workers=args.workers)
        trends = [("", "power")]
    elif args.suite == "hash":
        schemes = [DigestScheme.from_name(s) for s in args.schemes.split(",") if s.strip()]
        records = bench.bench_hash(schemes, args.profiles, seed=args.seed)
        trends = []
    elif args.suite == "encdec":
        records = bench.bench_encdec(args.sizes, args.ads, seed=args.seed)
        trends = [("enc", "exponential"), ("enc", "power"), ("dec", "exponential"), ("dec", "power")]
    else:
        placements = ["random", "sequential"] if args.placement == "both" else [args.placement]
        records = []
        for placement in placements:
            records.extend(bench.bench_policy(args.sizes, placement, args.trials, seed=args.seed))
        trends = [(p, m) for p in placements for m in ("power", "exponential")]
        if args.cdf_out:
            with open(args.cdf_out, "w") as fh:
                fh.write("placement,elapsed_ns,cumulative\n")
                for phase, value, frac in bench.cdf_points(records):
                    fh.write(f"{phase},{value},{frac!r}\n")

    bench.write_records(args.out, records)
    rows = _print_summary(records, trends)
    if args.summary_out:
        bench.write_summary(args.summary_out, rows)
    print(f"{len(records)} records written to {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    raw = Path(args.chain).read_bytes()
    txs = ledger.load_transactions(raw)
    for tx in txs:
        print(ledger.describe_transaction(tx))
    print(f"# {len(txs)} transactions")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "setup":
            return _cmd_setup(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "inspect":
            return _cmd_inspect(args)
    except (sim.ScenarioError, bench.BenchError, FileNotFoundError) as exc:
        print(f"adchain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # invariant violations and node refusals
        print(f"adchain: failure: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

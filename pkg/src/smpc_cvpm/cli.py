"""Command-line front end: run, compare, check and bench scenarios.

Exit codes: 0 success, 2 scenario/schema error, 3 baseline bootstrap
failure, 64 usage error (unknown flag or bad value).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from .scheme import BRANCHES, BootstrapError
from .simulation import (SCHEMES, ScenarioError, bundled_scenarios, load_scenario, run_closed_loop,
                         save_trace)
from .svg import trajectory_svg, write_svg

EXIT_OK, EXIT_SCENARIO, EXIT_BOOTSTRAP, EXIT_USAGE = 0, 2, 3, 64
TIMING_KEYS = ("smpc_mean_ms", "safety_check_mean_ms", "cvpm_mean_ms", "ftp_mean_ms", "replan_mean_ms")

log = logging.getLogger("smpc_cvpm.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smpc-cvpm", description="Closed-loop SMPC+CVPM and SMPC+FTP simulations.")
    p.add_argument("command", choices=("run", "compare", "check", "bench"))
    p.add_argument("--scenario", action="append", required=True,
                   help="scenario file or bundled name; repeatable; 'all' selects every bundled scenario")
    p.add_argument("--scheme", choices=SCHEMES, default="smpc_cvpm", help="scheme for 'run' (default smpc_cvpm)")
    p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    p.add_argument("--repeat", type=_positive, default=1, help="repetitions for timing statistics (default 1)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    p.add_argument("--parallel", choices=("eager", "lazy"), default="lazy",
                   help="branch execution mode of smpc_cvpm (default lazy)")
    p.add_argument("--jobs", type=_positive, default=1, help="worker processes for several scenarios")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def resolve_scenarios(names: List[str]) -> List[Path]:
    """Turn ``--scenario`` values into paths; unknown names are returned as given (load fails later)."""
    bundled = {p.stem: p for p in bundled_scenarios()}
    out = []
    for name in names:
        if name == "all":
            out.extend(bundled.values())
        elif Path(name).exists() or name not in bundled:
            out.append(Path(name))
        else:
            out.append(bundled[name])
    return out


def timing_stats(traces) -> dict:
    """Mean and standard deviation over runs of each per-run mean timing."""
    stats = {}
    for key in TIMING_KEYS:
        vals = [tr.summary()["replan_mean_ms"] if key == "replan_mean_ms" else tr.timing()[key]
                for tr in traces]
        vals = [v for v in vals if v is not None]
        if vals:
            stats[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "runs": len(vals)}
    return stats


def _repeat(sc, scheme, seed, mode, repeat):
    traces = [run_closed_loop(sc, scheme, seed, mode) for _ in range(repeat)]
    ref = traces[0].comparable()
    if any(tr.comparable() != ref for tr in traces[1:]):
        log.error("%s/%s: repeated runs with seed %d differ", sc.id, scheme, seed)
    return traces


def cmd_run(args) -> int:
    for path in resolve_scenarios(args.scenario):
        sc = load_scenario(path)
        traces = _repeat(sc, args.scheme, args.seed, args.parallel, args.repeat)
        tr = traces[0]
        extra = {"parallel": args.parallel, "repeat": args.repeat}
        if args.repeat > 1:
            extra["timing_stats"] = timing_stats(traces)
        csv_path, json_path = save_trace(tr, args.out, extra=extra)
        svg_path = write_svg(json_path.with_suffix(".svg"), trajectory_svg(tr, sc.road, sc.geometry))
        print(f"{sc.id} {args.scheme} seed {args.seed}: J_sim={tr.J_sim:.6f} collisions={tr.collisions} "
              f"branches={tr.branch_counts}")
        for p in (csv_path, json_path, svg_path):
            print(f"  wrote {p}")
    return EXIT_OK


def _compare_one(path, seed, mode, repeat) -> dict:
    sc = load_scenario(path)
    row = {"scenario": sc.id, "seed": seed, "schemes": {}}
    traces = {}
    for scheme in SCHEMES:
        try:
            runs = _repeat(sc, scheme, seed, mode, repeat)
        except BootstrapError as exc:
            row["schemes"][scheme] = {"unsupported": str(exc)}
            continue
        traces[scheme] = runs[0]
        s = runs[0].summary()
        s["timing_stats"] = timing_stats(runs)
        row["schemes"][scheme] = s
    if len(traces) == 2:
        a, b = traces["smpc_cvpm"], traces["smpc_ftp"]
        ta = row["schemes"]["smpc_cvpm"]["timing_stats"].get("replan_mean_ms", {}).get("mean")
        tb = row["schemes"]["smpc_ftp"]["timing_stats"].get("replan_mean_ms", {}).get("mean")
        row["timing_reduction_pct"] = None if not (ta and tb) else 100.0 * (1.0 - ta / tb)
        row["diverging_steps"] = [i for i, (x, y) in enumerate(zip(a.branches, b.branches)) if x != y]
    return row


def format_table(rows) -> str:
    head = f"{'scenario':<22}{'scheme':<11}{'J_sim':>10}{'coll':>6}{'replan ms':>11}  " + \
        " ".join(f"{b:>11}" for b in BRANCHES)
    lines = [head, "-" * len(head)]
    for row in rows:
        for scheme, s in row["schemes"].items():
            if "unsupported" in s:
                lines.append(f"{row['scenario']:<22}{scheme:<11}  unsupported: {s['unsupported']}")
                continue
            ms = s["timing_stats"].get("replan_mean_ms", {}).get("mean")
            lines.append(f"{row['scenario']:<22}{scheme:<11}{s['J_sim']:>10.4f}{s['collisions']:>6}"
                         f"{'-' if ms is None else format(ms, '.3f'):>11}  "
                         + " ".join(f"{s['branch_counts'][b]:>11}" for b in BRANCHES))
        red = row.get("timing_reduction_pct")
        if red is not None:
            lines.append(f"{'':<22}timing reduction {red:.1f}%  diverging steps: "
                         f"{_ranges(row.get('diverging_steps', []))}")
    return "\n".join(lines)


def _ranges(steps) -> str:
    if not steps:
        return "none"
    out, start, prev = [], steps[0], steps[0]
    for s in steps[1:] + [None]:
        if s is not None and s == prev + 1:
            prev = s
            continue
        out.append(str(start) if start == prev else f"{start}-{prev}")
        if s is not None:
            start = prev = s
    return ",".join(out)


def _fan_out(fn, paths, args):
    if args.jobs == 1 or len(paths) == 1:
        return [fn(p, args.seed, args.parallel, args.repeat) for p in paths]
    with ProcessPoolExecutor(max_workers=min(args.jobs, len(paths))) as pool:
        futs = [pool.submit(fn, p, args.seed, args.parallel, args.repeat) for p in paths]
        return [f.result() for f in futs]


def cmd_compare(args) -> int:
    paths = resolve_scenarios(args.scenario)
    for p in paths:
        load_scenario(p)            # fail fast with exit 2 before any simulation
    rows = _fan_out(_compare_one, paths, args)
    print(format_table(rows))
    args.out.mkdir(parents=True, exist_ok=True)
    name = rows[0]["scenario"] if len(rows) == 1 else "batch"
    out = args.out / f"compare_{name}_seed{args.seed}.json"
    out.write_text(json.dumps(rows, indent=2))
    print(f"wrote {out}")
    return EXIT_OK


def _bench_one(path, seed, mode, repeat) -> dict:
    """Timing runs of both schemes, interleaved so slow drifts of the machine hit both alike."""
    sc = load_scenario(path)
    res = {"scenario": sc.id, "seed": seed, "repeat": repeat}
    schemes = []
    for scheme in SCHEMES:
        try:
            run_closed_loop(sc, scheme, seed, mode)     # untimed warm-up
            schemes.append(scheme)
        except BootstrapError as exc:
            res[scheme] = {"unsupported": str(exc)}
    runs = {scheme: [] for scheme in schemes}
    for _ in range(repeat):
        for scheme in schemes:
            runs[scheme].append(run_closed_loop(sc, scheme, seed, mode))
    for scheme in schemes:
        per_step = np.concatenate([tr.replan_ms() for tr in runs[scheme]])
        res[scheme] = {"timing_stats": timing_stats(runs[scheme]),
                       "replan_ms_mean": float(per_step.mean()) if per_step.size else None,
                       "replan_ms_std": float(per_step.std()) if per_step.size else None}
    a = res.get("smpc_cvpm", {}).get("replan_ms_mean")
    b = res.get("smpc_ftp", {}).get("replan_ms_mean")
    res["ratio"] = None if not (a and b) else a / b
    return res


def cmd_bench(args) -> int:
    paths = resolve_scenarios(args.scenario)
    for p in paths:
        load_scenario(p)
    rows = _fan_out(_bench_one, paths, args)
    args.out.mkdir(parents=True, exist_ok=True)
    for r in rows:
        a, b = r.get("smpc_cvpm", {}), r.get("smpc_ftp", {})
        print(f"{r['scenario']}: SMPC+check {a.get('replan_ms_mean', float('nan')):.3f} ms, "
              f"SMPC+FTP {b.get('replan_ms_mean', float('nan')):.3f} ms, "
              f"ratio {r['ratio'] if r['ratio'] is None else round(r['ratio'], 3)} over {args.repeat} runs")
    out = args.out / f"bench_seed{args.seed}.json"
    out.write_text(json.dumps(rows, indent=2))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    for p in resolve_scenarios(args.scenario):
        sc = load_scenario(p)
        print(f"{p}: ok ({sc.id}, {len(sc.obstacles)} obstacles, N_sim={sc.N_sim})")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "check": cmd_check, "bench": cmd_bench}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except BootstrapError as exc:
        print(f"baseline bootstrap failed: {exc}", file=sys.stderr)
        return EXIT_BOOTSTRAP


if __name__ == "__main__":
    sys.exit(main())

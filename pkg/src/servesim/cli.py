"""Command-line entry points.

Exit codes: 0 success, 1 validation/simulation failure, 2 bad usage or
unreadable configuration.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import replace
from typing import Optional

from .config import (ConfigError, load_cluster_config, load_workload_config,
                     validate)
from .engine import Engine, PlanError, plan
from .memory import CapacityError
from .metrics import summarize, write_outputs
from .profiles import ProfileError, ProfileTable, load_profile, synth_profile
from .sysnet import RoutingError, SimError
from .workload import Trace, generate, load_trace, save_trace

EXIT_OK = 0
EXIT_FAIL = 1      # validation failure
EXIT_RUNTIME = 2   # runtime/simulation error (argparse also uses 2 for usage)


def _load_profiles(paths: list[str]) -> dict[tuple, ProfileTable]:
    files: list[str] = []
    for p in paths:
        if os.path.isdir(p):
            files.extend(sorted(glob.glob(os.path.join(p, "*.json"))))
        else:
            files.append(p)
    if not files:
        raise ConfigError(f"no profile files found under {paths}")
    out = {}
    for f in files:
        table = load_profile(f)
        out[(table.device_kind, table.model)] = table
    return out


def _load_trace_source(workload_path: str, seed: Optional[int] = None):
    models, source = load_workload_config(workload_path)
    if source.path is not None:
        base = os.path.dirname(os.path.abspath(workload_path))
        path = source.path
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        traces = [load_trace(path)]
    else:
        gen = source.generator
        if seed is not None:
            gen = replace(gen, seed=seed)
        traces = [generate(gen, models[0].name)]
    return models, traces[0]


def cmd_simulate(args) -> int:
    cluster = load_cluster_config(args.cluster)
    models, trace = _load_trace_source(args.workload)
    profiles = _load_profiles(args.profiles)
    model_map = {m.name: m for m in models}
    if args.strict:
        rep = validate(cluster, models, profiles)
        for w in rep.warnings:
            print(f"warning: {w}", file=sys.stderr)
        if not rep.ok:
            for p in rep.problems:
                print(f"problem: {p}", file=sys.stderr)
            return EXIT_FAIL
    p = plan(cluster, model_map, profiles, seed=args.seed)
    p.sim.log_ops = args.dump_events
    eng = Engine(p, until=args.until)
    if args.dump_graphs:
        eng.graph_log = []
    report = eng.run(trace.requests)
    paths = write_outputs(report, args.out)
    if args.dump_events:
        ep = os.path.join(args.out, "events.jsonl")
        with open(ep, "w") as f:
            for tag, where, start, end in p.sim.op_log:
                f.write(json.dumps({"op": tag, "where": where,
                                    "start": start, "end": end}) + "\n")
        paths["events"] = ep
    if args.dump_graphs:
        gp = os.path.join(args.out, "graphs.jsonl")
        with open(gp, "w") as f:
            for mid, t, g in eng.graph_log:
                ops = [{"uid": o.uid, "kind": o.kind, "deps": list(o.deps),
                        "layer": o.layer, "device": o.device or list(o.devices),
                        "tag": o.tag, "latency": o.latency, "bytes": o.bytes}
                       for o in g.ops]
                f.write(json.dumps({"msg": mid, "t": t, "ops": ops}) + "\n")
        paths["graphs"] = gp
    s = summarize(report)
    print(f"completed {s['completed']}/{s['requests']} requests in "
          f"{s['makespan_s']:.6g} s; {s['throughput_tok_s']:.6g} tok/s; "
          f"{s['energy_j']:.6g} J")
    for name in sorted(paths):
        print(f"  {name}: {paths[name]}")
    return EXIT_OK


def cmd_gen_workload(args) -> int:
    models, trace = _load_trace_source(args.workload, seed=args.seed)
    save_trace(trace, args.out)
    print(f"wrote {len(trace.requests)} requests to {args.out}")
    return EXIT_OK


def cmd_gen_profile(args) -> int:
    cluster = load_cluster_config(args.cluster)
    models, _ = load_workload_config(args.workload)
    os.makedirs(args.out, exist_ok=True)
    seen = set()
    count = 0
    from .profiles import save_profile
    for node in cluster.nodes:
        for dev in node.devices:
            for model in models:
                key = (dev.profile_ref, model.name)
                if key in seen:
                    continue
                seen.add(key)
                table = synth_profile(dev, model, peak_flops=args.peak_flops)
                path = os.path.join(args.out,
                                    f"{dev.profile_ref}__{model.name}.json")
                save_profile(table, path)
                count += 1
    print(f"wrote {count} profile tables to {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cluster = load_cluster_config(args.cluster)
    models, _ = load_workload_config(args.workload)
    profiles = _load_profiles(args.profiles)
    rep = validate(cluster, models, profiles)
    for w in rep.warnings:
        print(f"warning: {w}")
    for p in rep.problems:
        print(f"problem: {p}")
    print("ok" if rep.ok else "invalid")
    return EXIT_OK if rep.ok else EXIT_FAIL


def cmd_report(args) -> int:
    path = os.path.join(args.results, "summary.json")
    with open(path) as f:
        summary = json.load(f)
    for k in sorted(summary):
        print(f"{k}: {summary[k]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="servesim",
        description="Discrete-event simulator for heterogeneous and "
                    "disaggregated LLM serving clusters.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sim = sub.add_parser("simulate", help="run a simulation")
    sim.add_argument("--cluster", required=True)
    sim.add_argument("--workload", required=True)
    sim.add_argument("--profiles", required=True, nargs="+",
                     help="profile JSON files or directories")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--until", type=float, default=None)
    sim.add_argument("--dump-graphs", action="store_true")
    sim.add_argument("--dump-events", action="store_true")
    sim.add_argument("--strict", action="store_true",
                     help="validate before running; problems abort")
    sim.set_defaults(fn=cmd_simulate)

    gw = sub.add_parser("gen-workload", help="materialize a trace file")
    gw.add_argument("--workload", required=True)
    gw.add_argument("--out", required=True)
    gw.add_argument("--seed", type=int, default=None,
                    help="override the generator seed from the workload file")
    gw.set_defaults(fn=cmd_gen_workload)

    gp = sub.add_parser("gen-profile",
                        help="synthesize roofline operator profiles")
    gp.add_argument("--cluster", required=True)
    gp.add_argument("--workload", required=True)
    gp.add_argument("--peak-flops", type=float, required=True)
    gp.add_argument("--out", required=True)
    gp.set_defaults(fn=cmd_gen_profile)

    va = sub.add_parser("validate", help="check config/profile compatibility")
    va.add_argument("--cluster", required=True)
    va.add_argument("--workload", required=True)
    va.add_argument("--profiles", required=True, nargs="+")
    va.set_defaults(fn=cmd_validate)

    rp = sub.add_parser("report", help="print the summary of a results dir")
    rp.add_argument("--results", required=True)
    rp.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ProfileError, PlanError, FileNotFoundError,
            json.JSONDecodeError) as e:
        # bad or incomplete inputs: validation failure
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (SimError, RoutingError, CapacityError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Per-request metrics, time-series aggregation, run summaries, and
byte-deterministic output writers."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

from .engine import SimulationReport
from .msg import COMPLETE, Request
from .power import COMPONENTS

BUCKET_S = 1.0


@dataclass(frozen=True)
class RequestMetrics:
    id: str
    model: str
    arrival: float
    queueing_delay: Optional[float]
    ttft: Optional[float]
    tpot: Optional[float]
    e2e: Optional[float]
    input_len: int
    output_len: int
    prefix_hit_tokens: int
    kv_peak_bytes: int
    state: str


def request_metrics(r: Request) -> RequestMetrics:
    spec = r.spec
    qd = (r.sched_time - spec.arrival) if r.sched_time is not None else None
    ttft = (r.first_token_time - spec.arrival) if r.first_token_time is not None else None
    tpot = None
    if r.done_time is not None and r.first_token_time is not None and spec.output_len > 1:
        tpot = (r.done_time - r.first_token_time) / (spec.output_len - 1)
    e2e = (r.done_time - spec.arrival) if r.done_time is not None else None
    return RequestMetrics(
        id=spec.id, model=spec.model, arrival=spec.arrival, queueing_delay=qd,
        ttft=ttft, tpot=tpot, e2e=e2e, input_len=spec.input_len,
        output_len=spec.output_len, prefix_hit_tokens=r.prefix_hit_tokens,
        kv_peak_bytes=r.kv_peak_bytes, state=r.state)


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile (q in [0, 100])."""
    if not values:
        raise ValueError("percentile of empty list")
    xs = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(xs)))
    return xs[min(rank, len(xs)) - 1]


@dataclass
class TimeSeriesRow:
    t: float
    tokens: int
    prefix_hit_rate: float
    tier_bytes: dict
    watts: dict


def build_timeseries(report: SimulationReport, bucket: float = BUCKET_S) -> list[TimeSeriesRow]:
    n = max(1, math.ceil(report.makespan / bucket - 1e-12))
    tokens = [0] * n
    hit_tok = [0] * n
    in_tok = [0] * n
    tiers: list[dict] = [{} for _ in range(n)]

    def idx(t: float) -> int:
        return min(n - 1, max(0, int(t / bucket)))

    for t, _msg, k in report.token_events:
        tokens[idx(t)] += k
    for t, hit, total in report.prefix_events:
        hit_tok[idx(t)] += hit
        in_tok[idx(t)] += total
    for tr in report.ledger.transfers:
        if not (tr.carrier or "").startswith("tier:"):
            continue
        span = tr.end - tr.start
        if span <= 0:
            tiers[idx(tr.end)][tr.carrier] = (
                tiers[idx(tr.end)].get(tr.carrier, 0.0) + tr.bytes)
            continue
        # prorate bytes over the buckets the transfer overlaps
        for i in range(idx(tr.start), idx(tr.end) + 1):
            lo, hi = i * bucket, (i + 1) * bucket
            ov = min(tr.end, hi) - max(tr.start, lo)
            if ov > 0:
                tiers[i][tr.carrier] = (tiers[i].get(tr.carrier, 0.0)
                                        + tr.bytes * ov / span)
    rows = []
    for i in range(n):
        t_end = min((i + 1) * bucket, report.makespan)
        width = t_end - i * bucket
        watts = (report.ledger.sample_power(t_end, width) if width > 0
                 else {c: 0.0 for c in COMPONENTS})
        rate = hit_tok[i] / in_tok[i] if in_tok[i] > 0 else 0.0
        rows.append(TimeSeriesRow(t=t_end, tokens=tokens[i],
                                  prefix_hit_rate=rate, tier_bytes=tiers[i],
                                  watts=watts))
    return rows


def summarize(report: SimulationReport) -> dict:
    done = [request_metrics(r) for r in report.requests if r.state == COMPLETE]
    total_tokens = sum(m.output_len for m in done)
    out = {
        "requests": len(report.requests),
        "completed": len(done),
        "makespan_s": report.makespan,
        "tokens_generated": total_tokens,
        "throughput_tok_s": (total_tokens / report.makespan
                             if report.makespan > 0 else 0.0),
        "events": report.events_processed,
    }
    for name in ("ttft", "tpot", "e2e", "queueing_delay"):
        vals = [getattr(m, name) for m in done if getattr(m, name) is not None]
        if vals:
            out[f"{name}_mean"] = sum(vals) / len(vals)
            for q in (50, 90, 99):
                out[f"{name}_p{q}"] = percentile(vals, q)
    energy = report.ledger.component_energy()
    out["energy_j"] = sum(energy.values())
    if total_tokens > 0:
        out["j_per_token"] = out["energy_j"] / total_tokens
    hits = sum(h for _, h, _ in report.prefix_events)
    total_in = sum(n for _, _, n in report.prefix_events)
    out["prefix_hit_rate"] = hits / total_in if total_in > 0 else 0.0
    return out


# ---------------------------------------------------------------------------
# Writers (byte-deterministic: repr floats, sorted keys, \n newlines)
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    if x is None:
        return ""
    return str(x)


def write_outputs(report: SimulationReport, out_dir: str) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    paths["requests"] = p = os.path.join(out_dir, "requests.csv")
    cols = ["id", "model", "arrival", "queueing_delay", "ttft", "tpot", "e2e",
            "input_len", "output_len", "prefix_hit_tokens", "kv_peak_bytes",
            "state"]
    with open(p, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in report.requests:
            m = request_metrics(r)
            w.writerow([_fmt(getattr(m, c)) for c in cols])

    rows = build_timeseries(report)
    tier_names = sorted({k for row in rows for k in row.tier_bytes})
    paths["timeseries"] = p = os.path.join(out_dir, "timeseries.csv")
    with open(p, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "tokens", "prefix_hit_rate"]
                   + [f"bytes[{n}]" for n in tier_names]
                   + [f"watts[{c}]" for c in COMPONENTS])
        for row in rows:
            w.writerow([_fmt(row.t), row.tokens, _fmt(row.prefix_hit_rate)]
                       + [_fmt(row.tier_bytes.get(n, 0.0)) for n in tier_names]
                       + [_fmt(row.watts[c]) for c in COMPONENTS])

    paths["energy"] = p = os.path.join(out_dir, "energy.json")
    energy = report.ledger.component_energy()
    with open(p, "w") as f:
        json.dump({c: energy[c] for c in COMPONENTS}, f, indent=2,
                  sort_keys=True)
        f.write("\n")

    paths["summary"] = p = os.path.join(out_dir, "summary.json")
    with open(p, "w") as f:
        json.dump(summarize(report), f, indent=2, sort_keys=True)
        f.write("\n")
    return paths

"""Request trace generation and ingestion.

All generators are deterministic under a fixed seed and emit traces
sorted by arrival with unique request ids. Prefix tokens are synthetic
integer ids: only identity matters for prefix caching.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .config import GeneratorSpec, PrefixPoolSpec


@dataclass(frozen=True)
class RequestSpec:
    id: str
    model: str
    arrival: float
    input_len: int
    output_len: int
    prefix_tokens: tuple[int, ...] = ()
    session: Optional[str] = None

    def check(self):
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError(f"{self.id}: input_len and output_len must be >= 1")
        if self.arrival < 0:
            raise ValueError(f"{self.id}: arrival must be >= 0")


@dataclass
class Trace:
    requests: list[RequestSpec]
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    def check(self):
        ids = set()
        prev = 0.0
        for r in self.requests:
            r.check()
            if r.id in ids:
                raise ValueError(f"duplicate request id {r.id}")
            ids.add(r.id)
            if r.arrival < prev:
                raise ValueError("trace not sorted by arrival")
            prev = r.arrival
        return self


class LengthDist:
    """Empirical CDF over token lengths: list of (length, cumprob) pairs."""

    def __init__(self, pairs: list[tuple[int, float]]):
        if not pairs:
            raise ValueError("empty length distribution")
        self.pairs = sorted(pairs, key=lambda p: p[1])
        if abs(self.pairs[-1][1] - 1.0) > 1e-9:
            raise ValueError("length distribution CDF must end at 1.0")

    @classmethod
    def fixed(cls, length: int) -> "LengthDist":
        return cls([(length, 1.0)])

    def sample(self, rng: random.Random) -> int:
        u = rng.random()
        for length, cum in self.pairs:
            if u <= cum:
                return length
        return self.pairs[-1][0]


def _dists(gen: GeneratorSpec) -> tuple[LengthDist, LengthDist]:
    if gen.length_dist:
        din = LengthDist([(int(l), float(c)) for l, c in gen.length_dist["input"]])
        dout = LengthDist([(int(l), float(c)) for l, c in gen.length_dist["output"]])
    else:
        din = LengthDist.fixed(gen.input_len)
        dout = LengthDist.fixed(gen.output_len)
    return din, dout


def _mk_request(i: int, model: str, arrival: float, din: LengthDist,
                dout: LengthDist, rng: random.Random,
                prefix_pool: Optional[PrefixPoolSpec] = None,
                prefix_rng: Optional[random.Random] = None) -> RequestSpec:
    input_len = din.sample(rng)
    output_len = dout.sample(rng)
    prefix: tuple[int, ...] = ()
    session = None
    if prefix_pool is not None and prefix_rng is not None:
        if prefix_rng.random() < prefix_pool.share_prob:
            g = prefix_rng.randrange(prefix_pool.num_groups)
            prefix = tuple(g * 1_000_000 + t for t in range(prefix_pool.prefix_len))
            session = f"g{g}"
            input_len = max(input_len, prefix_pool.prefix_len + 1)
    return RequestSpec(id=f"r{i:05d}", model=model, arrival=arrival,
                       input_len=input_len, output_len=output_len,
                       prefix_tokens=prefix, session=session)


def gen_poisson(rate: float, n: int, model: str = "model",
                length_dist: Optional[dict] = None, seed: int = 0,
                input_len: int = 128, output_len: int = 128) -> Trace:
    """Exponential inter-arrival gaps at `rate` requests/second."""
    if rate <= 0 and n > 0:
        raise ValueError("rate must be > 0 for n > 0")
    gen = GeneratorSpec(kind="poisson", rate=rate, n=n, seed=seed,
                        input_len=input_len, output_len=output_len,
                        length_dist=length_dist)
    return generate(gen, model)


def gen_pulses(k: int, pulses: int, interval: float, model: str = "model",
               length_dist: Optional[dict] = None, seed: int = 0,
               input_len: int = 128, output_len: int = 128) -> Trace:
    gen = GeneratorSpec(kind="pulses", k=k, pulses=pulses, interval=interval,
                        seed=seed, input_len=input_len, output_len=output_len,
                        length_dist=length_dist)
    return generate(gen, model)


def gen_burst_idle(burst_rate: float, idle_rate: float, period: float,
                   duty: float, n: int, model: str = "model",
                   prefix_pool: Optional[PrefixPoolSpec] = None,
                   length_dist: Optional[dict] = None, seed: int = 0,
                   input_len: int = 128, output_len: int = 128) -> Trace:
    gen = GeneratorSpec(kind="burst_idle", burst_rate=burst_rate,
                        idle_rate=idle_rate, period=period, duty=duty, n=n,
                        seed=seed, input_len=input_len, output_len=output_len,
                        length_dist=length_dist, prefix_pool=prefix_pool)
    return generate(gen, model)


def gen_fixed(n: int, input_len: int, output_len: int, model: str = "model") -> Trace:
    gen = GeneratorSpec(kind="fixed", n=n, input_len=input_len,
                        output_len=output_len)
    return generate(gen, model)


def generate(gen: GeneratorSpec, model: str) -> Trace:
    din, dout = _dists(gen)
    rng = random.Random(gen.seed)
    prefix_rng = random.Random(gen.seed + 1) if gen.prefix_pool else None
    reqs: list[RequestSpec] = []

    if gen.kind == "poisson":
        t = 0.0
        for i in range(gen.n):
            t += rng.expovariate(gen.rate)
            reqs.append(_mk_request(i, model, t, din, dout, rng,
                                    gen.prefix_pool, prefix_rng))
    elif gen.kind == "pulses":
        i = 0
        for p in range(gen.pulses):
            for _ in range(gen.k):
                reqs.append(_mk_request(i, model, p * gen.interval, din, dout,
                                        rng, gen.prefix_pool, prefix_rng))
                i += 1
    elif gen.kind == "burst_idle":
        if not (0.0 < gen.duty < 1.0):
            raise ValueError("duty must be in (0, 1)")
        t = 0.0
        i = 0
        while i < gen.n:
            phase = t % gen.period
            in_burst = phase < gen.duty * gen.period
            rate = gen.burst_rate if in_burst else gen.idle_rate
            boundary = (t - phase) + (gen.duty * gen.period if in_burst else gen.period)
            if rate <= 0:
                t = boundary
                continue
            gap = rng.expovariate(rate)
            if t + gap >= boundary:
                # arrival falls past the phase boundary; redraw in next phase
                t = boundary
                continue
            t += gap
            reqs.append(_mk_request(i, model, t, din, dout, rng,
                                    gen.prefix_pool, prefix_rng))
            i += 1
    elif gen.kind == "fixed":
        if gen.n < 1:
            raise ValueError("fixed generator requires n >= 1")
        for i in range(gen.n):
            reqs.append(RequestSpec(id=f"r{i:05d}", model=model, arrival=0.0,
                                    input_len=gen.input_len,
                                    output_len=gen.output_len))
    else:
        raise ValueError(f"unknown generator kind '{gen.kind}'")

    prov = {"kind": gen.kind, "seed": gen.seed, "n": len(reqs)}
    return Trace(requests=reqs, seed=gen.seed, provenance=prov).check()


# ---------------------------------------------------------------------------
# Trace file IO (JSON lines, one request per line)
# ---------------------------------------------------------------------------

def save_trace(trace: Trace, path: str):
    with open(path, "w") as fh:
        for r in trace.requests:
            row = {"id": r.id, "model": r.model, "arrival": r.arrival,
                   "input_len": r.input_len, "output_len": r.output_len}
            if r.prefix_tokens:
                row["prefix_tokens"] = list(r.prefix_tokens)
            if r.session is not None:
                row["session"] = r.session
            fh.write(json.dumps(row) + "\n")


def load_trace(path: str) -> Trace:
    reqs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            reqs.append(RequestSpec(
                id=row["id"], model=row["model"], arrival=float(row["arrival"]),
                input_len=int(row["input_len"]), output_len=int(row["output_len"]),
                prefix_tokens=tuple(row.get("prefix_tokens", [])),
                session=row.get("session")))
    return Trace(requests=reqs, provenance={"path": path}).check()

"""Energy ledger: seven component classes, three-state accelerators.

Components: accelerator, cpu, dram, link, nic, storage, other.
Accelerators follow idle/standby/active states; DRAM and links accrue
energy per byte moved; the rest draw constant wattage over the run.

State intervals are recorded with an explicit wattage so that profiled
per-op energy (when present) can replace active_w x duration without
breaking the audit identity: total = sum(watts x duration) +
sum(bytes x energy_per_byte) + sum(constant_w x makespan).
"""

from __future__ import annotations

from dataclasses import dataclass, field

COMPONENTS = ("accelerator", "cpu", "dram", "link", "nic", "storage", "other")

IDLE, ACTIVE, STANDBY = "idle", "active", "standby"
DEFAULT_STANDBY_TIMEOUT = 10.0


class LedgerError(RuntimeError):
    pass


@dataclass(frozen=True)
class StateInterval:
    device: str
    state: str
    start: float
    end: float
    watts: float


@dataclass(frozen=True)
class TransferRecord:
    component: str  # dram | link
    carrier: str
    bytes: int
    joules: float
    start: float
    end: float


@dataclass(frozen=True)
class ConstantDraw:
    component: str
    name: str
    watts: float


class EnergyLedger:
    def __init__(self):
        self.intervals: list[StateInterval] = []
        self.transfers: list[TransferRecord] = []
        self.constants: list[ConstantDraw] = []
        self.makespan: float = 0.0
        self._dev_intervals: dict[str, list[StateInterval]] = {}

    def register_constant(self, component: str, name: str, watts: float):
        if component not in COMPONENTS:
            raise LedgerError(f"unknown component '{component}'")
        self.constants.append(ConstantDraw(component, name, watts))

    def record_state(self, device: str, state: str, t_start: float,
                     t_end: float, watts: float):
        if t_end < t_start:
            raise LedgerError(f"{device}: interval end before start")
        if t_end == t_start:
            return
        iv = StateInterval(device, state, t_start, t_end, watts)
        self.intervals.append(iv)
        self._dev_intervals.setdefault(device, []).append(iv)

    def record_transfer(self, component: str, carrier: str, bytes_: int,
                        energy_per_byte: float, t_start: float, t_end: float):
        if bytes_ < 0:
            raise LedgerError("negative transfer bytes")
        self.transfers.append(TransferRecord(
            component, carrier, bytes_, bytes_ * energy_per_byte, t_start, t_end))

    def check_no_overlap(self):
        """Bug guard: per-device state intervals must tile without overlap."""
        for dev, ivs in self._dev_intervals.items():
            prev_end = None
            for iv in sorted(ivs, key=lambda i: (i.start, i.end)):
                if prev_end is not None and iv.start < prev_end - 1e-12:
                    raise LedgerError(f"{dev}: overlapping state intervals")
                prev_end = iv.end

    # -- totals ---------------------------------------------------------------

    def component_energy(self) -> dict[str, float]:
        out = {c: 0.0 for c in COMPONENTS}
        for iv in self.intervals:
            out["accelerator"] += iv.watts * (iv.end - iv.start)
        for tr in self.transfers:
            out[tr.component] += tr.joules
        for c in self.constants:
            out[c.component] += c.watts * self.makespan
        return out

    def total_energy(self) -> float:
        return sum(self.component_energy().values())

    def device_intervals(self, device: str) -> list[StateInterval]:
        return sorted(self._dev_intervals.get(device, []),
                      key=lambda i: (i.start, i.end))

    def merged_intervals(self, device: str, state: str) -> list[tuple[float, float]]:
        """Maximal intervals in `state`, merging touching segments."""
        out: list[list[float]] = []
        for iv in self.device_intervals(device):
            if iv.state != state:
                continue
            if out and iv.start <= out[-1][1] + 1e-12:
                out[-1][1] = max(out[-1][1], iv.end)
            else:
                out.append([iv.start, iv.end])
        return [(a, b) for a, b in out]

    # -- sampling ---------------------------------------------------------------

    def sample_power(self, t: float, window: float) -> dict[str, float]:
        """Average watts per component over [t - window, t]."""
        if window <= 0:
            raise LedgerError("window must be > 0")
        lo = t - window
        out = {c: 0.0 for c in COMPONENTS}
        for iv in self.intervals:
            ov = min(iv.end, t) - max(iv.start, lo)
            if ov > 0:
                out["accelerator"] += iv.watts * ov / window
        for tr in self.transfers:
            span = tr.end - tr.start
            if span <= 0:
                if lo < tr.end <= t:
                    out[tr.component] += tr.joules / window
                continue
            ov = min(tr.end, t) - max(tr.start, lo)
            if ov > 0:
                out[tr.component] += tr.joules * (ov / span) / window
        for c in self.constants:
            out[c.component] += c.watts
        return out

    def watts_per_token(self, total_tokens: int, duration: float) -> tuple[float, float]:
        """(mean watts, joules per token) over the run."""
        if total_tokens <= 0:
            raise LedgerError("watts_per_token undefined for zero tokens")
        total = self.total_energy()
        mean_w = total / duration if duration > 0 else 0.0
        return mean_w, total / total_tokens


def fill_gaps(ledger: EnergyLedger, device: str, idle_w: float, standby_w: float,
              busy_windows: list[tuple[float, float]], span: tuple[float, float],
              standby_timeout: float = DEFAULT_STANDBY_TIMEOUT):
    """Tile the simulation span around recorded active intervals.

    A gap is standby while the owning MSG still has pending or in-flight
    work (busy_windows) and for `standby_timeout` after work drains;
    idle afterwards.
    """

    def busy_at(t: float) -> bool:
        return any(a - 1e-12 <= t < b + 1e-12 for a, b in busy_windows)

    def last_busy_end_before(t: float) -> float:
        ends = [b for _, b in busy_windows if b <= t + 1e-12]
        return max(ends) if ends else float("-inf")

    active = ledger.merged_intervals(device, ACTIVE)
    edges = [span[0]]
    for a, b in active:
        edges.append(a)
        edges.append(b)
    edges.append(span[1])
    # gaps are [edges[0], edges[1]], [edges[2], edges[3]], ...
    for i in range(0, len(edges) - 1, 2):
        g0, g1 = edges[i], edges[i + 1]
        if g1 - g0 <= 1e-15:
            continue
        # split the gap at busy-window boundaries and the standby timeout
        cuts = {g0, g1}
        for a, b in busy_windows:
            for x in (a, b, b + standby_timeout):
                if g0 < x < g1:
                    cuts.add(x)
        if not busy_at(g0):
            x = last_busy_end_before(g0) + standby_timeout
            if g0 < x < g1:
                cuts.add(x)
        pts = sorted(cuts)
        for lo, hi in zip(pts, pts[1:]):
            mid = (lo + hi) / 2
            if busy_at(mid):
                state, w = STANDBY, standby_w
            elif mid - last_busy_end_before(mid) < standby_timeout:
                state, w = STANDBY, standby_w
            else:
                state, w = IDLE, idle_w
            ledger.record_state(device, state, lo, hi, w)

"""Load-balance and per-particle analyses over a finished :class:`RunTrace`."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from podsim.runtime import alternates
from podsim.trace import RunTrace, find_slowest_particle

BUSY = frozenset({"I", "BO", "A", "EO"})
BREAKDOWN_COLUMNS = ("out_of_bounds", "zero_velocity", "max_steps", "early_terminated")
BREAKDOWN_LABELS = ("Out of bounds", "Zero velocity", "Max steps", "Early terminated")


def _busy(include_comm: bool) -> frozenset:
    return BUSY | {"C"} if include_comm else BUSY


def _exact(x) -> Fraction:
    return Fraction(x)


def rank_participation(trace: RunTrace, t, include_comm: bool = False) -> float:
    """Fraction of ranks doing I/BO/A/EO work at instant ``t``.

    Intervals are half-open ``[start, end)``, except that ``t == total_time``
    looks at the interval ending there.
    """
    total = trace.total_time
    if t < 0 or t > total:
        raise ValueError(f"t={t} outside [0, {total}]")
    busy = _busy(include_comm)
    n = 0
    for r in range(trace.num_ranks):
        for e in trace.rank_events(r):
            if e.t_end == e.t_start:
                continue
            if e.t_start <= t < e.t_end or (t == total and e.t_end == total):
                n += e.category in busy
                break
    return n / trace.num_ranks


@dataclass
class ParticipationSeries:
    times: np.ndarray
    values: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "participation"))
        for t, v in zip(self.times, self.values):
            w.writerow((repr(float(t)), repr(float(v))))
        return buf.getvalue()


def participation_steps(trace: RunTrace, include_comm: bool = False):
    """Exact step function: breakpoints ``b`` and value on each ``[b[i], b[i+1])``."""
    busy = _busy(include_comm)
    delta = Counter()
    for e in trace.events:
        if e.category in busy and e.t_end > e.t_start:
            delta[e.t_start] += 1
            delta[e.t_end] -= 1
    points = sorted(set(delta) | {0, trace.total_time})
    values = []
    level = 0
    for p in points[:-1]:
        level += delta[p]
        values.append(Fraction(level, trace.num_ranks))
    return points, values


def participation_series(trace: RunTrace, samples: int = 1000,
                         include_comm: bool = False) -> ParticipationSeries:
    """``samples`` uniform samples of the participation step function."""
    if samples < 1:
        raise ValueError("need at least one sample")
    points, values = participation_steps(trace, include_comm)
    times = np.linspace(0.0, float(trace.total_time), samples)
    idx = np.searchsorted(np.asarray(points[:-1], dtype=float), times, side="right") - 1
    idx = np.clip(idx, 0, max(len(values) - 1, 0))
    vals = np.array([float(values[i]) for i in idx]) if values else np.zeros(samples)
    return ParticipationSeries(times, vals)


def aggregated_participation(trace: RunTrace, include_comm: bool = False) -> float:
    """Area under the participation curve over the run length (exact sums)."""
    total = _exact(trace.total_time)
    if total == 0:
        raise ValueError("zero-length run")
    busy = _busy(include_comm)
    area = sum((_exact(e.t_end) - _exact(e.t_start) for e in trace.events if e.category in busy),
               Fraction(0))
    return float(area / (trace.num_ranks * total))


def rank_busy_times(trace: RunTrace, include_comm: bool = False) -> list:
    busy = _busy(include_comm)
    out = [0] * trace.num_ranks
    for e in trace.events:
        if e.category in busy:
            out[e.rank] += e.t_end - e.t_start
    return out


def weak_scaling_efficiency(times: Mapping[int, float], base: int = None) -> dict:
    """``T(base) / T(N)`` for each N; ``base`` defaults to the smallest N."""
    if not times:
        raise ValueError("no timings")
    if base is None:
        base = min(times)
    if base not in times:
        raise ValueError(f"baseline N={base} missing from timings {sorted(times)}")
    t0 = times[base]
    out = {}
    for n in sorted(times):
        if not times[n] > 0:
            raise ValueError(f"non-positive time for N={n}")
        out[n] = 1.0 if n == base else t0 / times[n]
    return out


def termination_breakdown(stats) -> dict:
    """Fractions per reason, ordered as :data:`BREAKDOWN_COLUMNS`; they sum to 1."""
    if not stats:
        raise ValueError("no particles")
    counts = Counter(p.status for p in stats)
    unknown = set(counts) - set(BREAKDOWN_COLUMNS)
    if unknown:
        raise ValueError(f"particles still in state(s) {sorted(unknown)}")
    return {k: Fraction(counts[k], len(stats)) for k in BREAKDOWN_COLUMNS}


def breakdown_table(breakdown: Mapping[str, Fraction], digits: int = 1) -> str:
    """One header row and one data row of percentages, ``&``-separated."""
    head = " & ".join(BREAKDOWN_LABELS)
    row = " & ".join(f"{float(breakdown[k]) * 100:.{digits}f}" for k in BREAKDOWN_COLUMNS)
    return f"{head}\n{row}\n"


@dataclass
class ActiveSeries:
    edges: list
    terminated: dict  # reason -> count per bin
    survivors: list  # alive at the end of each bin

    def to_dict(self) -> dict:
        return {"edges": [float(e) for e in self.edges], "terminated": self.terminated,
                "survivors": self.survivors}


def active_particle_series(stats, bins: int, total_time=None) -> ActiveSeries:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not stats:
        raise ValueError("no particles")
    if total_time is None:
        total_time = max(p.termination_time for p in stats)
    total = _exact(total_time)
    per = {k: [0] * bins for k in BREAKDOWN_COLUMNS}
    for p in stats:
        if total == 0:
            i = bins - 1
        else:
            i = min(int(_exact(p.termination_time) * bins // total), bins - 1)
        per[p.status][i] += 1
    alive = len(stats)
    survivors = []
    for i in range(bins):
        alive -= sum(per[k][i] for k in BREAKDOWN_COLUMNS)
        survivors.append(alive)
    edges = [total * i / bins for i in range(bins + 1)]
    return ActiveSeries(edges, per, survivors)


@dataclass
class SlowestRow:
    particle_id: int
    n_p: int
    accumulated_group_size: int
    bo: float
    eo: float
    a: float
    c: float  # None when only merged CW is meaningful
    w: float
    cw: float
    unattributed: float
    t_p: float

    def to_dict(self) -> dict:
        return asdict(self)


def slowest_decomposition(stats, trace: RunTrace = None, split_cw: bool = None) -> SlowestRow:
    """Percent shares of the slowest particle's lifetime.

    C and W are reported separately for virtual-clock traces, merged as CW
    otherwise (``split_cw`` overrides).
    """
    p = find_slowest_particle(stats)
    if split_cw is None:
        split_cw = trace is None or trace.header.get("mode") == "deterministic"
    t_p = _exact(p.lifetime)
    if t_p == 0:
        raise ValueError(f"particle {p.id} has zero lifetime")

    def pct(x):
        return float(_exact(x) * 100 / t_p)

    parts = sum((_exact(p.times[k]) for k in ("BO", "EO", "A", "C", "W")), Fraction(0))
    return SlowestRow(p.id, p.n_visits, p.accumulated_group_size, pct(p.times["BO"]),
                      pct(p.times["EO"]), pct(p.times["A"]),
                      pct(p.times["C"]) if split_cw else None,
                      pct(p.times["W"]) if split_cw else None,
                      pct(p.times["C"] + p.times["W"]),
                      float((t_p - parts) * 100 / t_p), p.lifetime)


def ping_pong_in(block_ids: Sequence[int], window: int) -> bool:
    """Whether any stretch of the history alternates ``window`` times between two blocks."""
    if window < 2:
        raise ValueError("window must be >= 2")
    return any(alternates(block_ids[:k], window) for k in range(2 * window, len(block_ids) + 1))


def detect_ping_pong_particles(stats, window: int) -> set:
    return {p.id for p in stats if ping_pong_in(p.block_sequence, window)}


def ping_pong_pairs(stats, window: int) -> Counter:
    """Particles flagged per unordered block pair."""
    out = Counter()
    for p in stats:
        seq = p.block_sequence
        pairs = set()
        for k in range(2 * window, len(seq) + 1):
            if alternates(seq[:k], window):
                pairs.add(frozenset(seq[k - 2:k]))
        for pair in pairs:
            out[pair] += 1
    return out


@dataclass
class RunSummary:
    config_hash: str
    mode: str
    time_unit: str
    tick_seconds: float
    num_ranks: int
    num_particles: int
    total_time: float
    total_seconds: float
    aggregated_participation: float
    termination: dict
    slowest: dict
    active: dict
    ping_pong_window: int
    ping_pong_particles: int
    max_rank_busy: float
    rank_busy: list

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(trace: RunTrace, bins: int = 20, window: int = 3) -> RunSummary:
    stats = trace.particles
    br = termination_breakdown(stats)
    busy = rank_busy_times(trace)
    return RunSummary(
        config_hash=trace.header.get("config_hash", ""),
        mode=trace.header.get("mode", ""),
        time_unit=trace.header.get("time_unit", ""),
        tick_seconds=trace.tick_seconds,
        num_ranks=trace.num_ranks,
        num_particles=len(stats),
        total_time=trace.total_time,
        total_seconds=trace.seconds(trace.total_time),
        aggregated_participation=aggregated_participation(trace),
        termination={k: {"count": int(br[k] * len(stats)), "fraction": float(br[k])}
                     for k in BREAKDOWN_COLUMNS},
        slowest=slowest_decomposition(stats, trace).to_dict(),
        active=active_particle_series(stats, bins, trace.total_time).to_dict(),
        ping_pong_window=window,
        ping_pong_particles=len(detect_ping_pong_particles(stats, window)),
        max_rank_busy=max(busy),
        rank_busy=busy,
    )

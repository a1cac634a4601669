"""Instrumentation records for one run and their on-disk form.

On disk a run is two files:

``events.jsonl``
    Line 1 is the header object (``"type": "header"``) carrying the config
    echo and its hash, the scheduler mode, ``time_unit`` (``"tick"`` for
    virtual runs, ``"s"`` for wall-clock runs) and ``tick_seconds``.  Every
    following line is one ``"type": "event"`` record with keys in the order
    of :data:`EVENT_FIELDS`, or a ``"type": "tracked"`` record for the
    tracked particle.
``particles.csv``
    A ``# podsim-particles`` comment line with the config hash, a column
    header (:data:`PARTICLE_COLUMNS`), then one row per particle.  ``visits``
    is ``block:group_size`` pairs joined by ``;``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

from podsim.advect import CATEGORIES, Particle, Status

FORMAT_VERSION = 1
EVENT_CATEGORIES = ("I", "BO", "A", "EO", "C", "W")
EVENT_FIELDS = ("rank", "category", "t_start", "t_end", "round", "particles", "steps",
                "evals", "bundles_out", "bundles_in", "particles_out", "particles_in")
PARTICLE_COLUMNS = ("id", "status", "seed_time", "termination_time", "steps_taken", "n_visits",
                    "accumulated_group_size", "BO", "A", "EO", "C", "W", "x", "y", "z", "visits")


class OverlappingInterval(ValueError):
    pass


class TraceEvent(NamedTuple):
    rank: int
    category: str
    t_start: float
    t_end: float
    round: int = 0
    particles: int = 0
    steps: int = 0
    evals: int = 0
    bundles_out: int = 0
    bundles_in: int = 0
    particles_out: int = 0
    particles_in: int = 0

    @property
    def duration(self):
        return self.t_end - self.t_start


class RankCollector:
    """Per-rank event sink; only the owning worker writes to it."""

    def __init__(self, rank: int, enabled: bool = True):
        self.rank = rank
        self.enabled = enabled
        self.events = []
        self._last_end = None

    def record(self, category: str, t_start, t_end, round_index: int = 0, **payload):
        if not self.enabled:
            return
        if category not in EVENT_CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        if t_end < t_start:
            raise ValueError(f"interval ends before it starts: [{t_start}, {t_end}]")
        if self._last_end is not None and t_start < self._last_end:
            raise OverlappingInterval(
                f"rank {self.rank}: {category} starts at {t_start}, before previous end {self._last_end}")
        self.events.append(TraceEvent(self.rank, category, t_start, t_end, round_index, **payload))
        self._last_end = t_end


class TraceRecorder:
    """One collector per rank, merged at finalize."""

    def __init__(self, num_ranks: int, enabled: bool = True):
        self.collectors = [RankCollector(r, enabled) for r in range(num_ranks)]

    def record(self, rank: int, category: str, interval, **payload):
        t_start, t_end = interval
        self.collectors[rank].record(category, t_start, t_end, **payload)

    def events(self, rank: int = None) -> list:
        if rank is not None:
            return list(self.collectors[rank].events)
        out = []
        for c in self.collectors:
            out.extend(c.events)
        return out


@dataclass
class ParticleStats:
    id: int
    status: str
    seed_time: float
    termination_time: float
    steps_taken: int
    visits: list
    times: dict
    position: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_particle(cls, p: Particle) -> "ParticleStats":
        status = p.status.value if isinstance(p.status, Status) else str(p.status)
        return cls(p.id, status, p.seed_time, p.termination_time, p.steps_taken,
                   [(int(b), int(g)) for b, g in p.visit_history],
                   {k: p.accumulators[k] for k in CATEGORIES},
                   tuple(float(x) for x in p.position))

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def accumulated_group_size(self) -> int:
        return sum(g for _, g in self.visits)

    @property
    def block_sequence(self) -> list:
        return [b for b, _ in self.visits]

    @property
    def lifetime(self):
        return self.termination_time - self.seed_time

    @property
    def cw(self):
        return self.times["C"] + self.times["W"]


class TrackedRecord(NamedTuple):
    rank: int
    event: str
    timestamp: float
    block: int = -1


@dataclass
class TrackedParticleLog:
    """Per-rank timeline of one particle: seed/receive, begin/end of processing,
    send, terminate."""

    particle_id: int
    records: list = field(default_factory=list)

    def add(self, rank, event, timestamp, block=-1):
        self.records.append(TrackedRecord(rank, event, timestamp, block))

    @property
    def rank_sequence(self) -> list:
        return [r.rank for r in self.records if r.event == "begin"]


@dataclass
class RunTrace:
    header: dict
    events: list
    particles: list
    tracked: TrackedParticleLog = None

    @property
    def num_ranks(self) -> int:
        return int(self.header["num_ranks"])

    @property
    def total_time(self):
        return self.header["total_time"]

    @property
    def tick_seconds(self) -> float:
        return float(self.header.get("tick_seconds", 1.0))

    def seconds(self, t) -> float:
        return float(t) * self.tick_seconds

    def rank_events(self, rank: int) -> list:
        return [e for e in self.events if e.rank == rank]

    def rank_finish(self, rank: int):
        ev = self.rank_events(rank)
        return ev[-1].t_end if ev else 0

    def particle(self, pid: int) -> ParticleStats:
        for p in self.particles:
            if p.id == pid:
                return p
        raise KeyError(f"no particle {pid} in trace")


def find_slowest_particle(stats: Sequence[ParticleStats]) -> ParticleStats:
    """Latest terminator; ties go to the lowest id."""
    if not stats:
        raise ValueError("no particles")
    return min(stats, key=lambda p: (-p.termination_time, p.id))


# -- serialisation -------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def events_jsonl(trace: RunTrace) -> str:
    lines = [_dumps({"type": "header", **trace.header})]
    for e in trace.events:
        rec = {"type": "event"}
        rec.update(zip(EVENT_FIELDS, e))
        lines.append(_dumps(rec))
    if trace.tracked is not None:
        for r in trace.tracked.records:
            lines.append(_dumps({"type": "tracked", "particle": trace.tracked.particle_id,
                                 "rank": r.rank, "event": r.event, "timestamp": r.timestamp,
                                 "block": r.block}))
    return "\n".join(lines) + "\n"


def _num(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)


def particles_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    buf.write(f"# podsim-particles v{FORMAT_VERSION} config_hash={trace.header.get('config_hash', '')}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PARTICLE_COLUMNS)
    for p in sorted(trace.particles, key=lambda s: s.id):
        visits = ";".join(f"{b}:{g}" for b, g in p.visits)
        w.writerow([p.id, p.status, _num(p.seed_time), _num(p.termination_time), p.steps_taken,
                    p.n_visits, p.accumulated_group_size,
                    *(_num(p.times[k]) for k in CATEGORIES), *(_num(x) for x in p.position), visits])
    return buf.getvalue()


def serialize(trace: RunTrace, out_dir, formats=("jsonl", "csv")) -> list:
    """Write the trace under ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "jsonl" in formats:
        path = out / "events.jsonl"
        path.write_text(events_jsonl(trace))
        written.append(path)
    if "csv" in formats:
        path = out / "particles.csv"
        path.write_text(particles_csv(trace))
        written.append(path)
    return written


def _parse_num(s: str):
    if s in ("", "None"):
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


def load_events(path) -> tuple:
    header, events, tracked = None, [], None
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                header = rec
            elif kind == "event":
                events.append(TraceEvent(*(rec[k] for k in EVENT_FIELDS)))
            elif kind == "tracked":
                if tracked is None:
                    tracked = TrackedParticleLog(rec["particle"])
                tracked.add(rec["rank"], rec["event"], rec["timestamp"], rec["block"])
    if header is None:
        raise ValueError(f"{path}: missing header line")
    return header, events, tracked


def load_particles(path) -> list:
    out = []
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# podsim-particles"):
            raise ValueError(f"{path}: not a particle stats file")
        reader = csv.DictReader(fh)
        for row in reader:
            visits = []
            if row["visits"]:
                for item in row["visits"].split(";"):
                    b, g = item.split(":")
                    visits.append((int(b), int(g)))
            out.append(ParticleStats(
                int(row["id"]), row["status"], _parse_num(row["seed_time"]),
                _parse_num(row["termination_time"]), int(row["steps_taken"]), visits,
                {k: _parse_num(row[k]) for k in CATEGORIES},
                tuple(float(row[k]) for k in ("x", "y", "z"))))
    return out


def load(run_dir) -> RunTrace:
    run_dir = Path(run_dir)
    header, events, tracked = load_events(run_dir / "events.jsonl")
    particles = load_particles(run_dir / "particles.csv")
    return RunTrace(header, events, particles, tracked)

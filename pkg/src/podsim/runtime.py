"""The POD engine: ranks own blocks, advect what they hold, and ship exiting
particles to whoever owns the next block.

Two schedulers share one per-round routine (:meth:`_Engine.process_round`):

* ``deterministic`` is a single-threaded discrete-event simulation.  Work is
  charged from a :class:`CostModel` in integer ticks, so every interval and
  every per-particle accumulator is exact and runs are bit-reproducible.
* ``concurrent`` runs one thread per rank and times phases with
  ``time.perf_counter``.
"""

from __future__ import annotations

import copy
import enum
import heapq
import queue
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

from podsim.advect import Particle, Region, Status, Tolerances, advect_batch
from podsim.decomp import BlockAssignment, BlockLayout, modulo_policy
from podsim.field import GlobalDomain, GridBlock
from podsim.trace import ParticleStats, RunTrace, TraceRecorder, TrackedParticleLog


class SchedulerMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    CONCURRENT = "concurrent"


class Attribution(str, enum.Enum):
    """How batch-level BO/A/EO time is charged to the particles in the batch.

    ``equal``: BO and EO split evenly, A charged by the particle's own steps,
    the rest of the batch window counted as waiting.  ``group``: every member
    is charged the whole batch interval.
    """

    EQUAL = "equal"
    GROUP = "group"


class DeadlockError(RuntimeError):
    def __init__(self, lost: dict):
        self.lost = lost
        ids = sorted(lost)
        shown = ", ".join(f"{i}@block{lost[i]}" for i in ids[:20])
        more = "" if len(ids) <= 20 else f" (+{len(ids) - 20} more)"
        super().__init__(f"all ranks idle with {len(ids)} particles unaccounted: {shown}{more}")


@dataclass(frozen=True)
class CostModel:
    """Virtual costs in seconds; ``tick`` is the clock resolution."""

    cost_per_step: float = 1e-6
    cost_per_particle_bo: float = 5e-6
    cost_per_particle_eo: float = 2e-5
    cost_per_bundle_c: float = 1e-5
    cost_per_particle_init: float = 1e-7
    tick: float = 1e-9

    def __post_init__(self):
        for name in ("cost_per_step", "cost_per_particle_bo", "cost_per_particle_eo",
                     "cost_per_bundle_c", "cost_per_particle_init"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.tick > 0:
            raise ValueError("tick must be positive")

    def ticks(self, seconds: float) -> int:
        return int(round(seconds / self.tick))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PingPongPolicy:
    window: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"ping-pong window must be >= 2, got {self.window}")


@dataclass(frozen=True)
class EngineConfig:
    tolerances: Tolerances
    mode: SchedulerMode = SchedulerMode.DETERMINISTIC
    costs: CostModel = CostModel()
    ping_pong: PingPongPolicy = None
    trace_level: str = "full"  # "full" or "off"
    track: int = None
    attribution: Attribution = Attribution.EQUAL
    policy: Callable = modulo_policy

    def __post_init__(self):
        object.__setattr__(self, "mode", SchedulerMode(self.mode))
        object.__setattr__(self, "attribution", Attribution(self.attribution))
        if self.trace_level not in ("full", "off"):
            raise ValueError(f"trace_level must be 'full' or 'off', got {self.trace_level!r}")


def alternates(block_ids: Sequence[int], window: int) -> bool:
    """True iff the last ``2*window`` ids alternate strictly between two blocks."""
    n = 2 * window
    if len(block_ids) < n:
        return False
    tail = list(block_ids[-n:])
    a, b = tail[0], tail[1]
    if a == b:
        return False
    return tail[0::2] == [a] * window and tail[1::2] == [b] * window


def check_ping_pong(particle: Particle, policy: PingPongPolicy) -> bool:
    if policy is None or not policy.enabled:
        raise ValueError("ping-pong policy is not enabled")
    return alternates([b for b, _ in particle.visit_history], policy.window)


@dataclass
class ParticleBundle:
    source_rank: int
    dest_rank: int
    particles: list
    send_timestamp: float = 0

    def __post_init__(self):
        if not self.particles:
            raise ValueError("a bundle must carry at least one particle")


class Channels:
    """Unbounded FIFO channel per (source, dest) pair."""

    def __init__(self, num_ranks: int):
        self.num_ranks = num_ranks
        self._pending = [defaultdict(list) for _ in range(num_ranks)]

    def deliver(self, bundle: ParticleBundle):
        if not 0 <= bundle.dest_rank < self.num_ranks:
            raise ValueError(f"no rank {bundle.dest_rank} (have {self.num_ranks})")
        self._pending[bundle.dest_rank][bundle.source_rank].append(bundle)

    def receive(self, rank: int, until=None) -> list:
        """Pop every bundle for ``rank`` stamped at or before ``until``.

        Sources are visited in rank order; each source's order is kept.
        Never blocks: returns ``[]`` when nothing is ready.
        """
        out = []
        box = self._pending[rank]
        for src in sorted(box):
            chan = box[src]
            k = 0
            while k < len(chan) and (until is None or chan[k].send_timestamp <= until):
                k += 1
            out.extend(chan[:k])
            del chan[:k]
            if not chan:
                del box[src]
        return out

    def next_arrival(self, rank: int):
        stamps = [c[0].send_timestamp for c in self._pending[rank].values() if c]
        return min(stamps) if stamps else None

    def in_flight(self) -> int:
        return sum(len(c) for box in self._pending for c in box.values())

    def particles_in_flight(self) -> list:
        return [p for box in self._pending for c in box.values() for b in c for p in b.particles]


class TerminationCounter:
    """Particles still alive anywhere; only ever decreases."""

    def __init__(self, remaining: int):
        if remaining < 0:
            raise ValueError("counter starts non-negative")
        self.remaining = remaining
        self._lock = threading.Lock()

    def decrement(self, n: int = 1) -> int:
        if n < 0:
            raise ValueError("counter cannot increase")
        with self._lock:
            if n > self.remaining:
                raise RuntimeError(f"counter underflow: {n} > {self.remaining}")
            self.remaining -= n
            return self.remaining


class VirtualClock:
    def __init__(self, num_ranks: int):
        self.now = [0] * num_ranks

    def advance(self, rank: int, category: str, amount) -> int:
        if amount < 0:
            raise ValueError(f"negative {category} advance: {amount}")
        self.now[rank] += amount
        return self.now[rank]

    def set(self, rank: int, t):
        if t < self.now[rank]:
            raise ValueError(f"rank {rank} clock cannot go back from {self.now[rank]} to {t}")
        self.now[rank] = t

    @staticmethod
    def arrival(send_time, receiver_now):
        return max(send_time, receiver_now)


def advance_virtual_clock(clock: VirtualClock, rank: int, category: str, amount) -> int:
    return clock.advance(rank, category, amount)


@dataclass
class RankState:
    rank_id: int
    blocks: tuple
    queue: list = field(default_factory=list)
    round_index: int = 0
    counters: dict = field(default_factory=lambda: dict.fromkeys(
        ("rounds", "particles_processed", "particles_sent", "particles_received"), 0))
    # scheduler bookkeeping
    idle_since: float = None
    wake_at: float = None
    wake_gen: int = 0
    c_start: float = 0
    last_out: tuple = (0, 0)  # (bundles, particles) sent in the previous round


@dataclass
class RoundResult:
    t_eo: float  # end of EO, start of the send phase
    t_end: float  # end of the send phase
    bundles: list
    local: list
    terminated: int


class _Engine:
    def __init__(self, config: EngineConfig, blocks: Sequence[GridBlock], layout: BlockLayout,
                 assignment: BlockAssignment, seeds: Sequence[Particle], domain: GlobalDomain,
                 header: dict = None):
        if not seeds:
            raise ValueError("no seeds")
        if len(blocks) != layout.num_blocks:
            raise ValueError(f"layout has {layout.num_blocks} blocks, got {len(blocks)}")
        self.config = config
        self.tol = config.tolerances
        self.layout = layout
        self.assignment = assignment
        self.domain = domain
        self.num_ranks = assignment.num_ranks
        self.locate = layout.locator(domain)
        self.header_extra = dict(header or {})
        by_id = {b.block_id: b for b in blocks}
        self.regions = {}
        for bid in range(layout.num_blocks):
            group = assignment.group_of(bid)
            key = frozenset([bid]) if group is None else group
            if key not in self.regions:
                self.regions[key] = Region(by_id[m] for m in key)
        self.region_key = {bid: k for k in self.regions for bid in k}
        self.ranks = [RankState(r, tuple(assignment.blocks_on(r))) for r in range(self.num_ranks)]
        self.held = [set(s.blocks) for s in self.ranks]
        self.particles = [copy.deepcopy(p) for p in seeds]
        ids = [p.id for p in self.particles]
        if len(set(ids)) != len(ids):
            raise ValueError("particle ids must be unique")
        for p in self.particles:
            if not p.active:
                raise ValueError(f"seed {p.id} is not active")
            if not domain.contains(p.position):
                raise ValueError(f"seed {p.id} at {p.position} is outside the domain")
        self.counter = TerminationCounter(len(self.particles))
        self.recorder = TraceRecorder(self.num_ranks, config.trace_level != "off")
        self.tracked = None
        if config.track is not None:
            if config.track not in set(ids):
                raise KeyError(f"no particle {config.track} among the seeds")
            self.tracked = TrackedParticleLog(config.track)
        self._mark = {}

    # -- helpers ---------------------------------------------------------

    def destination(self, rank: int, part: Particle) -> tuple:
        b = self.locate(part.position)
        if b in self.held[rank]:
            return rank, b
        return self.assignment.route(b, part.id, self.config.policy), b

    def charge(self, part: Particle, category: str, until):
        part.accumulators[category] += until - self._mark[part.id]
        self._mark[part.id] = until

    def track(self, part, rank, event, t, block=-1):
        if self.tracked is not None and part.id == self.tracked.particle_id:
            self.tracked.add(rank, event, t, block)

    def seed_ranks(self):
        for p in self.particles:
            b = self.locate(p.position)
            p.block = b
            rank = self.assignment.route(b, p.id, self.config.policy)
            self.ranks[rank].queue.append(p)

    def init_rank(self, rank: int, t_start, t_end):
        state = self.ranks[rank]
        if t_end > t_start:
            self.recorder.record(rank, "I", (t_start, t_end), particles=len(state.queue))
        for p in state.queue:
            p.seed_time = t_end
            self._mark[p.id] = t_end
            self.track(p, rank, "seed", t_end, p.block)

    # -- one round -------------------------------------------------------

    def process_round(self, rank: int, t0, phase_end: Callable) -> RoundResult:
        """BO, A and EO for the rank's whole queue, starting at ``t0``.

        ``phase_end(category, t_start, **work)`` returns the phase end time.
        """
        state = self.ranks[rank]
        batch, state.queue = state.queue, []
        n = len(batch)
        state.round_index += 1
        state.counters["rounds"] += 1
        state.counters["particles_processed"] += n
        rnd = state.round_index

        t1 = phase_end("BO", t0, particles=n)
        by_region = defaultdict(list)
        for p in batch:
            key = self.region_key[self.locate(p.position)]
            by_region[key].append(p)
        before = {p.id: p.steps_taken + p.boundary_evals for p in batch}
        steps = evals = 0
        exited = []
        terminated = []
        for key in sorted(by_region, key=min):
            res = advect_batch(by_region[key], self.regions[key], self.domain, self.tol,
                               account_time=False, group_size=n)
            steps += res.steps_executed
            evals += res.boundary_evals
            exited.extend(p for p, _ in res.exited)
        for p in batch:
            if not p.active:
                terminated.append(p)
        t2 = phase_end("A", t1, steps=steps, evals=evals)

        outgoing = defaultdict(list)
        local = []
        pp = self.config.ping_pong
        for p in exited:
            if pp is not None and pp.enabled and check_ping_pong(p, pp):
                p.status = Status.EARLY_TERMINATED
                terminated.append(p)
                continue
            dest, _ = self.destination(rank, p)
            if dest == rank:
                local.append(p)
            else:
                outgoing[dest].append(p)
        t3 = phase_end("EO", t2, particles=n)
        n_sent = sum(len(v) for v in outgoing.values())

        self.recorder.record(rank, "BO", (t0, t1), round_index=rnd, particles=n)
        self.recorder.record(rank, "A", (t1, t2), round_index=rnd, particles=n, steps=steps,
                             evals=evals)
        self.recorder.record(rank, "EO", (t2, t3), round_index=rnd, particles=n,
                             bundles_out=len(outgoing), particles_out=n_sent)

        equal = self.config.attribution is Attribution.EQUAL
        total_work = max(steps + evals, 1)
        for p in batch:
            self.track(p, rank, "begin", t0, p.block)
            if equal:
                own = p.steps_taken + p.boundary_evals - before[p.id]
                bo = (t1 - t0) // n if isinstance(t0, int) else (t1 - t0) / n
                eo = (t3 - t2) // n if isinstance(t0, int) else (t3 - t2) / n
                if isinstance(t0, int):
                    a = self.config.costs.ticks(self.config.costs.cost_per_step) * own
                else:
                    a = (t2 - t1) * own / total_work
                m = self._mark[p.id]
                p.accumulators["BO"] += bo
                p.accumulators["A"] += a
                p.accumulators["EO"] += eo
                p.accumulators["W"] += (t3 - m) - bo - a - eo
                self._mark[p.id] = t3
            else:
                self.charge(p, "W", t0)
                self.charge(p, "BO", t1)
                self.charge(p, "A", t2)
                self.charge(p, "EO", t3)
            self.track(p, rank, "end", t3, p.block)
        for p in terminated:
            p.termination_time = t3
            self.track(p, rank, "terminate", t3, p.block)

        t4 = phase_end("C", t3, bundles=len(outgoing))
        bundles = []
        for dest in sorted(outgoing):
            parts = outgoing[dest]
            for p in parts:
                self.charge(p, "C", t4)
                self.track(p, rank, "send", t4, p.block)
            bundles.append(ParticleBundle(rank, dest, parts, t4))
        state.counters["particles_sent"] += n_sent
        state.queue = local
        return RoundResult(t3, t4, bundles, local, len(terminated))

    def accept(self, rank: int, bundles: list, t_recv, t_done):
        """Receive ``bundles`` at ``t_recv``; receive work ends at ``t_done``."""
        state = self.ranks[rank]
        for p in state.queue:
            self.charge(p, "C", t_done)
        for b in bundles:
            for p in b.particles:
                self.charge(p, "W", t_recv)
                self.charge(p, "C", t_done)
                self.track(p, rank, "receive", t_recv, p.block)
                state.queue.append(p)
                state.counters["particles_received"] += 1

    def finish(self, total_time, mode: str, time_unit: str, tick_seconds: float) -> RunTrace:
        lost = {p.id: p.block for p in self.particles if p.active}
        if lost or self.counter.remaining:
            raise DeadlockError(lost)
        header = {
            "format": 1,
            "mode": mode,
            "time_unit": time_unit,
            "tick_seconds": tick_seconds,
            "num_ranks": self.num_ranks,
            "num_particles": len(self.particles),
            "total_time": total_time,
            "attribution": self.config.attribution.value,
            "assignment": self.assignment.to_dict(),
            "rank_counters": [s.counters for s in self.ranks],
        }
        header.update(self.header_extra)
        events = sorted(self.recorder.events(), key=lambda e: (e.rank, e.t_start, e.t_end))
        stats = [ParticleStats.from_particle(p) for p in sorted(self.particles, key=lambda p: p.id)]
        return RunTrace(header, events, stats, self.tracked)


# -- deterministic scheduler --------------------------------------------------

_PROBE, _WAKE = 0, 1


def _run_virtual(eng: _Engine) -> RunTrace:
    costs = eng.config.costs
    c_step = costs.ticks(costs.cost_per_step)
    c_bo = costs.ticks(costs.cost_per_particle_bo)
    c_eo = costs.ticks(costs.cost_per_particle_eo)
    c_c = costs.ticks(costs.cost_per_bundle_c)
    c_init = costs.ticks(costs.cost_per_particle_init)
    clock = VirtualClock(eng.num_ranks)

    def phase_end(category, t_start, particles=0, steps=0, evals=0, bundles=0):
        amount = {"BO": c_bo * particles, "A": c_step * (steps + evals),
                  "EO": c_eo * particles, "C": c_c * bundles}[category]
        return t_start + amount

    heap = []
    seq = 0

    def push(t, rank, kind, gen=0):
        nonlocal seq
        heapq.heappush(heap, (t, rank, seq, kind, gen))
        seq += 1

    chans = Channels(eng.num_ranks)

    def deliver(bundle):
        chans.deliver(bundle)
        dest = eng.ranks[bundle.dest_rank]
        if dest.idle_since is not None:
            t = VirtualClock.arrival(bundle.send_timestamp, dest.idle_since)
            if dest.wake_at is None or t < dest.wake_at:
                dest.wake_gen += 1
                dest.wake_at = t
                push(t, dest.rank_id, _WAKE, dest.wake_gen)

    eng.seed_ranks()
    for r, state in enumerate(eng.ranks):
        t_init = c_init * len(state.queue)
        eng.init_rank(r, 0, t_init)
        clock.set(r, t_init)
        state.c_start = t_init
        push(t_init, r, _PROBE)

    while heap:
        t, r, _, kind, gen = heapq.heappop(heap)
        state = eng.ranks[r]
        if kind == _WAKE:
            if state.idle_since is None or gen != state.wake_gen:
                continue
            if t > state.idle_since:
                eng.recorder.record(r, "W", (state.idle_since, t), round_index=state.round_index)
            state.idle_since = state.wake_at = None
            state.c_start = t
        clock.set(r, t)
        bundles = chans.receive(r, until=t)
        t_done = phase_end("C", t, bundles=len(bundles))
        eng.accept(r, bundles, t, t_done)
        if t_done > state.c_start:
            n_in = sum(len(b.particles) for b in bundles)
            eng.recorder.record(r, "C", (state.c_start, t_done), round_index=state.round_index,
                                bundles_in=len(bundles), particles_in=n_in,
                                bundles_out=state.last_out[0], particles_out=state.last_out[1])
        state.last_out = (0, 0)
        clock.set(r, t_done)
        if state.queue:
            res = eng.process_round(r, t_done, phase_end)
            eng.counter.decrement(res.terminated)
            for b in res.bundles:
                deliver(b)
            state.last_out = (len(res.bundles), sum(len(b.particles) for b in res.bundles))
            state.c_start = res.t_eo
            clock.set(r, res.t_end)
            push(res.t_end, r, _PROBE)
        else:
            state.idle_since = t_done
            nxt = chans.next_arrival(r)
            if nxt is not None:
                state.wake_gen += 1
                state.wake_at = max(nxt, t_done)
                push(state.wake_at, r, _WAKE, state.wake_gen)

    if eng.counter.remaining:
        lost = {p.id: p.block for p in eng.particles if p.active}
        raise DeadlockError(lost)
    total = max(p.termination_time for p in eng.particles)
    for r, state in enumerate(eng.ranks):
        if state.idle_since is not None and total > state.idle_since:
            eng.recorder.record(r, "W", (state.idle_since, total), round_index=state.round_index)
    return eng.finish(total, SchedulerMode.DETERMINISTIC.value, "tick", costs.tick)


# -- concurrent scheduler -----------------------------------------------------

class _Shared:
    def __init__(self, n):
        self.lock = threading.Lock()
        self.inboxes = [queue.Queue() for _ in range(n)]
        self.in_flight = 0
        self.idle = 0
        self.done = False
        self.error = None

    def stop(self, error=None):
        with self.lock:
            if self.done:
                return
            self.done = True
            self.error = error
        for q in self.inboxes:
            q.put(None)


def _run_concurrent(eng: _Engine) -> RunTrace:
    n = eng.num_ranks
    sh = _Shared(n)
    origin = time.perf_counter()

    def now():
        return time.perf_counter() - origin

    def phase_end(category, t_start, **_):
        return now()

    eng.seed_ranks()
    if eng.counter.remaining == 0:
        raise ValueError("no seeds")

    def worker(r):
        state = eng.ranks[r]
        try:
            eng.init_rank(r, 0.0, now())
            state.c_start = now()
            stopping = False
            while True:
                bundles = []
                try:
                    while True:
                        item = sh.inboxes[r].get_nowait()
                        if item is None:
                            stopping = True
                            break
                        bundles.append(item)
                except queue.Empty:
                    pass
                if bundles:
                    with sh.lock:
                        sh.in_flight -= len(bundles)
                t_recv = now()
                eng.accept(r, bundles, t_recv, now())
                t_done = now()
                if t_done > state.c_start:
                    eng.recorder.record(r, "C", (state.c_start, t_done),
                                        round_index=state.round_index, bundles_in=len(bundles),
                                        particles_in=sum(len(b.particles) for b in bundles))
                if stopping:
                    return
                if state.queue:
                    t0 = now()
                    res = eng.process_round(r, t0, phase_end)
                    with sh.lock:
                        sh.in_flight += len(res.bundles)
                    for b in res.bundles:
                        sh.inboxes[b.dest_rank].put(b)
                    state.c_start = res.t_eo
                    if res.terminated and eng.counter.decrement(res.terminated) == 0:
                        sh.stop()
                    continue
                # idle
                with sh.lock:
                    sh.idle += 1
                    if (sh.idle == n and sh.in_flight == 0 and eng.counter.remaining > 0
                            and all(s.queue == [] for s in eng.ranks)):
                        deadlock = True
                    else:
                        deadlock = False
                if deadlock:
                    sh.stop(DeadlockError({p.id: p.block for p in eng.particles if p.active}))
                idle_since = now()
                item = sh.inboxes[r].get()
                t_wake = now()
                with sh.lock:
                    sh.idle -= 1
                eng.recorder.record(r, "W", (idle_since, t_wake), round_index=state.round_index)
                state.c_start = t_wake
                if item is None:
                    return
                with sh.lock:
                    sh.in_flight -= 1
                eng.accept(r, [item], t_wake, now())
                # pick up anything else in the next loop iteration
        except BaseException as exc:  # propagate to the caller
            sh.stop(exc)

    threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}") for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if sh.error is not None:
        raise sh.error
    total = max((e.t_end for e in eng.recorder.events()), default=0.0)
    total = max([total] + [p.termination_time for p in eng.particles if p.termination_time is not None])
    return eng.finish(total, SchedulerMode.CONCURRENT.value, "s", 1.0)


def run(config: EngineConfig, blocks: Sequence[GridBlock], layout: BlockLayout,
        assignment: BlockAssignment, seeds: Sequence[Particle], domain: GlobalDomain,
        header: dict = None) -> RunTrace:
    """Advect ``seeds`` to termination; the inputs are not modified."""
    eng = _Engine(config, blocks, layout, assignment, seeds, domain, header)
    if config.mode is SchedulerMode.DETERMINISTIC:
        return _run_virtual(eng)
    return _run_concurrent(eng)


def rerun_tracked(config: EngineConfig, blocks, layout, assignment, seeds, domain,
                  particle_id: int, header: dict = None) -> tuple:
    """Run again with ``particle_id`` tracked; returns ``(trace, log)``."""
    if particle_id not in {p.id for p in seeds}:
        raise KeyError(f"no particle {particle_id} among the seeds")
    cfg = EngineConfig(**{**{k: getattr(config, k) for k in config.__dataclass_fields__},
                          "track": particle_id})
    trace = run(cfg, blocks, layout, assignment, seeds, domain, header)
    return trace, trace.tracked

import numpy as np
import pytest

from podsim.advect import Particle, Tolerances
from podsim.decomp import BlockAssignment, BlockLayout, make_blocks
from podsim.field import AnalyticField, GlobalDomain
from podsim.runtime import EngineConfig, run
from podsim.trace import RunTrace, TraceEvent

UNIT = GlobalDomain((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@pytest.fixture
def unit_domain():
    return UNIT


def make_setup(field, splits=(1, 1, 1), dims=9, domain=UNIT):
    layout = BlockLayout(splits)
    blocks = make_blocks(field, layout, domain, (dims,) * 3)
    return layout, blocks, BlockAssignment.baseline(layout)


def particles_at(points, max_steps=1000, first_id=0):
    return [Particle(first_id + i, p, max_steps) for i, p in enumerate(points)]


def simulate(field, points, splits=(1, 1, 1), dims=9, max_steps=1000, assignment=None,
             domain=UNIT, **engine):
    layout, blocks, baseline = make_setup(field, splits, dims, domain)
    tol = engine.pop("tolerances", None) or Tolerances.defaults(blocks, domain)
    cfg = EngineConfig(tol, **engine)
    asg = assignment(baseline, layout) if callable(assignment) else baseline
    return run(cfg, blocks, layout, asg, particles_at(points, max_steps), domain)


def hand_trace(intervals, total, num_ranks=None) -> RunTrace:
    """Trace from ``(rank, category, start, end)`` tuples."""
    events = [TraceEvent(r, c, s, e) for r, c, s, e in intervals]
    n = num_ranks or 1 + max(r for r, *_ in intervals)
    header = {"num_ranks": n, "total_time": total, "mode": "deterministic",
              "time_unit": "tick", "tick_seconds": 1.0}
    return RunTrace(header, sorted(events, key=lambda e: (e.rank, e.t_start)), [])


def drift_field():
    return AnalyticField.outflow((1.0, 0.0, 0.0))


def random_points(n, seed=0, lo=0.05, hi=0.95):
    rng = np.random.default_rng(seed)
    return lo + (hi - lo) * rng.random((n, 3))


# one verdict line per acceptance criterion, echoed after the run
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podsim.field import AnalyticField
from podsim.metrics import (BREAKDOWN_COLUMNS, active_particle_series, aggregated_participation,
                            breakdown_table, detect_ping_pong_particles, ping_pong_in,
                            ping_pong_pairs, participation_series, participation_steps,
                            rank_busy_times, rank_participation, slowest_decomposition,
                            termination_breakdown, weak_scaling_efficiency)
from podsim.trace import ParticleStats

from conftest import drift_field, hand_trace, random_points, simulate

TWO_RANK = hand_trace([(0, "A", 0, 2), (1, "A", 0, 1), (1, "W", 1, 2)], total=2)


def stats(pid, status="max_steps", t_end=1, visits=()):
    return ParticleStats(pid, status, 0, t_end, 1, [(b, 1) for b in visits],
                         dict.fromkeys(("BO", "A", "EO", "C", "W"), 0))


def test_hand_trace_participation():
    assert rank_participation(TWO_RANK, 1.5) == 0.5
    assert rank_participation(TWO_RANK, 0.5) == 1.0
    assert aggregated_participation(TWO_RANK) == 0.75


def test_participation_at_run_end_uses_closing_interval():
    assert rank_participation(TWO_RANK, 2) == 0.5


def test_participation_time_outside_run():
    with pytest.raises(ValueError):
        rank_participation(TWO_RANK, 2.5)
    with pytest.raises(ValueError):
        rank_participation(TWO_RANK, -1)


def test_all_ranks_busy():
    tr = hand_trace([(r, "A", 0, 5) for r in range(4)], total=5)
    assert rank_participation(tr, 2) == 1.0
    assert aggregated_participation(tr) == 1.0


def test_one_of_four_busy():
    tr = hand_trace([(0, "A", 0, 5)] + [(r, "W", 0, 5) for r in (1, 2, 3)], total=5)
    assert rank_participation(tr, 2) == 0.25
    assert aggregated_participation(tr) == 0.25


@pytest.mark.parametrize("n", [2, 8, 64])
def test_one_busy_rank_gives_one_over_n(n):
    tr = hand_trace([(0, "BO", 0, 3), (0, "EO", 3, 7)], total=7, num_ranks=n)
    assert aggregated_participation(tr) == pytest.approx(1 / n, rel=1e-15)


def test_init_counts_and_comm_does_not():
    tr = hand_trace([(0, "I", 0, 1), (0, "C", 1, 2), (1, "W", 0, 2)], total=2)
    assert rank_participation(tr, 0.5) == 0.5
    assert rank_participation(tr, 1.5) == 0.0
    assert rank_participation(tr, 1.5, include_comm=True) == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.tuples(st.sampled_from(["I", "BO", "A", "EO", "C", "W"]),
                                   st.integers(1, 20)), min_size=1, max_size=8),
                min_size=1, max_size=5))
def test_aggregated_equals_mean_of_step_function(ranks):
    intervals = []
    ends = []
    for r, segs in enumerate(ranks):
        t = 0
        for cat, d in segs:
            intervals.append((r, cat, t, t + d))
            t += d
        ends.append(t)
    total = max(ends)
    tr = hand_trace(intervals, total)
    points, values = participation_steps(tr)
    assert all(0 <= v <= 1 for v in values)
    mean = sum((b - a) * v for a, b, v in zip(points, points[1:], values)) / Fraction(total)
    assert aggregated_participation(tr) == float(mean)
    for a, v in zip(points, values):
        assert rank_participation(tr, a) == float(v)
    series = participation_series(tr, 50)
    assert series.values.min() >= 0 and series.values.max() <= 1


def test_series_csv():
    text = participation_series(TWO_RANK, 3).to_csv().splitlines()
    assert text == ["t,participation", "0.0,1.0", "1.0,0.5", "2.0,0.5"]


def test_efficiency_examples():
    assert weak_scaling_efficiency({8: 10.0, 16: 20.0}) == {8: 1.0, 16: 0.5}
    assert weak_scaling_efficiency({8: 3.0, 16: 3.0, 32: 3.0}) == {8: 1.0, 16: 1.0, 32: 1.0}
    assert weak_scaling_efficiency({1: 7.0, 8: 14.0}, base=8)[8] == 1.0
    with pytest.raises(ValueError):
        weak_scaling_efficiency({16: 1.0, 32: 2.0}, base=8)
    with pytest.raises(ValueError):
        weak_scaling_efficiency({})


def test_breakdown_all_max_steps():
    br = termination_breakdown([stats(i) for i in range(7)])
    assert list(br) == list(BREAKDOWN_COLUMNS)
    assert [br[k] for k in BREAKDOWN_COLUMNS] == [0, 0, 1, 0]


def test_breakdown_sums_to_one_exactly():
    mix = ["out_of_bounds"] * 3 + ["zero_velocity"] * 5 + ["max_steps"] + ["early_terminated"] * 2
    br = termination_breakdown([stats(i, s) for i, s in enumerate(mix)])
    assert sum(br.values()) == 1
    assert br["zero_velocity"] == Fraction(5, 11)


def test_breakdown_table_columns():
    head, row = breakdown_table(termination_breakdown([stats(0, "out_of_bounds"),
                                                       stats(1, "zero_velocity")])).splitlines()
    assert head.split(" & ")[:3] == ["Out of bounds", "Zero velocity", "Max steps"]
    assert row.split(" & ") == ["50.0", "50.0", "0.0", "0.0"]


def test_breakdown_rejects_active_or_empty():
    with pytest.raises(ValueError):
        termination_breakdown([])
    with pytest.raises(ValueError):
        termination_breakdown([stats(0, "active")])


def test_sink_field_terminates_by_zero_velocity():
    sink = AnalyticField.sink((0.5, 0.5, 0.5), 10.0)
    tr = simulate(sink, random_points(60, 1, 0.3, 0.7), splits=(2, 2, 2), dims=9,
                  max_steps=100_000)
    assert termination_breakdown(tr.particles)["zero_velocity"] >= Fraction(95, 100)


def test_active_series_single_particle():
    s = active_particle_series([stats(0, "out_of_bounds", t_end=10)], bins=4, total_time=10)
    assert s.survivors == [1, 1, 1, 0]
    assert s.terminated["out_of_bounds"] == [0, 0, 0, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(BREAKDOWN_COLUMNS), st.integers(0, 100)), min_size=1,
                max_size=40), st.integers(1, 12))
def test_active_series_conserves_particles(rows, bins):
    ps = [stats(i, s, t) for i, (s, t) in enumerate(rows)]
    s = active_particle_series(ps, bins)
    assert sum(sum(v) for v in s.terminated.values()) == len(ps)
    assert s.survivors[-1] == 0
    assert all(a >= b for a, b in zip(s.survivors, s.survivors[1:]))
    with pytest.raises(ValueError):
        active_particle_series(ps, 0)


def test_slowest_single_rank_single_particle():
    swirl = AnalyticField.cylindrical("z", (0.5, 0.5, 0.5), 1.0)
    tr = simulate(swirl, [(0.7, 0.5, 0.5)], max_steps=500)
    row = slowest_decomposition(tr.particles, tr)
    assert row.n_p == 1
    assert row.a > 95
    assert row.unattributed == 0


def test_slowest_shares_match_cost_arithmetic():
    # particle crosses x=0.5 once: two rounds of BO, A and EO, two C phases, no wait
    tr = simulate(drift_field(), [(0.2, 0.5, 0.5)], splits=(2, 1, 1))
    p = tr.particles[0]
    (a0, a1) = [e for e in tr.events if e.category == "A"]
    work = a0.steps + a0.evals + a1.steps + a1.evals
    assert p.times == {"BO": 2 * 5000, "A": work * 1000, "EO": 2 * 20000, "C": 2 * 10000, "W": 0}
    assert p.lifetime == 10000 + work * 1000 + 40000 + 20000
    row = slowest_decomposition(tr.particles, tr)
    assert row.n_p == 2
    assert row.bo == pytest.approx(1e6 / p.lifetime)
    assert row.eo == pytest.approx(4e6 / p.lifetime)
    assert row.c == pytest.approx(2e6 / p.lifetime) and row.w == 0
    assert row.bo + row.eo + row.a + row.c + row.w == pytest.approx(100)


def test_concurrent_mode_merges_c_and_w():
    tr = simulate(drift_field(), [(0.2, 0.5, 0.5)], splits=(2, 1, 1), mode="concurrent")
    row = slowest_decomposition(tr.particles, tr)
    assert row.c is None and row.w is None and row.cw >= 0


def test_detect_examples():
    assert ping_pong_in([1, 2, 1, 2, 1, 2], 3)
    assert not ping_pong_in([1, 2, 1, 2, 1], 3)
    assert not ping_pong_in([4], 2)
    assert ping_pong_in([0, 5, 1, 2, 1, 2, 7], 2)
    with pytest.raises(ValueError):
        ping_pong_in([1, 2], 1)
    ps = [stats(0, visits=[1, 2, 1, 2, 1, 2]), stats(1, visits=[3]), stats(2, visits=[1, 2, 3, 2])]
    assert detect_ping_pong_particles(ps, 3) == {0}
    assert ping_pong_pairs(ps, 2) == {frozenset({1, 2}): 1}


def test_busy_times_per_rank():
    assert rank_busy_times(TWO_RANK) == [2, 1]

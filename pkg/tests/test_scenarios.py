import pytest

from podsim import metrics
from podsim.experiment import run_cell
from podsim.scenarios import PRESETS, VORTEX_BLOCKS, preset


@pytest.fixture(scope="module")
def vortex():
    return run_cell(preset("boundary_vortex"))


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("tornado")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_normalise(name):
    cfg = preset(name, ranks=2)
    assert cfg["ranks"] == [2]


def test_slowest_vortex_particle_spends_more_in_eo_than_bo(vortex):
    row = metrics.slowest_decomposition(vortex.particles, vortex)
    assert row.eo > row.bo
    assert row.unattributed == 0


def test_survivors_drop_then_hold(vortex):
    s = metrics.active_particle_series(vortex.particles, 20, vortex.total_time)
    n = len(vortex.particles)
    assert s.survivors[0] < n
    plateau = s.survivors[1:-1]
    assert max(plateau) - min(plateau) <= 0.05 * n
    assert min(plateau) > 0.3 * n


def test_vortex_lanes_dominate(vortex):
    busy = metrics.rank_busy_times(vortex)
    hot = min(busy[b] for b in VORTEX_BLOCKS)
    cold = max(b for r, b in enumerate(busy) if r not in VORTEX_BLOCKS)
    assert hot > 5 * cold


def test_sink_terminates_by_zero_velocity():
    tr = run_cell(preset("sink"))
    br = metrics.termination_breakdown(tr.particles)
    assert br["zero_velocity"] >= 0.95

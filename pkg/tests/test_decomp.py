import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podsim.decomp import (BlockAssignment, BlockLayout, OutsideDomainError, SeedKind, SeedSpec,
                           apply_duplication, apply_merge, generate_seed_set, generate_seeds,
                           make_blocks, make_layout, modulo_policy, owner_of, remove_duplication,
                           remove_merge)
from podsim.field import AnalyticField

from conftest import UNIT, drift_field, simulate

L222 = BlockLayout((2, 2, 2))


@pytest.mark.parametrize("n,splits", [(1, (1, 1, 1)), (2, (1, 1, 2)), (4, (1, 2, 2)),
                                      (8, (2, 2, 2)), (16, (2, 2, 4)), (32, (2, 4, 4)),
                                      (64, (4, 4, 4)), (128, (4, 4, 8)), (256, (4, 8, 8))])
def test_make_layout(n, splits):
    assert make_layout(n).splits == splits
    assert make_layout(n).num_blocks == n


@pytest.mark.parametrize("n", [0, 3, 12, -8])
def test_make_layout_rejects_non_powers_of_two(n):
    with pytest.raises(ValueError):
        make_layout(n)


def test_block_ids_round_trip():
    lay = BlockLayout((2, 3, 4))
    for b in range(lay.num_blocks):
        assert lay.block_id(*lay.block_index(b)) == b
    with pytest.raises(KeyError):
        lay.block_index(24)


def test_owner_of_first_octant():
    d = owner_of((0.25, 0.25, 0.25), L222, BlockAssignment.baseline(L222), UNIT)
    assert (d.target_rank, d.target_block) == (0, 0)


def test_owner_of_face_tie_goes_to_lower_id():
    asg = BlockAssignment.baseline(L222)
    assert owner_of((0.5, 0.25, 0.25), L222, asg, UNIT).target_block == 0
    assert owner_of((0.5, 0.5, 0.5), L222, asg, UNIT).target_block == 0
    assert owner_of((0.75, 0.5, 0.75), L222, asg, UNIT).target_block == 5


def test_owner_of_merged_group():
    asg = apply_merge(BlockAssignment.baseline(L222), {2, 3}, L222, host=3)
    d = owner_of((0.25, 0.75, 0.25), L222, asg, UNIT)
    assert d.target_block == 2 and d.target_rank == 3


def test_owner_of_outside_domain():
    with pytest.raises(OutsideDomainError):
        owner_of((1.01, 0.5, 0.5), L222, BlockAssignment.baseline(L222), UNIT)
    with pytest.raises(OutsideDomainError):
        L222.locator(UNIT)((0.5, -1e-12, 0.5))


@settings(max_examples=300, deadline=None)
@given(st.tuples(*[st.floats(0.0, 1.0)] * 3), st.sampled_from([1, 2, 4, 8, 16, 32]))
def test_owner_contains_point(p, n):
    lay = make_layout(n)
    d = owner_of(p, lay, BlockAssignment.baseline(lay), UNIT)
    lo, hi = lay.bounds(UNIT, d.target_block)
    assert np.all(lo <= p) and np.all(np.asarray(p) <= hi)
    assert lay.locator(UNIT)(p) == d.target_block


def test_owner_contains_10000_random_probes():
    lay = BlockLayout((4, 4, 8))
    asg = BlockAssignment.baseline(lay)
    find = lay.locator(UNIT)
    for p in np.random.default_rng(5).random((10_000, 3)):
        b = find(p)
        lo, hi = lay.bounds(UNIT, b)
        assert np.all(lo <= p) and np.all(p <= hi)
    assert owner_of(p, lay, asg, UNIT).target_block == b


def test_blocks_tile_domain_with_shared_faces():
    blocks = make_blocks(drift_field(), L222, UNIT, (5, 5, 5))
    assert np.array_equal(blocks[0].upper, [0.5, 0.5, 0.5])
    assert np.array_equal(blocks[4].origin, [0.5, 0.0, 0.0])
    assert np.array_equal(blocks[1].origin, [0.0, 0.0, 0.5])
    assert np.array_equal(blocks[7].upper, [1.0, 1.0, 1.0])
    vol = sum(np.prod(b.upper - b.origin) for b in blocks)
    assert vol == pytest.approx(1.0)


def test_per_block_random_counts_and_containment():
    spec = SeedSpec(SeedKind.PER_BLOCK_RANDOM, 5000, rng_seed=3)
    seeds = generate_seeds(spec, L222, UNIT)
    assert len(seeds) == 40_000
    assert [p.id for p in seeds] == list(range(40_000))
    find = L222.locator(UNIT)
    per_block = np.bincount([find(p.position) for p in seeds[:: 1]], minlength=8)
    assert np.all(per_block == 5000)


def test_seed_count_must_be_positive():
    with pytest.raises(ValueError):
        SeedSpec(SeedKind.PER_BLOCK_RANDOM, 0)


def test_degenerate_line():
    spec = SeedSpec(SeedKind.LINE, 7, start=(0.3, 0.3, 0.3), end=(0.3, 0.3, 0.3))
    assert all(np.array_equal(p.position, [0.3, 0.3, 0.3]) for p in generate_seeds(spec, L222, UNIT))


def test_line_endpoints():
    spec = SeedSpec(SeedKind.LINE, 5, start=(0, 0, 0), end=(1, 0.5, 0))
    pos = [p.position for p in generate_seeds(spec, L222, UNIT)]
    assert np.array_equal(pos[0], [0, 0, 0]) and np.array_equal(pos[-1], [1, 0.5, 0])


def test_box_fraction_half():
    spec = SeedSpec(SeedKind.BOX_FRACTION, 2000, rng_seed=9, fraction=0.5)
    pos = np.array([p.position for p in generate_seeds(spec, L222, UNIT)])
    assert np.all(pos >= 0.25) and np.all(pos <= 0.75)
    assert np.prod(pos.max(axis=0) - pos.min(axis=0)) <= 0.125


def test_box_fraction_per_block_and_center():
    spec = SeedSpec(SeedKind.BOX_FRACTION, 10, fraction=0.2, center=(0.3, 0.3, 0.3), per_block=True)
    pos = np.array([p.position for p in generate_seeds(spec, L222, UNIT)])
    assert len(pos) == 80
    assert np.all(np.abs(pos - 0.3) <= 0.1)


def test_box_fraction_outside_domain_rejected():
    spec = SeedSpec(SeedKind.BOX_FRACTION, 10, fraction=0.5, center=(0.95, 0.5, 0.5))
    with pytest.raises(ValueError, match="outside"):
        generate_seeds(spec, L222, UNIT)


def test_plane_seeds_lie_on_plane():
    spec = SeedSpec(SeedKind.PLANE, 50, origin=(0, 0, 0.5), u=(1, 0, 0), v=(0, 1, 0))
    pos = np.array([p.position for p in generate_seeds(spec, L222, UNIT)])
    assert np.all(pos[:, 2] == 0.5)


@pytest.mark.parametrize("kwargs", [dict(kind=SeedKind.BOX_FRACTION, count=3, fraction=0.0),
                                    dict(kind=SeedKind.LINE, count=3, start=(0, 0, 0)),
                                    dict(kind=SeedKind.PLANE, count=3, origin=(0, 0, 0))])
def test_seed_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SeedSpec(**kwargs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from(list(SeedKind)))
def test_seeding_is_reproducible(seed, kind):
    extra = {SeedKind.LINE: dict(start=(0, 0, 0), end=(1, 1, 1)),
             SeedKind.PLANE: dict(origin=(0, 0, 0), u=(1, 0, 0), v=(0, 0, 1))}.get(kind, {})
    spec = SeedSpec(kind, 20, rng_seed=seed, **extra)
    a = generate_seeds(spec, L222, UNIT)
    b = generate_seeds(spec, L222, UNIT)
    assert all(np.array_equal(p.position, q.position) for p, q in zip(a, b))
    assert all(UNIT.contains(p.position) for p in a)


def test_seed_set_ids_are_dense():
    specs = [SeedSpec(SeedKind.PER_BLOCK_RANDOM, 3), SeedSpec(SeedKind.BOX_FRACTION, 4)]
    seeds = generate_seed_set(specs, L222, UNIT, max_steps=77)
    assert [p.id for p in seeds] == list(range(28))
    assert {p.max_steps for p in seeds} == {77}


def test_duplicate_onto_all_ranks():
    asg = apply_duplication(BlockAssignment.baseline(L222), {7}, range(8))
    assert len(asg.replicas[7]) == 8
    assert asg.route(7, 13) == modulo_policy(13, asg.replicas[7]) == 5


def test_duplicate_nothing_is_identity():
    base = BlockAssignment.baseline(L222)
    assert apply_duplication(base, set(), range(8)) == base


def test_duplicate_rejects_empty_ranks():
    with pytest.raises(ValueError):
        apply_duplication(BlockAssignment.baseline(L222), {1}, [])


def test_duplicate_two_blocks_one_extra_per_rank():
    lay = make_layout(128)
    asg = apply_duplication(BlockAssignment.baseline(lay), {76, 77}, range(128))
    for r in range(128):
        on = asg.blocks_on(r)
        assert r in on and len(on) <= 2
    assert set(asg.replicas[76]) | set(asg.replicas[77]) == set(range(128))


def test_merge_routes_to_host():
    lay = make_layout(128)
    asg = apply_merge(BlockAssignment.baseline(lay), {45, 53}, lay, host=53)
    assert asg.route(45) == 53 and asg.route(53) == 53
    assert asg.blocks_on(53) == [45, 53]
    assert asg.blocks_on(45) == []


def test_merge_singleton_is_identity():
    base = BlockAssignment.baseline(L222)
    assert apply_merge(base, {3}, L222) == base


def test_merge_rejects_disconnected():
    with pytest.raises(ValueError, match="connected"):
        apply_merge(BlockAssignment.baseline(L222), {0, 3}, L222)


def test_overlays_do_not_stack():
    base = BlockAssignment.baseline(L222)
    dup = apply_duplication(base, {1}, range(8))
    with pytest.raises(ValueError):
        apply_merge(dup, {0, 1}, L222)
    merged = apply_merge(base, {0, 1}, L222)
    with pytest.raises(ValueError):
        apply_duplication(merged, {1}, range(8))


@settings(max_examples=50, deadline=None)
@given(st.sets(st.integers(0, 7), max_size=3), st.sets(st.integers(0, 7), min_size=1),
       st.integers(0, 7))
def test_removing_overlay_restores_routing(blocks, ranks, pid):
    base = BlockAssignment.baseline(L222)
    dup = remove_duplication(apply_duplication(base, blocks, ranks), blocks)
    merged = remove_merge(apply_merge(base, {0, 1, 3}, L222, host=pid), {0, 1, 3})
    for b in range(8):
        assert dup.route(b, pid) == merged.route(b, pid) == base.route(b, pid)


def test_merged_pair_sends_no_bundles():
    pts = [(0.1, 0.2 + 0.05 * i, 0.5) for i in range(6)]
    tr = simulate(drift_field(), pts, splits=(2, 1, 1),
                  assignment=lambda a, lay: apply_merge(a, {0, 1}, lay))
    assert sum(e.bundles_out for e in tr.events) == 0
    assert all(p.status == "out_of_bounds" for p in tr.particles)
    assert {b for p in tr.particles for b in p.block_sequence} == {0}


def test_duplicated_blocks_never_share_a_rank():
    asg = apply_duplication(BlockAssignment.baseline(L222), {0, 4}, range(8))
    for r in range(8):
        assert not {0, 4} <= set(asg.blocks_on(r))
    assert set(asg.replicas[0]) | set(asg.replicas[4]) == set(range(8))

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import generator_terms
from peripatric.ancestry import (
    AncestralState,
    EventKind,
    all_inner,
    ancestry_snapshots,
    collapse_time,
    event_catalogue,
    first_phi_time,
    make_state,
    one_colony,
    project_bar,
    simulate_ancestry,
    total_rate,
)
from peripatric.colony import ModelParams
from peripatric.errors import InvalidStateError

BASE = ModelParams(100, 0.1, 1, 1, 1)


@st.composite
def states(draw, max_n=6):
    n = draw(st.integers(1, max_n))
    total = draw(st.integers(1, n))
    occ = [0] * (n + 1)
    left = total
    while left:
        j = draw(st.integers(0, left))
        occ[j] += 1 if j else left
        left -= j if j else left
    k = draw(st.integers(sum(occ[1:]), sum(occ[1:]) + 5))
    return AncestralState(tuple(occ), k)


def test_state_validation():
    make_state((2, 1, 0, 0), 3)
    with pytest.raises(InvalidStateError):
        make_state((2, 1, 0), 3)  # three lineages but n = 2
    with pytest.raises(InvalidStateError):
        make_state((0, 2, 0), 1)  # two occupied colonies, one colony
    with pytest.raises(InvalidStateError):
        make_state((0, 0, 0), 0)


def test_project_bar():
    assert project_bar((2, 1, 1, 0, 0)) == (2, 2)
    assert project_bar(all_inner(4)) == (4, 0)
    assert project_bar((1, 2, 0, 0)) == (1, 2)


def test_catalogue_hand_table():
    # N=100, eps=0.1: m=10, up = 0.1, gamma_N = 0.01, fusion rate 0.03 at k=3
    got = {(e.kind, e.arg): (e.rate, e.successor) for e in event_catalogue(AncestralState((2, 1, 0, 0), 3), BASE)}
    table = {
        (EventKind.MAIN_COAL, 0): (2 / 99, ((1, 1, 0, 0), 3)),
        (EventKind.EXIT, 1): (0.1 * 2 * (1 / 11) * (10 / 11), ((1, 2, 0, 0), 4)),
        (EventKind.EXIT, 2): (0.1 * (1 / 11) ** 2, ((0, 1, 1, 0), 4)),
        (EventKind.ENTRY_NO_ANCESTOR_COAL, 1): (0.03 / 3 * 0.98, ((3, 0, 0, 0), 2)),
        (EventKind.ENTRY_WITH_ANCESTOR_COAL, 1): (0.03 / 3 * 0.02, ((2, 0, 0, 0), 2)),
        (EventKind.COLONY_BIRTH_SILENT, 0): (0.1 * (10 / 11) ** 2, ((2, 1, 0, 0), 4)),
        (EventKind.COLONY_DEATH_SILENT, 0): (0.03 * 2 / 3, ((2, 1, 0, 0), 2)),
    }
    assert got.keys() == table.keys()
    for key, (rate, (occ, k)) in table.items():
        assert got[key][0] == pytest.approx(rate, rel=1e-13)
        assert got[key][1] == AncestralState(occ, k)


def test_catalogue_small_examples():
    m = BASE.colony_size
    entries = event_catalogue(AncestralState(one_colony(2), 1), BASE)
    within = [e for e in entries if e.kind == EventKind.WITHIN_COLONY_COAL]
    assert len(within) == 1
    assert within[0].rate == pytest.approx(2 / (m - 1))
    assert within[0].successor.occ == (0, 1, 0)
    single = event_catalogue(AncestralState((1, 0), 2), BASE)
    assert not [e for e in single if e.kind == EventKind.MAIN_COAL and e.rate > 0]


@settings(max_examples=300, deadline=None)
@given(states(), st.sampled_from([(100, 0.1, 1, 1, 1), (1000, 0.05, 2.5, 0.5, 2.0), (50, 0.2, 0.3, 4, 1.3)]))
def test_catalogue_invariants(state, setup):
    params = ModelParams(*setup)
    entries = event_catalogue(state, params)
    oracle = generator_terms(state.occ, state.k, *setup)
    assert {(e.kind.name, e.arg) for e in entries} == oracle.keys()
    for e in entries:
        rate, occ, k = oracle[e.kind.name, e.arg]
        assert e.rate == rate
        assert e.rate > 0
        assert e.successor == AncestralState(occ, k)
        e.successor.validate()
        assert e.successor.lineages <= state.lineages


@settings(max_examples=100, deadline=None)
@given(states())
def test_frozen_catalogue_keeps_colony_count(state):
    for e in event_catalogue(state, BASE, freeze_colonies=True):
        assert e.kind not in (EventKind.COLONY_BIRTH_SILENT, EventKind.COLONY_DEATH_SILENT)
        assert e.successor.k == state.k


def test_total_rate_is_sum():
    state = AncestralState((2, 1, 0, 0), 3)
    assert total_rate(state, BASE) == pytest.approx(sum(e.rate for e in event_catalogue(state, BASE)))


def test_path_replay_and_monotone_lineages():
    params = ModelParams.from_eps_rule(1000, 1, 1)
    path = simulate_ancestry(params, all_inner(4), 5.0, np.random.default_rng(3), stop_at_mrca=False)
    states_ = path.states()
    for before, after, event in zip(states_, states_[1:], path.events):
        succ = {(e.kind, e.arg): e.successor for e in event_catalogue(before, params)}
        assert succ[event.kind, event.arg] == after
        assert after.lineages <= before.lineages
    assert np.all(np.diff(path.times) > 0)


def test_single_lineage_never_coalesces():
    params = ModelParams.from_eps_rule(1000, 1, 1)
    path = simulate_ancestry(params, all_inner(1), 20.0, np.random.default_rng(9))
    kinds = {e.kind for e in path.events}
    assert kinds <= {
        EventKind.EXIT,
        EventKind.ENTRY_NO_ANCESTOR_COAL,
        EventKind.COLONY_BIRTH_SILENT,
        EventKind.COLONY_DEATH_SILENT,
    }
    assert all(s.lineages == 1 for s in path.states())


def test_fixed_colony_count_and_csv():
    path = simulate_ancestry(BASE, (2, 1, 0, 0), 0.5, np.random.default_rng(0), colony_init=4)
    assert path.initial.k == 4
    buf = io.StringIO()
    path.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "time,event_kind,x0,x1,x2,x3,k"
    assert lines[1] == "0.0,initial,2,1,0,0,4"
    assert len(lines) == len(path.times) + 2
    with pytest.raises(InvalidStateError):
        simulate_ancestry(BASE, (0, 2, 0), 0.5, np.random.default_rng(0), colony_init=1)


def test_collapse_time_examples():
    params = ModelParams.from_eps_rule(10_000, 1, 1)
    path = simulate_ancestry(params, all_inner(3), 1.0, np.random.default_rng(0))
    assert collapse_time(path).time == 0.0
    rng = np.random.default_rng(1)
    times = []
    for _ in range(2000):
        path = simulate_ancestry(params, one_colony(2), 10.0, rng)
        first = next(e for e in path.events if e.kind == EventKind.WITHIN_COLONY_COAL or e.kind.is_phi)
        hit = collapse_time(path)
        if first.kind == EventKind.WITHIN_COLONY_COAL:
            assert hit.time == first.time
        times.append(hit.time)
    m = params.colony_size
    target = (m - 1) / (2 * params.N)
    assert abs(np.mean(times) - target) < 4 * target / math.sqrt(len(times))


def test_first_phi_time():
    params = ModelParams.from_eps_rule(1000, 1, 1)
    path = simulate_ancestry(params, all_inner(2), 10.0, np.random.default_rng(5))
    hit = first_phi_time(path)
    assert not hit.censored
    assert hit.time == next(e.time for e in path.events if e.kind.is_phi)


def test_snapshots_reproducible_and_blockwise():
    params = ModelParams.from_eps_rule(1000, 1, 1)
    full = ancestry_snapshots(params, all_inner(3), [0.2, 0.8], 40, seed=5)
    head = ancestry_snapshots(params, all_inner(3), [0.2, 0.8], 15, seed=5)
    tail = ancestry_snapshots(params, all_inner(3), [0.2, 0.8], 25, seed=5, start=15)
    assert np.array_equal(full.occ, np.concatenate([head.occ, tail.occ]))
    assert np.array_equal(full.k, np.concatenate([head.k, tail.k]))
    assert full.projected(0)[0].total <= 3

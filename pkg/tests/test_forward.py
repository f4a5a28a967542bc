import io

import numpy as np
import pytest

from peripatric.colony import ModelParams, stationary_pmf
from peripatric.errors import ParameterError
from peripatric.forward import (
    FISSION,
    FUSION,
    MORAN_COLONY,
    MORAN_MAIN,
    extract_ancestry,
    extract_ancestry_arrays,
    init_world,
    replay,
    run_forward,
)

SMALL = ModelParams.from_colony_size(60, 6, theta=2.0, gamma=1.0)
DEFAULT = ModelParams.from_colony_size(200, 20, theta=1.0, gamma=1.0)


def test_caps():
    with pytest.raises(ParameterError):
        init_world(ModelParams.from_colony_size(600, 20, 1, 1), np.random.default_rng(0))
    with pytest.raises(ParameterError):
        init_world(ModelParams.from_colony_size(300, 30, 1, 1), np.random.default_rng(0))


def test_init_world_reproducible():
    a, _ = init_world(SMALL, np.random.default_rng(4), burn_in=0)
    b, _ = init_world(SMALL, np.random.default_rng(4), burn_in=0)
    assert a.same_as(b)
    a, log = init_world(SMALL, np.random.default_rng(4), burn_in=30.0)
    a.check_invariants()
    assert a.clock == 0.0 and len(log) == 0


def test_init_world_colony_count_law():
    pmf = stationary_pmf(DEFAULT)
    rng = np.random.default_rng(0)
    ks = [init_world(DEFAULT, rng, burn_in=0)[0].k for _ in range(1000)]
    assert abs(np.mean(ks) - pmf.mean()) < 3 * np.sqrt(pmf.var() / len(ks))
    tiny = ModelParams.from_colony_size(200, 20, theta=1e-12, gamma=1.0)
    assert init_world(tiny, rng, burn_in=0)[0].k == 0


def test_replay_reproduces_world():
    rng = np.random.default_rng(1)
    world, _ = init_world(SMALL, rng, burn_in=10.0)
    start = world.copy()
    log = run_forward(world, 40.0, rng)
    world.check_invariants()
    assert {FISSION, FUSION, MORAN_MAIN, MORAN_COLONY} <= set(log.kinds.tolist())
    assert replay(start, log).same_as(world)
    # every prefix of the log keeps subpopulation sizes fixed
    cut = len(log) // 3
    prefix = type(log)(log.start, float(log.times[cut]), log.times[:cut], log.kinds[:cut], log.colony[:cut],
                       log.a[:cut], log.b[:cut], log.c[:cut], log.payload)
    replay(start, prefix).check_invariants()


def test_fusion_restores_sizes():
    rng = np.random.default_rng(2)
    world, _ = init_world(SMALL, rng, burn_in=0)
    log = run_forward(world, 60.0, rng)
    fusions = [ev for ev in log.records() if ev.kind == "Fusion"]
    assert fusions
    for ev in fusions:
        assert len(ev.members) == len(ev.killed) == SMALL.colony_size
    world.check_invariants()


def test_tiny_horizon_is_empty():
    rng = np.random.default_rng(3)
    world, _ = init_world(SMALL, rng, burn_in=0)
    assert len(run_forward(world, 1e-12, rng)) == 0
    with pytest.raises(ValueError):
        run_forward(world, 0.0, rng)


def test_long_run_colony_marginal():
    rng = np.random.default_rng(6)
    world, _ = init_world(DEFAULT, rng, burn_in=0)
    pmf = stationary_pmf(DEFAULT)
    horizon = 60_000.0
    log = run_forward(world, horizon, rng)
    # rebuild the colony-count path from fission and fusion records
    colony_events = (log.kinds == FISSION) | (log.kinds == FUSION)
    steps = np.where(log.kinds[colony_events] == FISSION, 1, -1)
    k0 = world.k - steps.sum()
    times = np.append(0.0, log.times[colony_events])
    counts = np.append(k0, k0 + np.cumsum(steps))
    hold = np.diff(np.append(times, horizon))
    occ = np.bincount(counts, weights=hold, minlength=pmf.probs.size) / horizon
    size = max(occ.size, pmf.probs.size)
    tv = 0.5 * np.abs(np.pad(occ, (0, size - occ.size)) - np.pad(pmf.probs, (0, size - pmf.probs.size))).sum()
    assert tv < 0.05


def test_log_dump_format():
    rng = np.random.default_rng(8)
    world, _ = init_world(SMALL, rng, burn_in=0)
    log = run_forward(world, 30.0, rng)
    buf = io.StringIO()
    log.write(buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == len(log)
    for line, ev in zip(lines, log.records()):
        fields = line.split()
        assert float(fields[0]) == ev.time
        if ev.kind == "MoranMain":
            assert fields[1] == "MoranMain" and len(fields) == 5
        elif ev.kind == "Fusion":
            assert fields[1] == f"Fusion({ev.colony})" and "|" in fields


def test_extract_single_and_last_moran_pair():
    rng = np.random.default_rng(9)
    world, _ = init_world(SMALL, rng, burn_in=0)
    log = run_forward(world, 20.0, rng)
    states = extract_ancestry(log, world, [int(world.main[0])], [0.0, 5.0, 20.0])
    assert all(s.lineages == 1 for s in states)
    # the final event's parent and child are both alive at the end
    assert log.kinds[-1] in (MORAN_MAIN, MORAN_COLONY)
    lag = world.clock - float(log.times[-1])
    earlier = world.clock - 0.5 * float(log.times[-1] + log.times[-2])
    before, after = extract_ancestry(log, world, [int(log.a[-1]), int(log.b[-1])], [lag / 2, earlier])
    assert before.lineages == 2
    assert after.lineages == 1


def test_extract_errors_and_monotone():
    rng = np.random.default_rng(10)
    world, _ = init_world(SMALL, rng, burn_in=0)
    log = run_forward(world, 50.0, rng)
    with pytest.raises(KeyError):
        extract_ancestry(log, world, [-5], [1.0])
    with pytest.raises(ValueError):
        extract_ancestry(log, world, [int(world.main[0])], [60.0])
    sample = rng.choice(world.main, 5, replace=False)
    lookback = np.linspace(0, 50, 26)
    occ, ks = extract_ancestry_arrays(log, world, sample, lookback[::-1])
    totals = occ[:, 0] + (occ[:, 1:] * np.arange(1, occ.shape[1])).sum(axis=1)
    assert np.all(np.diff(totals[::-1]) <= 0)
    assert ks[-1] == world.k

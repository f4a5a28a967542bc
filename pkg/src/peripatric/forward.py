"""Individual-based forward model, used as an independent check on the backward chain.

Every individual carries a unique integer id. Within the main population and
within each colony, each individual reproduces at rate 1 and its offspring
replaces a uniformly chosen other member of the same subpopulation. New
colonies are founded at rate ``N theta_N`` by ``eps N`` offspring of a
uniformly chosen main-population founder. Colonies fuse at total rate
``gamma_N k**alpha``: a uniform colony joins the main population and ``eps N``
of the pooled ``(1 + eps) N`` individuals are culled uniformly.

Only small worlds are allowed; this is an oracle, not a production path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numba as nb
import numpy as np

from peripatric._rng import as_generator
from peripatric.ancestry import AncestralState
from peripatric.colony import ModelParams, sample_stationary, stationary_pmf
from peripatric.errors import EventCapExceeded, ParameterError

MAX_N = 500
MAX_COLONY_SIZE = 25

MORAN_MAIN, MORAN_COLONY, FISSION, FUSION = 0, 1, 2, 3
_KIND_NAMES = {MORAN_MAIN: "MoranMain", MORAN_COLONY: "MoranColony", FISSION: "Fission", FUSION: "Fusion"}

# kernel exit codes
_DONE, _LOG_FULL, _CAP, _NO_SLOT = 0, 1, 2, 3


@dataclass(eq=False)
class WorldState:
    params: ModelParams
    main: np.ndarray
    colonies: dict = field(default_factory=dict)
    clock: float = 0.0
    next_id: int = 0
    next_colony: int = 0

    @property
    def k(self) -> int:
        return len(self.colonies)

    def copy(self) -> "WorldState":
        return WorldState(
            self.params,
            self.main.copy(),
            {c: ids.copy() for c, ids in self.colonies.items()},
            self.clock,
            self.next_id,
            self.next_colony,
        )

    def locations(self) -> dict:
        """Map individual id -> ``-1`` for the main population or its colony id."""
        loc = {int(i): -1 for i in self.main}
        for c, ids in self.colonies.items():
            for i in ids:
                loc[int(i)] = c
        return loc

    def check_invariants(self):
        m = self.params.colony_size
        if self.main.size != self.params.N:
            raise AssertionError(f"main population has {self.main.size} individuals")
        for c, ids in self.colonies.items():
            if ids.size != m:
                raise AssertionError(f"colony {c} has {ids.size} individuals, expected {m}")
        all_ids = np.concatenate([self.main, *self.colonies.values()])
        if np.unique(all_ids).size != all_ids.size:
            raise AssertionError("duplicate individual ids")

    def same_as(self, other: "WorldState") -> bool:
        if set(self.main.tolist()) != set(other.main.tolist()):
            return False
        if self.colonies.keys() != other.colonies.keys():
            return False
        return all(set(v.tolist()) == set(other.colonies[c].tolist()) for c, v in self.colonies.items())


class ForwardEvent(NamedTuple):
    time: float
    kind: str
    colony: int  # -1 for the main population
    parent_child: tuple  # (parent, child) pairs
    killed: tuple
    members: tuple  # colony members at a fusion


@dataclass(eq=False)
class ForwardEventLog:
    """Append-only event record in array form.

    For Moran events ``a, b, c`` are parent, child and killed ids. For a
    fission ``a`` is the founder and the children are ``b .. b+c-1``. For a
    fusion ``b`` indexes ``payload``, which holds the ``c`` colony members
    followed by the ``c`` culled ids.
    """

    start: float
    end: float
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    kinds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int8))
    colony: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    a: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    b: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    c: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    payload: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self):
        return self.times.size

    def extend(self, other: "ForwardEventLog"):
        if other.start != self.end:
            raise ValueError("logs must be contiguous in time")
        shift = self.payload.size
        b = other.b.copy()
        b[other.kinds == FUSION] += shift
        self.times = np.concatenate([self.times, other.times])
        self.kinds = np.concatenate([self.kinds, other.kinds])
        self.colony = np.concatenate([self.colony, other.colony])
        self.a = np.concatenate([self.a, other.a])
        self.b = np.concatenate([self.b, b])
        self.c = np.concatenate([self.c, other.c])
        self.payload = np.concatenate([self.payload, other.payload])
        self.end = other.end

    def records(self):
        for i in range(len(self)):
            kind = int(self.kinds[i])
            t, col, a, b, c = float(self.times[i]), int(self.colony[i]), int(self.a[i]), int(self.b[i]), int(self.c[i])
            if kind in (MORAN_MAIN, MORAN_COLONY):
                yield ForwardEvent(t, _KIND_NAMES[kind], col, ((a, b),), (c,), ())
            elif kind == FISSION:
                yield ForwardEvent(t, "Fission", col, tuple((a, x) for x in range(b, b + c)), (), ())
            else:
                members = tuple(int(x) for x in self.payload[b : b + c])
                killed = tuple(int(x) for x in self.payload[b + c : b + 2 * c])
                yield ForwardEvent(t, "Fusion", col, (), killed, members)

    def write(self, fh):
        """One event per line: ``time kind payload-ids``.

        ``MoranMain parent child killed``; ``MoranColony(c) parent child killed``;
        ``Fission(c) founder child...``; ``Fusion(c) member... | killed...``.
        """
        for ev in self.records():
            head = f"{ev.time!r} {ev.kind}" if ev.colony < 0 else f"{ev.time!r} {ev.kind}({ev.colony})"
            if ev.kind.startswith("Moran"):
                (p, ch), = ev.parent_child
                body = f"{p} {ch} {ev.killed[0]}"
            elif ev.kind == "Fission":
                body = " ".join([str(ev.parent_child[0][0])] + [str(ch) for _, ch in ev.parent_child])
            else:
                body = " ".join(map(str, ev.members)) + " | " + " ".join(map(str, ev.killed))
            fh.write(f"{head} {body}\n")


# --- kernel -------------------------------------------------------------------


@nb.njit(cache=True)
def _forward_chunk(
    rng, fstate, istate, main, members, col_id, active, free,
    horizon, max_events, up, gamma_N, alpha, record,
    ev_t, ev_kind, ev_col, ev_a, ev_b, ev_c, payload,
):
    # fstate = [clock]; istate = [k, next_id, next_colony, n_free, events]
    N = main.shape[0]
    m = members.shape[1]
    t = fstate[0]
    k = istate[0]
    next_id = istate[1]
    next_col = istate[2]
    n_free = istate[3]
    n_ev = istate[4]
    written = 0
    p_written = 0
    status = _DONE
    pool = np.empty(N + m, dtype=np.int64)
    while True:
        if record and (written == ev_t.shape[0] or p_written + 2 * m > payload.shape[0]):
            status = _LOG_FULL
            break
        if n_free == 0:
            status = _NO_SLOT
            break
        r_main = float(N)
        r_col = float(k * m)
        r_fus = gamma_N * float(k) ** alpha if k > 0 else 0.0
        total = r_main + r_col + up + r_fus
        t_next = t + rng.standard_exponential() / total
        if t_next > horizon:
            t = horizon
            break
        if n_ev >= max_events:
            status = _CAP
            break
        t = t_next
        n_ev += 1
        u = rng.random() * total
        if u < r_main:
            parent = rng.integers(0, N)
            victim = rng.integers(0, N - 1)
            if victim >= parent:
                victim += 1
            killed = main[victim]
            child = next_id
            next_id += 1
            main[victim] = child
            if record:
                ev_t[written] = t
                ev_kind[written] = MORAN_MAIN
                ev_col[written] = -1
                ev_a[written] = main[parent]
                ev_b[written] = child
                ev_c[written] = killed
                written += 1
        elif u < r_main + r_col:
            slot = active[rng.integers(0, k)]
            parent = rng.integers(0, m)
            victim = rng.integers(0, m - 1)
            if victim >= parent:
                victim += 1
            killed = members[slot, victim]
            child = next_id
            next_id += 1
            members[slot, victim] = child
            if record:
                ev_t[written] = t
                ev_kind[written] = MORAN_COLONY
                ev_col[written] = col_id[slot]
                ev_a[written] = members[slot, parent]
                ev_b[written] = child
                ev_c[written] = killed
                written += 1
        elif u < r_main + r_col + up:
            founder = main[rng.integers(0, N)]
            n_free -= 1
            slot = free[n_free]
            active[k] = slot
            k += 1
            for i in range(m):
                members[slot, i] = next_id + i
            col_id[slot] = next_col
            if record:
                ev_t[written] = t
                ev_kind[written] = FISSION
                ev_col[written] = next_col
                ev_a[written] = founder
                ev_b[written] = next_id
                ev_c[written] = m
                written += 1
            next_id += m
            next_col += 1
        else:
            pos = rng.integers(0, k)
            slot = active[pos]
            for i in range(N):
                pool[i] = main[i]
            for i in range(m):
                pool[N + i] = members[slot, i]
            for i in range(m):
                j = rng.integers(i, N + m)
                tmp = pool[i]
                pool[i] = pool[j]
                pool[j] = tmp
            for i in range(N):
                main[i] = pool[m + i]
            if record:
                ev_t[written] = t
                ev_kind[written] = FUSION
                ev_col[written] = col_id[slot]
                ev_a[written] = -1
                ev_b[written] = p_written
                ev_c[written] = m
                written += 1
                for i in range(m):
                    payload[p_written + i] = members[slot, i]
                    payload[p_written + m + i] = pool[i]
                p_written += 2 * m
            active[pos] = active[k - 1]
            k -= 1
            free[n_free] = slot
            n_free += 1
    fstate[0] = t
    istate[0] = k
    istate[1] = next_id
    istate[2] = next_col
    istate[3] = n_free
    istate[4] = n_ev
    return written, p_written, status


class _Packed:
    """Kernel-side arrays for a world; grows the colony table on demand."""

    def __init__(self, world: WorldState, capacity: int):
        m = world.params.colony_size
        capacity = max(capacity, world.k + 8)
        self.main = world.main.astype(np.int64).copy()
        self.members = np.zeros((capacity, m), dtype=np.int64)
        self.col_id = np.full(capacity, -1, dtype=np.int64)
        self.active = np.zeros(capacity, dtype=np.int64)
        for slot, (c, ids) in enumerate(world.colonies.items()):
            self.members[slot] = ids
            self.col_id[slot] = c
            self.active[slot] = slot
        k = world.k
        self.free = np.arange(capacity - 1, k - 1, -1, dtype=np.int64)
        self.free = np.concatenate([self.free, np.zeros(k, dtype=np.int64)])
        self.fstate = np.array([world.clock])
        self.istate = np.array([k, world.next_id, world.next_colony, capacity - k, 0], dtype=np.int64)

    def grow(self):
        old = self.members.shape[0]
        new = 2 * old
        members = np.zeros((new, self.members.shape[1]), dtype=np.int64)
        members[:old] = self.members
        col_id = np.full(new, -1, dtype=np.int64)
        col_id[:old] = self.col_id
        active = np.zeros(new, dtype=np.int64)
        active[:old] = self.active
        free = np.zeros(new, dtype=np.int64)
        n_free = int(self.istate[3])
        extra = np.arange(new - 1, old - 1, -1, dtype=np.int64)
        free[: extra.size] = extra
        free[extra.size : extra.size + n_free] = self.free[:n_free]
        self.members, self.col_id, self.active, self.free = members, col_id, active, free
        self.istate[3] = n_free + extra.size

    def unpack_into(self, world: WorldState):
        k = int(self.istate[0])
        slots = self.active[:k]
        world.main = self.main.copy()
        world.colonies = {int(self.col_id[s]): self.members[s].copy() for s in sorted(slots, key=lambda s: self.col_id[s])}
        world.clock = float(self.fstate[0])
        world.next_id = int(self.istate[1])
        world.next_colony = int(self.istate[2])


def _check_caps(params: ModelParams, max_N: int):
    if params.N > max_N:
        raise ParameterError(f"forward simulation is limited to N <= {max_N}, got N={params.N}")
    if params.colony_size > MAX_COLONY_SIZE:
        raise ParameterError(f"forward simulation is limited to eps*N <= {MAX_COLONY_SIZE}, got {params.colony_size}")


def _advance(world: WorldState, horizon: float, rng, record: bool, max_events: int):
    params = world.params
    m = params.colony_size
    up = params.immigration_rate
    end = world.clock + horizon
    k_typ = max(world.k, params.typical_colonies)
    packed = _Packed(world, capacity=2 * k_typ + 16)
    rate = params.N + k_typ * m + up + params.gamma_N * k_typ**params.alpha
    size = int(min(1.2 * rate * horizon + 1024, 1 << 22)) if record else 1
    log = ForwardEventLog(world.clock, world.clock)
    while True:
        chunk_start = float(packed.fstate[0])
        buffers = (
            np.empty(size),
            np.empty(size, dtype=np.int8),
            np.empty(size, dtype=np.int64),
            np.empty(size, dtype=np.int64),
            np.empty(size, dtype=np.int64),
            np.empty(size, dtype=np.int64),
            np.empty(max(size // 4, 2 * m) if record else 1, dtype=np.int64),
        )
        written, p_written, status = _forward_chunk(
            rng, packed.fstate, packed.istate, packed.main, packed.members, packed.col_id,
            packed.active, packed.free, end, max_events, up, params.gamma_N, float(params.alpha),
            record, *buffers,
        )
        if record:
            t, kd, col, a, b, c, pay = buffers
            log.extend(
                ForwardEventLog(
                    chunk_start, float(packed.fstate[0]), t[:written].copy(), kd[:written].copy(),
                    col[:written].copy(), a[:written].copy(), b[:written].copy(), c[:written].copy(),
                    pay[:p_written].copy(),
                )
            )
        if status == _CAP:
            raise EventCapExceeded(f"forward run exceeded {max_events} events")
        if status == _NO_SLOT:
            packed.grow()
        elif status == _DONE:
            break
    packed.unpack_into(world)
    world.clock = end
    log.end = end
    return log


def init_world(params: ModelParams, rng, burn_in: float | None = None, max_N: int = MAX_N):
    """Fresh world with a stationary colony count, relaxed for ``burn_in`` time units.

    ``burn_in`` defaults to ``5 N``. The returned log is empty and the clock
    is reset to 0.
    """
    _check_caps(params, max_N)
    rng = as_generator(rng)
    burn_in = 5.0 * params.N if burn_in is None else float(burn_in)
    if burn_in < 0:
        raise ValueError("burn_in must be non-negative")
    N, m = params.N, params.colony_size
    k0 = sample_stationary(stationary_pmf(params), rng)
    world = WorldState(params, np.arange(N, dtype=np.int64))
    next_id = N
    for c in range(k0):
        world.colonies[c] = np.arange(next_id, next_id + m, dtype=np.int64)
        next_id += m
    world.next_id = next_id
    world.next_colony = k0
    if burn_in > 0:
        _advance(world, burn_in, rng, record=False, max_events=10**9)
    world.clock = 0.0
    return world, ForwardEventLog(0.0, 0.0)


def run_forward(world: WorldState, horizon: float, rng, max_events: int = 10**8) -> ForwardEventLog:
    """Advance ``world`` in place by ``horizon`` and return the events."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    _check_caps(world.params, max(MAX_N, world.params.N))
    return _advance(world, float(horizon), as_generator(rng), record=True, max_events=max_events)


def replay(initial: WorldState, log: ForwardEventLog) -> WorldState:
    """Rebuild the final world from ``initial`` and the log alone."""
    world = initial.copy()
    main = {int(i): None for i in world.main}
    colonies = {c: {int(i): None for i in ids} for c, ids in world.colonies.items()}
    for ev in log.records():
        if ev.kind == "MoranMain":
            (_, child), = ev.parent_child
            del main[ev.killed[0]]
            main[child] = None
        elif ev.kind == "MoranColony":
            (_, child), = ev.parent_child
            del colonies[ev.colony][ev.killed[0]]
            colonies[ev.colony][child] = None
        elif ev.kind == "Fission":
            colonies[ev.colony] = {child: None for _, child in ev.parent_child}
        else:
            pool = {**main, **colonies.pop(ev.colony)}
            for dead in ev.killed:
                del pool[dead]
            main = pool
    world.main = np.array(sorted(main), dtype=np.int64)
    world.colonies = {c: np.array(sorted(ids), dtype=np.int64) for c, ids in sorted(colonies.items())}
    world.clock = log.end
    return world


# --- backward extraction ---------------------------------------------------------


@nb.njit(cache=True)
def _record(occ_out, k_out, q, lin_loc, alive, k):
    n = lin_loc.shape[0]
    for j in range(occ_out.shape[1]):
        occ_out[q, j] = 0
    for i in range(n):
        if not alive[i]:
            continue
        if lin_loc[i] < 0:
            occ_out[q, 0] += 1
            continue
        first = True
        for h in range(i):
            if alive[h] and lin_loc[h] == lin_loc[i]:
                first = False
                break
        if first:
            size = 0
            for h in range(n):
                if alive[h] and lin_loc[h] == lin_loc[i]:
                    size += 1
            occ_out[q, size] += 1
    k_out[q] = k


@nb.njit(cache=True)
def _extract(ev_t, ev_kind, ev_col, ev_a, ev_b, ev_c, payload, lin_id, lin_loc, k, query, occ_out, k_out):
    # query: absolute clock times, sorted in decreasing order
    n = lin_id.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    q = 0
    n_q = query.shape[0]
    for e in range(ev_t.shape[0] - 1, -1, -1):
        while q < n_q and query[q] >= ev_t[e]:
            _record(occ_out, k_out, q, lin_loc, alive, k)
            q += 1
        if q == n_q:
            return
        kind = ev_kind[e]
        if kind == MORAN_MAIN or kind == MORAN_COLONY:
            child = ev_b[e]
            parent = ev_a[e]
            for i in range(n):
                if alive[i] and lin_id[i] == child:
                    lin_id[i] = parent
                    for h in range(n):
                        if h != i and alive[h] and lin_id[h] == parent:
                            alive[i] = False
                            break
                    break
        elif kind == FISSION:
            col = ev_col[e]
            founder = ev_a[e]
            keeper = -1
            for i in range(n):
                if alive[i] and lin_loc[i] < 0 and lin_id[i] == founder:
                    keeper = i
            for i in range(n):
                if alive[i] and lin_loc[i] == col:
                    if keeper < 0:
                        keeper = i
                        lin_id[i] = founder
                        lin_loc[i] = -1
                    else:
                        alive[i] = False
            k -= 1
        else:
            col = ev_col[e]
            start = ev_b[e]
            m = ev_c[e]
            for i in range(n):
                if alive[i] and lin_loc[i] < 0:
                    for h in range(start, start + m):
                        if payload[h] == lin_id[i]:
                            lin_loc[i] = col
                            break
            k += 1
    while q < n_q:
        _record(occ_out, k_out, q, lin_loc, alive, k)
        q += 1


def extract_ancestry_arrays(log: ForwardEventLog, world_final: WorldState, sample, lookback):
    """Occupancy ``(len(lookback), n+1)`` and colony counts at each look-back time."""
    sample = [int(s) for s in sample]
    if len(set(sample)) != len(sample) or not sample:
        raise ValueError("sample must be a non-empty set of distinct ids")
    locations = world_final.locations()
    unknown = [s for s in sample if s not in locations]
    if unknown:
        raise KeyError(f"ids not present in the final world: {unknown}")
    lookback = np.asarray(lookback, dtype=float)
    if np.any(lookback < 0) or np.any(lookback > log.end - log.start + 1e-9 * max(1.0, log.end)):
        raise ValueError("look-back times must lie within the span of the log")
    order = np.argsort(lookback, kind="stable")
    query = log.end - lookback[order]
    n = len(sample)
    occ = np.zeros((lookback.size, n + 1), dtype=np.int64)
    ks = np.zeros(lookback.size, dtype=np.int64)
    lin_id = np.array(sample, dtype=np.int64)
    lin_loc = np.array([locations[s] for s in sample], dtype=np.int64)
    _extract(log.times, log.kinds, log.colony, log.a, log.b, log.c, log.payload, lin_id, lin_loc, world_final.k, query, occ, ks)
    out_occ = np.empty_like(occ)
    out_k = np.empty_like(ks)
    out_occ[order] = occ
    out_k[order] = ks
    return out_occ, out_k


def extract_ancestry(log: ForwardEventLog, world_final: WorldState, sample, times) -> list[AncestralState]:
    """Ancestral states of ``sample`` at each look-back time (native time units)."""
    occ, ks = extract_ancestry_arrays(log, world_final, sample, times)
    return [AncestralState(tuple(int(x) for x in row), int(k)) for row, k in zip(occ, ks)]

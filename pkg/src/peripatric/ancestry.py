"""Backward ancestral chain of a sample in the finite-N metapopulation.

The state is the occupancy vector ``occ = (x0, x1, ..., xn)``: ``x0`` lineages
sit in the main population and ``xj`` colonies each hold ``j`` sampled
lineages. It is tracked jointly with the colony count ``k``. Rates below are
in the chain's native time; simulated paths are reported on the coalescent
scale, where every rate is multiplied by ``N``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numba as nb
import numpy as np

from peripatric._rng import as_generator, replicate_rng
from peripatric.coalescent import CensoredState
from peripatric.colony import ModelParams, TruncatedPMF, sample_stationary, stationary_pmf
from peripatric.errors import EventCapExceeded, InvalidStateError


class EventKind(enum.IntEnum):
    WITHIN_COLONY_COAL = 0
    MAIN_COAL = 1
    EXIT = 2
    ENTRY_NO_ANCESTOR_COAL = 3
    ENTRY_WITH_ANCESTOR_COAL = 4
    COLONY_BIRTH_SILENT = 5
    COLONY_DEATH_SILENT = 6

    @property
    def is_phi(self) -> bool:
        """Events that move lineages between the main population and colonies, or merge inner lineages."""
        return self in (
            EventKind.MAIN_COAL,
            EventKind.EXIT,
            EventKind.ENTRY_NO_ANCESTOR_COAL,
            EventKind.ENTRY_WITH_ANCESTOR_COAL,
        )


# numba-side copies of the kind codes
_WCC, _MC, _EXIT, _ENO, _EWITH, _BIRTH, _DEATH = range(7)


@dataclass(frozen=True)
class AncestralState:
    occ: tuple
    k: int

    @property
    def n(self) -> int:
        return len(self.occ) - 1

    @property
    def lineages(self) -> int:
        return sum(j * x for j, x in enumerate(self.occ)) + self.occ[0]

    @property
    def occupied(self) -> int:
        """Colonies carrying at least one sampled lineage."""
        return sum(self.occ[1:])

    @property
    def in_pi(self) -> bool:
        return all(x == 0 for x in self.occ[2:])

    def validate(self):
        if any(int(x) != x or x < 0 for x in self.occ) or self.k < 0:
            raise InvalidStateError(f"negative or non-integer entries in {self}")
        if not 1 <= self.lineages <= self.n:
            raise InvalidStateError(f"{self} carries {self.lineages} lineages; need 1..{self.n}")
        if self.occupied > self.k:
            raise InvalidStateError(f"{self} has {self.occupied} occupied colonies but k={self.k}")
        return self


def make_state(occ, k) -> AncestralState:
    return AncestralState(tuple(int(x) for x in occ), int(k)).validate()


def lineage_count(occ) -> int:
    return int(occ[0]) + sum(j * int(x) for j, x in enumerate(occ) if j >= 1)


def all_inner(n: int) -> tuple:
    return (n,) + (0,) * n


def one_colony(j: int, n: int | None = None) -> tuple:
    """Occupancy with ``j`` lineages sharing a single colony."""
    n = j if n is None else n
    occ = [0] * (n + 1)
    occ[j] = 1
    return tuple(occ)


def project_bar(occ) -> CensoredState:
    """Collapse an occupancy vector to ``(inner, occupied colonies)``."""
    occ = occ.occ if isinstance(occ, AncestralState) else occ
    return CensoredState(int(occ[0]), int(sum(occ[1:])))


# --- generator -------------------------------------------------------------


@nb.njit(cache=True)
def _comb(n, r):
    out = 1
    for i in range(1, r + 1):
        out = out * (n - r + i) // i
    return out


@nb.njit(cache=True)
def _catalogue(occ, k, N, m, eps, up, gamma_N, alpha, freeze, kinds, args, rates):
    """Fill the event table for ``(occ, k)``; returns the number of entries."""
    n = occ.shape[0] - 1
    x0 = occ[0]
    occupied = 0
    for j in range(1, n + 1):
        occupied += occ[j]
    c = 0
    for j in range(2, n + 1):
        if occ[j] > 0:
            kinds[c] = _WCC
            args[c] = j
            rates[c] = occ[j] * (j * (j - 1) // 2) * 2.0 / (m - 1)
            c += 1
    if x0 >= 2:
        kinds[c] = _MC
        args[c] = 0
        rates[c] = (x0 * (x0 - 1) // 2) * 2.0 / (N - 1)
        c += 1
    p_out = eps / (1.0 + eps)
    p_stay = 1.0 / (1.0 + eps)
    for r in range(1, x0 + 1):
        kinds[c] = _EXIT
        args[c] = r
        rates[c] = up * _comb(x0, r) * math.pow(p_out, float(r)) * math.pow(p_stay, float(x0 - r))
        c += 1
    if k > 0:
        fusion = gamma_N * math.pow(float(k), alpha)
        for j in range(1, n + 1):
            if occ[j] > 0:
                kinds[c] = _ENO
                args[c] = j
                rates[c] = fusion * (occ[j] / k) * (1.0 - x0 / N)
                c += 1
        if x0 > 0:
            for j in range(1, n + 1):
                if occ[j] > 0:
                    kinds[c] = _EWITH
                    args[c] = j
                    rates[c] = fusion * (occ[j] / k) * (x0 / N)
                    c += 1
    if not freeze:
        kinds[c] = _BIRTH
        args[c] = 0
        rates[c] = up * math.pow(p_stay, float(x0))
        c += 1
        if k > occupied:
            kinds[c] = _DEATH
            args[c] = 0
            rates[c] = gamma_N * math.pow(float(k), alpha) * (1.0 - occupied / k)
            c += 1
    return c


@nb.njit(cache=True)
def _apply(occ, k, kind, arg, freeze):
    """Apply one event to ``occ`` in place and return the new colony count."""
    if kind == _WCC:
        occ[arg] -= 1
        occ[arg - 1] += 1
    elif kind == _MC:
        occ[0] -= 1
    elif kind == _EXIT:
        occ[0] -= arg
        occ[arg] += 1
        if not freeze:
            k += 1
    elif kind == _ENO:
        occ[arg] -= 1
        occ[0] += 1
        if not freeze:
            k -= 1
    elif kind == _EWITH:
        occ[arg] -= 1
        if not freeze:
            k -= 1
    elif kind == _BIRTH:
        k += 1
    elif kind == _DEATH:
        k -= 1
    return k


def _kernel_args(params: ModelParams):
    return (
        params.N,
        params.colony_size,
        params.eps,
        params.immigration_rate,
        params.gamma_N,
        float(params.alpha),
    )


def _table_size(n):
    return 4 * n + 3


class CatalogueEntry(NamedTuple):
    kind: EventKind
    arg: int
    rate: float
    successor: AncestralState


def event_catalogue(state: AncestralState, params: ModelParams, freeze_colonies: bool = False):
    """Every transition out of ``state`` with its native-time rate and successor.

    Only transitions whose successor is a valid state are listed, so a
    kind with zero rate (for example main-population coalescence with a
    single inner lineage) is simply absent.
    """
    state.validate()
    occ = np.asarray(state.occ, dtype=np.int64)
    size = _table_size(state.n)
    kinds = np.empty(size, dtype=np.int64)
    args = np.empty(size, dtype=np.int64)
    rates = np.empty(size)
    count = _catalogue(occ, state.k, *_kernel_args(params), freeze_colonies, kinds, args, rates)
    entries = []
    for kind, arg, rate in zip(kinds[:count], args[:count], rates[:count]):
        nxt = occ.copy()
        k = _apply(nxt, state.k, int(kind), int(arg), freeze_colonies)
        entries.append(
            CatalogueEntry(EventKind(int(kind)), int(arg), float(rate), AncestralState(tuple(int(x) for x in nxt), int(k)))
        )
    return entries


def total_rate(state: AncestralState, params: ModelParams, freeze_colonies: bool = False) -> float:
    return math.fsum(e.rate for e in event_catalogue(state, params, freeze_colonies))


# --- simulation ------------------------------------------------------------


@nb.njit(cache=True)
def _draw(rng, occ, k, N, m, eps, up, gamma_N, alpha, freeze, kinds, args, rates):
    count = _catalogue(occ, k, N, m, eps, up, gamma_N, alpha, freeze, kinds, args, rates)
    total = 0.0
    for i in range(count):
        total += rates[i]
    # rescaled time: every rate is multiplied by N
    dt = rng.standard_exponential() / (total * N)
    u = rng.random() * total
    acc = 0.0
    pick = count - 1
    for i in range(count):
        acc += rates[i]
        if u < acc:
            pick = i
            break
    return dt, kinds[pick], args[pick]


@nb.njit(cache=True)
def _lineages(occ):
    total = occ[0]
    for j in range(1, occ.shape[0]):
        total += j * occ[j]
    return total


@nb.njit(cache=True)
def _ancestry_chunk(
    rng, occ, state, horizon, stop_at_mrca, max_events,
    N, m, eps, up, gamma_N, alpha, freeze,
    t_out, kind_out, arg_out,
):
    # state = [t, k, events]; occ and state are updated in place for resumption
    n = occ.shape[0] - 1
    size = 4 * n + 3
    kinds = np.empty(size, dtype=np.int64)
    args = np.empty(size, dtype=np.int64)
    rates = np.empty(size)
    t = state[0]
    k = int(state[1])
    n_ev = int(state[2])
    written = 0
    status = 0
    while True:
        if written == t_out.shape[0]:
            status = 1
            break
        dt, kind, arg = _draw(rng, occ, k, N, m, eps, up, gamma_N, alpha, freeze, kinds, args, rates)
        if t + dt > horizon:
            break
        if n_ev >= max_events:
            status = 2
            break
        before = _lineages(occ)
        t += dt
        k = _apply(occ, k, kind, arg, freeze)
        n_ev += 1
        t_out[written] = t
        kind_out[written] = kind
        arg_out[written] = arg
        written += 1
        if stop_at_mrca and before > 1 and _lineages(occ) == 1:
            break
    state[0] = t
    state[1] = k
    state[2] = n_ev
    return written, status


@nb.njit(cache=True)
def _in_pi(occ):
    for j in range(2, occ.shape[0]):
        if occ[j] > 0:
            return False
    return True


@nb.njit(cache=True)
def _ancestry_snapshots(
    rng, occ, k, horizon, snap_times, stop_when_collapsed, max_events,
    N, m, eps, up, gamma_N, alpha, freeze,
    snap_occ, snap_k, out,
):
    # out = [collapse time, first phi-event time, events]; inf marks "not seen"
    n = occ.shape[0] - 1
    size = 4 * n + 3
    kinds = np.empty(size, dtype=np.int64)
    args = np.empty(size, dtype=np.int64)
    rates = np.empty(size)
    n_snap = snap_times.shape[0]
    t = 0.0
    i = 0
    n_ev = 0
    collapse = 0.0 if _in_pi(occ) else np.inf
    sigma1 = np.inf
    while True:
        if stop_when_collapsed and collapse < np.inf and i == n_snap:
            break
        dt, kind, arg = _draw(rng, occ, k, N, m, eps, up, gamma_N, alpha, freeze, kinds, args, rates)
        t_next = t + dt
        while i < n_snap and snap_times[i] < t_next:
            for j in range(n + 1):
                snap_occ[i, j] = occ[j]
            snap_k[i] = k
            i += 1
        if t_next > horizon:
            break
        if n_ev >= max_events:
            out[2] = n_ev
            return 2
        t = t_next
        k = _apply(occ, k, kind, arg, freeze)
        n_ev += 1
        if sigma1 == np.inf and (kind == _MC or kind == _EXIT or kind == _ENO or kind == _EWITH):
            sigma1 = t
        if collapse == np.inf and _in_pi(occ):
            collapse = t
    out[0] = collapse
    out[1] = sigma1
    out[2] = n_ev
    return 0


def sample_initial_colonies(params: ModelParams, occupied: int, rng, pmf: TruncatedPMF | None = None, max_tries=100_000) -> int:
    """Stationary colony count conditioned on ``k >= occupied``, by rejection."""
    pmf = stationary_pmf(params) if pmf is None else pmf
    if pmf.probs[occupied:].sum() <= 0:
        raise InvalidStateError(f"stationary law puts no mass on k >= {occupied}")
    for _ in range(max_tries):
        k = sample_stationary(pmf, rng)
        if k >= occupied:
            return k
    raise EventCapExceeded(f"no stationary draw with k >= {occupied} in {max_tries} tries")


def _initial_k(params, occ, colony_init, rng, pmf):
    occupied = int(sum(occ[1:]))
    if colony_init == "stationary":
        return sample_initial_colonies(params, occupied, rng, pmf)
    k = int(colony_init)
    if k < occupied:
        raise InvalidStateError(f"fixed colony count {k} is below the {occupied} occupied colonies")
    return k


def _frozen_k(params, occ):
    return max(params.typical_colonies, int(sum(occ[1:])))


class AncestralEvent(NamedTuple):
    kind: EventKind
    arg: int
    time: float


@dataclass(frozen=True, eq=False)
class AncestralPath:
    """Event record of one backward path; times are on the coalescent scale."""

    initial: AncestralState
    times: np.ndarray
    kinds: np.ndarray
    args: np.ndarray
    horizon: float
    freeze_colonies: bool = False

    @property
    def events(self) -> list[AncestralEvent]:
        return [AncestralEvent(EventKind(int(a)), int(b), float(t)) for t, a, b in zip(self.times, self.kinds, self.args)]

    def states(self) -> list[AncestralState]:
        """Initial state followed by the state after each event."""
        occ = np.asarray(self.initial.occ, dtype=np.int64)
        k = self.initial.k
        out = [self.initial]
        for kind, arg in zip(self.kinds, self.args):
            k = _apply(occ, k, int(kind), int(arg), self.freeze_colonies)
            out.append(AncestralState(tuple(int(x) for x in occ), int(k)))
        return out

    def state_at(self, t: float) -> AncestralState:
        i = int(np.searchsorted(self.times, t, side="right"))
        return self.states()[i]

    def to_csv(self, fh):
        """Dump as ``time,event_kind,x0,...,xn,k``; the first row is the initial state."""
        writer = csv.writer(fh, lineterminator="\n")
        n = self.initial.n
        writer.writerow(["time", "event_kind"] + [f"x{j}" for j in range(n + 1)] + ["k"])
        states = self.states()
        writer.writerow([repr(0.0), "initial", *states[0].occ, states[0].k])
        for event, state in zip(self.events, states[1:]):
            label = event.kind.name if event.kind in (EventKind.MAIN_COAL, EventKind.COLONY_BIRTH_SILENT, EventKind.COLONY_DEATH_SILENT) else f"{event.kind.name}({event.arg})"
            writer.writerow([repr(event.time), label, *state.occ, state.k])


def simulate_ancestry(
    params: ModelParams,
    initial_occ,
    horizon_rescaled: float,
    rng,
    colony_init="stationary",
    max_events: int = 10**8,
    freeze_colonies: bool = False,
    stop_at_mrca: bool = True,
) -> AncestralPath:
    """Exact simulation of the ancestral chain from ``initial_occ``.

    ``colony_init`` is ``"stationary"`` or a fixed colony count. The path ends
    at ``horizon_rescaled`` or, with ``stop_at_mrca``, right after a
    coalescence leaves a single lineage. ``freeze_colonies`` pins ``k`` at its
    fluid-limit value and drops the silent colony events; it is an
    approximation meant only for quick large-N exploration.
    """
    if horizon_rescaled <= 0:
        raise ValueError("horizon must be positive")
    rng = as_generator(rng)
    occ0 = tuple(int(x) for x in initial_occ)
    k0 = _frozen_k(params, occ0) if freeze_colonies else _initial_k(params, occ0, colony_init, rng, None)
    initial = make_state(occ0, k0)
    occ = np.asarray(initial.occ, dtype=np.int64)
    state = np.array([0.0, float(k0), 0.0])
    times, kinds, args = [], [], []
    chunk = 1024
    while True:
        t_buf = np.empty(chunk)
        k_buf = np.empty(chunk, dtype=np.int64)
        a_buf = np.empty(chunk, dtype=np.int64)
        written, status = _ancestry_chunk(
            rng, occ, state, horizon_rescaled, stop_at_mrca, max_events,
            *_kernel_args(params), freeze_colonies, t_buf, k_buf, a_buf,
        )
        times.append(t_buf[:written])
        kinds.append(k_buf[:written])
        args.append(a_buf[:written])
        if status == 2:
            raise EventCapExceeded(f"ancestral path exceeded {max_events} events")
        if status == 0:
            break
        chunk = min(chunk * 4, 1 << 22)
    return AncestralPath(
        initial,
        np.concatenate(times),
        np.concatenate(kinds).astype(np.int8),
        np.concatenate(args),
        float(horizon_rescaled),
        freeze_colonies,
    )


class HittingTime(NamedTuple):
    time: float
    censored: bool


def collapse_time(path: AncestralPath) -> HittingTime:
    """First time the path has no colony holding two or more sampled lineages."""
    if path.initial.in_pi:
        return HittingTime(0.0, False)
    for event, state in zip(path.events, path.states()[1:]):
        if state.in_pi:
            return HittingTime(event.time, False)
    return HittingTime(path.horizon, True)


def first_phi_time(path: AncestralPath) -> HittingTime:
    """First main-population coalescence, exit or entry; reported, not tested against a target."""
    for event in path.events:
        if event.kind.is_phi:
            return HittingTime(event.time, False)
    return HittingTime(path.horizon, True)


@dataclass(frozen=True, eq=False)
class SnapshotBatch:
    """Replicate summaries from :func:`ancestry_snapshots`."""

    times: np.ndarray
    occ: np.ndarray  # (replicates, len(times), n + 1)
    k: np.ndarray  # (replicates, len(times))
    collapse: np.ndarray
    sigma1: np.ndarray
    n_events: np.ndarray

    def projected(self, ti: int) -> list[CensoredState]:
        occ = self.occ[:, ti, :]
        return [CensoredState(int(a), int(b)) for a, b in zip(occ[:, 0], occ[:, 1:].sum(axis=1))]


def ancestry_snapshots(
    params: ModelParams,
    initial_occ,
    times,
    replicates: int,
    seed: int,
    stream: int = 0,
    start: int = 0,
    colony_init="stationary",
    horizon: float | None = None,
    stop_when_collapsed: bool = False,
    freeze_colonies: bool = False,
    max_events: int = 10**8,
) -> SnapshotBatch:
    """Run replicates ``start .. start+replicates-1`` and record their states at ``times``.

    Snapshot times are on the coalescent scale. The run continues through
    the most recent common ancestor, since the projected chain keeps moving
    after it. With ``stop_when_collapsed`` a replicate ends as soon as all
    snapshots are taken and the collapse time is known.
    """
    snap = np.asarray(times, dtype=float)
    if snap.size and (np.any(np.diff(snap) < 0) or snap[0] < 0):
        raise ValueError("snapshot times must be sorted and non-negative")
    if horizon is None:
        horizon = float(snap[-1]) if snap.size else np.inf
    if not stop_when_collapsed and not np.isfinite(horizon):
        raise ValueError("an unbounded run needs stop_when_collapsed")
    occ0 = tuple(int(x) for x in initial_occ)
    n = len(occ0) - 1
    kargs = _kernel_args(params)
    pmf = stationary_pmf(params)
    out_occ = np.zeros((replicates, snap.size, n + 1), dtype=np.int64)
    out_k = np.zeros((replicates, snap.size), dtype=np.int64)
    summary = np.zeros((replicates, 3))
    for i in range(replicates):
        rng = replicate_rng(seed, stream, start + i)
        if freeze_colonies:
            k0 = _frozen_k(params, occ0)
        else:
            k0 = _initial_k(params, occ0, colony_init, rng, pmf)
        occ = np.asarray(make_state(occ0, k0).occ, dtype=np.int64)
        status = _ancestry_snapshots(
            rng, occ, k0, horizon, snap, stop_when_collapsed, max_events,
            *kargs, freeze_colonies, out_occ[i], out_k[i], summary[i],
        )
        if status == 2:
            raise EventCapExceeded(f"replicate {start + i} exceeded {max_events} events")
    return SnapshotBatch(snap, out_occ, out_k, summary[:, 0], summary[:, 1], summary[:, 2].astype(np.int64))

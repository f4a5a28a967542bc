"""Limiting genealogies: the two-state censored coalescent and its Kingman limit.

In the censored coalescent each lineage is either inner (main population) or
outer (alone in a colony). Inner lineages turn outer at rate ``theta``, outer
lineages turn inner at rate ``theta * (gamma/theta)**(1/alpha)``, and every
ordered pair of inner lineages coalesces at rate 1, i.e. ``r0 (r0 - 1)`` in
total. States are ``(r0, r1)`` with ``1 <= r0 + r1 <= n``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numba as nb
import numpy as np

from peripatric._rng import as_generator, replicate_rng
from peripatric.errors import DegenerateGeneratorError, EventCapExceeded, InvalidStateError


class CensoredState(NamedTuple):
    r0: int
    r1: int

    @property
    def total(self) -> int:
        return self.r0 + self.r1

    def label(self) -> str:
        return f"({self.r0},{self.r1})"


def enumerate_states(n: int) -> list[CensoredState]:
    """All states with ``1 <= r0 + r1 <= n``, by total descending then r0 descending."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [CensoredState(r0, total - r0) for total in range(n, 0, -1) for r0 in range(total, -1, -1)]


def check_censored_state(state, n: int) -> CensoredState:
    state = CensoredState(int(state[0]), int(state[1]))
    if state.r0 < 0 or state.r1 < 0 or not 1 <= state.total <= n:
        raise InvalidStateError(f"{state} is not a censored state for sample size {n}")
    return state


def outer_to_inner_rate(theta: float, gamma: float, alpha: float) -> float:
    return theta * (gamma / theta) ** (1.0 / alpha)


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Generator of a finite-state chain over an explicit state list."""

    states: tuple
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.shape != (len(self.states), len(self.states)):
            raise ValueError("rate matrix shape does not match the state list")
        off = q - np.diag(np.diag(q))
        if np.any(off < 0):
            raise ValueError("off-diagonal rates must be non-negative")
        scale = max(1.0, float(np.abs(q).max(initial=0.0)))
        if np.any(np.abs(q.sum(axis=1)) > 1e-12 * scale):
            raise ValueError("rows of a generator must sum to zero")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.states)})

    def index(self, state) -> int:
        return self._index[CensoredState(*state)]

    def rate(self, src, dst) -> float:
        return float(self.q[self.index(src), self.index(dst)])

    def labels(self) -> list[str]:
        return [CensoredState(*s).label() for s in self.states]

    def to_csv(self, fh):
        """Write the matrix with a header row of ``(r0,r1)`` labels."""
        writer = csv.writer(fh, lineterminator="\n")
        labels = self.labels()
        writer.writerow(["from"] + labels)
        for label, row in zip(labels, self.q):
            writer.writerow([label] + [repr(float(v)) for v in row])


def censored_generator(n: int, theta: float, gamma: float, alpha: float) -> RateMatrix:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if theta <= 0 or gamma <= 0 or alpha < 1:
        raise ValueError("need theta > 0, gamma > 0 and alpha >= 1")
    states = enumerate_states(n)
    index = {s: i for i, s in enumerate(states)}
    back = outer_to_inner_rate(theta, gamma, alpha)
    q = np.zeros((len(states), len(states)))
    for i, (r0, r1) in enumerate(states):
        if r0 > 0:
            q[i, index[(r0 - 1, r1 + 1)]] = theta * r0
        if r1 > 0:
            q[i, index[(r0 + 1, r1 - 1)]] = back * r1
        if r0 > 1:
            q[i, index[(r0 - 1, r1)]] = r0 * (r0 - 1.0)
        q[i, i] = -q[i].sum()
    return RateMatrix(tuple(states), q)


def _poisson_truncation(mu, tol):
    # smallest M with the Chernoff bound on P(Poisson(mu) > M) below tol
    M = max(1, math.ceil(mu))
    while True:
        a = M + 1
        log_bound = -mu + a * (1.0 + math.log(mu) - math.log(a))
        if a > mu and log_bound < math.log(tol):
            return M
        M += 1


def _uniformized(q, lam, h, tol):
    mu = lam * h
    kernel = np.eye(q.shape[0]) + q / lam
    M = _poisson_truncation(mu, tol)
    weight = math.exp(-mu)
    term = np.eye(q.shape[0])
    out = weight * term
    for m in range(1, M + 1):
        term = term @ kernel
        weight *= mu / m
        out += weight * term
    return out


def transition_matrix(Q, t: float, tol: float = 1e-10) -> np.ndarray:
    """``exp(t Q)`` by uniformization.

    Long intervals are halved until the uniformized Poisson mean is at most
    32, then the result is squared back; the per-piece tolerance is scaled so
    the row error stays below ``tol``.
    """
    q = Q.q if isinstance(Q, RateMatrix) else np.asarray(Q, dtype=float)
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t!r}")
    if not 0 < tol <= 1e-6:
        raise ValueError(f"tol must lie in (0, 1e-6], got {tol!r}")
    lam = float(np.max(-np.diag(q), initial=0.0))
    if lam <= 0:
        raise DegenerateGeneratorError("generator has no transitions; uniformization constant is 0")
    if t == 0:
        return np.eye(q.shape[0])
    halvings = max(0, math.ceil(math.log2(lam * t / 32.0))) if lam * t > 32.0 else 0
    h = t / 2**halvings
    P = _uniformized(q, lam, h, tol / 2 ** (halvings + 1))
    for _ in range(halvings):
        P = P @ P
    return P


class TmrcaStats(NamedTuple):
    mean: float
    cdf: Callable


def tmrca_stats(Q: RateMatrix, initial, tol: float = 1e-10) -> TmrcaStats:
    """Mean and distribution function of the time until one lineage remains."""
    start = Q.index(initial)
    absorbing = np.array([CensoredState(*s).total == 1 for s in Q.states])
    transient = ~absorbing
    if absorbing[start]:
        mean = 0.0
    else:
        sub = Q.q[np.ix_(transient, transient)]
        try:
            times = np.linalg.solve(-sub, np.ones(sub.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("first-step system is singular; generator is malformed") from exc
        mean = float(times[np.flatnonzero(transient).tolist().index(start)])

    def cdf(t):
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.array([transition_matrix(Q, float(s), tol)[start, absorbing].sum() for s in ts])
        return out if np.ndim(t) else float(out[0])

    return TmrcaStats(mean, cdf)


def two_state_closed_form(theta: float, gamma: float, alpha: float, t: float) -> np.ndarray:
    """Transition probabilities of a single lineage; state 0 inner, 1 outer."""
    if t < 0:
        raise ValueError("t must be non-negative")
    a = theta
    b = outer_to_inner_rate(theta, gamma, alpha)
    s = a + b
    decay = math.exp(-s * t)
    p00 = b / s + a / s * decay
    p11 = a / s + b / s * decay
    return np.array([[p00, 1.0 - p00], [1.0 - p11, p11]])


# --- Kingman limit ---------------------------------------------------------


@dataclass(frozen=True)
class KingmanParams:
    """Rates ``c_l`` of the time-changed Kingman coalescent.

    ``p`` may be ``math.inf``; ``q_frac`` is the weight ``p**(1/alpha) /
    (1 + p**(1/alpha))`` and ``c[l]`` is the rate with ``l`` lineages
    (``c[0] = c[1] = 0``).
    """

    n: int
    p: float
    alpha: float
    q_frac: float
    c: tuple

    def rate(self, l: int) -> float:
        return self.c[l]


def kingman_weight(p: float, alpha: float) -> float:
    if math.isinf(p):
        return 1.0
    root = p ** (1.0 / alpha)
    return root / (1.0 + root)


def kingman_rate_sum(l: int, q: float) -> float:
    """``sum_j j(j-1) C(l,j) q^j (1-q)^(l-j)``, summed term by term."""
    return sum(j * (j - 1) * math.comb(l, j) * q**j * (1.0 - q) ** (l - j) for j in range(1, l + 1))


def kingman_rates(n: int, p: float, alpha: float) -> KingmanParams:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not (p >= 0):
        raise ValueError(f"p must be in [0, inf], got {p!r}")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    q = kingman_weight(p, alpha)
    if math.isinf(p):
        c = [0.0, 0.0] + [float(l * (l - 1)) for l in range(2, n + 1)]
    else:
        c = [0.0, 0.0] + [kingman_rate_sum(l, q) for l in range(2, n + 1)]
    return KingmanParams(n, p, alpha, q, tuple(c[: max(n + 1, 2)]))


def simulate_kingman(kp: KingmanParams, rng) -> np.ndarray:
    """Inter-coalescence times; entry ``j`` is the wait from ``n-j`` to ``n-j-1`` lineages."""
    rng = as_generator(rng)
    if kp.n <= 1:
        return np.empty(0)
    if kp.p == 0:
        raise ZeroDivisionError("p = 0 gives zero coalescence rates; the lineage count never moves")
    rates = np.array([kp.c[l] for l in range(kp.n, 1, -1)])
    return rng.standard_exponential(rates.size) / rates


# --- exact simulation of the censored chain ---------------------------------

EXIT, ENTRY, COAL = 0, 1, 2


@dataclass(frozen=True, eq=False)
class CensoredPath:
    """Jump chain of ``(r0, r1)``; ``r0[i], r1[i]`` hold from ``times[i]``."""

    times: np.ndarray
    r0: np.ndarray
    r1: np.ndarray
    horizon: float

    def state_at(self, t) -> CensoredState:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return CensoredState(int(self.r0[i]), int(self.r1[i]))

    def coalescence_times(self) -> np.ndarray:
        """Times at which the total lineage count dropped."""
        total = self.r0 + self.r1
        return self.times[1:][np.diff(total) < 0]


@nb.njit(cache=True)
def _censored_step(rng, r0, r1, theta, back):
    a = theta * r0
    b = back * r1
    c = r0 * (r0 - 1.0)
    total = a + b + c
    dt = rng.standard_exponential() / total
    u = rng.random() * total
    if u < a:
        return dt, EXIT
    if u < a + b:
        return dt, ENTRY
    return dt, COAL


@nb.njit(cache=True)
def _censored_chunk(rng, state, theta, back, horizon, stop_at_absorption, max_events, t_out, r0_out, r1_out):
    # state = [t, r0, r1, events]
    t = state[0]
    r0 = int(state[1])
    r1 = int(state[2])
    n_ev = int(state[3])
    written = 0
    status = 0
    while True:
        if written == t_out.shape[0]:
            status = 1
            break
        dt, kind = _censored_step(rng, r0, r1, theta, back)
        if t + dt > horizon:
            break
        if n_ev >= max_events:
            status = 2
            break
        t += dt
        if kind == EXIT:
            r0 -= 1
            r1 += 1
        elif kind == ENTRY:
            r0 += 1
            r1 -= 1
        else:
            r0 -= 1
        n_ev += 1
        t_out[written] = t
        r0_out[written] = r0
        r1_out[written] = r1
        written += 1
        if stop_at_absorption and kind == COAL and r0 + r1 == 1:
            break
    state[0] = t
    state[1] = r0
    state[2] = r1
    state[3] = n_ev
    return written, status


def simulate_censored(n, theta, gamma, alpha, initial, horizon, rng, stop_at_absorption=True, max_events=10**8):
    """Exact event-by-event path of the censored coalescent.

    With ``stop_at_absorption`` the path ends when a coalescence leaves one
    lineage; a path that starts with one lineage runs to ``horizon``.
    """
    initial = check_censored_state(initial, n)
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = as_generator(rng)
    back = outer_to_inner_rate(theta, gamma, alpha)
    state = np.array([0.0, initial.r0, initial.r1, 0.0])
    times, r0s, r1s = [np.zeros(1)], [np.array([initial.r0])], [np.array([initial.r1])]
    chunk = 1024
    while True:
        t_buf = np.empty(chunk)
        a_buf = np.empty(chunk, dtype=np.int64)
        b_buf = np.empty(chunk, dtype=np.int64)
        written, status = _censored_chunk(
            rng, state, theta, back, horizon, stop_at_absorption, max_events, t_buf, a_buf, b_buf
        )
        times.append(t_buf[:written])
        r0s.append(a_buf[:written])
        r1s.append(b_buf[:written])
        if status == 2:
            raise EventCapExceeded(f"censored path exceeded {max_events} events")
        if status == 0:
            break
        chunk = min(chunk * 4, 1 << 22)
    return CensoredPath(np.concatenate(times), np.concatenate(r0s), np.concatenate(r1s), float(horizon))


@nb.njit(cache=True)
def _censored_coalescence_times(rng, r0, r1, theta, back, max_events, out):
    # fills out[j] with the wait between the j-th and (j+1)-th coalescence
    t = 0.0
    last = 0.0
    level = 0
    n_ev = 0
    while r0 + r1 > 1:
        if n_ev >= max_events:
            return -1
        dt, kind = _censored_step(rng, r0, r1, theta, back)
        t += dt
        n_ev += 1
        if kind == EXIT:
            r0 -= 1
            r1 += 1
        elif kind == ENTRY:
            r0 += 1
            r1 -= 1
        else:
            r0 -= 1
            out[level] = t - last
            last = t
            level += 1
    return n_ev


@nb.njit(cache=True)
def _censored_snapshots(rng, r0, r1, theta, back, snap_times, out_r0, out_r1, max_events):
    t = 0.0
    i = 0
    n_snap = snap_times.shape[0]
    n_ev = 0
    while i < n_snap:
        dt, kind = _censored_step(rng, r0, r1, theta, back)
        t_next = t + dt
        while i < n_snap and snap_times[i] < t_next:
            out_r0[i] = r0
            out_r1[i] = r1
            i += 1
        if i == n_snap:
            break
        if n_ev >= max_events:
            return -1
        t = t_next
        n_ev += 1
        if kind == EXIT:
            r0 -= 1
            r1 += 1
        elif kind == ENTRY:
            r0 += 1
            r1 -= 1
        else:
            r0 -= 1
    return n_ev


def censored_coalescence_times(
    n, theta, gamma, alpha, initial, replicates, seed, stream=0, start=0, max_events=10**9
):
    """Inter-coalescence times for replicates ``start .. start + replicates - 1``.

    Row ``i`` holds ``(tau_1, ..., tau_{n-1})`` for replicate ``start + i``;
    replicate streams are keyed by ``(seed, stream, index)``.
    """
    initial = check_censored_state(initial, n)
    back = outer_to_inner_rate(theta, gamma, alpha)
    out = np.zeros((replicates, max(initial.total - 1, 0)))
    for i in range(replicates):
        rng = replicate_rng(seed, stream, start + i)
        if _censored_coalescence_times(rng, initial.r0, initial.r1, theta, back, max_events, out[i]) < 0:
            raise EventCapExceeded(f"replicate {start + i} exceeded {max_events} events")
    return out


def censored_snapshots(
    n, theta, gamma, alpha, initial, times, replicates, seed, stream=0, start=0, max_events=10**9
):
    """States ``(r0, r1)`` at each of ``times``; arrays of shape ``(replicates, len(times))``."""
    initial = check_censored_state(initial, n)
    snap = np.asarray(times, dtype=float)
    if snap.size and (np.any(np.diff(snap) < 0) or snap[0] < 0):
        raise ValueError("snapshot times must be sorted and non-negative")
    back = outer_to_inner_rate(theta, gamma, alpha)
    r0 = np.zeros((replicates, snap.size), dtype=np.int64)
    r1 = np.zeros((replicates, snap.size), dtype=np.int64)
    for i in range(replicates):
        rng = replicate_rng(seed, stream, start + i)
        if _censored_snapshots(rng, initial.r0, initial.r1, theta, back, snap, r0[i], r1[i], max_events) < 0:
            raise EventCapExceeded(f"replicate {start + i} exceeded {max_events} events")
    return r0, r1

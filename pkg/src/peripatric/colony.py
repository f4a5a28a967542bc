"""Colony-count process: a pure death process with immigration.

New colonies appear at constant rate ``N * theta_N`` and each of the ``k``
existing colonies fuses back at per-colony rate ``gamma_N * k**(alpha - 1)``,
so the total fusion rate is ``gamma_N * k**alpha``. Time is the chain's native
time unless stated otherwise; multiply by ``N`` to reach the coalescent scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.special import gammaln, logsumexp

from peripatric._rng import as_generator
from peripatric.errors import EventCapExceeded, ParameterError

# integrality slack when eps * N is given as a float
_INT_TOL = 1e-9
_MAX_SUPPORT = 10_000_000


@dataclass(frozen=True)
class ModelParams:
    """Finite-N parameters of the metapopulation.

    ``eps`` is the colony size as a fraction of ``N``; ``eps * N`` must be a
    whole number of individuals, at least 2. After validation ``eps`` is
    stored exactly as ``colony_size / N``.
    """

    N: int
    eps: float
    theta: float
    gamma: float
    alpha: float = 1.0

    def __post_init__(self):
        if isinstance(self.N, bool) or int(self.N) != self.N or self.N < 2:
            raise ParameterError(f"N must be an integer >= 2, got {self.N!r}")
        object.__setattr__(self, "N", int(self.N))
        if not 0.0 < self.eps < 1.0:
            raise ParameterError(f"eps must lie in (0, 1), got {self.eps!r}")
        size = self.eps * self.N
        m = round(size)
        if abs(size - m) > _INT_TOL * max(1.0, size):
            raise ParameterError(
                f"eps*N must be a whole number of individuals, got eps*N={size!r}; "
                f"nearest valid choice is eps={m / self.N!r}"
            )
        if m < 2:
            raise ParameterError(f"colony size eps*N must be >= 2, got {m}")
        object.__setattr__(self, "eps", m / self.N)
        for name in ("theta", "gamma"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be finite and > 0, got {value!r}")
        if not (math.isfinite(self.alpha) and self.alpha >= 1):
            raise ParameterError(f"alpha must be >= 1, got {self.alpha!r}")
        if not (self.theta_N > 0 and self.gamma_N > 0):
            raise ParameterError("derived rates theta_N and gamma_N underflowed to zero")

    @classmethod
    def from_colony_size(cls, N, colony_size, theta, gamma, alpha=1.0):
        return cls(N=N, eps=colony_size / N, theta=theta, gamma=gamma, alpha=alpha)

    @classmethod
    def from_eps_rule(cls, N, theta, gamma, alpha=1.0, exponent=-1.0 / 3.0):
        """Set ``eps ~ N**exponent`` with the colony size rounded to an integer."""
        m = max(2, round(N ** (1.0 + exponent)))
        return cls.from_colony_size(N, m, theta, gamma, alpha)

    @property
    def colony_size(self) -> int:
        return round(self.eps * self.N)

    @property
    def theta_N(self) -> float:
        """Per-capita emigration rate ``theta / (eps N^2)``."""
        return self.theta / (self.eps * self.N**2)

    @property
    def gamma_N(self) -> float:
        """Fusion rate coefficient ``gamma eps^(alpha-1) / N``."""
        return self.gamma * self.eps ** (self.alpha - 1.0) / self.N

    @property
    def immigration_rate(self) -> float:
        """Colony founding rate ``N theta_N``."""
        return self.N * self.theta_N

    @property
    def lam(self) -> float:
        """``N theta_N / gamma_N``, the parameter of the stationary law."""
        return self.immigration_rate / self.gamma_N

    @property
    def scaled_equilibrium(self) -> float:
        return scaled_equilibrium(self.theta, self.gamma, self.alpha)

    @property
    def typical_colonies(self) -> int:
        """Colony count at the fluid-limit equilibrium, rounded."""
        return max(1, round(self.scaled_equilibrium / self.eps))

    def as_dict(self):
        return {
            "N": self.N,
            "eps": self.eps,
            "colony_size": self.colony_size,
            "theta": self.theta,
            "gamma": self.gamma,
            "alpha": self.alpha,
        }


def colony_rates(params: ModelParams, k: int) -> tuple[float, float]:
    """Return ``(up_rate, down_rate)`` of the colony count at ``k``."""
    if k < 0:
        raise ValueError(f"colony count must be non-negative, got {k}")
    down = params.gamma_N * float(k) ** params.alpha if k > 0 else 0.0
    return params.immigration_rate, down


@dataclass(frozen=True, eq=False)
class TruncatedPMF:
    """Stationary colony-count law on ``0..support_max``.

    ``tail_bound`` bounds the mass dropped above ``support_max`` relative to
    the retained mass.
    """

    support_max: int
    probs: np.ndarray
    tail_bound: float

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size != self.support_max + 1:
            raise ValueError("probs must have support_max + 1 entries")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be non-negative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "_cdf", np.cumsum(probs))

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.support_max + 1)

    def mean(self) -> float:
        return float(self.support @ self.probs)

    def var(self) -> float:
        return float((self.support**2) @ self.probs - self.mean() ** 2)

    def __getitem__(self, k):
        if 0 <= k <= self.support_max:
            return float(self.probs[k])
        return 0.0


def _stationary_log_weights(lam, alpha, K):
    k = np.arange(K + 1, dtype=float)
    return k * math.log(lam) - alpha * gammaln(k + 1.0)


def stationary_pmf(params: ModelParams, tail_tol: float = 1e-12) -> TruncatedPMF:
    """Stationary law ``pi(k) ∝ lam**k / (k!)**alpha`` truncated to a finite support.

    Weights are built in log space. The support is the smallest
    ``K >= 4 * ceil(lam**(1/alpha))`` at which the successive weight ratio
    ``lam / (K+1)**alpha`` is below 1/2 and the geometric bound on the
    remaining tail is below ``tail_tol``.
    """
    if not 0.0 < tail_tol <= 1e-3:
        raise ValueError(f"tail_tol must lie in (0, 1e-3], got {tail_tol!r}")
    return _stationary_pmf(params.lam, params.alpha, tail_tol)


def _stationary_pmf(lam, alpha, tail_tol):
    if not (math.isfinite(lam) and lam > 0):
        raise OverflowError(f"stationary parameter lam={lam!r} is not a usable positive number")
    log_lam = math.log(lam)
    K_lo = max(1, 4 * math.ceil(math.exp(log_lam / alpha)))
    K_hi = 2 * K_lo
    while K_hi <= 2 * _MAX_SUPPORT:
        logw = _stationary_log_weights(lam, alpha, K_hi)
        Ks = np.arange(K_lo, K_hi + 1)
        log_ratio = log_lam - alpha * np.log(Ks + 1.0)
        ok = log_ratio < -math.log(2.0)
        log_mass = np.logaddexp.accumulate(logw)[Ks]
        with np.errstate(invalid="ignore", divide="ignore"):
            log_tail = logw[Ks] + log_ratio - np.log1p(-np.exp(log_ratio)) - log_mass
        good = ok & (log_tail < math.log(tail_tol))
        if good.any():
            i = int(np.argmax(good))
            K = int(Ks[i])
            probs = np.exp(logw[: K + 1] - log_mass[i])
            probs /= probs.sum()
            return TruncatedPMF(K, probs, float(math.exp(log_tail[i])))
        K_hi *= 2
    raise OverflowError(f"stationary law needs more than {_MAX_SUPPORT} support points (lam={lam!r})")


def sample_stationary(pmf: TruncatedPMF, rng, size=None):
    """Draw colony counts from ``pmf`` by inverse-CDF lookup."""
    rng = as_generator(rng)
    u = rng.random(size)
    k = np.searchsorted(pmf._cdf, u, side="right")
    k = np.minimum(k, pmf.support_max)
    if size is None:
        return int(k)
    return k.astype(np.int64)


@dataclass(frozen=True, eq=False)
class ColonyTrajectory:
    """Piecewise-constant colony-count path on ``[0, horizon]``.

    ``counts[i]`` holds on ``[times[i], times[i+1])``; the last count holds
    until ``horizon``.
    """

    times: np.ndarray
    counts: np.ndarray
    horizon: float

    @property
    def n_events(self) -> int:
        return len(self.times) - 1

    def holding_times(self) -> np.ndarray:
        ends = np.append(self.times[1:], self.horizon)
        return ends - self.times

    def occupation(self, support_max=None) -> np.ndarray:
        """Fraction of ``[0, horizon]`` spent at each count."""
        size = int(self.counts.max()) + 1
        if support_max is not None:
            size = max(size, support_max + 1)
        occ = np.bincount(self.counts, weights=self.holding_times(), minlength=size)
        return occ / self.horizon

    def value_at(self, t):
        i = np.searchsorted(self.times, t, side="right") - 1
        return self.counts[i]


@nb.njit(cache=True)
def _colony_chunk(rng, state, up, gamma_N, alpha, horizon, max_events, times_out, counts_out):
    # state = [clock, count, events so far]; mutated so a full buffer can resume
    t = state[0]
    k = int(state[1])
    n_ev = int(state[2])
    written = 0
    status = 0
    cap = times_out.shape[0]
    while True:
        if written == cap:
            status = 1
            break
        down = gamma_N * float(k) ** alpha if k > 0 else 0.0
        total = up + down
        if total <= 0.0:
            break
        t_next = t + rng.standard_exponential() / total
        if t_next > horizon:
            break
        if n_ev >= max_events:
            status = 2
            break
        t = t_next
        if rng.random() * total < up:
            k += 1
        else:
            k -= 1
        n_ev += 1
        times_out[written] = t
        counts_out[written] = k
        written += 1
    state[0] = t
    state[1] = k
    state[2] = n_ev
    return written, status


def simulate_colony_path(
    params: ModelParams,
    k0: int,
    horizon: float,
    rng,
    max_events: int = 10**8,
) -> ColonyTrajectory:
    """Exact event-by-event path of the colony count over native time ``horizon``."""
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon!r}")
    if k0 < 0:
        raise ValueError(f"k0 must be non-negative, got {k0}")
    rng = as_generator(rng)
    up, _ = colony_rates(params, 0)
    state = np.array([0.0, float(k0), 0.0])
    expected = horizon * (up + params.gamma_N * max(k0, params.lam ** (1 / params.alpha)) ** params.alpha)
    chunk = int(min(max(1.2 * expected + 64, 64), 1 << 22))
    times = [np.zeros(1)]
    counts = [np.array([k0], dtype=np.int64)]
    while True:
        t_buf = np.empty(chunk)
        k_buf = np.empty(chunk, dtype=np.int64)
        written, status = _colony_chunk(
            rng, state, up, params.gamma_N, params.alpha, horizon, max_events, t_buf, k_buf
        )
        times.append(t_buf[:written])
        counts.append(k_buf[:written])
        if status == 2:
            raise EventCapExceeded(f"colony path exceeded {max_events} events before t={horizon}")
        if status == 0:
            break
    return ColonyTrajectory(np.concatenate(times), np.concatenate(counts), float(horizon))


def scaled_equilibrium(theta: float, gamma: float, alpha: float) -> float:
    """Fixed point ``(theta / gamma)**(1/alpha)`` of the fluid-limit ODE."""
    if theta <= 0 or gamma <= 0:
        raise ValueError("theta and gamma must be positive")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    return (theta / gamma) ** (1.0 / alpha)


class FluidInstabilityError(ArithmeticError):
    """The fixed-step integrator left the region where the solution can live."""


def integrate_fluid_limit(theta, gamma, alpha, z0, horizon, dt=1e-3):
    """Integrate ``z' = theta - gamma z**alpha`` with classical fixed-step RK4.

    Returns ``(t, z)`` arrays including both endpoints; the last step is
    shortened to land on ``horizon``.
    """
    if z0 < 0:
        raise ValueError("z0 must be non-negative")
    if dt <= 0 or horizon < 0:
        raise ValueError("dt must be positive and horizon non-negative")
    bound = 10.0 * max(z0, scaled_equilibrium(theta, gamma, alpha))

    def f(z):
        return theta - gamma * z**alpha

    n_steps = math.ceil(horizon / dt - 1e-12) if horizon > 0 else 0
    t = np.empty(n_steps + 1)
    z = np.empty(n_steps + 1)
    t[0], z[0] = 0.0, z0
    zi = z0
    for i in range(n_steps):
        h = min(dt, horizon - i * dt)
        k1 = f(zi)
        k2 = f(max(zi + 0.5 * h * k1, 0.0))
        k3 = f(max(zi + 0.5 * h * k2, 0.0))
        k4 = f(max(zi + h * k3, 0.0))
        zi = zi + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if not math.isfinite(zi) or zi < 0 or abs(zi) > bound:
            raise FluidInstabilityError(
                f"step {i + 1} gave z={zi!r}; reduce dt (currently {dt!r})"
            )
        t[i + 1] = min((i + 1) * dt, horizon)
        z[i + 1] = zi
    return t, z


def sup_fluid_deviation(params: ModelParams, horizon_rescaled: float, rng, k0=None, max_events=10**8):
    """``sup_{t <= horizon} |eps * k(N t) - (theta/gamma)**(1/alpha)|`` for one path.

    ``k0`` defaults to a draw from the stationary law.
    """
    rng = as_generator(rng)
    if k0 is None:
        k0 = sample_stationary(stationary_pmf(params), rng)
    path = simulate_colony_path(params, k0, params.N * horizon_rescaled, rng, max_events)
    return float(np.max(np.abs(params.eps * path.counts - params.scaled_equilibrium)))

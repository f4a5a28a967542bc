"""Empirical distributions, distances and the convergence studies.

Every study is a pure function of its config: replicate ``i`` draws from a
stream keyed by ``(seed, stream, i)``, so results do not depend on how
replicates are split across worker processes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from collections import Counter
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

import peripatric
from peripatric._rng import replicate_rng
from peripatric.ancestry import all_inner, ancestry_snapshots, one_colony
from peripatric.coalescent import (
    CensoredState,
    censored_coalescence_times,
    censored_generator,
    kingman_rates,
    transition_matrix,
)
from peripatric.colony import ModelParams, sup_fluid_deviation
from peripatric.forward import extract_ancestry_arrays, init_world, run_forward

BOOTSTRAP_DRAWS = 200
# standard deviation of the Kolmogorov limit law; the KS statistic has sd ~ this / sqrt(n)
KS_SD = float(stats.kstwobign.std())


# --- distributions and distances ----------------------------------------------


@dataclass(frozen=True)
class EmpiricalDistribution:
    support: tuple
    counts: tuple
    total: int

    def __post_init__(self):
        if len(self.support) != len(self.counts):
            raise ValueError("support and counts must have equal length")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")
        if sum(self.counts) != self.total:
            raise ValueError("counts must sum to total")
        if self.total <= 0:
            raise ValueError("empirical distribution is empty")

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalDistribution":
        tally = Counter(samples)
        if not tally:
            raise ValueError("empirical distribution is empty")
        support = tuple(sorted(tally))
        return cls(support, tuple(tally[s] for s in support), sum(tally.values()))

    def pmf(self) -> dict:
        return {s: c / self.total for s, c in zip(self.support, self.counts)}


def _as_pmf(d) -> dict:
    if isinstance(d, EmpiricalDistribution):
        return d.pmf()
    if isinstance(d, Mapping):
        if not d:
            raise ValueError("distribution is empty")
        return dict(d)
    raise TypeError(f"expected EmpiricalDistribution or mapping, got {type(d).__name__}")


def tv_distance(a, b) -> float:
    """Half the L1 distance; outcomes missing on one side count as probability 0 there."""
    pa, pb = _as_pmf(a), _as_pmf(b)
    keys = pa.keys() | pb.keys()
    return 0.5 * math.fsum(abs(pa.get(x, 0.0) - pb.get(x, 0.0)) for x in keys)


def ks_statistic(samples, cdf) -> float:
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("ks_statistic needs at least one sample")
    return float(stats.kstest(samples, cdf).statistic)


def _bootstrap_tv_se(emp: EmpiricalDistribution, exact, rng, other: EmpiricalDistribution | None = None) -> float:
    """Spread of the TV estimate under multinomial resampling of the empirical side(s)."""
    p = np.array(emp.counts) / emp.total
    values = []
    for _ in range(BOOTSTRAP_DRAWS):
        a = EmpiricalDistribution(emp.support, tuple(rng.multinomial(emp.total, p).tolist()), emp.total)
        if other is None:
            values.append(tv_distance(a, exact))
        else:
            q = np.array(other.counts) / other.total
            b = EmpiricalDistribution(other.support, tuple(rng.multinomial(other.total, q).tolist()), other.total)
            values.append(tv_distance(a, b))
    return float(np.std(values, ddof=1))


def non_increasing(values, ses, k: float = 2.0) -> bool:
    """Each value exceeds its predecessor by at most ``k`` combined standard errors."""
    return all(
        values[i + 1] <= values[i] + k * math.hypot(ses[i], ses[i + 1]) for i in range(len(values) - 1)
    )


# --- reports -------------------------------------------------------------------


def config_hash(config) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class ConvergenceReport:
    """Study output; JSON fields are config, grid, rows (metric and error) and checks."""

    study: str
    config: dict
    config_hash: str
    seed: int
    replicates: int
    grid: list
    rows: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def as_dict(self) -> dict:
        return {
            "study": self.study,
            "version": peripatric.__version__,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "replicates": self.replicates,
            "config": self.config,
            "grid": self.grid,
            "rows": self.rows,
            "checks": self.checks,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        columns = sorted({key for row in self.rows for key in row})
        writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def _new_report(study, config, grid) -> ConvergenceReport:
    return ConvergenceReport(study, dataclasses.asdict(config), config_hash(config), config.seed, config.replicates, list(grid))


def _run_blocks(func, replicates: int, jobs: int, *args):
    """Call ``func(start, count, *args)`` over replicate blocks and concatenate in order."""
    if replicates <= 0:
        return []
    jobs = max(1, int(jobs))
    if jobs == 1:
        return [func(0, replicates, *args)]
    size = math.ceil(replicates / (4 * jobs))
    starts = list(range(0, replicates, size))
    counts = [min(size, replicates - s) for s in starts]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, starts, counts, *[[a] * len(starts) for a in args]))


# --- projected ancestral chain vs censored coalescent ----------------------------


@dataclass(frozen=True)
class Thm1Config:
    n: int = 4
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    N_grid: tuple = (1000, 10000, 100000)
    eps_exponent: float = -1.0 / 3.0
    times: tuple = (0.1, 0.5, 1.0)
    replicates: int = 100_000
    seed: int = 42
    tv_threshold: float = 0.05


def _thm1_block(start, count, params, n, times, seed):
    batch = ancestry_snapshots(params, all_inner(n), times, count, seed, stream=1, start=start)
    inner = batch.occ[:, :, 0]
    outer = batch.occ[:, :, 1:].sum(axis=2)
    return inner, outer


def thm1_study(config: Thm1Config, jobs: int = 1) -> ConvergenceReport:
    report = _new_report("thm1", config, config.N_grid)
    times = tuple(sorted(config.times))
    if not times:
        return report
    Q = censored_generator(config.n, config.theta, config.gamma, config.alpha)
    start = Q.index(CensoredState(config.n, 0))
    exact = {t: dict(zip(Q.states, transition_matrix(Q, t)[start])) for t in times}
    boot = np.random.default_rng([config.seed, 99])
    per_time = {t: ([], []) for t in times}
    for N in config.N_grid:
        params = ModelParams.from_eps_rule(N, config.theta, config.gamma, config.alpha, config.eps_exponent)
        blocks = _run_blocks(_thm1_block, config.replicates, jobs, params, config.n, times, config.seed)
        inner = np.concatenate([b[0] for b in blocks])
        outer = np.concatenate([b[1] for b in blocks])
        for ti, t in enumerate(times):
            emp = EmpiricalDistribution.from_samples(CensoredState(int(a), int(b)) for a, b in zip(inner[:, ti], outer[:, ti]))
            tv = tv_distance(emp, exact[t])
            se = _bootstrap_tv_se(emp, exact[t], boot)
            per_time[t][0].append(tv)
            per_time[t][1].append(se)
            report.rows.append({"N": N, "eps": params.eps, "t": t, "metric": "tv", "value": tv, "se": se})
    for t in times:
        values, ses = per_time[t]
        report.checks[f"tv_non_increasing_t={t}"] = non_increasing(values, ses)
        report.checks[f"tv_below_{config.tv_threshold}_t={t}"] = values[-1] < config.tv_threshold
    return report


# --- fast switching gives a time-changed Kingman coalescent ----------------------


@dataclass(frozen=True)
class Thm2Config:
    n: int = 4
    p: float = 1.0
    alpha: float = 1.0
    k_grid: tuple = (10, 100, 1000, 10000)
    scale: float = 1.0
    replicates: int = 100_000
    seed: int = 42
    ks_threshold: float = 0.01


def _thm2_block(start, count, n, theta, gamma, alpha, seed, stream):
    return censored_coalescence_times(n, theta, gamma, alpha, CensoredState(n, 0), count, seed, stream, start)


def thm2_study(config: Thm2Config, jobs: int = 1) -> ConvergenceReport:
    """Switching rates ``theta_k = k * scale`` and ``gamma_k = theta_k * p``, so ``gamma/theta = p``."""
    report = _new_report("thm2", config, config.k_grid)
    if config.n < 2:
        return report
    kp = kingman_rates(config.n, config.p, config.alpha)
    levels = list(range(config.n, 1, -1))
    per_level = {l: ([], []) for l in levels}
    for gi, k in enumerate(config.k_grid):
        theta = k * config.scale
        gamma = theta * config.p
        blocks = _run_blocks(_thm2_block, config.replicates, jobs, config.n, theta, gamma, config.alpha, config.seed, 10 + gi)
        taus = np.concatenate(blocks)
        for j, l in enumerate(levels):
            rate = kp.rate(l)
            ks = ks_statistic(taus[:, j], stats.expon(scale=1.0 / rate).cdf)
            se = KS_SD / math.sqrt(taus.shape[0])
            per_level[l][0].append(ks)
            per_level[l][1].append(se)
            report.rows.append({"k": k, "level": l, "rate": rate, "metric": "ks", "value": ks, "se": se})
    for l in levels:
        values, ses = per_level[l]
        report.checks[f"ks_non_increasing_level={l}"] = non_increasing(values, ses)
        report.checks[f"ks_below_{config.ks_threshold}_level={l}"] = values[-1] < config.ks_threshold
    return report


# --- fluid limit of the scaled colony count --------------------------------------


@dataclass(frozen=True)
class Lemma1Config:
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    N_grid: tuple = (1000, 10000, 100000)
    eps_exponent: float = -1.0 / 3.0
    horizon: float = 1.0
    quantile: float = 0.95
    replicates: int = 1000
    seed: int = 42
    threshold: float = 0.1


def _lemma1_block(start, count, params, horizon, seed, stream):
    return np.array([sup_fluid_deviation(params, horizon, replicate_rng(seed, stream, start + i)) for i in range(count)])


def lemma1_study(config: Lemma1Config, jobs: int = 1) -> ConvergenceReport:
    report = _new_report("lemma1", config, config.N_grid)
    boot = np.random.default_rng([config.seed, 98])
    values, ses = [], []
    for gi, N in enumerate(config.N_grid):
        params = ModelParams.from_eps_rule(N, config.theta, config.gamma, config.alpha, config.eps_exponent)
        sups = np.concatenate(_run_blocks(_lemma1_block, config.replicates, jobs, params, config.horizon, config.seed, 20 + gi))
        value = float(np.quantile(sups, config.quantile))
        resampled = [np.quantile(boot.choice(sups, sups.size), config.quantile) for _ in range(BOOTSTRAP_DRAWS)]
        se = float(np.std(resampled, ddof=1))
        values.append(value)
        ses.append(se)
        report.rows.append(
            {"N": N, "eps": params.eps, "metric": f"q{config.quantile}_sup_deviation", "value": value, "se": se, "mean": float(sups.mean())}
        )
    report.checks["quantile_non_increasing"] = non_increasing(values, ses)
    if values:
        report.checks[f"quantile_below_{config.threshold}"] = values[-1] < config.threshold
    return report


# --- collapse of a shared colony ----------------------------------------------------


@dataclass(frozen=True)
class CollapseConfig:
    lineages: int = 3
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    N_grid: tuple = (1000, 10000, 100000)
    eps_exponent: float = -1.0 / 3.0
    replicates: int = 10_000
    seed: int = 42
    bound_factor: float = 5.0


def _collapse_block(start, count, params, lineages, seed):
    batch = ancestry_snapshots(
        params, one_colony(lineages), (), count, seed, stream=3, start=start, horizon=math.inf, stop_when_collapsed=True
    )
    return batch.collapse


def collapse_bound(params: ModelParams, lineages: int, factor: float = 5.0) -> float:
    """``factor`` times the within-colony coalescence time scale summed over the needed mergers."""
    m = params.colony_size
    mergers = math.fsum(1.0 / (j * (j - 1)) for j in range(2, lineages + 1))
    return factor * params.eps * m / (m - 1) * mergers


def collapse_study(config: CollapseConfig, jobs: int = 1) -> ConvergenceReport:
    report = _new_report("collapse", config, config.N_grid)
    values, ses = [], []
    for N in config.N_grid:
        params = ModelParams.from_eps_rule(N, config.theta, config.gamma, config.alpha, config.eps_exponent)
        times = np.concatenate(_run_blocks(_collapse_block, config.replicates, jobs, params, config.lineages, config.seed))
        mean = float(times.mean())
        se = float(times.std(ddof=1) / math.sqrt(times.size))
        bound = collapse_bound(params, config.lineages, config.bound_factor)
        values.append(mean)
        ses.append(se)
        report.rows.append({"N": N, "eps": params.eps, "metric": "mean_collapse_time", "value": mean, "se": se, "bound": bound})
        report.checks[f"below_bound_N={N}"] = mean < bound
    report.checks["mean_non_increasing"] = non_increasing(values, ses)
    return report


# --- duality: forward individual-based model vs backward chain -----------------------


@dataclass(frozen=True)
class DualityConfig:
    N: int = 200
    colony_size: int = 20
    n: int = 4
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    times: tuple = (0.1, 0.3)
    replicates: int = 10_000
    seed: int = 42
    tv_threshold: float = 0.05


def _forward_block(start, count, params, n, times, seed):
    lookback = np.asarray(times) * params.N
    out = np.zeros((count, len(times), n + 1), dtype=np.int64)
    for i in range(count):
        rng = replicate_rng(seed, 4, start + i)
        world, _ = init_world(params, rng, burn_in=0.0)
        log = run_forward(world, float(lookback.max()), rng)
        sample = rng.choice(world.main, size=n, replace=False)
        out[i], _ = extract_ancestry_arrays(log, world, sample, lookback)
    return out


def _backward_block(start, count, params, n, times, seed):
    return ancestry_snapshots(params, all_inner(n), times, count, seed, stream=5, start=start).occ


def duality_study(config: DualityConfig, jobs: int = 1) -> ConvergenceReport:
    """Sampled main-population lineages traced back through a forward run vs the backward chain.

    The forward run starts from a stationary colony count with no burn-in:
    only events inside the look-back window affect the sampled ancestry.
    """
    report = _new_report("duality", config, list(config.times))
    times = tuple(sorted(config.times))
    if not times:
        return report
    params = ModelParams.from_colony_size(config.N, config.colony_size, config.theta, config.gamma, config.alpha)
    fwd = np.concatenate(_run_blocks(_forward_block, config.replicates, jobs, params, config.n, times, config.seed))
    bwd = np.concatenate(_run_blocks(_backward_block, config.replicates, jobs, params, config.n, times, config.seed))
    boot = np.random.default_rng([config.seed, 97])
    for ti, t in enumerate(times):
        a = EmpiricalDistribution.from_samples(tuple(row) for row in fwd[:, ti, :].tolist())
        b = EmpiricalDistribution.from_samples(tuple(row) for row in bwd[:, ti, :].tolist())
        tv = tv_distance(a, b)
        se = _bootstrap_tv_se(a, None, boot, other=b)
        report.rows.append({"N": config.N, "t": t, "metric": "tv_occupancy", "value": tv, "se": se})
        report.checks[f"tv_below_{config.tv_threshold}_t={t}"] = tv < config.tv_threshold
    return report


STUDIES = {
    "thm1": (Thm1Config, thm1_study),
    "thm2": (Thm2Config, thm2_study),
    "lemma1": (Lemma1Config, lemma1_study),
    "collapse": (CollapseConfig, collapse_study),
    "duality": (DualityConfig, duality_study),
}

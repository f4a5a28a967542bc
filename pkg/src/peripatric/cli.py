"""Command-line entry point.

Every subcommand is driven by an options dataclass. Each field can be set
in a flat ``key=value`` config file (``--config``) or by the matching flag
(``--field-name``); flags win. Exit codes: 0 success, 1 invalid input,
2 event cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import re
import sys
import typing
from dataclasses import dataclass

import numpy as np
from scipy import stats

import peripatric
from peripatric import harness
from peripatric.ancestry import all_inner, simulate_ancestry
from peripatric.coalescent import (
    CensoredState,
    censored_generator,
    kingman_rates,
    simulate_censored,
    simulate_kingman,
    tmrca_stats,
    transition_matrix,
)
from peripatric.colony import (
    ModelParams,
    integrate_fluid_limit,
    sample_stationary,
    simulate_colony_path,
    stationary_pmf,
)
from peripatric._rng import replicate_rng
from peripatric.errors import EventCapExceeded, ParameterError


class UsageError(Exception):
    pass


# --- option sets -----------------------------------------------------------------


@dataclass
class ModelOpts:
    N: int = 1000
    eps: float | None = None
    eps_rule: str | None = None
    colony_size: int | None = None
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0


@dataclass
class RatesOpts:
    n: int = 4
    p: float = 1.0
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0


@dataclass
class StationaryOpts(ModelOpts):
    tail_tol: float = 1e-12


@dataclass
class FluidOpts:
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    z0: float = 0.0
    horizon: float = 5.0
    dt: float = 1e-3
    every: int = 100


@dataclass
class ColonyOpts(ModelOpts):
    k0: int | None = None
    horizon: float = 1.0
    max_events: int = 10**8


@dataclass
class AncestryOpts(ModelOpts):
    n: int = 4
    occ: tuple = ()
    k0: int | None = None
    horizon: float = 1.0
    freeze_colonies: bool = False
    stop_at_mrca: bool = True
    max_events: int = 10**8


@dataclass
class CoalescentOpts:
    n: int = 4
    theta: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    r0: int | None = None
    r1: int = 0
    times: tuple = (0.1, 0.5, 1.0)
    simulate: bool = False
    horizon: float = 10.0


@dataclass
class KingmanOpts:
    n: int = 4
    p: float = 1.0
    alpha: float = 1.0
    replicates: int = 10_000


# --- parsing ------------------------------------------------------------------------

_EPS_RULE = re.compile(r"^\s*N\s*\^\s*(-?\d+(?:\.\d+)?)\s*(?:/\s*(\d+(?:\.\d+)?))?\s*$")


def parse_eps_rule(rule: str) -> float:
    """``"N^-1/3"`` -> ``-1/3``."""
    match = _EPS_RULE.match(rule)
    if not match:
        raise ParameterError(f"eps_rule: expected a rule like N^-1/3, got {rule!r}")
    num = float(match.group(1))
    den = float(match.group(2)) if match.group(2) else 1.0
    exponent = num / den
    if not -1.0 < exponent < 0.0:
        raise ParameterError(f"eps_rule: exponent must lie in (-1, 0), got {exponent}")
    return exponent


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _convert(name: str, raw: str, hint, default):
    def scalar(kind, text):
        text = text.strip()
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            value = float(text) if re.fullmatch(r"[0-9.eE+-]+", text) else int(text)
            if value != int(value):
                raise ValueError(text)
            return int(value)
        if kind is float:
            return float(text)
        return text

    args = [a for a in typing.get_args(hint) if a is not type(None)]
    kind = args[0] if args else hint
    try:
        if kind is tuple:
            elem = type(default[0]) if default else int
            return tuple(scalar(elem, part) for part in raw.split(",") if part.strip())
        if isinstance(raw, str) and raw.strip().lower() == "none" and type(None) in typing.get_args(hint):
            return None
        return scalar(kind, raw)
    except ValueError:
        raise ParameterError(f"{name}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def read_config(path: str) -> dict:
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_options(cls, file_values: dict, flag_values: dict):
    """Merge dataclass defaults, config-file values and flags (in that order)."""
    hints = _field_types(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    merged = {}
    for key, raw in file_values.items():
        if key == "eps_rule" and "eps_exponent" in names:
            merged["eps_exponent"] = parse_eps_rule(raw)
            continue
        if key in ("seed", "replicates", "jobs") and key not in names:
            continue
        if key not in names:
            raise ParameterError(f"{key}: unknown config field")
        merged[key] = _convert(key, raw, hints[key], names[key].default)
    for key, value in flag_values.items():
        if value is None:
            continue
        if key == "eps_rule" and "eps_exponent" in names:
            merged["eps_exponent"] = parse_eps_rule(value)
        elif key in names:
            merged[key] = _convert(key, value, hints[key], names[key].default) if isinstance(value, str) else value
    return cls(**merged)


def model_params(opts, log) -> ModelParams:
    given = [x for x in ("eps", "eps_rule", "colony_size") if getattr(opts, x) is not None]
    if len(given) > 1:
        raise ParameterError(f"give only one of eps, eps_rule, colony_size (got {', '.join(given)})")
    if opts.colony_size is not None:
        return ModelParams.from_colony_size(opts.N, opts.colony_size, opts.theta, opts.gamma, opts.alpha)
    if opts.eps is not None:
        return ModelParams(opts.N, opts.eps, opts.theta, opts.gamma, opts.alpha)
    rule = opts.eps_rule or "N^-1/3"
    params = ModelParams.from_eps_rule(opts.N, opts.theta, opts.gamma, opts.alpha, parse_eps_rule(rule))
    exact = opts.N ** parse_eps_rule(rule)
    log(f"eps_rule {rule}: colony size rounded to {params.colony_size}, eps adjusted from {exact:.6g} to {params.eps:.6g}")
    return params


# --- output ------------------------------------------------------------------------


@dataclass
class Table:
    name: str
    columns: list
    rows: list


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(tables, meta: dict, provenance: dict, fmt: str) -> str:
    if fmt == "json":
        doc = {
            "provenance": provenance,
            **meta,
            "tables": {t.name: {"columns": t.columns, "rows": t.rows} for t in tables},
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=_fmt) + "\n"
    buf = io.StringIO()
    buf.write(f"# peripatric {provenance['version']} {provenance['command']}\n")
    for key, value in provenance["config"].items():
        buf.write(f"# {key}={_fmt(value)}\n")
    for key, value in meta.items():
        buf.write(f"# {key}={_fmt(value)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    for table in tables:
        if len(tables) > 1:
            buf.write(f"# table: {table.name}\n")
        writer.writerow(table.columns)
        writer.writerows([[_fmt(v) for v in row] for row in table.rows])
    return buf.getvalue()


# --- subcommands ------------------------------------------------------------------


def cmd_rates(o: RatesOpts, ctx):
    kp = kingman_rates(o.n, o.p, o.alpha)
    kingman = Table("kingman_rates", ["lineages", "rate"], [[l, kp.rate(l)] for l in range(2, o.n + 1)])
    Q = censored_generator(o.n, o.theta, o.gamma, o.alpha)
    labels = Q.labels()
    qtab = Table("censored_generator", ["from", *labels], [[lab, *Q.q[i].tolist()] for i, lab in enumerate(labels)])
    return [kingman, qtab], {"q_weight": kp.q_frac}


def cmd_stationary(o: StationaryOpts, ctx):
    params = model_params(o, ctx.log)
    pmf = stationary_pmf(params, o.tail_tol)
    rows = [[int(k), float(p)] for k, p in zip(pmf.support, pmf.probs)]
    meta = {"lam": params.lam, "mean": pmf.mean(), "var": pmf.var(), "tail_bound": pmf.tail_bound, **_params_meta(params)}
    return [Table("stationary", ["k", "prob"], rows)], meta


def cmd_fluid(o: FluidOpts, ctx):
    t, z = integrate_fluid_limit(o.theta, o.gamma, o.alpha, o.z0, o.horizon, o.dt)
    idx = np.unique(np.append(np.arange(0, t.size, max(1, o.every)), t.size - 1))
    rows = [[float(t[i]), float(z[i])] for i in idx]
    return [Table("fluid", ["t", "z"], rows)], {"equilibrium": (o.theta / o.gamma) ** (1 / o.alpha)}


def cmd_colony(o: ColonyOpts, ctx):
    params = model_params(o, ctx.log)
    rng = replicate_rng(ctx.seed, 0, 0)
    k0 = o.k0
    if k0 is None:
        k0 = int(sample_stationary(stationary_pmf(params), rng))
    path = simulate_colony_path(params, k0, params.N * o.horizon, rng, o.max_events)
    rows = [[float(t) / params.N, int(k), float(k) * params.eps] for t, k in zip(path.times, path.counts)]
    return [Table("colony_path", ["t_rescaled", "k", "scaled_k"], rows)], {"events": path.n_events, **_params_meta(params)}


def cmd_ancestry(o: AncestryOpts, ctx):
    params = model_params(o, ctx.log)
    occ = o.occ or all_inner(o.n)
    rng = replicate_rng(ctx.seed, 0, 0)
    path = simulate_ancestry(
        params, occ, o.horizon, rng,
        colony_init="stationary" if o.k0 is None else o.k0,
        max_events=o.max_events, freeze_colonies=o.freeze_colonies, stop_at_mrca=o.stop_at_mrca,
    )
    buf = io.StringIO()
    path.to_csv(buf)
    lines = list(csv.reader(io.StringIO(buf.getvalue())))
    return [Table("ancestry_path", lines[0], lines[1:])], {"events": len(path.times), **_params_meta(params)}


def cmd_coalescent(o: CoalescentOpts, ctx):
    r0 = o.n if o.r0 is None else o.r0
    initial = CensoredState(r0, o.r1)
    Q = censored_generator(o.n, o.theta, o.gamma, o.alpha)
    start = Q.index(initial)
    labels = Q.labels()
    rows = [[t, *transition_matrix(Q, t)[start].tolist()] for t in o.times]
    tables = [Table("marginals", ["t", *labels], rows)]
    stats_ = tmrca_stats(Q, initial)
    meta = {"initial": initial.label(), "tmrca_mean": stats_.mean, "absorbed": initial.total == 1}
    if o.simulate:
        path = simulate_censored(o.n, o.theta, o.gamma, o.alpha, initial, o.horizon, replicate_rng(ctx.seed, 0, 0))
        tables.append(Table("path", ["t", "r0", "r1"], [[float(t), int(a), int(b)] for t, a, b in zip(path.times, path.r0, path.r1)]))
    return tables, meta


def cmd_kingman(o: KingmanOpts, ctx):
    kp = kingman_rates(o.n, o.p, o.alpha)
    if o.n < 2:
        return [Table("kingman", ["level", "rate", "mean", "target_mean", "ks"], [])], {}
    taus = np.array([simulate_kingman(kp, replicate_rng(ctx.seed, 0, i)) for i in range(o.replicates)])
    rows = []
    for j, l in enumerate(range(o.n, 1, -1)):
        rate = kp.rate(l)
        ks = harness.ks_statistic(taus[:, j], stats.expon(scale=1 / rate).cdf)
        rows.append([l, rate, float(taus[:, j].mean()), 1 / rate, ks])
    return [Table("kingman", ["level", "rate", "mean", "target_mean", "ks"], rows)], {"q_weight": kp.q_frac}


def _params_meta(params: ModelParams) -> dict:
    return {"N": params.N, "eps": params.eps, "colony_size": params.colony_size}


SIMULATORS = {
    "rates": (RatesOpts, cmd_rates, "Kingman rate table and censored-coalescent generator"),
    "stationary": (StationaryOpts, cmd_stationary, "stationary law of the colony count"),
    "fluid": (FluidOpts, cmd_fluid, "deterministic trace of the scaled colony count"),
    "colony": (ColonyOpts, cmd_colony, "simulate one colony-count path"),
    "ancestry": (AncestryOpts, cmd_ancestry, "simulate one backward ancestral path"),
    "coalescent": (CoalescentOpts, cmd_coalescent, "censored coalescent marginals and optional path"),
    "kingman": (KingmanOpts, cmd_kingman, "simulate the time-changed Kingman coalescent"),
}

STUDIES = {
    "study-thm1": "thm1",
    "study-thm2": "thm2",
    "study-lemma1": "lemma1",
    "study-collapse": "collapse",
    "duality": "duality",
}


# --- driver -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_option_flags(sub, cls):
    for f in dataclasses.fields(cls):
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("seed", "replicates"):
            continue
        hint = _field_types(cls)[f.name]
        if hint is bool:
            sub.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            sub.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    if "eps_exponent" in {f.name for f in dataclasses.fields(cls)}:
        sub.add_argument("--eps-rule", dest="eps_rule", default=None, help="e.g. N^-1/3")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peripatric", description="Peripatric metapopulation simulators and convergence studies.")
    parser.add_argument("--version", action="version", version=f"peripatric {peripatric.__version__}")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    entries = {name: (cls, text) for name, (cls, _, text) in SIMULATORS.items()}
    for name, key in STUDIES.items():
        entries[name] = (harness.STUDIES[key][0], f"convergence study: {key}")
    for name, (cls, text) in entries.items():
        sub = subs.add_parser(name, help=text, description=text)
        sub.add_argument("--config", default=None, help="flat key=value file; flags override its values")
        sub.add_argument("--seed", default=None, help="unsigned 64-bit seed (default 42)")
        sub.add_argument("--replicates", default=None)
        sub.add_argument("--out", default=None, help="output path (default stdout)")
        sub.add_argument("--format", choices=("csv", "json"), default="csv")
        sub.add_argument("--jobs", default=None, help="worker processes (default: available cores)")
        _add_option_flags(sub, cls)
    return parser


@dataclass
class _Context:
    seed: int
    log: typing.Callable


def _uint(name, raw, upper=2**64 - 1):
    try:
        value = int(str(raw).strip())
    except ValueError:
        raise ParameterError(f"{name}: expected a non-negative integer, got {raw!r}") from None
    if not 0 <= value <= upper:
        raise ParameterError(f"{name}: must lie in [0, {upper}], got {value}")
    return value


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = vars(args).copy()
    command = flags.pop("command")
    config_path = flags.pop("config")
    out_path = flags.pop("out")
    fmt = flags.pop("format")
    file_values = read_config(config_path) if config_path else {}

    def pick(key):
        raw = flags.pop(key)
        return raw if raw is not None else file_values.get(key)

    seed_raw, reps_raw, jobs_raw = pick("seed"), pick("replicates"), pick("jobs")
    seed = _uint("seed", seed_raw) if seed_raw is not None else 42
    replicates = _uint("replicates", reps_raw, 10**12) if reps_raw is not None else None
    if replicates == 0:
        raise ParameterError("replicates: must be positive")
    jobs = _uint("jobs", jobs_raw, 4096) if jobs_raw is not None else (os.cpu_count() or 1)
    jobs = max(jobs, 1)

    def log(msg):
        print(msg, file=sys.stderr)

    if command in STUDIES:
        cls, study = harness.STUDIES[STUDIES[command]]
        opts = build_options(cls, file_values, flags)
        overrides = {"seed": seed}
        if replicates is not None:
            overrides["replicates"] = replicates
        opts = dataclasses.replace(opts, **overrides)
        report = study(opts, jobs=jobs)
        provenance = {"version": peripatric.__version__, "command": command, "config": report.config, "seed": seed}
        if fmt == "json":
            text = json.dumps({"provenance": provenance, **report.as_dict()}, indent=2, sort_keys=True) + "\n"
        else:
            header = io.StringIO()
            header.write(f"# peripatric {peripatric.__version__} {command}\n# config_hash={report.config_hash}\n")
            for key, value in sorted(report.config.items()):
                header.write(f"# {key}={_fmt(value)}\n")
            for key, value in report.checks.items():
                header.write(f"# check {key}={value}\n")
            text = header.getvalue() + report.to_csv()
        status = 0
    else:
        cls, func, _ = SIMULATORS[command]
        opts = build_options(cls, file_values, flags)
        if replicates is not None and hasattr(opts, "replicates"):
            opts = dataclasses.replace(opts, replicates=replicates)
        ctx = _Context(seed, log)
        tables, meta = func(opts, ctx)
        config = {k: v for k, v in dataclasses.asdict(opts).items()}
        config["seed"] = seed
        provenance = {"version": peripatric.__version__, "command": command, "config": config, "seed": seed}
        text = render(tables, meta, provenance, fmt)
        status = 0
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return status


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except EventCapExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, ValueError, OverflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

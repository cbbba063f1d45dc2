"""Seeded experiment runner for the Spider pipelines, the private selector and
the two exponential-mechanism variants.

Every trial draws its randomness from ``SeedSequence([seed, group, trial])``,
so results do not depend on the number of worker processes.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import plotting
from .errors import DpncError
from .expmech import alternate_sample, choose_em_params, em_excess_risk_report, em_target, \
    sample_initial
from .objective import make_problem, problem_constants, sample_dataset
from .oracle import GradientOracles, OracleMode
from .packing import build_packing, default_radius, discrete_em_select, packing_risk_report
from .privacy import Budget, Ledger
from .select import above_threshold, certify_points, soundness_margins
from .spider import TheoryKnobs, calibrate_noise, required_sigmas, reserve_privacy, spider_run, \
    theorem_params

EXPERIMENTS = ("spider_empirical", "spider_population", "abovethreshold", "em_continuous",
               "em_packing", "rate_scan")

COLUMNS = ["experiment", "group", "trial", "n", "status", "T", "T_theory", "alpha", "rho",
           "grad_norm", "smin", "is_fosp", "is_sosp", "within_margin", "selected_index",
           "trace_sosp_points", "o1_calls", "o2_calls", "noise_ratio", "eps_spent",
           "delta_spent", "eps_target", "delta_target", "empirical_excess",
           "population_excess", "fitted_slope", "point"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "spider_empirical"
    problem: str = "cubic_saddle"
    d: int = 2
    n: int = 4096
    perturbation_bound: float = 0.1
    a: float = 1.0
    diameter: float = 4.0
    epsilon: float = 1.0
    delta: float = 1e-6
    omega: float = 0.05
    seed: int = 0
    trial_count: int = 10
    x0: str = "0"
    # theory knobs
    C_gamma: float = 1.0
    C_Gamma: float = 1.0
    C_T: float = 1.0
    C_thresh: float = 1.0
    thresh_exp: float = 3.0
    C_K: float = 10.0
    c_nsg: float = 1.0
    utility_logs: bool = False
    algorithm_logs: bool = True
    enforce_sample_budget: bool = True
    T_max: int = 0
    calibrate_noise: bool = False
    # experiment specific
    n_values: str = "1024,2048,4096,8192,16384"
    alpha: float = 0.1
    candidates: int = 50
    em_T_steps: int = 64
    em_chains: int = 1000
    em_c_eta: float = 1.0
    packing_radius: float = 0.0
    out: str = "results"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; pick one of {EXPERIMENTS}")
        if self.trial_count < 0:
            raise ConfigError("trial_count must be nonnegative")
        if not (self.epsilon > 0 and 0 < self.delta < 1 and 0 < self.omega < 1):
            raise ConfigError("need epsilon > 0 and delta, omega in (0, 1)")
        if self.n < 2 or self.d < 1:
            raise ConfigError("need n >= 2 and d >= 1")
        self.start_point()
        self.n_list()

    def knobs(self) -> TheoryKnobs:
        return TheoryKnobs(C_gamma=self.C_gamma, C_Gamma=self.C_Gamma, C_T=self.C_T,
                           C_thresh=self.C_thresh, thresh_exp=self.thresh_exp, C_K=self.C_K,
                           c_nsg=self.c_nsg, utility_logs=self.utility_logs,
                           algorithm_logs=self.algorithm_logs,
                           enforce_sample_budget=self.enforce_sample_budget,
                           T_max=self.T_max or None)

    def start_point(self) -> np.ndarray:
        try:
            vals = [float(v) for v in self.x0.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad x0 {self.x0!r}") from exc
        if vals == [0.0] or not vals:
            return np.zeros(self.d)
        if len(vals) != self.d:
            raise ConfigError(f"x0 has {len(vals)} coordinates, d = {self.d}")
        return np.array(vals)

    def n_list(self) -> list[int]:
        try:
            return [int(v) for v in self.n_values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad n_values {self.n_values!r}") from exc

    # -- flat key = value serialization --
    def to_text(self) -> str:
        lines = ["[experiment]"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        if not text.lstrip().startswith("["):
            text = "[experiment]\n" + text
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        raw: dict[str, str] = {}
        for section in parser.sections():
            raw.update(parser[section])
        raw.update(overrides or {})
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            kind = types[key]
            value = str(value).strip()
            try:
                if kind == "bool":
                    low = value.lower()
                    if low not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(value)
                    kwargs[key] = low in ("true", "1", "yes")
                elif kind == "int":
                    kwargs[key] = int(value)
                elif kind == "float":
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), overrides)


# -- results ------------------------------------------------------------------------

@dataclass
class ResultsTable:
    config: ExperimentConfig
    rows: list[dict]
    summary: dict
    ledgers: list[dict]
    timings: list[float]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(row.get(c)) for c in COLUMNS])
        return out.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _json_safe(v):
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def _blank_row(cfg: ExperimentConfig, group: int, trial: int, n: int) -> dict:
    row = {c: math.nan for c in COLUMNS}
    row.update(experiment=cfg.experiment, group=group, trial=trial, n=n, status="ok",
               eps_target=cfg.epsilon, delta_target=cfg.delta, point="",
               is_fosp="", is_sosp="", within_margin="", selected_index="")
    return row


def _point_str(x) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(x))


def _streams(cfg: ExperimentConfig, group: int, trial: int):
    ss = np.random.SeedSequence([cfg.seed, group, trial])
    data_ss, run_ss = ss.spawn(2)
    return int(data_ss.generate_state(1)[0]), np.random.default_rng(run_ss)


def _problem_and_data(cfg: ExperimentConfig, data_seed: int, n: int):
    problem = make_problem(cfg.problem, cfg.d, cfg.perturbation_bound, data_seed, a=cfg.a,
                           diameter=cfg.diameter)
    return problem, sample_dataset(problem, n)


# -- trial runners ------------------------------------------------------------------

def _spider_trial(cfg: ExperimentConfig, group: int, trial: int, n: int, mode: OracleMode):
    row = _blank_row(cfg, group, trial, n)
    data_seed, rng = _streams(cfg, group, trial)
    problem, data = _problem_and_data(cfg, data_seed, n)
    spec = problem_constants(problem)
    total = Budget(cfg.epsilon, cfg.delta)
    # Spider phase and selector phase each get half of epsilon; the selector is pure.
    phase = Budget(cfg.epsilon / 2.0, cfg.delta)
    ledger = Ledger(total)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tp = theorem_params(spec, phase, mode, n, cfg.omega, cfg.knobs())
        if cfg.calibrate_noise:
            tp = calibrate_noise(tp, spec, phase, n)
    s1, s2 = required_sigmas(tp, spec, phase, n)
    row["noise_ratio"] = min(tp.oracle.sigma1 / s1, tp.oracle.sigma2 / s2)
    a1, a2 = reserve_privacy(ledger, tp, phase)
    if mode is OracleMode.EMPIRICAL:
        run_data = select_data = data
    else:
        run_data, select_data = data.split_halves()
    oracles = GradientOracles(problem, run_data, tp.oracle, mode, rng, o1_account=a1,
                              o2_account=a2)
    trace = spider_run(cfg.start_point(), oracles, tp.config, rng, ledger=ledger)
    alpha, rho = tp.alpha1, spec.rho
    row.update(T=tp.config.T, T_theory=tp.config.T, alpha=alpha, rho=rho,
               o1_calls=oracles.calls["o1"], o2_calls=oracles.calls["o2"])
    population = mode is OracleMode.POPULATION
    pts = trace.output_points()
    if len(pts):
        _, _, sosp = certify_points(problem, data, pts, alpha, rho, population=population)
        row["trace_sosp_points"] = int(np.sum(sosp))
    if trace.stop_reason != "completed":
        row["status"] = trace.stop_reason.split(":")[0]
    if len(pts) == 0:
        row["status"] = "no_output"
    else:
        sel = above_threshold(pts, select_data, problem, spec, alpha, cfg.epsilon / 2.0,
                              cfg.omega, rng, ledger=ledger)
        if sel.found:
            g, s, _ = certify_points(problem, data, sel.point, alpha, rho, population=population)
            g, s = float(g[0]), float(s[0])
            row.update(grad_norm=g, smin=s, is_fosp=g <= alpha,
                       is_sosp=g <= alpha and s >= -math.sqrt(rho * alpha),
                       selected_index=sel.index, point=_point_str(sel.point))
        elif row["status"] == "ok":
            row["status"] = "none_selected"
    spent = ledger.totals()
    row.update(eps_spent=spent.epsilon, delta_spent=spent.delta)
    return row, ledger.to_dict()


def _abovethreshold_trial(cfg: ExperimentConfig, group: int, trial: int, n: int):
    row = _blank_row(cfg, group, trial, n)
    data_seed, rng = _streams(cfg, group, trial)
    problem, data = _problem_and_data(cfg, data_seed, n)
    spec = problem_constants(problem)
    ledger = Ledger(Budget(cfg.epsilon, 0.0))
    # Candidates sweep the first axis from -1 to 1: a strict saddle first, the minimum last.
    T = cfg.candidates
    pts = np.zeros((T, cfg.d))
    pts[:, 0] = np.linspace(-1.0, 1.0, T)
    alpha, rho = cfg.alpha, spec.rho
    sel = above_threshold(pts, data, problem, spec, alpha, cfg.epsilon, cfg.omega, rng,
                          ledger=ledger)
    row.update(T=T, alpha=alpha, rho=rho)
    _, _, sosp = certify_points(problem, data, pts, alpha, rho)
    row["trace_sosp_points"] = int(np.sum(sosp))
    if sel.found:
        g, s, _ = certify_points(problem, data, sel.point, alpha, rho)
        g, s = float(g[0]), float(s[0])
        mg, mh = soundness_margins(T, n, cfg.epsilon, cfg.omega, spec.G, spec.M)
        row.update(grad_norm=g, smin=s, is_fosp=g <= alpha,
                   is_sosp=g <= alpha and s >= -math.sqrt(rho * alpha),
                   within_margin=g <= alpha + mg and s >= -math.sqrt(rho * alpha) - mh,
                   selected_index=sel.index, point=_point_str(sel.point))
    else:
        row["status"] = "none_selected"
    spent = ledger.totals()
    row.update(eps_spent=spent.epsilon, delta_spent=spent.delta, delta_target=0.0)
    return row, ledger.to_dict()


def _em_continuous_trial(cfg: ExperimentConfig, group: int, trial: int, n: int):
    row = _blank_row(cfg, group, trial, n)
    data_seed, rng = _streams(cfg, group, trial)
    problem, data = _problem_and_data(cfg, data_seed, n)
    spec = problem_constants(problem)
    ledger = Ledger(Budget(cfg.epsilon, cfg.delta))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        em = choose_em_params(cfg.epsilon, cfg.delta / 2.0, spec.G, spec.D, n, problem.d,
                              c_eta=cfg.em_c_eta)
    # Certificate before any sampling.
    if not em.dp_epsilon() <= cfg.epsilon:
        raise DpncError("log-Sobolev privacy certificate failed")
    T_used = min(em.T_steps, cfg.em_T_steps)
    ledger.charge("exp_mech", cfg.epsilon, cfg.delta / 2.0)
    ledger.charge("sampler_tv", 0.0, T_used * em.delta_inner)
    target = em_target(problem, data, em.beta, em.mu)
    x0 = sample_initial(target, em.beta * em.mu, cfg.em_chains, rng)
    xs = alternate_sample(target, x0, em, rng, T_steps=T_used)
    emp, pop = em_excess_risk_report(xs, problem, data, em.mu)
    row.update(T=T_used, T_theory=em.T_steps, empirical_excess=emp, population_excess=pop,
               point=_point_str(np.mean(xs, axis=0)))
    if T_used < em.T_steps:
        row["status"] = "truncated"
    spent = ledger.totals()
    row.update(eps_spent=spent.epsilon, delta_spent=spent.delta)
    return row, ledger.to_dict(), xs[:, 0]


def _em_packing_trial(cfg: ExperimentConfig, group: int, trial: int, n: int):
    row = _blank_row(cfg, group, trial, n)
    data_seed, rng = _streams(cfg, group, trial)
    problem, data = _problem_and_data(cfg, data_seed, n)
    spec = problem_constants(problem)
    ledger = Ledger(Budget(cfg.epsilon, 0.0))
    r = cfg.packing_radius or default_radius(spec.D, problem.d, cfg.epsilon, n)
    packing = build_packing(problem.d, spec.D, r)
    sel = discrete_em_select(packing, data, problem, cfg.epsilon, spec.G, spec.D, rng,
                             ledger=ledger)
    emp, pop = packing_risk_report(sel.point, problem, data)
    row.update(T=len(packing), selected_index=sel.index, point=_point_str(sel.point),
               empirical_excess=emp, population_excess=pop, delta_target=0.0)
    spent = ledger.totals()
    row.update(eps_spent=spent.epsilon, delta_spent=spent.delta)
    return row, ledger.to_dict(), sel.point[0]


def _run_task(args):
    cfg, group, trial, n = args
    start = time.perf_counter()
    extra = math.nan
    try:
        if cfg.experiment in ("spider_empirical", "rate_scan"):
            row, ledger = _spider_trial(cfg, group, trial, n, OracleMode.EMPIRICAL)
        elif cfg.experiment == "spider_population":
            row, ledger = _spider_trial(cfg, group, trial, n, OracleMode.POPULATION)
        elif cfg.experiment == "abovethreshold":
            row, ledger = _abovethreshold_trial(cfg, group, trial, n)
        elif cfg.experiment == "em_continuous":
            row, ledger, extra = _em_continuous_trial(cfg, group, trial, n)
        else:
            row, ledger, extra = _em_packing_trial(cfg, group, trial, n)
    except (DpncError, ValueError, FloatingPointError) as exc:
        row = _blank_row(cfg, group, trial, n)
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        ledger = {}
    return row, ledger, extra, time.perf_counter() - start


def _fit_loglog(ns, values) -> tuple[float, float]:
    x, y = np.log(np.asarray(ns, dtype=float)), np.asarray(values, dtype=float)
    ok = np.isfinite(y) & (y > 0)
    if ok.sum() < 2:
        return math.nan, math.nan
    A = np.column_stack([x[ok], np.ones(ok.sum())])
    (slope, intercept), *_ = np.linalg.lstsq(A, np.log(y[ok]), rcond=None)
    return float(slope), float(intercept)


def _quartiles(values) -> dict:
    v = np.asarray([x for x in values if isinstance(x, (int, float)) and math.isfinite(x)])
    if v.size == 0:
        return {"count": 0, "median": None, "q1": None, "q3": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"count": int(v.size), "median": float(med), "q1": float(q1), "q3": float(q3)}


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ResultsTable:
    """Run every trial (concurrently when ``jobs > 1``) and merge by index."""
    if config.experiment == "rate_scan":
        groups = list(enumerate(config.n_list()))
    else:
        groups = [(0, config.n)]
    tasks = [(config, g, t, n) for g, n in groups for t in range(config.trial_count)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_task, tasks))
    else:
        outputs = [_run_task(t) for t in tasks]
    rows = [o[0] for o in outputs]
    ledgers = [o[1] for o in outputs]
    extras = [o[2] for o in outputs]
    timings = [o[3] for o in outputs]

    key = "empirical_excess" if config.experiment.startswith("em_") else "grad_norm"
    summary = {"experiment": config.experiment, "trial_count": config.trial_count,
               "rows": len(rows),
               "failures": sum(1 for r in rows if str(r["status"]).startswith("failed")),
               "metric": key, "config": dataclasses.asdict(config)}
    per_n = {}
    for g, n in groups:
        vals = [r[key] for r in rows if r["group"] == g]
        per_n[n] = vals
        summary.setdefault("groups", {})[str(n)] = _quartiles(vals)
    if config.experiment == "rate_scan":
        ns = [n for _, n in groups]
        medians = [summary["groups"][str(n)]["median"] for n in ns]
        medians = [math.nan if m is None else m for m in medians]
        slope, intercept = _fit_loglog(ns, medians)
        summary.update(fitted_slope=slope, fitted_intercept=intercept)
        for r in rows:
            r["fitted_slope"] = slope
    sosp = [r["is_sosp"] for r in rows if r["is_sosp"] != ""]
    summary["sosp_rate"] = (sum(sosp) / len(sosp)) if sosp else None
    found = [r for r in rows if r["selected_index"] != ""]
    summary["selected_rate"] = (len(found) / len(rows)) if rows else None
    if config.experiment == "abovethreshold":
        sound = [r["within_margin"] for r in found]
        summary["within_margin_rate"] = (sum(sound) / len(sound)) if sound else None
    eps = [r["eps_spent"] for r in rows if math.isfinite(r["eps_spent"])]
    summary["max_eps_spent"] = max(eps) if eps else 0.0
    summary["ledger_within_target"] = all(
        r["eps_spent"] <= r["eps_target"] and r["delta_spent"] <= r["delta_target"]
        for r in rows if math.isfinite(r["eps_spent"]))
    summary["_plot"] = {"ns": [n for _, n in groups], "per_n": per_n, "extras": extras}
    return ResultsTable(config, rows, summary, ledgers, timings)


def emit_report(results: ResultsTable, path) -> dict:
    """Write results.csv, summary.json, ledgers.json, plots.svg and config.ini
    (all byte-stable) plus timings.csv (wall clock, not reproducible)."""
    os.makedirs(path, exist_ok=True)
    files = {name: os.path.join(path, name) for name in
             ("results.csv", "summary.json", "ledgers.json", "plots.svg", "config.ini",
              "timings.csv")}
    with open(files["results.csv"], "w", newline="") as fh:
        fh.write(results.to_csv())
    plot = results.summary.get("_plot", {"ns": [], "per_n": {}, "extras": []})
    summary = {k: v for k, v in results.summary.items() if k != "_plot"}
    with open(files["summary.json"], "w") as fh:
        json.dump(_json_safe(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(files["ledgers.json"], "w") as fh:
        json.dump(_json_safe(results.ledgers), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(files["config.ini"], "w") as fh:
        fh.write(results.config.to_text())
    with open(files["timings.csv"], "w") as fh:
        fh.write("index,seconds\n")
        for i, t in enumerate(results.timings):
            fh.write(f"{i},{t:.6f}\n")
    exp = results.config.experiment
    if exp == "rate_scan":
        ns = plot["ns"]
        med = [summary["groups"][str(n)]["median"] for n in ns]
        med = np.array([math.nan if m is None else m for m in med])
        plotting.rate_plot(files["plots.svg"], ns, plot["per_n"], med,
                           summary.get("fitted_slope", math.nan),
                           summary.get("fitted_intercept", math.nan))
    elif exp.startswith("em_"):
        vals = np.concatenate([np.ravel(e) for e in plot["extras"]]) if plot["extras"] else []
        plotting.histogram_plot(files["plots.svg"], vals, "sample (first coordinate)")
    elif exp == "abovethreshold":
        plotting.histogram_plot(files["plots.svg"],
                                [r["selected_index"] for r in results.rows
                                 if r["selected_index"] != ""], "selected candidate index")
    else:
        plotting.histogram_plot(files["plots.svg"], [r["grad_norm"] for r in results.rows],
                                "certified gradient norm")
    return files


def verify_results(path) -> tuple[bool, list[str]]:
    """Re-check the logged certificates: SOSP flags against the logged
    gradient norm and eigenvalue, and ledger totals against their targets."""
    problems = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            return False, [f"unexpected header {reader.fieldnames}"]
        for i, row in enumerate(reader):
            where = f"row {i} (group {row['group']}, trial {row['trial']})"
            eps, eps_t = float(row["eps_spent"]), float(row["eps_target"])
            dl, dl_t = float(row["delta_spent"]), float(row["delta_target"])
            if math.isfinite(eps) and not (eps <= eps_t and dl <= dl_t):
                problems.append(f"{where}: ledger ({eps}, {dl}) exceeds ({eps_t}, {dl_t})")
            if row["is_fosp"] == "":
                continue
            g, s = float(row["grad_norm"]), float(row["smin"])
            alpha, rho = float(row["alpha"]), float(row["rho"])
            fosp = g <= alpha
            sosp = fosp and s >= -math.sqrt(rho * alpha)
            if (row["is_fosp"] == "true") != fosp or (row["is_sosp"] == "true") != sosp:
                problems.append(f"{where}: SOSP flags disagree with logged values")
    return not problems, problems

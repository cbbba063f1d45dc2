"""Drift-controlled Stochastic Spider.

The estimator ``grad_t`` is refreshed from the first-kind oracle whenever the
squared movement since the last refresh reaches ``kappa``, and otherwise
updated with second-kind difference estimates.  Near small estimated gradients
(and outside the cooldown window) a re-anchor adds isotropic noise so that
strict saddles are escaped.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DataExhausted, ParamsInfeasible, SampleBudgetInfeasible
from .objective import ObjectiveSpec
from .oracle import GradientOracles, OracleMode, OracleParams, induced_zetas
from .privacy import Budget, compose_advanced, gaussian_sigma

log = logging.getLogger(__name__)

REANCHOR = "reanchor"
LARGE_DRIFT = "large_drift_o1"
DIFFERENCE = "o2"


@dataclass(frozen=True)
class TheoryKnobs:
    """Unspecified constants of the analysis.

    ``C_K`` scales the drift-count bound used to size the first-kind privacy
    reservation.  The polylog factors in the theorem noise and batch settings
    (not the ``ln(1/delta)`` privacy factors) are replaced by one unless
    ``utility_logs`` is set: with them in place the horizon collapses to a
    single step at any desk-scale ``n``.  ``algorithm_logs=False`` also drops
    the logarithms inside ``gamma``, ``Gamma``, ``T`` and the re-anchor
    threshold.  ``T_max`` caps the horizon.  ``enforce_sample_budget=False`` turns
    the population sample-budget check into a warning; the run then simply
    stops when fresh samples run out.
    """

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
    T_max: int | None = None


@dataclass(frozen=True)
class SpiderConfig:
    gamma: float
    Gamma: int
    eta: float
    T: int
    kappa: float
    omega: float
    threshold: float
    zeta1: float
    zeta2: float
    alpha_target: float | None = None
    knobs: TheoryKnobs = field(default_factory=TheoryKnobs)

    def to_dict(self) -> dict:
        return asdict(self)


def _clamped_log(arg: float, what: str) -> float:
    if not arg > math.e:
        warnings.warn(f"log argument for {what} is {arg:.4g} <= e; clamped to 1", RuntimeWarning,
                      stacklevel=3)
        return 1.0
    return math.log(arg)


def derive_config(spec: ObjectiveSpec, zetas: tuple[float, float], kappa: float, omega: float,
                  knobs: TheoryKnobs = TheoryKnobs(), *, alpha_target: float | None = None,
                  noiseless: bool = False) -> SpiderConfig:
    """Algorithm parameters from the problem constants and oracle quality.

    ``gamma = sqrt(4 C_gamma (zeta2^2 kappa + 4 zeta1^2) ln(BMd/(rho omega)))``,
    ``Gamma = ceil(C_Gamma M L / sqrt(rho gamma))``,
    ``T = ceil(C_T B M L^4 / gamma^2)`` with ``L = ln(dMB/(rho gamma omega))``,
    and ``eta = 1/M``.  With ``noiseless=True`` and exact oracles, ``gamma`` is
    backed out of ``alpha_target`` instead.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if not 0 < omega < 1:
        raise ValueError("omega must lie in (0, 1)")
    zeta1, zeta2 = zetas
    G, M, rho, B, d = spec.G, spec.M, spec.rho, spec.B, spec.d
    use_logs = knobs.algorithm_logs
    log1 = _clamped_log(B * M * d / (rho * omega), "gamma") if use_logs else 1.0
    gamma = math.sqrt(4.0 * knobs.C_gamma * (zeta2 ** 2 * kappa + 4.0 * zeta1 ** 2) * log1)
    if gamma == 0.0:
        if not noiseless:
            raise ValueError("gamma is zero: both oracles are exact; pass noiseless=True "
                             "with an alpha_target")
        if alpha_target is None or alpha_target <= 0:
            raise ValueError("noiseless configuration needs a positive alpha_target")
        gamma = alpha_target / (knobs.C_thresh * log1 ** knobs.thresh_exp)
    log2 = _clamped_log(d * M * B / (rho * gamma * omega), "Gamma/T") if use_logs else 1.0
    Gamma = max(1, math.ceil(knobs.C_Gamma * M * log2 / math.sqrt(rho * gamma)))
    T = max(1, math.ceil(knobs.C_T * B * M * log2 ** 4 / gamma ** 2))
    if knobs.T_max is not None and T > knobs.T_max:
        log.info("horizon %d capped at T_max=%d", T, knobs.T_max)
        T = int(knobs.T_max)
    threshold = knobs.C_thresh * gamma * log1 ** knobs.thresh_exp
    alpha = threshold if alpha_target is None else alpha_target
    if not spec.check_alpha(alpha):
        warnings.warn(f"M={M:.4g} < sqrt(rho*alpha)={math.sqrt(rho * alpha):.4g}: the "
                      "second-order condition is implied by the first-order one", RuntimeWarning,
                      stacklevel=2)
    return SpiderConfig(gamma=gamma, Gamma=Gamma, eta=1.0 / M, T=T, kappa=kappa, omega=omega,
                        threshold=threshold, zeta1=zeta1, zeta2=zeta2,
                        alpha_target=alpha_target, knobs=knobs)


@dataclass
class SpiderState:
    t: int
    x: np.ndarray
    nabla_prev: np.ndarray
    drift: float
    frozen: int
    x_prev: np.ndarray | None = None
    o1_query_count: int = 0
    o2_query_count: int = 0


@dataclass(slots=True)
class TraceRecord:
    t: int
    branch: str
    grad_est_norm: float
    drift_in: float
    drift: float
    frozen: int
    true_grad_norm: float = math.nan
    tracking_error: float = math.nan
    value: float = math.nan
    eps_spent: float = 0.0


@dataclass
class Trace:
    """Per-iteration records plus every iterate ``x_0, ..., x_{T+1}``."""

    config: SpiderConfig
    records: list[TraceRecord] = field(default_factory=list)
    iterates: list[np.ndarray] = field(default_factory=list)
    stop_reason: str = "completed"
    final_value: float = math.nan

    def points(self) -> np.ndarray:
        return np.asarray(self.iterates)

    def output_points(self) -> np.ndarray:
        """The returned set ``{x_1, ..., x_T}``."""
        pts = self.points()
        return pts[1:self.config.T + 1]

    def branch_counts(self) -> dict[str, int]:
        counts = {REANCHOR: 0, LARGE_DRIFT: 0, DIFFERENCE: 0}
        for rec in self.records:
            counts[rec.branch] += 1
        return counts

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, fh=None) -> str:
        """Header line ``# {config json}`` then one row per iteration."""
        out = io.StringIO() if fh is None else fh
        out.write("# " + json.dumps(self.config.to_dict(), sort_keys=True) + "\n")
        d = len(self.iterates[0]) if self.iterates else 0
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["t", "branch", "grad_est_norm", "drift", "frozen", "true_grad_norm",
                         "eps_spent", "drift_in", "tracking_error"]
                        + [f"x{i}" for i in range(d)])
        for rec, x in zip(self.records, self.iterates):
            writer.writerow([rec.t, rec.branch, repr(rec.grad_est_norm), repr(rec.drift),
                             rec.frozen, repr(rec.true_grad_norm), repr(rec.eps_spent),
                             repr(rec.drift_in), repr(rec.tracking_error)]
                            + [repr(float(v)) for v in x])
        return out.getvalue() if fh is None else ""


def initial_state(x0, config: SpiderConfig) -> SpiderState:
    """``frozen_{-1} = 0`` and ``grad_{-1} = 0`` so the first step re-anchors."""
    x0 = np.asarray(x0, dtype=float).copy()
    return SpiderState(t=0, x=x0, nabla_prev=np.zeros_like(x0), drift=config.kappa, frozen=0)


def _sqnorm(v: np.ndarray) -> float:
    return float(v @ v)


def spider_step(state: SpiderState, oracles: GradientOracles, config: SpiderConfig,
                rng: np.random.Generator) -> tuple[SpiderState, TraceRecord]:
    """Advance one iteration in place; returns the state and its record."""
    x = state.x
    drift_in = state.drift
    if math.sqrt(_sqnorm(state.nabla_prev)) <= config.threshold and state.frozen <= 0:
        branch = REANCHOR
        state.frozen = config.Gamma
        drift = 0.0
        d = x.shape[0]
        kick = (config.zeta1 / math.sqrt(d)) * rng.standard_normal(d)
        nabla = oracles.o1(x) + kick
        state.o1_query_count += 1
    elif drift_in >= config.kappa:
        branch = LARGE_DRIFT
        nabla = oracles.o1(x)
        drift = 0.0
        state.frozen -= 1
        state.o1_query_count += 1
    else:
        branch = DIFFERENCE
        nabla = state.nabla_prev + oracles.o2(x, state.x_prev)
        drift = drift_in
        state.frozen -= 1
        state.o2_query_count += 1
    step_sq = _sqnorm(nabla)
    # Accumulate onto the post-branch drift so resets are not undone.
    state.drift = drift + config.eta ** 2 * step_sq
    state.x_prev = x
    state.x = x - config.eta * nabla
    state.nabla_prev = nabla
    record = TraceRecord(t=state.t, branch=branch, grad_est_norm=math.sqrt(step_sq),
                         drift_in=drift_in, drift=state.drift, frozen=state.frozen)
    state.t += 1
    return state, record


def spider_run(x0, oracles: GradientOracles, config: SpiderConfig, rng: np.random.Generator,
               true_grad_probe: Callable | None = None, *, ledger=None,
               divergence_norm: float = 1e8) -> Trace:
    """Run ``T + 1`` iterations (``t = 0..T``) or stop early on data exhaustion
    or divergence.  The probe, if given, maps ``x`` to ``(F(x), grad F(x))``
    and is only recorded, never fed back."""
    state = initial_state(x0, config)
    trace = Trace(config=config)
    trace.iterates.append(state.x.copy())
    eps_spent = ledger.totals().epsilon if ledger is not None else 0.0
    if config.T == 0:
        # The returned set {x_1, ..., x_T} is empty, so no oracle is touched.
        return trace
    while state.t <= config.T:
        x_now = state.x
        if true_grad_probe is not None:
            value, grad = true_grad_probe(x_now)
        try:
            state, rec = spider_step(state, oracles, config, rng)
        except DataExhausted as exc:
            trace.stop_reason = f"data_exhausted: {exc}"
            break
        rec.eps_spent = eps_spent
        if true_grad_probe is not None:
            rec.value = float(value)
            rec.true_grad_norm = math.sqrt(_sqnorm(grad))
            rec.tracking_error = math.sqrt(_sqnorm(state.nabla_prev - grad))
        trace.records.append(rec)
        trace.iterates.append(state.x.copy())
        if not np.all(np.isfinite(state.x)) or _sqnorm(state.x) > divergence_norm ** 2:
            trace.stop_reason = "diverged"
            break
    if true_grad_probe is not None and trace.stop_reason == "completed":
        trace.final_value = float(true_grad_probe(state.x)[0])
    return trace


# -- theorem parameter settings -------------------------------------------------

@dataclass(frozen=True)
class TheoremParams:
    mode: str
    oracle: OracleParams
    kappa: float
    alpha1: float
    alpha1_iterated: float
    config: SpiderConfig
    o1_accesses: int
    o2_accesses: int
    drift_count_bound: float
    split_sizes: tuple[int, int] | None = None


def drift_count_bound(spec: ObjectiveSpec, config: SpiderConfig) -> float:
    """``B eta / kappa + T gamma^2 eta^2 / kappa`` (without the leading constant)."""
    eta, kappa = config.eta, config.kappa
    return spec.B * eta / kappa + config.T * config.gamma ** 2 * eta ** 2 / kappa


def _access_bounds(spec: ObjectiveSpec, config: SpiderConfig) -> tuple[int, int, float]:
    k_drift = drift_count_bound(spec, config)
    anchors = math.ceil((config.T + 1) / (config.Gamma + 1)) + 1
    o1 = math.ceil(config.knobs.C_K * k_drift) + anchors
    return o1, config.T + 1, k_drift


def theorem_params(spec: ObjectiveSpec, budget: Budget, mode, n: int, omega: float = 0.05,
                   knobs: TheoryKnobs = TheoryKnobs()) -> TheoremParams:
    """Noise scales, drift threshold and batch sizes of the empirical (full
    batch) or population (disjoint minibatch) guarantee for a Spider phase
    with privacy ``budget``.  ``n`` is the size of the whole dataset.

    ``alpha1`` is the closed-form accuracy target.  The empirical ``sigma2``
    depends on the achieved accuracy ``gamma * ln^3(...)``, which in turn
    depends on ``sigma2``; one fixed-point pass starting from the closed-form
    value resolves it (the pass result is ``alpha1_iterated``).
    """
    mode = OracleMode(mode)
    eps, delta = budget.epsilon, budget.delta
    if not (eps > 0 and 0 < delta < 1):
        raise ValueError("need epsilon > 0 and 0 < delta < 1")
    if n < 2:
        raise ValueError("n must be at least 2")
    G, M, rho, B, d = spec.G, spec.M, spec.rho, spec.B, spec.d
    eta = 1.0 / M
    lg = math.log(1.0 / delta)

    def ulog(arg: float) -> float:
        return max(math.log(arg), 1.0) if knobs.utility_logs else 1.0

    if mode is OracleMode.EMPIRICAL:
        scale = math.sqrt(d * lg) / (n * eps)
        kappa = G ** (4 / 3) * B ** (1 / 3) / M ** (5 / 3) * scale ** (2 / 3)
        L = ulog(n * d * M * B / omega)
        sigma1 = G * math.sqrt(B * eta * lg ** 2 / kappa) * L ** 2 / (n * eps)
        alpha_closed = (math.sqrt(d * B * G * M * lg ** 2) / (n * eps)) ** (2 / 3) \
            * ulog(n * B * M * d / (rho * omega)) ** 6

        def sigma2_for(alpha: float) -> float:
            return M * math.sqrt(lg ** 2 * B * M / alpha ** 2) * L ** 5 / (n * eps)

        sigma2 = sigma2_for(alpha_closed)
        params = OracleParams(sigma1, sigma2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cfg = derive_config(spec, induced_zetas(params, spec, mode, knobs.c_nsg), kappa,
                                omega, knobs)
        alpha_iterated = cfg.threshold
        params = OracleParams(sigma1, sigma2_for(alpha_iterated))
        split = None
    else:
        n1 = (n + 1) // 2
        scale = math.sqrt(d * lg) / (n * eps)
        log_d = math.log(d) if (knobs.utility_logs and d > 1) else 1.0
        kappa = max(G ** (4 / 3) * B ** (1 / 3) * log_d ** (1 / 3) / M ** (5 / 3) * n ** (-1 / 3),
                    (G * B ** (2 / 3) / M ** (5 / 3)) ** (6 / 7) * scale ** (4 / 7))
        alpha_closed = ((B * G * M * log_d) ** (1 / 3) * n ** (-1 / 3)
                        + G ** (1 / 7) * B ** (3 / 7) * M ** (3 / 7) * scale ** (3 / 7)) \
            * ulog(n * B * M * d / (rho * omega)) ** 3
        alpha_iterated = alpha_closed
        b1_raw = n * kappa / (B * eta)
        b2_raw = n * alpha_closed ** 2 / (B * M)
        b1, b2 = max(1, math.ceil(b1_raw)), max(1, math.ceil(b2_raw))
        if b1_raw < 1 or b2_raw < 1:
            warnings.warn(f"batch sizes rounded up to 1 (b1={b1_raw:.3g}, b2={b2_raw:.3g})",
                          RuntimeWarning, stacklevel=2)
        sigma1 = G * math.sqrt(lg) / (b1 * eps)
        sigma2 = M * math.sqrt(lg) / (b2 * eps)
        params = OracleParams(sigma1, sigma2, b1, b2)
        split = (n1, n - n1)

    zetas = induced_zetas(params, spec, mode, knobs.c_nsg)
    config = derive_config(spec, zetas, kappa, omega, knobs, alpha_target=alpha_closed)
    o1_acc, o2_acc, k_drift = _access_bounds(spec, config)
    if mode is OracleMode.POPULATION:
        need = params.b1 * o1_acc + params.b2 * o2_acc
        if need > n / 2:
            msg = (f"b1*|K| + b2*(T+1) = {params.b1}*{o1_acc} + {params.b2}*{o2_acc} = {need} "
                   f"exceeds n/2 = {n / 2}")
            if knobs.enforce_sample_budget:
                raise SampleBudgetInfeasible(msg)
            warnings.warn(msg + "; the run will stop when samples run out", RuntimeWarning,
                          stacklevel=2)
    return TheoremParams(mode=mode.value, oracle=params, kappa=kappa, alpha1=alpha_closed,
                         alpha1_iterated=alpha_iterated, config=config, o1_accesses=o1_acc,
                         o2_accesses=o2_acc, drift_count_bound=k_drift, split_sizes=split)


# -- privacy wiring -------------------------------------------------------------

def reserve_privacy(ledger, params: TheoremParams, phase: Budget):
    """Reserve half of ``phase`` for each oracle kind.

    Empirical mode splits each half over the bounded access count by advanced
    composition; population mode serves disjoint batches, so each half is a
    parallel group.  Returns the two account handles.
    """
    half = phase.scaled(0.5)
    if params.mode == OracleMode.EMPIRICAL.value:
        a1 = ledger.reserve_advanced("spider_o1", half, params.o1_accesses)
        a2 = ledger.reserve_advanced("spider_o2", half, params.o2_accesses)
    else:
        a1 = ledger.reserve_parallel("spider_o1", half)
        a2 = ledger.reserve_parallel("spider_o2", half)
    return a1, a2


def required_sigmas(params: TheoremParams, spec: ObjectiveSpec, phase: Budget,
                    n: int) -> tuple[float, float]:
    """Gaussian deviations that would back the per-access costs recorded by
    :func:`reserve_privacy` (replace-one sensitivities ``2G/n`` and
    ``2M sqrt(kappa)/n``, or ``2G/b1`` and ``2M/b2`` per unit step in
    population mode)."""
    half = phase.scaled(0.5)
    if params.mode == OracleMode.EMPIRICAL.value:
        per1 = compose_advanced(half, params.o1_accesses)
        per2 = compose_advanced(half, params.o2_accesses)
        s1 = gaussian_sigma(2 * spec.G / n, per1.epsilon, per1.delta)
        s2 = gaussian_sigma(2 * spec.M * math.sqrt(params.kappa) / n, per2.epsilon, per2.delta)
    else:
        s1 = gaussian_sigma(2 * spec.G / params.oracle.b1, half.epsilon, half.delta)
        s2 = gaussian_sigma(2 * spec.M / params.oracle.b2, half.epsilon, half.delta)
    return s1, s2


def calibrate_noise(params: TheoremParams, spec: ObjectiveSpec, phase: Budget, n: int,
                    max_rounds: int = 50) -> TheoremParams:
    """Raise the noise deviations until they back the reserved costs.

    More noise means a larger ``gamma`` and a shorter horizon, but once the
    horizon bottoms out the ``T gamma^2`` term of the access bound grows with
    the noise and no fixed point exists; that case raises ParamsInfeasible.
    """
    mode = OracleMode(params.mode)
    knobs = params.config.knobs
    current = params
    for _ in range(max_rounds):
        s1, s2 = required_sigmas(current, spec, phase, n)
        o = current.oracle
        if o.sigma1 >= s1 and o.sigma2 >= s2:
            return current
        oracle = OracleParams(max(o.sigma1, s1), max(o.sigma2, s2), o.b1, o.b2)
        zetas = induced_zetas(oracle, spec, mode, knobs.c_nsg)
        config = derive_config(spec, zetas, current.kappa, current.config.omega, knobs,
                               alpha_target=current.alpha1)
        o1_acc, o2_acc, k_drift = _access_bounds(spec, config)
        current = replace(current, oracle=oracle, config=config, o1_accesses=o1_acc,
                          o2_accesses=o2_acc, drift_count_bound=k_drift)
    raise ParamsInfeasible(
        f"noise calibration did not settle after {max_rounds} rounds: the access bound grows "
        "with the noise (sigma1 now {:.4g})".format(current.oracle.sigma1))

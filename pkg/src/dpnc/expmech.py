"""Regularized exponential mechanism: sampling from
``exp(-beta (F_D(x) + mu ||x||^2 / 2))`` on a ball, with the privacy level
certified through the log-Sobolev constant of the target.

The sampler alternates a forward Gaussian step ``y = x + sqrt(eta) xi`` with an
exact rejection sampler for ``exp(-V(x) - lam ||x||^2/2 - ||x - y||^2/(2 eta))``
restricted to the domain.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ParamsInfeasible, RejectionStall
from .objective import Dataset, Problem, empirical_values, population_values, problem_constants
from .privacy import lsi_dp_epsilon, stroock_clsi

ACCEPT_FLOOR = 1e-4


@dataclass(frozen=True)
class EMConfig:
    beta: float
    mu: float
    C_lsi: float
    eta_step: float
    T_steps: int
    delta_inner: float
    renyi_order: float = 1.0
    epsilon: float = math.nan
    delta: float = math.nan
    G: float = math.nan
    D: float = math.nan
    n: int = 0
    d: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def dp_epsilon(self) -> float:
        return lsi_dp_epsilon(self.G, self.beta, self.n, self.C_lsi, self.delta)


def _em_epsilon(beta: float, G: float, D: float, n: int, d: int, delta: float) -> float:
    mu = d / (D * D * beta)
    return lsi_dp_epsilon(G, beta, n, stroock_clsi(beta, mu, G, D), delta)


def step_and_horizon(beta: float, mu: float, C_lsi: float, G: float, D: float, delta: float, *,
                     c_eta: float = 1.0, c_T: float = 1.0, q: float = 1.0,
                     max_rounds: int = 100) -> tuple[float, int, float]:
    """``(eta, T, delta_inner)`` with ``eta = c_eta / (G_tot^2 ln(1/delta_inner))``,
    ``T = ceil(c_T (C_lsi/eta) ln(exp(q beta G D)/delta^2))`` and
    ``delta_inner = delta / (2T)``, iterated to a fixed point in ``T``."""
    G_tot = beta * (G + mu * D / 2.0)
    log_ratio = q * beta * G * D + 2.0 * math.log(1.0 / delta)
    delta_inner = delta / 2.0
    T = 0
    for _ in range(max_rounds):
        eta = c_eta / (G_tot ** 2 * math.log(1.0 / delta_inner))
        T_new = max(1, math.ceil(c_T * (C_lsi / eta) * log_ratio))
        if T_new == T:
            break
        T = T_new
        delta_inner = delta / (2.0 * T)
    return eta, T, delta_inner


def choose_em_params(epsilon: float, delta: float, G: float, D: float, n: int, d: int, *,
                     c_eta: float = 1.0, c_T: float = 1.0, q: float = 1.0,
                     beta_lo: float = 1e-12, rel_tol: float = 1e-13) -> EMConfig:
    """Largest inverse temperature whose log-Sobolev privacy bound stays within ``epsilon``.

    ``mu = d/(D^2 beta)``, so ``beta mu`` is fixed and the bound grows
    monotonically in ``beta``; bisection keeps the feasible endpoint.
    """
    if not (0 < epsilon < 0.5 and 0 < delta < 0.5):
        raise ValueError("need epsilon, delta in (0, 1/2)")
    if not (G > 0 and D > 0 and n >= 1 and d >= 1):
        raise ValueError("G, D, n, d must be positive")
    beta_hi = 700.0 * (1.0 - 1e-12) / (G * D)  # overflow guard of the Stroock constant
    if _em_epsilon(beta_lo, G, D, n, d, delta) > epsilon:
        raise ParamsInfeasible(f"even beta={beta_lo} exceeds epsilon={epsilon}")
    if _em_epsilon(beta_hi, G, D, n, d, delta) <= epsilon:
        lo = beta_hi
    else:
        lo, hi = beta_lo, beta_hi
        while hi - lo > rel_tol * hi:
            mid = 0.5 * (lo + hi)
            if _em_epsilon(mid, G, D, n, d, delta) <= epsilon:
                lo = mid
            else:
                hi = mid
    beta = lo
    mu = d / (D * D * beta)
    C_lsi = stroock_clsi(beta, mu, G, D)
    eps_used = lsi_dp_epsilon(G, beta, n, C_lsi, delta)
    assert eps_used <= epsilon, (eps_used, epsilon)
    if beta * G * D <= d:
        warnings.warn(f"beta*G*D = {beta * G * D:.3g} <= d = {d}: the utility bound does not "
                      "apply", RuntimeWarning, stacklevel=2)
    eta, T, delta_inner = step_and_horizon(beta, mu, C_lsi, G, D, delta, c_eta=c_eta, c_T=c_T,
                                           q=q)
    return EMConfig(beta=beta, mu=mu, C_lsi=C_lsi, eta_step=eta, T_steps=T,
                    delta_inner=delta_inner, renyi_order=q, epsilon=epsilon, delta=delta,
                    G=G, D=D, n=n, d=d)


# -- targets and samplers ---------------------------------------------------------

@dataclass(frozen=True)
class Target:
    """Potential ``V(x) + lam ||x||^2 / 2`` on a ball of ``radius`` (``None``: all of R^d).

    ``V`` maps an ``(m, d)`` batch to ``m`` values; ``lipschitz`` bounds its
    gradient on the domain.
    """

    V: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    d: int
    lam: float = 0.0
    radius: float | None = None

    def potential(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return self.V(xs) + 0.5 * self.lam * np.sum(xs * xs, axis=1)

    def project(self, xs: np.ndarray) -> np.ndarray:
        if self.radius is None:
            return xs
        norms = np.linalg.norm(xs, axis=1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(norms, 1e-300))
        return xs * scale

    def inside(self, xs: np.ndarray) -> np.ndarray:
        if self.radius is None:
            return np.ones(len(xs), dtype=bool)
        return np.sum(xs * xs, axis=1) <= self.radius ** 2


def zero_target(d: int, lam: float = 0.0, radius: float | None = None) -> Target:
    return Target(lambda xs: np.zeros(len(xs)), 0.0, d, lam, radius)


def em_target(problem: Problem, dataset: Dataset, beta: float, mu: float,
              D: float | None = None) -> Target:
    """``beta (F_D(x) + mu ||x||^2 / 2)`` on the centred ball of diameter ``D``."""
    D = problem.diameter if D is None else D
    spec = problem_constants(problem, D)
    V = lambda xs: beta * empirical_values(problem, dataset, xs)  # noqa: E731
    return Target(V, beta * spec.G, problem.d, beta * mu, D / 2.0)


def effective_radius(eta: float, d: int, delta_inner: float) -> float:
    """Radius around the proposal centre holding all but ``delta_inner`` of its mass."""
    return math.sqrt(eta) * max(6.0 * math.sqrt(d),
                                math.sqrt(d) + math.sqrt(2.0 * math.log(1.0 / delta_inner)))


def _rejection_batch(target: Target, Y: np.ndarray, eta: float, delta_inner: float,
                     rng: np.random.Generator, max_attempts: int):
    m, d = Y.shape
    shrink = 1.0 + eta * target.lam
    centre = Y / shrink
    sd = math.sqrt(eta / shrink)
    r_eff = effective_radius(eta / shrink, d, delta_inner)
    anchor = target.project(centre)
    gap = np.linalg.norm(centre - anchor, axis=1)
    # Valid lower bound of V on the proposal's effective support.
    lower = target.V(anchor) - target.lipschitz * (r_eff + gap)

    out = np.empty_like(Y)
    attempts = np.zeros(m, dtype=np.int64)
    pending = np.arange(m)
    while pending.size:
        attempts[pending] += 1
        prop = centre[pending] + sd * rng.standard_normal((pending.size, d))
        ok = target.inside(prop)
        u = rng.random(pending.size)
        accept = np.zeros(pending.size, dtype=bool)
        if ok.any():
            excess = target.V(prop[ok]) - lower[pending[ok]]
            accept[ok] = u[ok] <= np.exp(-np.maximum(excess, 0.0))
        out[pending[accept]] = prop[accept]
        pending = pending[~accept]
        if pending.size and attempts[pending].max() >= max_attempts:
            worst = int(attempts[pending].max())
            raise RejectionStall(
                f"{pending.size} chain(s) rejected {worst} proposals in a row (acceptance "
                f"below {1.0 / worst:.2g}, floor {ACCEPT_FLOOR}); eta={eta:.3g} is too large "
                f"for a Lipschitz scale of {target.lipschitz:.3g}")
    return out, attempts


def restricted_gaussian_sample(target: Target, y, eta: float, delta_inner: float,
                               rng: np.random.Generator, *, max_attempts: int | None = None,
                               return_attempts: bool = False):
    """Draw from ``exp(-potential(x) - ||x - y||^2/(2 eta))`` restricted to the domain.

    The quadratic part is folded into a Gaussian proposal
    ``N(y/(1+eta lam), eta/(1+eta lam) I)``; out-of-domain proposals are
    discarded and the rest accepted with ``exp(-(V(x) - L_y))``.  ``y`` may be
    a single point or an ``(m, d)`` batch of independent chains.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if not 0 < delta_inner < 1:
        raise ValueError("delta_inner must lie in (0, 1)")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if Y.shape[1] != target.d:
        raise ValueError("dimension mismatch")
    if max_attempts is None:
        max_attempts = int(round(10.0 / ACCEPT_FLOOR))
    X, attempts = _rejection_batch(target, Y, eta, delta_inner, rng, max_attempts)
    X = X[0] if single else X
    if return_attempts:
        return X, (attempts[0] if single else attempts)
    return X


def sample_initial(target: Target, beta_mu: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` draws from ``exp(-beta mu ||x||^2 / 2)`` conditioned on the domain."""
    sd = 1.0 / math.sqrt(beta_mu)
    out = sd * rng.standard_normal((m, target.d))
    bad = ~target.inside(out)
    while bad.any():
        out[bad] = sd * rng.standard_normal((int(bad.sum()), target.d))
        bad = ~target.inside(out)
    return out


def alternate_sample(target: Target, x0, config: EMConfig, rng: np.random.Generator, *,
                     T_steps: int | None = None, diagnostics: list | None = None,
                     max_attempts: int | None = None):
    """Run ``T_steps`` alternations from ``x0`` (a point or a batch of chains).

    When a list is passed as ``diagnostics``, one ``(chain_id, t, accept_rate)``
    tuple per chain and step is appended, followed by the point.
    """
    T = config.T_steps if T_steps is None else int(T_steps)
    if T < 0:
        raise ValueError("T_steps must be nonnegative")
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    X = np.atleast_2d(x0).copy()
    if target.radius is not None and not target.inside(X).all():
        raise ValueError("x0 must lie in the domain")
    eta = config.eta_step
    root = math.sqrt(eta)
    for t in range(1, T + 1):
        Y = X + root * rng.standard_normal(X.shape)
        X, attempts = restricted_gaussian_sample(target, Y, eta, config.delta_inner, rng,
                                                 max_attempts=max_attempts,
                                                 return_attempts=True)
        if diagnostics is not None:
            for i in range(len(X)):
                diagnostics.append((i, t, 1.0 / attempts[i], *X[i]))
    assert target.radius is None or target.inside(X).all()
    return X[0] if single else X


def write_diagnostics(path, rows: list, d: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain_id", "t", "accept_rate"] + [f"x{i}" for i in range(d)])
        for row in rows:
            writer.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


# -- utility report -----------------------------------------------------------------

def _grid(d: int, R: float, per_axis: int) -> np.ndarray:
    axis = np.linspace(-R, R, per_axis)
    if d == 1:
        return axis[:, None]
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts[np.sum(pts * pts, axis=1) <= R * R + 1e-12]


def domain_minimum(objective: Callable[[np.ndarray], np.ndarray], d: int, R: float,
                   per_axis: int | None = None) -> tuple[float, np.ndarray]:
    """Dense grid search over the ball (``d <= 2``) or multi-start SLSQP above that."""
    if d <= 2:
        per_axis = per_axis or (20001 if d == 1 else 1001)
        pts = _grid(d, R, per_axis)
        vals = objective(pts)
        i = int(np.argmin(vals))
        return float(vals[i]), pts[i]
    from scipy.optimize import minimize
    rng = np.random.default_rng(0)
    best = (math.inf, None)
    starts = [np.zeros(d)] + [R * v / max(1.0, np.linalg.norm(v))
                              for v in rng.uniform(-1, 1, size=(16, d))]
    cons = {"type": "ineq", "fun": lambda x: R * R - x @ x}
    for s in starts:
        res = minimize(lambda x: float(objective(x[None, :])[0]), s, method="SLSQP",
                       constraints=[cons])
        if res.fun < best[0] and res.x @ res.x <= R * R * (1 + 1e-9):
            best = (float(res.fun), res.x)
    return best


def em_excess_risk_report(samples, problem: Problem, dataset: Dataset, mu: float = 0.0,
                          D: float | None = None) -> tuple[float, float]:
    """Mean excess of ``F + mu ||x||^2/2`` over its domain minimum, for the
    empirical risk and for the population risk (exact for the synthetic
    family, whose population risk is the noise-free shape).

    The population column is NaN above ``d = 2``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise ValueError("need at least one sample")
    D = problem.diameter if D is None else D
    R = D / 2.0
    d = problem.d

    def emp(xs):
        return empirical_values(problem, dataset, xs) + 0.5 * mu * np.sum(xs * xs, axis=1)

    def pop(xs):
        return population_values(problem, xs) + 0.5 * mu * np.sum(xs * xs, axis=1)

    emp_min, _ = domain_minimum(emp, d, R)
    emp_excess = float(np.mean(emp(samples)) - emp_min)
    if d > 2:
        return emp_excess, math.nan
    pop_min, _ = domain_minimum(pop, d, R)
    return emp_excess, float(np.mean(pop(samples)) - pop_min)

"""Second-order stationarity certificates and the private two-statistic
AboveThreshold selector."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .objective import ObjectiveSpec, Problem, base_gradient, base_hessians, evaluate
from .privacy import laplace_sample

D_DENSE = 512


def smallest_eigenvalue(H, *, d_dense: int = D_DENSE, rtol: float = 1e-8,
                        max_iter: int = 200_000) -> float:
    """``lambda_min`` of a symmetric matrix.

    Up to ``d_dense`` rows a dense symmetric eigensolve is used; above that,
    power iteration on ``c I - H`` where ``c`` is a Gershgorin bound, so the
    dominant eigenvalue is ``c - lambda_min``.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("H must be a square matrix")
    if not np.all(np.isfinite(H)):
        raise ValueError("H has non-finite entries")
    if not np.allclose(H, H.T, rtol=0.0, atol=1e-10):
        H = 0.5 * (H + H.T)
    n = H.shape[0]
    if n <= d_dense:
        return float(np.linalg.eigvalsh(H)[0])
    c = float(np.max(np.sum(np.abs(H), axis=1)))
    if c == 0.0:
        return 0.0
    shifted = c * np.eye(n) - H
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = shifted @ v
        lam_new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # H = cI exactly along v.
            return c
        v = w / norm
        if abs(lam_new - lam) <= rtol * max(abs(lam_new), 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return c - lam


@dataclass(frozen=True)
class SOSPReport:
    grad_norm: float
    smin: float
    alpha: float
    rho: float
    is_fosp: bool
    is_sosp: bool


def certify_sosp(grad, hess_smin: float, alpha: float, rho: float) -> SOSPReport:
    """``||grad|| <= alpha`` and ``smin >= -sqrt(rho alpha)``, both inclusive."""
    if not (alpha > 0 and rho > 0):
        raise ValueError("alpha and rho must be positive")
    g = float(np.linalg.norm(np.asarray(grad, dtype=float)))
    fosp = g <= alpha
    sosp = fosp and hess_smin >= -math.sqrt(rho * alpha)
    return SOSPReport(g, float(hess_smin), float(alpha), float(rho), bool(fosp), bool(sosp))


def certify_point(problem: Problem, data, x, alpha: float, rho: float) -> SOSPReport:
    """Certificate from the exact gradient and Hessian of ``F_S`` at ``x``."""
    _, grad, hess = evaluate(problem, data, x, want_hessian=True)
    return certify_sosp(grad, smallest_eigenvalue(hess), alpha, rho)


# -- AboveThreshold -----------------------------------------------------------

@dataclass(frozen=True)
class ThresholdState:
    T_hat1: float
    T_hat2: float
    noise_scales: tuple[float, float, float, float]
    margin: tuple[float, float]


@dataclass
class SelectionResult:
    index: int | None
    point: np.ndarray | None
    state: ThresholdState
    decisions: list[dict] = field(default_factory=list)
    halt_reason: str = "exhausted"

    @property
    def found(self) -> bool:
        return self.index is not None


def threshold_margins(T: int, n: int, epsilon: float, omega: float, G: float, M: float,
                      factor: float = 16.0) -> tuple[float, float]:
    """``factor * ln(2T/omega) * (G, M) / (n epsilon)``."""
    base = factor * math.log(2.0 * T / omega) / (n * epsilon)
    return base * G, base * M


def soundness_margins(T: int, n: int, epsilon: float, omega: float, G: float,
                      M: float) -> tuple[float, float]:
    """Slack by which a returned point may miss the target with probability at most ``omega``."""
    return threshold_margins(T, n, epsilon, omega, G, M, factor=32.0)


def above_threshold(points, S, problem: Problem, spec: ObjectiveSpec, alpha: float,
                    epsilon: float, omega: float, rng: np.random.Generator, *,
                    noise: bool = True, ledger=None, label: str = "above_threshold",
                    stats=None) -> SelectionResult:
    """Return the first candidate whose noisy gradient norm is below ``T_hat1``
    and whose noisy smallest Hessian eigenvalue is above ``T_hat2``.

    The whole invocation costs ``(epsilon, 0)``; it is charged once, before
    the scan.  ``noise=False`` zeroes every Laplace scale but keeps the
    margins.  ``stats`` optionally replaces the exact ``(||grad F_S||, smin)``
    evaluation and is called lazily, one candidate at a time.
    """
    points = np.asarray(points, dtype=float)
    T = len(points)
    if T < 1:
        raise ValueError("need at least one candidate point")
    if not (alpha > 0 and epsilon > 0 and 0 < omega < 1):
        raise ValueError("need alpha > 0, epsilon > 0, 0 < omega < 1")
    n = S.n
    G, M, rho = spec.G, spec.M, spec.rho
    if ledger is not None:
        ledger.charge(label, epsilon, 0.0)
    unit = 1.0 / (n * epsilon) if noise else 0.0
    scales = (4 * G * unit, 8 * G * unit, 4 * M * unit, 8 * M * unit)
    margin = threshold_margins(T, n, epsilon, omega, G, M)
    T_hat1 = alpha + laplace_sample(rng, scales[0]) + margin[0]
    T_hat2 = -math.sqrt(rho * alpha) + laplace_sample(rng, scales[2]) - margin[1]
    state = ThresholdState(T_hat1, T_hat2, scales, margin)
    result = SelectionResult(None, None, state)

    if stats is None:
        def stats(x):
            _, grad, hess = evaluate(problem, S, x, want_hessian=True)
            return float(np.linalg.norm(grad)), smallest_eigenvalue(hess)

    for i in range(T):
        g, s = stats(points[i])
        noisy_g = g + laplace_sample(rng, scales[1])
        noisy_s = s + laplace_sample(rng, scales[3])
        passed = noisy_g <= T_hat1 and noisy_s >= T_hat2
        result.decisions.append({"index": i, "grad_norm": g, "smin": s, "noisy_grad": noisy_g,
                                 "noisy_smin": noisy_s, "passed": passed})
        if passed:
            result.index, result.point = i, points[i].copy()
            result.halt_reason = "passed"
            break
    return result


def population_deviation_bound(m: int, spec: ObjectiveSpec, omega: float, c_g: float = 1.0,
                               c_h: float = 1.0) -> tuple[float, float]:
    """High-probability gaps between empirical and population gradient and
    Hessian for an ``m``-sample average: ``(c_g G, c_h M) ln(d/omega)/sqrt(m)``."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if not 0 < omega < 1:
        raise ValueError("omega must lie in (0, 1)")
    scale = math.log(spec.d / omega) / math.sqrt(m)
    return c_g * spec.G * scale, c_h * spec.M * scale


def certify_points(problem: Problem, data, points, alpha: float, rho: float,
                   population: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``(grad_norm, smin, is_sosp)`` over a batch of points, exact
    for ``F_S`` (or for the population risk when ``population`` is set)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    grads = base_gradient(problem, pts)
    if not population:
        grads = grads + (data.mean if hasattr(data, "mean") else np.mean(data, axis=0))
    gnorm = np.linalg.norm(grads, axis=1)
    with np.errstate(invalid="ignore", over="ignore"):
        hess = base_hessians(problem, pts)
        finite = np.all(np.isfinite(hess), axis=(1, 2))
        smin = np.full(len(pts), np.nan)
        if finite.any():
            smin[finite] = np.linalg.eigvalsh(hess[finite])[:, 0]
        sosp = (gnorm <= alpha) & (smin >= -math.sqrt(rho * alpha))
    return gnorm, smin, sosp

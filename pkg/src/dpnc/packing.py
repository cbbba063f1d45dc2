"""Grid nets of a Euclidean ball and the discrete exponential mechanism over them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParamsInfeasible
from .expmech import domain_minimum
from .objective import Dataset, Problem, empirical_values, population_values

D_MAX_PACKING = 4
HARD_CAP = 10_000_000
AUDIT_LIMIT = 1000


@dataclass(frozen=True)
class Packing:
    centers: np.ndarray
    radius: float
    covering_radius_cert: float
    spacing: float
    diameter: float

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def __len__(self) -> int:
        return len(self.centers)


def default_radius(D: float, d: int, epsilon: float, n: int) -> float:
    """``D d / (epsilon n)``, clamped to ``D/2``."""
    if epsilon <= 0:
        return D / 2.0
    return min(D * d / (epsilon * n), D / 2.0)


def build_packing(d: int, D: float, r: float, *, d_max: int = D_MAX_PACKING,
                  cap: int = HARD_CAP) -> Packing:
    """Axis grid of spacing ``2r/sqrt(d)`` inside the ball of diameter ``D``.

    Each grid cell has circumradius ``r``.  Grid points outside the ball whose
    cell still reaches into it are replaced by their projections onto the
    ball; projection is non-expansive toward ball points, so every point of
    the ball stays within ``r`` of a centre.
    """
    if d < 1 or d > d_max:
        raise ValueError(f"d must lie in [1, {d_max}], got {d}")
    R = D / 2.0
    if not 0 < r <= R:
        raise ValueError(f"r must lie in (0, D/2], got {r}")
    if r >= R:
        return Packing(np.zeros((1, d)), r, R, 2.0 * r / math.sqrt(d), D)
    s = 2.0 * r / math.sqrt(d)
    K = int(math.floor(R / s)) + 1
    count = (2 * K + 1) ** d
    if count > cap:
        raise ParamsInfeasible(f"grid of {count} points exceeds the cap of {cap}")
    axis = s * np.arange(-K, K + 1)
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    norms = np.linalg.norm(grid, axis=1)
    inside = norms <= R * (1.0 + 1e-12)
    # Distance from the origin to each grid cell (a cube of side s).
    cell_gap = np.linalg.norm(np.maximum(np.abs(grid) - s / 2.0, 0.0), axis=1)
    border = ~inside & (cell_gap < R)
    projected = grid[border] * (R / norms[border])[:, None]
    centers = np.vstack([grid[inside], projected])
    return Packing(centers, r, s * math.sqrt(d) / 2.0, s, D)


def covering_probe(packing: Packing, n_probe: int, rng: np.random.Generator) -> float:
    """Largest distance from ``n_probe`` uniform ball points to their nearest centre."""
    d, R = packing.d, packing.diameter / 2.0
    g = rng.standard_normal((n_probe, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pts = g * (R * rng.random(n_probe) ** (1.0 / d))[:, None]
    dist, _ = cKDTree(packing.centers).query(pts)
    return float(dist.max())


def exp_mech_probabilities(values, epsilon: float, n: int, G: float, D: float) -> np.ndarray:
    """Selection law ``exp(-epsilon n F(p) / (2 G D))``, normalised after
    shifting by the minimum so that the best centre has weight one."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("need at least one centre")
    if epsilon == 0:
        return np.full(values.size, 1.0 / values.size)
    logits = -epsilon * n * (values - values.min()) / (2.0 * G * D)
    w = np.exp(logits)
    return w / w.sum()


@dataclass
class DiscreteSelection:
    index: int
    point: np.ndarray
    probabilities: np.ndarray | None


def discrete_em_select(packing: Packing, dataset: Dataset, problem: Problem, epsilon: float,
                       G: float, D: float, rng: np.random.Generator, *, ledger=None,
                       label: str = "discrete_exp_mech") -> DiscreteSelection:
    """Exponential mechanism over the centres with score ``-F_D``.

    Per-sample losses vary by at most ``G D`` on the ball, so the score has
    sensitivity ``G D / n``.  The mechanism is ``(epsilon, 0)``-DP.
    """
    if len(packing) == 0:
        raise ValueError("empty packing")
    if ledger is not None:
        ledger.charge(label, epsilon, 0.0)
    values = empirical_values(problem, dataset, packing.centers)
    probs = exp_mech_probabilities(values, epsilon, dataset.n, G, D)
    idx = int(rng.choice(len(probs), p=probs))
    audit = probs if len(probs) <= AUDIT_LIMIT else None
    return DiscreteSelection(idx, packing.centers[idx].copy(), audit)


def packing_risk_report(selected, problem: Problem, dataset: Dataset,
                        population_probe=None, D: float | None = None) -> tuple[float, float]:
    """Excess empirical and population risk of ``selected`` points over the
    grid-searched domain minima (``d <= 2``)."""
    if problem.d > 2:
        raise ValueError("exact grid-search minima need d <= 2")
    D = problem.diameter if D is None else D
    R = D / 2.0
    pts = np.atleast_2d(np.asarray(selected, dtype=float))
    pop = population_probe or (lambda xs: population_values(problem, xs))
    emp = lambda xs: empirical_values(problem, dataset, xs)  # noqa: E731
    emp_min, _ = domain_minimum(emp, problem.d, R)
    pop_min, _ = domain_minimum(pop, problem.d, R)
    return float(np.mean(emp(pts)) - emp_min), float(np.mean(pop(pts)) - pop_min)


def save_packing(path, packing: Packing) -> None:
    header = (f"d={packing.d},diameter={packing.diameter!r},radius={packing.radius!r},"
              f"spacing={packing.spacing!r},covering_radius_cert={packing.covering_radius_cert!r}")
    np.savetxt(path, packing.centers, delimiter=",", header=header, fmt="%.17g")


def load_packing(path) -> Packing:
    with open(path) as fh:
        first = fh.readline()
    meta = dict(item.split("=", 1) for item in first[1:].strip().split(","))
    d = int(meta["d"])
    centers = np.loadtxt(path, delimiter=",", ndmin=2).reshape(-1, d)
    return Packing(centers, float(meta["radius"]), float(meta["covering_radius_cert"]),
                   float(meta["spacing"]), float(meta["diameter"]))

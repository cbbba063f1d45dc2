"""Synthetic non-convex benchmark family with known constants.

Every per-sample loss has the form ``f(x; z) = g(x) + <z, x>`` where ``g`` is
one of three fixed shapes and ``z`` is drawn uniformly from the box
``[-p, p]^d``.  Because the data enters linearly, empirical averages only need
the sample mean of ``z`` and the population risk is ``g`` itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ProblemKind(str, Enum):
    QUADRATIC = "quadratic"
    CUBIC_SADDLE = "cubic_saddle"
    DOUBLE_WELL = "double_well"


@dataclass(frozen=True)
class ObjectiveSpec:
    """Constants of Assumption-style bounds: Lipschitz ``G``, smoothness ``M``,
    Hessian-Lipschitz ``rho``, value range ``B``, diameter ``D``, dimension ``d``."""

    G: float
    M: float
    rho: float
    B: float
    D: float
    d: int

    def __post_init__(self):
        for name in ("G", "M", "rho", "B", "D"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite positive number, got {value!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d!r}")

    def check_alpha(self, alpha: float) -> bool:
        """True when ``M >= sqrt(rho * alpha)`` (second-order target is non-trivial)."""
        return self.M >= math.sqrt(self.rho * alpha)


@dataclass(frozen=True)
class Problem:
    kind: ProblemKind
    d: int
    perturbation_bound: float
    params: tuple[float, ...] = ()
    diameter: float = 4.0
    seed: int = 0

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    @property
    def a(self) -> float:
        return self.params[0] if self.params else 1.0


@dataclass
class Dataset:
    samples: np.ndarray
    generator_seed: int = 0
    _mean: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = self.samples.mean(axis=0)
        return self._mean

    def subset(self, indices) -> "Dataset":
        return Dataset(self.samples[np.asarray(indices)], self.generator_seed)

    def split_halves(self) -> tuple["Dataset", "Dataset"]:
        """Disjoint halves of size ceil(n/2) and floor(n/2)."""
        cut = (self.n + 1) // 2
        return (Dataset(self.samples[:cut], self.generator_seed),
                Dataset(self.samples[cut:], self.generator_seed))

    def replace_sample(self, index: int, z) -> "Dataset":
        samples = self.samples.copy()
        samples[index] = z
        return Dataset(samples, self.generator_seed)


def make_problem(kind, d: int, perturbation_bound: float, seed: int = 0, *,
                 a: float = 1.0, diameter: float = 4.0) -> Problem:
    """Build a benchmark problem; ``a`` only matters for ``cubic_saddle``."""
    kind = ProblemKind(kind)
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d!r}")
    if perturbation_bound < 0:
        raise ValueError("perturbation_bound must be nonnegative")
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    params = (float(a),) if kind is ProblemKind.CUBIC_SADDLE else ()
    if kind is ProblemKind.CUBIC_SADDLE and a <= 0:
        raise ValueError("cubic_saddle needs a > 0")
    return Problem(kind, int(d), float(perturbation_bound), params, float(diameter), int(seed))


def sample_dataset(problem: Problem, n: int, seed: int | None = None) -> Dataset:
    """Draw ``n`` perturbation vectors uniform on ``[-p, p]^d``.

    The generator seed defaults to the problem's seed and is recorded on the dataset.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    seed = problem.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    p = problem.perturbation_bound
    samples = rng.uniform(-p, p, size=(n, problem.d)) if p > 0 else np.zeros((n, problem.d))
    return Dataset(samples, generator_seed=seed)


# -- base shape g and its derivatives -------------------------------------

def base_value(problem: Problem, x: np.ndarray) -> np.ndarray:
    """``g(x)`` for a point (shape ``(d,)``) or a batch (shape ``(m, d)``)."""
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    rest = 0.5 * np.sum(x[..., 1:] ** 2, axis=-1)
    if problem.kind is ProblemKind.QUADRATIC:
        return 0.5 * np.sum(x ** 2, axis=-1)
    if problem.kind is ProblemKind.CUBIC_SADDLE:
        return problem.a * (x1 ** 3 / 3.0 - x1) + rest
    return 0.25 * (x1 ** 2 - 1.0) ** 2 + rest


def base_gradient(problem: Problem, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = x.copy()
    x1 = x[..., 0]
    if problem.kind is ProblemKind.CUBIC_SADDLE:
        grad[..., 0] = problem.a * (x1 ** 2 - 1.0)
    elif problem.kind is ProblemKind.DOUBLE_WELL:
        grad[..., 0] = x1 ** 3 - x1
    return grad


def base_hessian(problem: Problem, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    hess = np.eye(problem.d)
    if problem.kind is ProblemKind.CUBIC_SADDLE:
        hess[0, 0] = 2.0 * problem.a * x[0]
    elif problem.kind is ProblemKind.DOUBLE_WELL:
        hess[0, 0] = 3.0 * x[0] ** 2 - 1.0
    return hess


def base_hessians(problem: Problem, xs: np.ndarray) -> np.ndarray:
    """Hessians for an ``(m, d)`` batch, shape ``(m, d, d)``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    hess = np.broadcast_to(np.eye(problem.d), (len(xs), problem.d, problem.d)).copy()
    if problem.kind is ProblemKind.CUBIC_SADDLE:
        hess[:, 0, 0] = 2.0 * problem.a * xs[:, 0]
    elif problem.kind is ProblemKind.DOUBLE_WELL:
        hess[:, 0, 0] = 3.0 * xs[:, 0] ** 2 - 1.0
    return hess


def per_sample_value(problem: Problem, x, z) -> float:
    x = np.asarray(x, dtype=float)
    return float(base_value(problem, x) + np.dot(z, x))


def per_sample_gradient(problem: Problem, x, z) -> np.ndarray:
    return base_gradient(problem, x) + np.asarray(z, dtype=float)


def evaluate(problem: Problem, data, x, want_hessian: bool = False):
    """Exact ``(F_S(x), grad F_S(x), hess F_S(x) or None)`` over a dataset or subset.

    ``data`` may be a :class:`Dataset` or an ``(m, d)`` array of samples.
    """
    if isinstance(data, Dataset):
        zbar = data.mean
    else:
        samples = np.atleast_2d(np.asarray(data, dtype=float))
        if samples.shape[0] == 0:
            raise ValueError("cannot evaluate on an empty subset")
        zbar = samples.mean(axis=0)
    x = np.asarray(x, dtype=float)
    value = float(base_value(problem, x) + zbar @ x)
    grad = base_gradient(problem, x) + zbar
    hess = base_hessian(problem, x) if want_hessian else None
    return value, grad, hess


def empirical_values(problem: Problem, dataset: Dataset, xs: np.ndarray) -> np.ndarray:
    """Vectorised ``F_D`` over a batch of points."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    return base_value(problem, xs) + xs @ dataset.mean


def population_values(problem: Problem, xs: np.ndarray) -> np.ndarray:
    """``F_P`` over a batch; the perturbation has mean zero so this is ``g``."""
    return base_value(problem, np.atleast_2d(np.asarray(xs, dtype=float)))


def population_gradient(problem: Problem, x) -> np.ndarray:
    return base_gradient(problem, x)


# -- constants ----------------------------------------------------------------

def _cubic_extremes(a: float, R: float) -> tuple[float, float, float]:
    """(max |h'|, max h, min h) for h(s) = a(s^3/3 - s) on [-R, R]."""
    cands = [-R, R] + [s for s in (-1.0, 1.0) if abs(s) <= R]
    vals = [a * (s ** 3 / 3.0 - s) for s in cands]
    return a * max(1.0, abs(R * R - 1.0)), max(vals), min(vals)


def problem_constants(problem: Problem, D: float | None = None, *, rho_min: float = 1e-3) -> ObjectiveSpec:
    """Closed-form ``(G, M, rho, B)`` valid on the centred ball of diameter ``D``.

    ``rho`` is floored at ``rho_min`` because the quadratic has no curvature change.
    """
    D = problem.diameter if D is None else float(D)
    if D <= 0:
        raise ValueError("D must be positive")
    R = D / 2.0
    d = problem.d
    p = problem.perturbation_bound
    has_rest = d > 1
    rest_grad = R if has_rest else 0.0
    rest_range = R * R / 2.0 if has_rest else 0.0

    if problem.kind is ProblemKind.QUADRATIC:
        G = R
        M = 1.0
        rho = 0.0
        B = R * R / 2.0
    elif problem.kind is ProblemKind.CUBIC_SADDLE:
        a = problem.a
        slope, hi, lo = _cubic_extremes(a, R)
        G = math.hypot(slope, rest_grad)
        M = max(2.0 * a * R, 1.0 if has_rest else 0.0)
        rho = 2.0 * a
        B = (hi - lo) + rest_range
    else:
        # |s^3 - s| peaks at s = R or at the interior critical point 1/sqrt(3).
        cands = [R] + ([1.0 / math.sqrt(3.0)] if R >= 1.0 / math.sqrt(3.0) else [])
        slope = max(abs(s ** 3 - s) for s in cands)
        G = math.hypot(slope, rest_grad)
        M = max(abs(3.0 * R * R - 1.0), 1.0)
        rho = 6.0 * R
        B = max(0.25 * (R * R - 1.0) ** 2, 0.25 if R >= 1.0 else 0.0) + rest_range

    G += p * math.sqrt(d)
    B += 2.0 * p * R * math.sqrt(d)
    # The constants must be strictly positive even for degenerate shapes.
    tiny = 1e-12
    return ObjectiveSpec(G=max(G, tiny), M=max(M, tiny), rho=max(rho, rho_min),
                         B=max(B, tiny), D=D, d=d)


# -- serialization ------------------------------------------------------------

def save_dataset(path, dataset: Dataset, problem: Problem) -> None:
    header = (f"kind={problem.kind.value},seed={dataset.generator_seed},n={dataset.n},"
              f"d={dataset.d},perturbation_bound={problem.perturbation_bound!r}")
    np.savetxt(path, dataset.samples, delimiter=",", header=header, fmt="%.17g")


def load_dataset(path) -> tuple[Dataset, dict]:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise ValueError(f"{path}: missing dataset header")
    meta = dict(item.split("=", 1) for item in first[1:].strip().split(","))
    n, d = int(meta["n"]), int(meta["d"])
    samples = np.loadtxt(path, delimiter=",", ndmin=2).reshape(n, d)
    meta = {"kind": meta["kind"], "seed": int(meta["seed"]), "n": n, "d": d,
            "perturbation_bound": float(meta["perturbation_bound"])}
    return Dataset(samples, meta["seed"]), meta

"""Noisy gradient oracles of the first kind (gradient) and second kind
(gradient difference), for the empirical and the population setting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataExhausted
from .objective import Dataset, ObjectiveSpec, Problem, base_gradient

FULL = None


class OracleMode(str, Enum):
    EMPIRICAL = "empirical"
    POPULATION = "population"


@dataclass(frozen=True)
class OracleParams:
    """Noise deviations and batch sizes.  ``b1``/``b2`` of ``None`` mean full batch."""

    sigma1: float
    sigma2: float
    b1: int | None = FULL
    b2: int | None = FULL

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("noise deviations must be nonnegative")
        for b in (self.b1, self.b2):
            if b is not None and b < 1:
                raise ValueError("batch sizes must be positive")


def induced_zetas(params: OracleParams, spec: ObjectiveSpec, mode, c: float = 1.0) -> tuple[float, float]:
    """Norm-subGaussian constants of the two oracle kinds.

    Empirical: Gaussian noise alone, ``sigma * sqrt(d)``.  Population: the
    sampling term ``c * L * sqrt(ln d) / sqrt(b)`` is added, with ``L = G`` for
    the first kind and ``L = M`` for the second.
    """
    mode = OracleMode(mode)
    root_d = math.sqrt(spec.d)
    zeta1 = params.sigma1 * root_d
    zeta2 = params.sigma2 * root_d
    if mode is OracleMode.POPULATION:
        log_d = math.sqrt(math.log(spec.d)) if spec.d > 1 else 0.0
        if params.b1 is not None:
            zeta1 += c * spec.G * log_d / math.sqrt(params.b1)
        if params.b2 is not None:
            zeta2 += c * spec.M * log_d / math.sqrt(params.b2)
    return zeta1, zeta2


class SampleCursor:
    """Serves dataset indices without replacement across a whole run."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.permutation = rng.permutation(n)
        self.next_index = 0

    @property
    def consumed(self) -> int:
        return self.next_index

    @property
    def remaining(self) -> int:
        return len(self.permutation) - self.next_index

    def take(self, k: int) -> np.ndarray:
        if k > self.remaining:
            raise DataExhausted(
                f"need {k} fresh samples but only {self.remaining} remain "
                f"({self.consumed} already consumed)")
        out = self.permutation[self.next_index:self.next_index + k]
        self.next_index += k
        return out

    def consumed_indices(self) -> np.ndarray:
        return self.permutation[:self.next_index]


class GradientOracles:
    """Both oracle kinds for one run.

    The instance owns its RNG stream and, in population mode, its cursor.
    ``o1_account``/``o2_account`` are optional ledger handles with a
    ``spend()`` method; each call spends one access.
    """

    def __init__(self, problem: Problem, dataset: Dataset, params: OracleParams, mode,
                 rng: np.random.Generator, *, o1_account=None, o2_account=None,
                 log_calls: bool = False):
        self.problem = problem
        self.dataset = dataset
        self.params = params
        self.mode = OracleMode(mode)
        self.rng = rng
        self.o1_account = o1_account
        self.o2_account = o2_account
        self.cursor = SampleCursor(dataset.n, rng) if self.mode is OracleMode.POPULATION else None
        self.calls = {"o1": 0, "o2": 0}
        self.log: list[tuple[str, int, float]] | None = [] if log_calls else None
        self._d = problem.d

    def _batch_mean(self, b: int | None) -> tuple[np.ndarray, int]:
        if b is None:
            return self.dataset.mean, self.dataset.n
        idx = self.cursor.take(b)
        return self.dataset.samples[idx].mean(axis=0), b

    def _noise(self, scale: float) -> np.ndarray:
        if scale == 0.0:
            return np.zeros(self._d)
        return scale * self.rng.standard_normal(self._d)

    def o1(self, x: np.ndarray) -> np.ndarray:
        """Unbiased noisy gradient at ``x``."""
        b = None if self.mode is OracleMode.EMPIRICAL else self.params.b1
        zbar, used = self._batch_mean(b)
        if self.o1_account is not None:
            self.o1_account.spend()
        scale = self.params.sigma1
        grad = base_gradient(self.problem, x) + zbar + self._noise(scale)
        self.calls["o1"] += 1
        if self.log is not None:
            self.log.append(("o1", used, scale))
        return grad

    def o2(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Unbiased noisy estimate of ``grad F(x) - grad F(y)``.

        Population noise has deviation ``sigma2 * ||x - y||``; empirical noise
        has the fixed deviation ``sigma2``.
        """
        if self.mode is OracleMode.EMPIRICAL:
            used = self.dataset.n
            scale = self.params.sigma2
        else:
            # The perturbation is linear in x, so it cancels in the difference;
            # the batch is still drawn so that sample accounting stays honest.
            used = self.params.b2 if self.params.b2 is not None else self.dataset.n
            if self.params.b2 is not None:
                self.cursor.take(self.params.b2)
            scale = self.params.sigma2 * float(np.linalg.norm(x - y))
        if self.o2_account is not None:
            self.o2_account.spend()
        diff = base_gradient(self.problem, x) - base_gradient(self.problem, y) + self._noise(scale)
        self.calls["o2"] += 1
        if self.log is not None:
            self.log.append(("o2", used, scale))
        return diff

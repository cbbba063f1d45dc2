"""Noise calibration, composition rules and a strict privacy ledger.

Logarithms are natural throughout.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import BudgetExceeded, ConstantOverflow

# exp() overflows float64 a little above 709.
_EXP_GUARD = 700.0


@dataclass(frozen=True)
class Budget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon!r}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta!r}")

    def scaled(self, eps_fraction: float, delta_fraction: float | None = None) -> "Budget":
        delta_fraction = eps_fraction if delta_fraction is None else delta_fraction
        return Budget(self.epsilon * eps_fraction, self.delta * delta_fraction)


def laplace_inverse_cdf(u: float, b: float) -> float:
    """The ``u``-quantile of ``Lap(b)``."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie strictly inside (0, 1), got {u!r}")
    if not b > 0:
        raise ValueError(f"scale must be positive, got {b!r}")
    c = u - 0.5
    return -math.copysign(1.0, c) * b * math.log1p(-2.0 * abs(c)) if c != 0 else 0.0


def laplace_sample(rng: np.random.Generator, b: float, size=None):
    """Inverse-CDF Laplace draws; ``b == 0`` returns exact zeros (noise disabled)."""
    if b < 0:
        raise ValueError("scale must be nonnegative")
    if b == 0:
        return 0.0 if size is None else np.zeros(size)
    u = rng.random(size)
    # Map the closed-open uniform onto the open interval.
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    c = u - 0.5
    out = -np.sign(c) * b * np.log1p(-2.0 * np.abs(c))
    return float(out) if size is None else out


def gaussian_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Classical Gaussian-mechanism calibration ``Δ·sqrt(2 ln(1.25/δ))/ε``."""
    if not sensitivity > 0:
        raise ValueError("sensitivity must be positive")
    if not 0 < epsilon < 1:
        raise ValueError(f"the classical calibration needs 0 < epsilon < 1, got {epsilon!r}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def compose_advanced(total: Budget, k: int) -> Budget:
    """Per-access budget so that ``k`` accesses meet ``total`` (Kairouz et al. split).

    The rule only holds for ``total.epsilon <= 0.9``; larger targets are refused.
    """
    if k < 1 or int(k) != k:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    if total.epsilon > 0.9:
        raise ValueError(
            f"advanced composition split requires epsilon <= 0.9 (got {total.epsilon}); "
            "split the budget across phases first")
    if not 0 < total.delta < 1:
        raise ValueError("advanced composition needs 0 < delta < 1")
    eps = total.epsilon / (2.0 * math.sqrt(2.0 * k * math.log(2.0 / total.delta)))
    return Budget(eps, total.delta / (2.0 * k))


def lsi_dp_epsilon(G: float, beta: float, n: int, C_lsi: float, delta: float) -> float:
    """Privacy loss of sampling a Gibbs law whose LSI constant is ``C_lsi``."""
    if G <= 0 or beta <= 0 or n <= 0 or C_lsi < 0:
        raise ValueError("G, beta, n must be positive and C_lsi nonnegative")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return 2.0 * (G * beta / n) * math.sqrt(C_lsi) * math.sqrt(1.0 + 2.0 * math.log(1.0 / delta))


def stroock_clsi(beta: float, mu: float, G: float, D: float) -> float:
    """Bounded-perturbation LSI constant ``exp(βGD)/(βμ)``."""
    if beta <= 0 or mu <= 0 or G < 0 or D < 0:
        raise ValueError("beta, mu must be positive; G, D nonnegative")
    exponent = beta * G * D
    if exponent > _EXP_GUARD:
        raise ConstantOverflow(
            f"LSI constant astronomically large: beta*G*D = {exponent:.4g} > {_EXP_GUARD}")
    return math.exp(exponent) / (beta * mu)


# -- ledger -------------------------------------------------------------------

@dataclass
class MechanismCost:
    """One ledger line.

    ``composition`` decides how the line enters the total:

    * ``basic``: ``count`` independent uses, each costing ``(epsilon, delta)``;
    * ``advanced``: a reserved group of at most ``k`` accesses whose per-access
      cost was produced by :func:`compose_advanced`; the line costs the group
      total from the moment it is reserved;
    * ``parallel``: mechanisms on disjoint data; the line costs one
      ``(epsilon, delta)`` however many batches were served.
    """

    label: str
    epsilon: float
    delta: float
    count: int = 0
    composition: str = "basic"
    k: int | None = None
    group_epsilon: float | None = None
    group_delta: float | None = None

    def total(self) -> tuple[Fraction, Fraction]:
        if self.composition == "basic":
            return Fraction(self.epsilon) * self.count, Fraction(self.delta) * self.count
        return Fraction(self.group_epsilon), Fraction(self.group_delta)


class GroupAccount:
    """Handle for an advanced or parallel group; call :meth:`spend` per access."""

    def __init__(self, ledger: "Ledger", entry: MechanismCost):
        self.ledger = ledger
        self.entry = entry

    @property
    def per_access(self) -> Budget:
        return Budget(self.entry.epsilon, self.entry.delta)

    def spend(self, count: int = 1) -> None:
        entry = self.entry
        if entry.k is not None and entry.count + count > entry.k and self.ledger.strict:
            raise BudgetExceeded(
                f"{entry.label}: {entry.count + count} accesses exceed the reserved {entry.k}")
        entry.count += count


class Ledger:
    """Single-writer privacy ledger; strict mode raises on any overrun."""

    def __init__(self, target: Budget, strict: bool = True):
        self.target = target
        self.strict = strict
        self.entries: list[MechanismCost] = []

    def charge(self, label: str, epsilon: float, delta: float = 0.0, count: int = 1) -> MechanismCost:
        if epsilon < 0 or delta < 0 or count < 0:
            raise ValueError("costs and counts must be nonnegative")
        entry = MechanismCost(label, float(epsilon), float(delta), int(count))
        self.entries.append(entry)
        try:
            self._check()
        except BudgetExceeded:
            self.entries.pop()
            raise
        return entry

    def reserve_advanced(self, label: str, group: Budget, k: int) -> GroupAccount:
        per = compose_advanced(group, k)
        entry = MechanismCost(label, per.epsilon, per.delta, 0, "advanced", int(k),
                              group.epsilon, group.delta)
        return self._add_group(entry)

    def reserve_parallel(self, label: str, group: Budget) -> GroupAccount:
        entry = MechanismCost(label, group.epsilon, group.delta, 0, "parallel", None,
                              group.epsilon, group.delta)
        return self._add_group(entry)

    def _add_group(self, entry: MechanismCost) -> GroupAccount:
        self.entries.append(entry)
        try:
            self._check()
        except BudgetExceeded:
            self.entries.pop()
            raise
        return GroupAccount(self, entry)

    def exact_totals(self) -> tuple[Fraction, Fraction]:
        eps, delta = Fraction(0), Fraction(0)
        for entry in self.entries:
            e, d = entry.total()
            eps += e
            delta += d
        return eps, delta

    def totals(self) -> Budget:
        eps, delta = self.exact_totals()
        return Budget(float(eps), min(float(delta), 1.0))

    def within_target(self) -> bool:
        eps, delta = self.exact_totals()
        return eps <= Fraction(self.target.epsilon) and delta <= Fraction(self.target.delta)

    def _check(self) -> None:
        if self.strict and not self.within_target():
            spent = self.totals()
            raise BudgetExceeded(
                f"ledger total ({spent.epsilon:.6g}, {spent.delta:.3g}) exceeds target "
                f"({self.target.epsilon:.6g}, {self.target.delta:.3g})")

    def to_dict(self) -> dict:
        spent = self.totals()
        return {
            "target": asdict(self.target),
            "entries": [asdict(e) for e in self.entries],
            "total_epsilon": spent.epsilon,
            "total_delta": spent.delta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

"""Hoeffding deviation and the non-divergence floor on expected eval pass rate."""

from __future__ import annotations

import math
from dataclasses import dataclass


class DomainError(ValueError):
    pass


def hoeffding_eps(n_min: int, delta: float) -> float:
    """sqrt(ln(2/delta) / (2 n_min))."""
    if n_min < 1:
        raise DomainError("N_min must be >= 1")
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n_min))


@dataclass(frozen=True)
class BoundParams:
    tau: float
    N_min: int
    C: int
    delta: float

    def __post_init__(self) -> None:
        if self.tau < 0 or self.C < 0:
            raise DomainError("tau and C must be non-negative")
        hoeffding_eps(self.N_min, self.delta)

    @property
    def epsilon(self) -> float:
        return hoeffding_eps(self.N_min, self.delta)

    @property
    def margin(self) -> float:
        return self.tau + self.epsilon + self.C * self.delta


def nondivergence_floor(p0_mean: float, params: BoundParams | None = None, *,
                        tau: float | None = None, epsilon: float | None = None,
                        C: float | None = None, delta: float | None = None) -> float:
    """p0_mean - (tau + epsilon) - C * delta.

    Either pass ``params`` or the four terms directly (the latter allows the
    degenerate epsilon = 0 / delta = 0 bound).
    """
    if params is not None:
        return p0_mean - (params.tau + params.epsilon) - params.C * params.delta
    if None in (tau, epsilon, C, delta):
        raise DomainError("give either params or all of tau, epsilon, C, delta")
    return p0_mean - (tau + epsilon) - C * delta

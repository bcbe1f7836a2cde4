"""Shared-filesystem bandwidth with a multiplicative congestion factor.

The effective write rate at time ``t`` is ``base_rate * factor(t)`` where the
factor lies in (0, 1].  Three congestion sources are provided: a constant, a
replayed trace, and a seeded log-normal process sampled once per interval.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ModelError

MIN_FACTOR = 1e-6


@dataclass(frozen=True)
class ConstantCongestion:
    value: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.value <= 1.0:
            raise ModelError(f"congestion factor must be in (0, 1], got {self.value}")

    def factor(self, t: float) -> float:
        return self.value

    def mean(self) -> float:
        return self.value

    def quantile(self, p: float) -> float:
        return self.value

    def interval_at(self, t: float) -> tuple[float, float]:
        return self.value, math.inf


@dataclass(frozen=True)
class TraceCongestion:
    """Piecewise-constant factors, one per ``interval`` seconds; the last value holds."""

    factors: tuple[float, ...]
    interval: float = 1.0

    def __post_init__(self):
        if not self.factors:
            raise ModelError("empty congestion trace")
        if any(not 0.0 < f <= 1.0 for f in self.factors):
            raise ModelError("trace factors must be in (0, 1]")
        if self.interval <= 0:
            raise ModelError("trace interval must be positive")

    def _index(self, t: float) -> int:
        return min(max(int(t // self.interval), 0), len(self.factors) - 1)

    def factor(self, t: float) -> float:
        return self.factors[self._index(t)]

    def mean(self) -> float:
        return float(np.mean(self.factors))

    def quantile(self, p: float) -> float:
        return float(np.quantile(self.factors, p))

    def interval_at(self, t: float) -> tuple[float, float]:
        k = self._index(t)
        if k == len(self.factors) - 1:
            return self.factors[k], math.inf
        return self.factors[k], (k + 1) * self.interval


@dataclass
class LogNormalCongestion:
    """factor = min(1, exp(mu + sigma * Z)), resampled every ``interval`` seconds."""

    mu: float = -0.4
    sigma: float = 0.5
    interval: float = 60.0
    seed: int = 0
    _samples: list = field(default_factory=list, init=False, repr=False)
    _rng: random.Random | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0 or self.interval <= 0:
            raise ModelError("invalid log-normal congestion parameters")

    def _sample(self, k: int) -> float:
        if self._rng is None:
            self._rng = random.Random(self.seed)
        while len(self._samples) <= k:
            z = self._rng.gauss(0.0, 1.0)
            self._samples.append(min(1.0, max(MIN_FACTOR, math.exp(self.mu + self.sigma * z))))
        return self._samples[k]

    def factor(self, t: float) -> float:
        return self._sample(max(int(t // self.interval), 0))

    def mean(self) -> float:
        # E[min(1, X)] for X log-normal
        if self.sigma == 0:
            return min(1.0, math.exp(self.mu))
        nd = NormalDist()
        below = math.exp(self.mu + self.sigma**2 / 2) * nd.cdf((-self.mu - self.sigma**2) / self.sigma)
        above = 1.0 - nd.cdf(-self.mu / self.sigma)
        return below + above

    def quantile(self, p: float) -> float:
        if not 0.0 < p < 1.0:
            raise ModelError("percentile must be in (0, 1)")
        z = NormalDist().inv_cdf(p)
        return min(1.0, max(MIN_FACTOR, math.exp(self.mu + self.sigma * z)))

    def interval_at(self, t: float) -> tuple[float, float]:
        k = max(int(t // self.interval), 0)
        return self._sample(k), (k + 1) * self.interval


@dataclass
class BandwidthModel:
    base_rate: float
    congestion: object = field(default_factory=ConstantCongestion)

    def __post_init__(self):
        if not self.base_rate > 0:
            raise ModelError(f"base_rate must be positive, got {self.base_rate}")

    def rate(self, t: float) -> float:
        return self.base_rate * self.congestion.factor(t)

    def mean_rate(self) -> float:
        return self.base_rate * self.congestion.mean()

    def quantile_rate(self, p: float) -> float:
        return self.base_rate * self.congestion.quantile(p)

    def transfer_time(self, start: float, nbytes: int) -> float:
        """Seconds needed to move ``nbytes`` starting at ``start`` under the realized factors."""
        remaining = float(nbytes)
        t = start
        while remaining > 0:
            f, end = self.congestion.interval_at(t)
            rate = self.base_rate * f
            need = remaining / rate
            if t + need <= end:
                return t + need - start
            remaining -= rate * (end - t)
            t = end
        return t - start

"""Scalar math, energy-arrival and channel models, battery dynamics, scenarios.

All energies are dimensionless: the receiver noise variance is normalized to
one and the mean channel SNR coefficient of a fading channel is one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numba import njit

FAMILIES = ("onepoint", "bernoulli", "exponential", "uniform")


class DomainError(ValueError):
    """An argument lies outside the domain of a mathematical operation."""


class InvalidStateError(ValueError):
    """A battery/action tuple violates capacity or energy causality."""


# ---------------------------------------------------------------------------
# scalar kernels (jitted so the RL and simulation loops can call them)


@njit(cache=True)
def _clip(x, lo, hi):
    return min(max(x, lo), hi)


@njit(cache=True)
def _rate(x):
    return math.log1p(x)


def clip(x: float, lo: float, hi: float) -> float:
    """Clip ``x`` to ``[lo, hi]``."""
    if lo > hi:
        raise DomainError(f"invalid bounds: lo={lo} > hi={hi}")
    return min(max(x, lo), hi)


def upper_clip(x: float, hi: float) -> float:
    return min(x, hi)


def lower_clip(x: float, lo: float) -> float:
    return max(x, lo)


def rate(x):
    """Achievable rate ``log(1 + x)`` in nats per channel use."""
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0):
        raise DomainError("rate is defined for x >= 0 only")
    out = np.log1p(arr)
    return float(out) if out.ndim == 0 else out


def rate_prime(x):
    return 1.0 / (1.0 + np.asarray(x, dtype=float))


def battery_step(b: float, u: float, e_arrival: float, c: float) -> float:
    """Battery level at the start of the next slot, ``min(b - u + e, c)``."""
    if b > c:
        raise InvalidStateError(f"battery level {b} exceeds capacity {c}")
    if u > b:
        raise InvalidStateError(f"energy causality violated: u={u} > b={b}")
    if u < 0 or e_arrival < 0:
        raise InvalidStateError("action and arrival must be nonnegative")
    return min(b - u + e_arrival, c)


# ---------------------------------------------------------------------------
# energy-arrival models


@dataclass(frozen=True)
class OnePoint:
    e: float
    family = "onepoint"

    def __post_init__(self):
        if self.e < 0:
            raise DomainError("one-point arrival must be nonnegative")

    @property
    def mean(self) -> float:
        return self.e

    def clipped_mean(self, x):
        return np.minimum(self.e, x)

    def prob_zero(self) -> float:
        return 1.0 if self.e == 0 else 0.0

    def sample(self, rng: np.random.Generator, size=None):
        return np.full(size, self.e) if size is not None else self.e


@dataclass(frozen=True)
class Bernoulli:
    """Arrival of ``magnitude`` with probability ``prob``, otherwise nothing."""

    prob: float
    magnitude: float
    family = "bernoulli"

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise DomainError("Bernoulli probability must lie in [0, 1]")
        if self.magnitude <= 0:
            raise DomainError("Bernoulli magnitude must be positive")

    @property
    def mean(self) -> float:
        return self.prob * self.magnitude

    def clipped_mean(self, x):
        return self.prob * np.minimum(self.magnitude, x)

    def prob_zero(self) -> float:
        return 1.0 - self.prob

    def sample(self, rng: np.random.Generator, size=None):
        hit = rng.random(size) < self.prob
        return np.where(hit, self.magnitude, 0.0) if size is not None else (
            self.magnitude if hit else 0.0)


@dataclass(frozen=True)
class Exponential:
    rate: float
    family = "exponential"

    def __post_init__(self):
        if self.rate <= 0:
            raise DomainError("exponential rate must be positive")

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    def clipped_mean(self, x):
        return -np.expm1(-self.rate * np.asarray(x, dtype=float)) / self.rate

    def prob_zero(self) -> float:
        return 0.0

    def cdf(self, x):
        return -np.expm1(-self.rate * np.asarray(x, dtype=float))

    def ppf(self, u):
        return -np.log1p(-np.asarray(u, dtype=float)) / self.rate

    def pdf(self, x):
        return self.rate * np.exp(-self.rate * np.asarray(x, dtype=float))

    def partial_mean(self, a, b):
        """``E[X; a <= X < b]``."""
        lam = self.rate

        def antideriv(t):
            if np.isinf(t):
                return 0.0
            return -(t + 1.0 / lam) * math.exp(-lam * t)

        return antideriv(b) - antideriv(a)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class Uniform:
    upper: float
    family = "uniform"

    def __post_init__(self):
        if self.upper <= 0:
            raise DomainError("uniform upper bound must be positive")

    @property
    def mean(self) -> float:
        return self.upper / 2.0

    def clipped_mean(self, x):
        x = np.asarray(x, dtype=float)
        b = self.upper
        return np.where(x <= b, x - x * x / (2.0 * b), b / 2.0)

    def prob_zero(self) -> float:
        return 0.0

    def cdf(self, x):
        return np.clip(np.asarray(x, dtype=float) / self.upper, 0.0, 1.0)

    def ppf(self, u):
        return np.asarray(u, dtype=float) * self.upper

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= 0) & (x <= self.upper), 1.0 / self.upper, 0.0)

    def partial_mean(self, a, b):
        a, b = max(a, 0.0), min(b, self.upper)
        if b <= a:
            return 0.0
        return (b * b - a * a) / (2.0 * self.upper)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(0.0, self.upper, size)


EnergyArrivalModel = Union[OnePoint, Bernoulli, Exponential, Uniform]


def clipped_mean(model: EnergyArrivalModel, x):
    """Expected stored arrival ``E[min(E, x)]`` for charging headroom ``x``."""
    if np.any(np.asarray(x) < 0):
        raise DomainError("headroom must be nonnegative")
    out = model.clipped_mean(x)
    return float(out) if np.ndim(out) == 0 else out


def dmcr(model: EnergyArrivalModel, x):
    """Dynamic mean-to-capacity ratio ``E[min(E, x)] / x``.

    At ``x = 0`` the limit ``1 - P{E = 0}`` is returned.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("headroom must be nonnegative")
    safe = np.where(x > 0, x, 1.0)
    ratio = np.where(x > 0, model.clipped_mean(safe) / safe, 1.0 - model.prob_zero())
    return float(ratio) if ratio.ndim == 0 else ratio


def mcr(family: str, nmcr: float) -> float:
    """Mean-to-capacity ratio of a family, as a function of its nominal MCR."""
    family = family.lower()
    if family == "exponential":
        if not nmcr > 0:
            raise DomainError("NMCR must be positive for exponential arrivals")
        return nmcr * -math.expm1(-1.0 / nmcr)
    if family not in FAMILIES:
        raise DomainError(f"unknown arrival family {family!r}")
    if not 0 < nmcr <= 1:
        raise DomainError(f"NMCR must lie in (0, 1] for {family} arrivals")
    if family == "uniform" and nmcr > 0.5:
        return 1.0 - 1.0 / (4.0 * nmcr)
    return nmcr


# ---------------------------------------------------------------------------
# channel models


@dataclass(frozen=True)
class Deterministic:
    gamma: float = 1.0
    kind = "deterministic"

    @property
    def mean(self) -> float:
        return self.gamma

    def sample(self, rng: np.random.Generator, size=None):
        return np.full(size, self.gamma) if size is not None else self.gamma


@dataclass(frozen=True)
class Rayleigh:
    """Rayleigh fading: the SNR coefficient is exponential with unit mean."""

    kind = "rayleigh"

    @property
    def mean(self) -> float:
        return 1.0

    def sample(self, rng: np.random.Generator, size=None):
        return rng.exponential(1.0, size)


ChannelModel = Union[Deterministic, Rayleigh]


def sample_arrival(model: EnergyArrivalModel, rng: np.random.Generator, size=None):
    return model.sample(rng, size)


def sample_gamma(model: ChannelModel, rng: np.random.Generator, size=None):
    return model.sample(rng, size)


# ---------------------------------------------------------------------------
# scenarios and states


@dataclass(frozen=True)
class ScenarioSpec:
    capacity_c: float
    arrival_model: EnergyArrivalModel
    channel_model: ChannelModel = field(default_factory=Rayleigh)
    nmcr: Optional[float] = None
    nsnr_db: Optional[float] = None

    def __post_init__(self):
        if not self.capacity_c > 0:
            raise DomainError("battery capacity must be positive")

    @property
    def family(self) -> str:
        return self.arrival_model.family

    def describe(self) -> dict:
        """Plain-dict form, used for hashing and serialization."""
        arr = self.arrival_model
        return {
            "capacity_c": float(self.capacity_c),
            "arrival": {"family": arr.family,
                        **{k: float(v) for k, v in vars(arr).items()}},
            "channel": {"kind": self.channel_model.kind,
                        **{k: float(v) for k, v in vars(self.channel_model).items()}},
            "nmcr": self.nmcr,
            "nsnr_db": self.nsnr_db,
        }


def scenario_from(family: str, nmcr: float, nsnr_db: float,
                  channel: Optional[ChannelModel] = None) -> ScenarioSpec:
    """Derive battery capacity and arrival parameters from (family, NMCR, NSNR).

    The clipped mean at capacity is ``10**(nsnr_db/10)`` and the capacity is
    that clipped mean divided by the family's MCR.
    """
    family = family.lower()
    mu_bar = 10.0 ** (nsnr_db / 10.0)
    c = mu_bar / mcr(family, nmcr)
    mean = nmcr * c
    if family == "bernoulli":
        model = Bernoulli(prob=nmcr, magnitude=c)
    elif family == "exponential":
        model = Exponential(rate=1.0 / mean)
    elif family == "uniform":
        model = Uniform(upper=2.0 * mean)
    else:
        model = OnePoint(e=mean)
    return ScenarioSpec(c, model, channel if channel is not None else Rayleigh(),
                        nmcr=nmcr, nsnr_db=nsnr_db)


@dataclass
class SystemState:
    battery: float
    gamma: float
    lookahead_energy: Optional[float] = None
    lookahead_gamma: Optional[float] = None


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key...)``; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))

"""Renyi-DP accounting for the subsampled Gaussian mechanism.

The per-round curve bounds one DP-FedAvg round (``m`` of ``N`` users sampled
without replacement, Gaussian noise with multiplier ``z`` relative to the
clip norm). Rounds compose by adding RDP pointwise; the total converts to
(eps, delta)-DP with ``eps = min_a [rdp(a) + log(1/delta) / (a - 1)]``.

Two integer-order bounds are available:

``"without_replacement"`` (default)
    General upper bound for subsampling without replacement of a mechanism
    with RDP ``e(a)``, specialised to the Gaussian where ``e(inf) = inf``::

        log(1 + q^2 C(a,2) min(4(e^{e(2)} - 1), 2 e^{e(2)})
              + sum_{j=3..a} 2 q^j C(a,j) e^{(j-1) e(j)}) / (a - 1)

    with ``e(j) = j / (2 z^2)``.

``"poisson"``
    Binomial expansion for Poisson subsampling::

        log(sum_{i=0..a} C(a,i) (1-q)^{a-i} q^i e^{(i^2 - i) / (2 z^2)}) / (a - 1)

Both are capped by the unsubsampled value ``a / (2 z^2)``, which is also the
exact answer at ``q = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS = tuple(range(2, 257)) + (320, 384, 448, 512)
METHODS = ("without_replacement", "poisson")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values differ in length")
        o = np.asarray(self.orders, dtype=float)
        if o.size and (np.any(o <= 1) or np.any(np.diff(o) <= 0)):
            raise ValueError("orders must be > 1 and strictly increasing")
        if np.any(np.asarray(self.values, dtype=float) < 0):
            raise ValueError("RDP values must be non-negative")

    def __add__(self, other: RdpCurve) -> RdpCurve:
        if self.orders != other.orders:
            raise ValueError("cannot add curves over different orders")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.values, other.values)))

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.orders, dtype=float), np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class DpGuarantee:
    epsilon: float
    delta: float
    order: float | None = None

    def __post_init__(self):
        if self.epsilon < 0 or not 0 <= self.delta <= 1:
            raise ValueError(f"invalid guarantee ({self.epsilon}, {self.delta})")


def _log_comb(n, k):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _wor_log_terms(q: float, z: float, a: int) -> np.ndarray:
    eps2 = 2.0 / (2.0 * z * z)
    # log(min(4(e^x - 1), 2 e^x)) without overflow
    second = min(math.log(4.0) + eps2 + math.log(-math.expm1(-eps2)), math.log(2.0) + eps2)
    j = np.arange(3, a + 1, dtype=float)
    rest = (math.log(2.0) + j * math.log(q) + _log_comb(a, j)
            + (j - 1) * j / (2.0 * z * z))
    return np.concatenate([[2 * math.log(q) + _log_comb(a, 2) + second], rest])


def _rdp_without_replacement(q: float, z: float, a: int) -> float:
    # log(1 + sum(terms)); logaddexp keeps precision when the sum is tiny
    return float(np.logaddexp(0.0, logsumexp(_wor_log_terms(q, z, a)))) / (a - 1)


def _rdp_poisson(q: float, z: float, a: int) -> float:
    i = np.arange(0, a + 1, dtype=float)
    terms = (_log_comb(a, i) + (a - i) * math.log1p(-q) + i * math.log(q)
             + (i * i - i) / (2.0 * z * z))
    return float(logsumexp(terms)) / (a - 1)


def rdp_subsampled_gaussian(q: float, noise_multiplier: float,
                            orders: Sequence[float] = DEFAULT_ORDERS,
                            method: str = "without_replacement") -> RdpCurve:
    """Per-round RDP of sampling fraction ``q`` and noise multiplier ``z``.

    ``z = 0`` with ``q > 0`` gives an all-infinite curve.
    """
    if not 0 < q <= 1:
        raise ValueError("sampling fraction must be in (0, 1]")
    if noise_multiplier < 0:
        raise ValueError("noise multiplier must be >= 0")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    orders = tuple(orders)
    if noise_multiplier == 0:
        return RdpCurve(orders, tuple(math.inf for _ in orders))
    z = float(noise_multiplier)
    values = []
    for a in orders:
        full = a / (2.0 * z * z)
        if q == 1.0:
            values.append(full)
            continue
        if a != int(a):
            raise ValueError("subsampled bounds need integer orders")
        bound = (_rdp_without_replacement if method == "without_replacement"
                 else _rdp_poisson)(q, z, int(a))
        values.append(min(max(bound, 0.0), full))
    return RdpCurve(orders, tuple(values))


def compose(curve: RdpCurve, rounds: int) -> RdpCurve:
    """RDP of ``rounds`` adaptive repetitions."""
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    return RdpCurve(curve.orders, tuple(v * rounds if rounds else 0.0 for v in curve.values))


def to_eps_delta(curve: RdpCurve, delta: float) -> DpGuarantee:
    """Best (eps, delta) over the curve's orders; ``order`` is the minimiser."""
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if not curve.orders:
        raise ValueError("empty RDP curve")
    orders, values = curve.as_arrays()
    eps = values + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    if not np.isfinite(eps[i]):
        return DpGuarantee(math.inf, delta, None)
    return DpGuarantee(float(eps[i]), delta, float(orders[i]))


def group_privacy(g: DpGuarantee | tuple[float, float], k: int) -> DpGuarantee:
    """Guarantee for a group of ``k`` users: ``(k eps, k e^{(k-1) eps} delta)``.

    ``g`` may also be a plain ``(epsilon, delta)`` pair.
    """
    if k < 1:
        raise ValueError("group size must be >= 1")
    if not isinstance(g, DpGuarantee):
        g = DpGuarantee(*g)
    if g.delta == 0:
        return DpGuarantee(k * g.epsilon, 0.0)
    try:
        delta = k * math.exp((k - 1) * g.epsilon) * g.delta
    except OverflowError:
        delta = math.inf
    return DpGuarantee(k * g.epsilon, min(1.0, delta))


def dp_fedavg_guarantee(population: int, round_size: int, noise_multiplier: float,
                        rounds: int, delta: float, orders: Sequence[float] = DEFAULT_ORDERS,
                        method: str = "without_replacement") -> DpGuarantee:
    """(eps, delta) for ``rounds`` rounds of ``round_size`` users out of ``population``."""
    if not 1 <= round_size <= population:
        raise ValueError("round size must be in [1, population]")
    curve = rdp_subsampled_gaussian(round_size / population, noise_multiplier, orders, method)
    return to_eps_delta(compose(curve, rounds), delta)


@dataclass(frozen=True)
class Table4Row:
    population: int
    delta: float
    epsilon: float
    order: float | None


def table4(populations: Sequence[int] = (2_000_000, 3_000_000, 4_000_000, 5_000_000, 10_000_000),
           round_size: int = 20_000, noise_multiplier: float = 0.8, rounds: int = 2000,
           delta_exponent: float = 1.1, method: str = "without_replacement") -> list[Table4Row]:
    """Epsilon at ``delta = N ** -delta_exponent`` for each population size."""
    rows = []
    for n in populations:
        if n < round_size:
            raise ValueError(f"population {n} smaller than round size {round_size}")
        delta = float(n) ** -delta_exponent
        g = dp_fedavg_guarantee(n, round_size, noise_multiplier, rounds, delta, method=method)
        rows.append(Table4Row(int(n), delta, g.epsilon, g.order))
    return rows

"""Link and traffic parameters."""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass
from typing import Any, Mapping

from .exceptions import N2TooSmall, NonDivisible, NonPositiveRate, ScenarioError

RATE_KEYS = ("lambda1", "lambda2", "mu1", "mu2")


@dataclass(frozen=True)
class Scenario:
    """A single flexi-grid link carrying two flow types.

    Parameters
    ----------
    m1 : int
        Number of type 1 channels on the link.
    n2 : int
        Number of channels that make up one superchannel (at least 2).
    lambda1, lambda2 : float
        Poisson arrival rates of type 1 and type 2 requests.
    mu1, mu2 : float
        Service rates of type 1 and type 2 flows.

    Construct instances through :func:`validate` or :func:`from_load`; the
    constructor itself runs the same checks.
    """

    m1: int
    n2: int
    lambda1: float
    lambda2: float
    mu1: float
    mu2: float

    def __post_init__(self):
        _check(self.m1, self.n2, [getattr(self, k) for k in RATE_KEYS])

    @property
    def m2(self) -> int:
        """Number of superchannels."""
        return self.m1 // self.n2

    def as_dict(self) -> dict:
        return {
            "m1": self.m1,
            "n2": self.n2,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "mu1": self.mu1,
            "mu2": self.mu2,
        }


def _as_int(name, value):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        if isinstance(value, numbers.Real) and float(value).is_integer():
            return int(value)
        raise ScenarioError(f"{name} must be an integer, got {value!r}")
    return int(value)


def _check(m1, n2, rates):
    if not isinstance(m1, int) or isinstance(m1, bool) or m1 <= 0:
        raise ScenarioError(f"m1 must be a positive integer, got {m1!r}")
    if not isinstance(n2, int) or isinstance(n2, bool):
        raise ScenarioError(f"n2 must be an integer, got {n2!r}")
    if n2 < 2:
        raise N2TooSmall(f"n2 must be at least 2, got {n2}")
    if m1 % n2:
        raise NonDivisible(f"m1={m1} is not a multiple of n2={n2}")
    for name, rate in zip(RATE_KEYS, rates):
        if not isinstance(rate, numbers.Real) or isinstance(rate, bool):
            raise ScenarioError(f"{name} must be a real number, got {rate!r}")
        if not math.isfinite(rate) or rate <= 0:
            raise NonPositiveRate(f"{name} must be finite and > 0, got {rate!r}")


def validate(raw: Mapping[str, Any]) -> Scenario:
    """Build a :class:`Scenario` from a parameter record.

    The record holds ``m1``, ``n2`` and either the four rates or a single
    traffic load ``rho`` (see :func:`from_load`).

    Raises
    ------
    NonDivisible, NonPositiveRate, N2TooSmall, ScenarioError
    """
    try:
        m1 = _as_int("m1", raw["m1"])
        n2 = _as_int("n2", raw["n2"])
    except KeyError as exc:
        raise ScenarioError(f"missing parameter {exc.args[0]!r}") from None

    has_rates = any(k in raw for k in RATE_KEYS)
    if "rho" in raw and raw["rho"] is not None:
        if has_rates:
            raise ScenarioError("give either rho or the four rates, not both")
        return from_load(m1, n2, raw["rho"])

    missing = [k for k in RATE_KEYS if k not in raw]
    if missing:
        raise ScenarioError(f"missing parameter(s) {', '.join(missing)}")
    rates = []
    for k in RATE_KEYS:
        v = raw[k]
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                raise ScenarioError(f"{k} must be a real number, got {v!r}") from None
        rates.append(v)
    return Scenario(m1, n2, *rates)


def from_load(m1: int, n2: int, rho: float) -> Scenario:
    """Scenario with unit service rates and both arrival rates equal to `rho`."""
    if isinstance(rho, bool) or not isinstance(rho, numbers.Real):
        raise ScenarioError(f"rho must be a real number, got {rho!r}")
    if not math.isfinite(rho) or rho <= 0:
        raise NonPositiveRate(f"rho must be finite and > 0, got {rho!r}")
    return Scenario(_as_int("m1", m1), _as_int("n2", n2), rho, rho, 1.0, 1.0)

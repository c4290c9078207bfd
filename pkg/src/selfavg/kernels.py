"""Transition kernels Y(n): probability mass functions, moments and drift checks.

A kernel maps a state ``n`` to the law of the next state ``Y(n)``.  States
``n <= n0`` are absorbing (``Y(n) = n``) and carry given boundary values
``p(n)``.  Probabilities are returned as lists of :class:`mpmath.mpf`
indexed by the next state, so that ``pmf(n)[k] == P(Y(n) = k)`` and
``len(pmf(n)) == n + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import mpmath
import numpy as np
from mpmath import mpf

from ._survivors import survivor_pmf
from .errors import DomainError, PrecisionError

__all__ = [
    "DriftParameters",
    "KillSubsetRow",
    "TransitionKernel",
    "RouletteKernel",
    "CoinflipKernel",
    "ParityKernel",
    "FunctionKernel",
    "DriftRow",
    "DriftReport",
    "roulette_mu",
    "roulette_second_moment",
    "roulette_sigma2",
    "kill_subset_row",
    "roulette_pmf",
    "parity_pmf",
    "coinflip_pmf",
    "verify_drift",
    "get_kernel",
    "register_kernel",
    "kernel_names",
]


@dataclass(frozen=True)
class DriftParameters:
    """Constants with |E[Y(n)] - alpha n| <= beta and Var(Y(n)) <= gamma n^p + delta."""

    alpha: float
    beta: float
    gamma: float
    delta: float
    p_exponent: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if not 1.0 <= self.p_exponent < 2.0:
            raise DomainError(f"p_exponent must lie in [1, 2), got {self.p_exponent}")

    @classmethod
    def roulette(cls) -> "DriftParameters":
        e = math.e
        return cls(alpha=1 / e, beta=2 / e, gamma=(e - 2) / e**2, delta=(3 - e) / (2 * e**2))

    @classmethod
    def parity(cls) -> "DriftParameters":
        return cls(alpha=0.5, beta=0.5, gamma=0.5, delta=0.0)

    @classmethod
    def coinflip(cls) -> "DriftParameters":
        # conditioning on "not everyone continues" shifts the mean by n 2^-n / (1 - 2^-n) <= 1/3,
        # with equality at n = 2; the float 1/3 rounds down, so step up one ulp
        return cls(alpha=0.5, beta=math.nextafter(1 / 3, 1.0), gamma=0.25, delta=0.0)

    def with_exponent(self, p: float) -> "DriftParameters":
        return DriftParameters(self.alpha, self.beta, self.gamma, self.delta, p)


@dataclass
class KillSubsetRow:
    """q[k] = probability that one fixed set of k players is exactly the set killed (index 0 unused)."""

    n: int
    q: list
    bits: int
    residual: float


def _check_n(n: int, low: int = 2) -> None:
    if n < low:
        raise DomainError(f"n must be >= {low}, got {n}")


def roulette_mu(n: int, bits: int = 128):
    """Expected number of survivors of one round with n players."""
    _check_n(n)
    with mpmath.workprec(bits):
        return +(n * (1 - mpf(1) / (n - 1)) ** (n - 1))


def roulette_second_moment(n: int, bits: int = 128):
    _check_n(n)
    with mpmath.workprec(bits):
        pair = (1 - mpf(1) / (n - 1)) ** 2 * (1 - mpf(2) / (n - 1)) ** (n - 2)
        return +(roulette_mu(n, bits + 16) + (n * n - n) * pair)


def roulette_sigma2(n: int, bits: int = 128):
    """Variance of the survivor count of one round with n players."""
    _check_n(n)
    with mpmath.workprec(bits + 16):
        mu = roulette_mu(n, bits + 16)
        v = roulette_second_moment(n, bits + 16) - mu * mu
    with mpmath.workprec(bits):
        return +v


def _kill_subset_row_at(n: int, bits: int) -> tuple[list, mpf]:
    with mpmath.workprec(bits):
        q = [mpf(0), mpf(0)]
        nm1 = mpf(n - 1)
        for k in range(2, n + 1):
            acc = mpf(0)
            c = mpf(1)  # binom(k, i), built incrementally
            for i in range(1, k):
                c = c * (k - i + 1) / i
                acc += c * q[i]
            q.append(((k - 1) / nm1) ** k * (k / nm1) ** (n - k) - acc)
        total = mpf(0)
        c = mpf(1)
        for k in range(1, n + 1):
            c = c * (n - k + 1) / k
            total += c * q[k]
        return q, total - 1


def kill_subset_row(n: int, precision=None) -> KillSubsetRow:
    """Kill-subset probabilities q_{n,k} by the inclusion-exclusion recursion, with precision escalation."""
    from .engine import PrecisionConfig

    _check_n(n)
    precision = precision or PrecisionConfig()
    bits = precision.initial_bits
    while True:
        q, resid = _kill_subset_row_at(n, bits)
        worst_neg = min(q[2:], default=mpf(0))
        res = float(abs(resid))
        if res < precision.normalization_tol and worst_neg >= -precision.normalization_tol:
            with mpmath.workprec(bits):
                q = [mpmath.mpf(0) if v < 0 else (mpmath.mpf(1) if v > 1 else v) for v in q]
            return KillSubsetRow(n=n, q=q, bits=bits, residual=res)
        nxt = bits * precision.escalation_factor
        if nxt > precision.max_bits:
            raise PrecisionError(n, bits, res)
        bits = nxt


def roulette_pmf(n: int, bits: int = 256, method: str = "convolution") -> list:
    """Law of the survivor count Y(n); entries k = n-1 and k = n are zero.

    ``method="subset"`` evaluates binom(n, k) q_{n, n-k} from :func:`kill_subset_row`
    at working precision ``bits`` (cancellation is not compensated);
    ``method="convolution"`` uses the batched inversion with absolute error < 2**-bits.
    """
    _check_n(n)
    if method == "convolution":
        w = survivor_pmf(n, bits)
    elif method == "subset":
        q, _ = _kill_subset_row_at(n, bits)
        with mpmath.workprec(bits):
            w = [mpmath.binomial(n, k) * q[n - k] for k in range(n - 1)]
    else:
        raise ValueError(f"unknown method {method!r}")
    return w + [mpf(0), mpf(0)]


def _binomial_row(m: int, bits: int) -> list:
    with mpmath.workprec(bits):
        half = mpmath.ldexp(mpf(1), -m)
        row = []
        c = 1
        for j in range(m + 1):
            row.append(mpf(c) * half)
            c = c * (m - j) // (j + 1)
        return row


def parity_pmf(n: int, bits: int = 128) -> list:
    """2*Bin(n/2, 1/2) for even n, 2*Bin((n-1)/2, 1/2) + 1 for odd n (length n + 1)."""
    _check_n(n)
    m = n // 2
    out = [mpf(0)] * (n + 1)
    for j, v in enumerate(_binomial_row(m, bits)):
        out[2 * j + (n % 2)] = v
    return out


def coinflip_pmf(n: int, bits: int = 128) -> list:
    """Bin(n, 1/2) conditioned on not every player continuing."""
    _check_n(n)
    row = _binomial_row(n, bits)
    with mpmath.workprec(bits):
        norm = 1 - row[n]
        out = [v / norm for v in row[:n]]
    return out + [mpf(0)]


@dataclass
class TransitionKernel:
    """A family of one-round laws Y(n) with absorbing boundary states n <= n0."""

    name: str
    n0: int
    boundary_values: Mapping[int, Fraction]
    drift: DriftParameters | None = None

    def _pmf(self, n: int, bits: int) -> list:
        raise NotImplementedError

    def pmf(self, n: int, bits: int = 128) -> list:
        if n < 0:
            raise DomainError(f"n must be >= 0, got {n}")
        if n <= self.n0:
            out = [mpf(0)] * (n + 1)
            out[n] = mpf(1)
            return out
        return self._pmf(n, bits)

    def pmf_float(self, n: int, bits: int = 128) -> np.ndarray:
        return np.array([float(v) for v in self.pmf(n, bits)])

    def mean(self, n: int, bits: int = 128):
        """Closed-form E[Y(n)] for n > n0, or None when unavailable."""
        return None

    def second_moment(self, n: int, bits: int = 128):
        return None

    def support_violation(self, n: int, bits: int = 128) -> bool:
        """True when Y(n) puts mass on n itself (outside {0, ..., n-1})."""
        if n <= self.n0:
            return False
        return self.pmf(n, bits)[n] != 0


@dataclass
class RouletteKernel(TransitionKernel):
    name: str = "roulette"
    n0: int = 1
    boundary_values: Mapping[int, Fraction] = field(default_factory=lambda: {0: Fraction(1), 1: Fraction(0)})
    drift: DriftParameters | None = field(default_factory=DriftParameters.roulette)
    method: str = "convolution"

    def _pmf(self, n, bits):
        return roulette_pmf(n, bits, self.method)

    def mean(self, n, bits=128):
        return roulette_mu(n, bits)

    def second_moment(self, n, bits=128):
        return roulette_second_moment(n, bits)

    def support_violation(self, n, bits=128):
        return False


@dataclass
class ParityKernel(TransitionKernel):
    name: str = "parity"
    n0: int = 1
    boundary_values: Mapping[int, Fraction] = field(default_factory=lambda: {0: Fraction(0), 1: Fraction(1)})
    drift: DriftParameters | None = field(default_factory=DriftParameters.parity)

    def _pmf(self, n, bits):
        return parity_pmf(n, bits)

    def mean(self, n, bits=128):
        return mpf(n) / 2 if n % 2 == 0 else mpf(n + 1) / 2

    def second_moment(self, n, bits=128):
        m = n // 2
        # Var(2 Bin(m, 1/2)) = m
        return mpf(m) + self.mean(n, bits) ** 2

    def support_violation(self, n, bits=128):
        # 2 Bin(m, 1/2) (+1) reaches n itself with probability 2^-m
        return n > self.n0


@dataclass
class CoinflipKernel(TransitionKernel):
    name: str = "coinflip"
    n0: int = 1
    boundary_values: Mapping[int, Fraction] = field(default_factory=lambda: {0: Fraction(1), 1: Fraction(0)})
    drift: DriftParameters | None = field(default_factory=DriftParameters.coinflip)

    def _pmf(self, n, bits):
        return coinflip_pmf(n, bits)

    def mean(self, n, bits=128):
        with mpmath.workprec(bits):
            tail = mpmath.ldexp(mpf(1), -n)
            return (mpf(n) / 2 - n * tail) / (1 - tail)

    def second_moment(self, n, bits=128):
        with mpmath.workprec(bits):
            tail = mpmath.ldexp(mpf(1), -n)
            raw = mpf(n) / 4 + mpf(n) ** 2 / 4
            return (raw - mpf(n) ** 2 * tail) / (1 - tail)

    def support_violation(self, n, bits=128):
        return False


@dataclass
class FunctionKernel(TransitionKernel):
    """User kernel backed by a callable ``pmf(n) -> sequence of probabilities`` (length n or n + 1)."""

    func: Callable[[int], Sequence] | None = None

    def _pmf(self, n, bits):
        with mpmath.workprec(bits):
            vals = [mpf(v) if not isinstance(v, Fraction) else mpf(v.numerator) / v.denominator
                    for v in self.func(n)]
        if len(vals) > n + 1:
            raise DomainError(f"kernel {self.name!r}: pmf({n}) has support beyond n")
        return vals + [mpf(0)] * (n + 1 - len(vals))


_REGISTRY: dict[str, Callable[[], TransitionKernel]] = {
    "roulette": RouletteKernel,
    "coinflip": CoinflipKernel,
    "parity": ParityKernel,
}


def register_kernel(name: str, factory: Callable[[], TransitionKernel]) -> None:
    _REGISTRY[name] = factory


def kernel_names() -> list[str]:
    return sorted(_REGISTRY)


def get_kernel(name: str) -> TransitionKernel:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise DomainError(f"unknown kernel {name!r}; choose from {', '.join(kernel_names())}") from None


@dataclass
class DriftRow:
    n: int
    mean: float
    var: float
    mean_gap: float
    var_bound: float
    mean_ok: bool
    var_ok: bool

    @property
    def ok(self) -> bool:
        return self.mean_ok and self.var_ok


@dataclass
class DriftReport:
    kernel: str
    params: DriftParameters
    rows: list[DriftRow]

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def failures(self) -> list[DriftRow]:
        return [r for r in self.rows if not r.ok]

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "params": vars(self.params),
            "passed": self.passed,
            "n_checked": len(self.rows),
            "failures": [vars(r) for r in self.failures],
        }


def _moments(kernel: TransitionKernel, n: int, bits: int, closed_form: bool):
    m1 = kernel.mean(n, bits) if closed_form else None
    m2 = kernel.second_moment(n, bits) if closed_form else None
    if m1 is None or m2 is None:
        w = kernel.pmf(n, bits)
        with mpmath.workprec(bits):
            m1 = mpmath.fsum(k * v for k, v in enumerate(w))
            m2 = mpmath.fsum(k * k * v for k, v in enumerate(w))
    return m1, m2


def verify_drift(kernel: TransitionKernel, params: DriftParameters, n_range: Sequence[int] | range,
                 *, bits: int = 160, closed_form: bool = True, slack: float = 1e-30) -> DriftReport:
    """Check |E[Y(n)] - alpha n| <= beta and Var(Y(n)) <= gamma n^p + delta for each n.

    ``slack`` absorbs rounding in the boundary cases that hold with equality
    (e.g. roulette at n = 2).
    """
    rows = []
    for n in n_range:
        if n <= kernel.n0:
            continue
        m1, m2 = _moments(kernel, n, bits, closed_form)
        with mpmath.workprec(bits):
            var = m2 - m1 * m1
            gap = abs(m1 - mpf(params.alpha) * n)
            vb = mpf(params.gamma) * mpf(n) ** mpf(params.p_exponent) + mpf(params.delta)
            rows.append(DriftRow(
                n=n, mean=float(m1), var=float(var), mean_gap=float(gap), var_bound=float(vb),
                mean_ok=bool(gap <= mpf(params.beta) + slack),
                var_ok=bool(var <= vb + slack),
            ))
    return DriftReport(kernel=kernel.name, params=params, rows=rows)

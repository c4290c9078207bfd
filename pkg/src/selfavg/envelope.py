"""Chebyshev envelopes l(x), u(x) for the subsequences p([alpha^-i x]).

For every ``x > 0`` the whole subsequence ``p(round(alpha^-i x))`` lies
between

    l(x) = sum_k q_k min_{n in I_k} p(n),   u(x) = sum_k q_k max_{n in I_k} p(n),

with nested windows ``I_k = [x - (t+k+1), x + (t+k+1)]`` and weights
``q_k = tau^2/(tau+k)^2 - tau^2/(tau+k+1)^2``.  Windows that leave the
computed table are replaced by the universal bounds 0 and 1.

Scanning one multiplicative period ``[x0, x0/alpha]`` bounds the liminf and
limsup of p.  Between consecutive points where ``x + t(x)`` or ``x - t(x)``
crosses an integer the window contents are fixed and l (u) is monotone
non-increasing (non-decreasing) in x, so the scan evaluates one-sided
limits at those points and the infimum/supremum is exact rather than
sampled.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import PUSHFORWARD_LIMIT, pushforward_laws, transition_matrix
from .errors import DomainError, InfeasibleError, WindowError
from .kernels import DriftParameters, TransitionKernel

DEFAULT_K = 138.0


@dataclass(frozen=True)
class ContractionConstants:
    K: float
    C: float
    D: float
    drift: DriftParameters

    @property
    def alpha(self) -> float:
        return self.drift.alpha

    def tau(self, x):
        return np.sqrt(self.C * (x + self.drift.alpha / 2) + self.D)

    def t(self, x):
        return self.tau(x) + self.drift.beta / (1 - self.drift.alpha) + 0.5

    def variance_bound(self, x0: float, k: int) -> float:
        """C alpha^(kp) x0^p + D."""
        p = self.drift.p_exponent
        return self.C * (self.drift.alpha ** k * x0) ** p + self.D

    def recursion_slack(self) -> tuple[float, float]:
        """Amount by which C and D exceed the one-step image of the base-case induction."""
        a, b, g, d = self.drift.alpha, self.drift.beta, self.drift.gamma, self.drift.delta
        K = self.K
        den = a * a * K - b * b
        new_c = g / a + self.C * a ** 3 * K / den
        new_d = g * b / (1 - a) + d + a * a * K + self.D * a ** 4 * K / den
        return self.C - new_c, self.D - new_d


def k_threshold(drift: DriftParameters) -> float:
    """Lower limit on K: beta^2 / (alpha^2 - alpha^(4-p))."""
    a, b, p = drift.alpha, drift.beta, drift.p_exponent
    return b * b / (a * a - a ** (4 - p))


def contraction_constants(drift: DriftParameters, K: float = DEFAULT_K) -> ContractionConstants:
    """Minimal (C, D) with Var(X_k) <= C alpha^k X_0 + D for all k."""
    if drift.p_exponent != 1.0:
        raise DomainError("closed-form constants need p_exponent == 1; use generalized_constants_search")
    a, b, g, d = drift.alpha, drift.beta, drift.gamma, drift.delta
    thr = k_threshold(drift)
    if not K > thr:
        raise InfeasibleError(K, thr)
    C = (g * a * a * K - g * b * b) / (a ** 3 * K - a ** 4 * K - a * b * b)
    D = ((g * b + (d + a * a * K) * (1 - a)) * (a * a * K - b * b)
         / ((1 - a) * (a * a * K - b * b - a ** 4 * K)))
    return ContractionConstants(K=K, C=C, D=D, drift=drift)


def _bisect_min(f, hi_start: float, iters: int) -> float:
    """Smallest z >= 0 with f(z) >= 0 for f with a single sign change (f(0) < 0)."""
    lo, hi = 0.0, max(hi_start, 1.0)
    for _ in range(2000):
        if f(hi) >= 0:
            break
        lo, hi = hi, hi * 2
    else:
        raise InfeasibleError(float("nan"), float("nan"), "no feasible point found")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) >= 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * hi:
            break
    return hi


def generalized_constants_search(drift: DriftParameters, K: float = DEFAULT_K, *,
                                 iters: int = 200) -> ContractionConstants:
    """(C, D) with Var(X_k) <= C alpha^(kp) X_0^p + D when Var(Y(n)) <= gamma n^p + delta, p < 2.

    C is the least root of (1-c) C = 2 gamma alpha^-p (1 + sqrt C)^p with
    c = alpha^(4-p) K / (alpha^2 K - beta^2); D then solves the constant-term
    inequality for that C.  Both are found by bisection.
    """
    a, b, g, d, p = drift.alpha, drift.beta, drift.gamma, drift.delta, drift.p_exponent
    if not 1.0 <= p < 2.0:
        raise DomainError("p_exponent must lie in [1, 2)")
    thr = k_threshold(drift)
    if not K > thr:
        raise InfeasibleError(K, thr)
    den = a * a * K - b * b
    c_lin = a ** (4 - p) * K / den
    c_const = a ** 4 * K / den
    shift = b / (1 - a)

    if g == 0:
        C = 0.0
    else:
        C = _bisect_min(lambda C: (1 - c_lin) * C - 2 * g * a ** -p * (1 + math.sqrt(C)) ** p, 1.0, iters)

    def const_gap(D):
        return (1 - c_const) * D - 2 * g * (math.sqrt(C + D) + shift) ** p - d - a * a * K

    if g == 0:
        D = (d + a * a * K) / (1 - c_const)
    else:
        D = _bisect_min(const_gap, (d + a * a * K) / (1 - c_const), iters)
    lin_gap = (1 - c_lin) * C - 2 * g * a ** -p * (1 + math.sqrt(C)) ** p
    if lin_gap < -1e-9 * max(C, 1.0) or const_gap(D) < -1e-9 * max(D, 1.0):
        raise InfeasibleError(K, thr, "search did not converge")
    return ContractionConstants(K=K, C=C, D=D, drift=drift)


# -- lemma checks on exact pushforward laws ----------------------------------

@dataclass
class BoundRow:
    k: int
    value: float
    bound: float
    ok: bool


@dataclass
class BoundReport:
    name: str
    n: int
    rows: list[BoundRow]

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def violations(self) -> list[BoundRow]:
        return [r for r in self.rows if not r.ok]


def _laws(kernel, n, k_max, matrix):
    if matrix is None:
        matrix = transition_matrix(kernel, n)
    return pushforward_laws(kernel, n, k_max, matrix=matrix)


def expectation_bound_check(kernel: TransitionKernel, drift: DriftParameters, n: int, k_max: int, *,
                            matrix: np.ndarray | None = None, slack: float = 1e-9) -> BoundReport:
    """|E[X_k] - alpha^k n| <= beta / (1 - alpha) for k = 0..k_max."""
    a, b = drift.alpha, drift.beta
    states = np.arange(n + 1)
    rows = []
    for k, law in enumerate(_laws(kernel, n, k_max, matrix)):
        gap = abs(float(law @ states) - a ** k * n)
        bound = b / (1 - a)
        rows.append(BoundRow(k, gap, bound, gap <= bound + slack))
    return BoundReport("expectation", n, rows)


def variance_bound_check(kernel: TransitionKernel, consts: ContractionConstants, n: int, k_max: int, *,
                         matrix: np.ndarray | None = None, slack: float = 1e-9) -> BoundReport:
    """Var(X_k) <= C alpha^(kp) n^p + D for k = 0..k_max."""
    states = np.arange(n + 1, dtype=float)
    rows = []
    for k, law in enumerate(_laws(kernel, n, k_max, matrix)):
        mean = float(law @ states)
        var = max(float(law @ (states - mean) ** 2), 0.0)
        bound = consts.variance_bound(n, k)
        rows.append(BoundRow(k, var, bound, var <= bound + slack))
    return BoundReport("variance", n, rows)


def chebyshev_check(kernel: TransitionKernel, consts: ContractionConstants, x: float, *,
                    k_values=range(0, 20), limit: int = PUSHFORWARD_LIMIT,
                    matrix: np.ndarray | None = None) -> BoundReport:
    """P(|Z_i - x| <= t + k) >= 1 - tau^2/(tau+k)^2 for the exact laws Z_i of X_i given X_0 = N_i."""
    a = consts.alpha
    tau = float(consts.tau(x))
    t = float(consts.t(x))
    rows = []
    i = 1
    while True:
        N = round_half_away(x / a ** i)
        if N > limit:
            break
        if matrix is None or matrix.shape[0] <= N:
            matrix = transition_matrix(kernel, N, limit=limit)
        law = pushforward_laws(kernel, N, i, matrix=matrix)[-1]
        dist = np.abs(np.arange(N + 1) - x)
        for k in k_values:
            prob = float(law[dist <= t + k].sum())
            bound = 1 - tau ** 2 / (tau + k) ** 2
            rows.append(BoundRow(i * 1000 + k, prob, bound, prob >= bound - 1e-12))
        i += 1
    return BoundReport("chebyshev", round_half_away(x), rows)


# -- envelope -----------------------------------------------------------------

def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def round_half_even(x: float) -> int:
    return int(round(x))


ROUNDING = {"half_away": round_half_away, "half_even": round_half_even}


@dataclass
class EnvelopeResult:
    x: float
    tau: float
    t: float
    M: int
    lower: float
    upper: float
    weights: np.ndarray = field(repr=False)

    @property
    def tail(self) -> float:
        return float((self.tau / (self.tau + self.M)) ** 2)

    def row(self) -> dict:
        return {"x": self.x, "t": self.t, "M": self.M, "l": self.lower, "u": self.upper}


def _table_array(table) -> np.ndarray:
    return table if isinstance(table, np.ndarray) else table.as_array()


def _window_extrema(p: np.ndarray, L: int, R: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    """min/max of p over the integer windows [L-k-1, R+k+1] (clipped at 0), k = 0..M-1."""
    core = p[max(L, 0): R + 1]
    ks = np.arange(M)
    left = p[np.maximum(L - 1 - ks, 0)]
    right = p[R + 1: R + 1 + M]
    mins = np.minimum(np.minimum.accumulate(left), np.minimum.accumulate(right))
    maxs = np.maximum(np.maximum.accumulate(left), np.maximum.accumulate(right))
    if core.size:
        mins = np.minimum(mins, core.min())
        maxs = np.maximum(maxs, core.max())
    return mins, maxs


def _weights(tau: float, M: int) -> tuple[np.ndarray, float]:
    F = (tau / (tau + np.arange(M + 1))) ** 2
    return F[:-1] - F[1:], float(F[-1])


def _combine(mins, maxs, tau):
    q, tail = _weights(tau, len(mins))
    return float(q @ mins), float(q @ maxs) + tail


def _integer_window(x: float, t: float) -> tuple[int, int]:
    return math.ceil(x - t), math.floor(x + t)


def _fit(x: float, t: float, n_max: int) -> int:
    """Largest M with x + t + M + 1 <= n_max."""
    M = math.floor(n_max - 1 - (x + t))
    if M < 1:
        raise WindowError(x, math.ceil(x + t + 2), n_max)
    return M


def envelope_at(x: float, table, consts: ContractionConstants) -> EnvelopeResult:
    """l(x) and u(x) from the windows that fit inside the table; the tail mass gets 0 and 1."""
    if x <= 0:
        raise DomainError("x must be positive")
    p = _table_array(table)
    n_max = len(p) - 1
    tau = float(consts.tau(x))
    t = float(consts.t(x))
    L, R = _integer_window(x, t)
    M = _fit(x, t, n_max)
    mins, maxs = _window_extrema(p, L, R, M)
    q, tail = _weights(tau, M)
    lower = float(q @ mins)
    upper = float(q @ maxs) + tail
    return EnvelopeResult(x=x, tau=tau, t=t, M=M, lower=lower, upper=upper, weights=q)


def envelope_curve(table, consts: ContractionConstants, xs) -> list[EnvelopeResult]:
    p = _table_array(table)
    return [envelope_at(float(x), p, consts) for x in xs]


@dataclass
class ContainmentRow:
    i: int
    N: int
    p: float
    ok: bool


@dataclass
class ContainmentReport:
    x: float
    lower: float
    upper: float
    rows: list[ContainmentRow]

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)


def subsequence_containment(x: float, table, consts: ContractionConstants, *,
                            rounding: str = "half_away", slack: float = 1e-12) -> ContainmentReport:
    """Check l(x) <= p(N_i) <= u(x) for every N_i = [alpha^-i x] inside the table."""
    p = _table_array(table)
    env = envelope_at(x, p, consts)
    rnd = ROUNDING[rounding]
    rows = []
    i = 0
    while True:
        N = rnd(x / consts.alpha ** i)
        if N >= len(p):
            break
        v = float(p[N])
        rows.append(ContainmentRow(i, N, v, env.lower - slack <= v <= env.upper + slack))
        i += 1
    return ContainmentReport(x, env.lower, env.upper, rows)


# -- period scan --------------------------------------------------------------

@dataclass
class PeriodScanResult:
    x0: float
    grid_step: float
    K: float
    liminf_lower: float
    liminf_upper: float
    limsup_lower: float
    limsup_upper: float
    argmax_l: float
    argmin_u: float
    pieces: int = 0

    @property
    def gap(self) -> float:
        return self.limsup_lower - self.liminf_upper

    @property
    def certified(self) -> bool:
        """True when limsup p > liminf p is proven."""
        return self.gap > 0

    @property
    def verdict(self) -> str:
        return "non-convergent" if self.certified else "inconclusive by this method"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(gap=self.gap, certified=self.certified, verdict=self.verdict)
        return d


def _crossings(consts: ContractionConstants, lo: float, hi: float, sign: int) -> list[float]:
    """Points x in (lo, hi) where x + sign * t(x) is an integer."""
    a, C, D = consts.alpha, consts.C, consts.D
    b0 = consts.drift.beta / (1 - a) + 0.5
    E = C * a / 2 + D
    g_lo = lo + sign * float(consts.t(lo))
    g_hi = hi + sign * float(consts.t(hi))
    out = []
    for c in range(math.floor(g_lo) + 1, math.ceil(g_hi)):
        if sign > 0:
            cc = c - b0
            x = ((2 * cc + C) - math.sqrt(max(4 * C * cc + C * C + 4 * E, 0.0))) / 2
        else:
            cc = c + b0
            x = ((2 * cc + C) + math.sqrt(max(4 * C * cc + C * C + 4 * E, 0.0))) / 2
        if lo < x < hi:
            out.append(x)
    return out


def scan_period(x0: float, table, consts: ContractionConstants, grid_step: float = 0.1) -> PeriodScanResult:
    """Bound liminf and limsup of p using l, u over the period [x0, x0/alpha]."""
    if x0 <= 0 or grid_step <= 0:
        raise DomainError("x0 and grid_step must be positive")
    p = _table_array(table)
    n_max = len(p) - 1
    x1 = x0 / consts.alpha
    # slope of x - t(x) must stay positive for the crossing formulas
    if consts.C / (2 * float(consts.tau(x0))) >= 1:
        raise DomainError("window half-width grows faster than x; choose a larger x0")
    _fit(x1, float(consts.t(x1)), n_max)

    cuts = sorted(set([x0, x1] + _crossings(consts, x0, x1, +1) + _crossings(consts, x0, x1, -1)))
    inf_l, sup_u = math.inf, -math.inf
    max_l, min_u = -math.inf, math.inf
    arg_l = arg_u = x0

    def point(x):
        nonlocal max_l, min_u, arg_l, arg_u, inf_l, sup_u
        env = envelope_at(x, p, consts)
        if env.lower > max_l:
            max_l, arg_l = env.lower, x
        if env.upper < min_u:
            min_u, arg_u = env.upper, x
        inf_l = min(inf_l, env.lower)
        sup_u = max(sup_u, env.upper)

    for a, b in zip(cuts, cuts[1:]):
        mid = 0.5 * (a + b)
        t_mid = float(consts.t(mid))
        L, R = _integer_window(mid, t_mid)
        # x + t stays inside (R, R + 1) on the piece, so M is constant there
        M = _fit(mid, t_mid, n_max)
        mins, maxs = _window_extrema(p, L, R, M)
        # l decreases and u increases with tau inside a piece: the right end gives inf l / sup u
        eps = 1e-9 * max(1.0, b)
        lo_b, up_b = _combine(mins, maxs, float(consts.tau(b + eps)))
        inf_l = min(inf_l, lo_b)
        sup_u = max(sup_u, up_b)
        # the left end gives sup l / inf u; evaluate at an interior point so the value is attained
        xa = min(a + eps, mid)
        if _integer_window(xa, float(consts.t(xa))) == (L, R):
            lo_a, up_a = _combine(mins, maxs, float(consts.tau(xa)))
            if lo_a > max_l:
                max_l, arg_l = lo_a, xa
            if up_a < min_u:
                min_u, arg_u = up_a, xa
        point(mid)
    for x in np.arange(x0, x1 + 0.5 * grid_step, grid_step):
        point(float(min(x, x1)))
    for x in cuts:
        point(x)

    return PeriodScanResult(x0=x0, grid_step=grid_step, K=consts.K,
                            liminf_lower=inf_l, liminf_upper=min_u,
                            limsup_lower=max_l, limsup_upper=sup_u,
                            argmax_l=arg_l, argmin_u=arg_u, pieces=len(cuts) - 1)


def combine_scans(scans: list[PeriodScanResult]) -> PeriodScanResult:
    """Intersect the bands of several valid scans (different x0 or K)."""
    lo_inf = max(scans, key=lambda s: s.liminf_lower)
    up_inf = min(scans, key=lambda s: s.liminf_upper)
    lo_sup = max(scans, key=lambda s: s.limsup_lower)
    up_sup = min(scans, key=lambda s: s.limsup_upper)
    return PeriodScanResult(
        x0=lo_inf.x0, grid_step=lo_inf.grid_step, K=lo_inf.K,
        liminf_lower=lo_inf.liminf_lower, liminf_upper=up_inf.liminf_upper,
        limsup_lower=lo_sup.limsup_lower, limsup_upper=up_sup.limsup_upper,
        argmax_l=lo_sup.argmax_l, argmin_u=up_inf.argmin_u,
        pieces=sum(s.pieces for s in scans),
    )


def auto_scan(table, consts: ContractionConstants, grid_step: float = 0.1, count: int = 8) -> PeriodScanResult:
    """Scan several periods below the largest admissible x0 and intersect their bands.

    The top of the sweep keeps at least max(50, n_max/5) windows inside the
    table for every x in the period, so the tail mass stays small.
    """
    p = _table_array(table)
    n_max = len(p) - 1
    top = max_x0(n_max, consts, min_windows=max(50, n_max // 5))
    return combine_scans([scan_period(float(top * f), p, consts, grid_step)
                          for f in np.linspace(0.45, 1.0, count)])


def scan_over_K(table, drift: DriftParameters, Ks, x0: float | None = None,
                grid_step: float = 0.1) -> PeriodScanResult:
    """Keep the sharpest bands over a small grid of K (each scan is valid on its own)."""
    p = _table_array(table)
    scans = []
    for K in Ks:
        consts = contraction_constants(drift, K)
        scans.append(scan_period(x0, p, consts, grid_step) if x0 else auto_scan(p, consts, grid_step))
    return combine_scans(scans)


def max_x0(n_max: int, consts: ContractionConstants, min_windows: int = 1) -> float:
    """Largest x0 whose whole period keeps ``min_windows`` windows inside the table."""
    lo, hi = 1e-9, float(n_max)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        x1 = mid / consts.alpha
        if math.ceil(x1 + float(consts.t(x1))) + min_windows + 1 <= n_max:
            lo = mid
        else:
            hi = mid
    return lo


# -- exports --------------------------------------------------------------------

def envelope_csv(results: list[EnvelopeResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "t", "M", "l", "u"])
    for r in results:
        w.writerow([format(r.x, ".17g"), format(r.t, ".17g"), r.M, format(r.lower, ".17g"), format(r.upper, ".17g")])
    return buf.getvalue()


def envelope_json(results: list[EnvelopeResult], consts: ContractionConstants) -> str:
    doc = {
        "K": consts.K, "C": consts.C, "D": consts.D, "alpha": consts.alpha,
        "rows": [{k: (float(format(v, ".17g")) if isinstance(v, float) else v) for k, v in r.row().items()}
                 for r in results],
    }
    return json.dumps(doc, indent=1) + "\n"

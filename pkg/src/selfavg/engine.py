"""Exact evaluation of p(n) = E[p(Y(n))] with per-row residual checks.

Rows are accepted only when the pmf normalisation (and, where the kernel
has closed-form moments, the first two moments) match to the configured
tolerances; otherwise the row is recomputed at a geometrically larger
working precision.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import operator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import partial
from pathlib import Path
from typing import Callable, Iterator

import mpmath
import numpy as np
from mpmath import mpf
from mpmath.libmp import to_fixed

from .errors import DomainError, PrecisionError, PushforwardLimitError
from .kernels import TransitionKernel, get_kernel

log = logging.getLogger(__name__)

PUSHFORWARD_LIMIT = 500


@dataclass(frozen=True)
class PrecisionConfig:
    initial_bits: int = 256
    max_bits: int = 4096
    normalization_tol: float = 1e-20
    escalation_factor: int = 2
    moment_tol: float = 1e-15

    def __post_init__(self):
        if self.initial_bits < 64:
            raise DomainError("initial_bits must be >= 64")
        if self.max_bits < self.initial_bits:
            raise DomainError("max_bits must be >= initial_bits")
        if self.escalation_factor < 2:
            raise DomainError("escalation_factor must be >= 2")


@dataclass
class RowResidual:
    n: int
    bits: int
    normalization: float
    mean: float | None = None
    second_moment: float | None = None
    support_violation: bool = False

    @property
    def worst(self) -> float:
        return max(v for v in (self.normalization, self.mean, self.second_moment) if v is not None)


@dataclass
class SequenceTable:
    kernel_name: str
    n_max: int
    values: list
    precision_bits: int
    residuals: dict[int, RowResidual] = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, n):
        return self.values[n]

    @property
    def residual_max(self) -> float:
        return max((r.worst for r in self.residuals.values()), default=0.0)

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.values])

    def residual_of(self, n: int) -> float:
        r = self.residuals.get(n)
        return 0.0 if r is None else r.worst


def _fixed(xs, frac: int) -> list[int]:
    """floor(x * 2**frac) for each x; exact integer arithmetic downstream."""
    return [to_fixed(x._mpf_, frac) for x in xs]


def _fixed_dot(a: list[int], b) -> int:
    return sum(map(operator.mul, a, b))


def _rel(err, ref) -> float:
    ref = abs(ref)
    return float(abs(err) / ref) if ref > 0 else float(abs(err))


def checked_row(kernel: TransitionKernel, n: int, precision: PrecisionConfig) -> tuple[list, RowResidual]:
    """pmf of Y(n) that passed the residual checks, escalating precision as needed."""
    bits = precision.initial_bits
    while True:
        w = kernel.pmf(n, bits)
        # fixed point with 64 guard bits: truncation adds at most (n+1) * 2**-frac per sum
        frac = bits + 64
        wf = _fixed(w, frac)
        ks = range(len(w))
        with mpmath.workprec(bits + 32):
            unit = mpmath.ldexp(mpf(1), -frac)
            norm = float(abs(sum(wf) * unit - 1))
            m1 = _fixed_dot(wf, ks) * unit
            m2 = _fixed_dot(wf, [k * k for k in ks]) * unit
            c1 = kernel.mean(n, bits + 32)
            c2 = kernel.second_moment(n, bits + 32)
            r1 = None if c1 is None else _rel(m1 - c1, c1)
            r2 = None if c2 is None else _rel(m2 - c2, c2)
        neg = min(float(v) for v in w)
        res = RowResidual(n=n, bits=bits, normalization=norm, mean=r1, second_moment=r2)
        ok = (norm < precision.normalization_tol
              and (r1 is None or r1 < precision.moment_tol)
              and (r2 is None or r2 < precision.moment_tol)
              and neg >= -precision.normalization_tol)
        if ok:
            res.support_violation = w[n] != 0
            if neg < 0:
                w = [mpf(0) if v < 0 else v for v in w]
            return w, res
        nxt = bits * precision.escalation_factor
        if nxt > precision.max_bits:
            raise PrecisionError(n, bits, res.worst)
        log.info("row %d failed checks at %d bits (worst %.3e); escalating", n, bits, res.worst)
        bits = nxt


def _row_job(args):
    kernel, n, precision = args
    return checked_row(kernel, n, precision)


def _rows(kernel, lo, hi, precision, workers) -> Iterator[tuple[list, RowResidual]]:
    if workers <= 1:
        for n in range(lo, hi + 1):
            yield checked_row(kernel, n, precision)
        return
    # rows are independent of p; map() preserves order so the reduction stays deterministic
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield from ex.map(_row_job, ((kernel, n, precision) for n in range(lo, hi + 1)), chunksize=4)


def _frac_to_mpf(v) -> mpf:
    v = Fraction(v)
    return mpf(v.numerator) / v.denominator


def build_table(kernel: TransitionKernel, n_max: int, precision: PrecisionConfig | None = None, *,
                resume: SequenceTable | None = None, workers: int = 1,
                checkpoint: Callable[[SequenceTable], None] | None = None,
                checkpoint_every: int = 100) -> SequenceTable:
    """Compute p(0..n_max) for ``kernel``.

    ``resume`` continues a partial table of the same kernel; ``checkpoint`` is
    called with the partial table every ``checkpoint_every`` rows.
    """
    precision = precision or PrecisionConfig()
    if n_max < 0:
        raise DomainError("n_max must be >= 0")
    work = precision.initial_bits + 32
    if resume is not None:
        if resume.kernel_name != kernel.name:
            raise DomainError(f"cannot resume a {resume.kernel_name!r} table with kernel {kernel.name!r}")
        values = list(resume.values[: n_max + 1])
        residuals = {n: r for n, r in resume.residuals.items() if n <= n_max}
        top_bits = max(resume.precision_bits, precision.initial_bits)
    else:
        with mpmath.workprec(work):
            values = [_frac_to_mpf(kernel.boundary_values[n]) for n in range(min(kernel.n0, n_max) + 1)]
        residuals = {}
        top_bits = precision.initial_bits
    for v in values[: kernel.n0 + 1]:
        if not 0 <= v <= 1:
            raise DomainError("boundary values must lie in [0, 1]")

    start = len(values)
    table = SequenceTable(kernel.name, len(values) - 1, values, top_bits, residuals)
    frac = 0
    vf: list[int] = []
    for n, (w, res) in enumerate(_rows(kernel, start, n_max, precision, workers), start=start):
        if res.bits + 64 != frac:
            frac = res.bits + 64
            vf = _fixed(values, frac)
        with mpmath.workprec(max(work, res.bits + 32)):
            acc = mpmath.ldexp(mpf(_fixed_dot(_fixed(w[:n], frac), vf)), -2 * frac)
            if w[n] != 0:
                # mass on n itself: p(n) solves p = acc + w_n p
                acc = acc / (1 - w[n])
            acc = min(max(acc, mpf(0)), mpf(1))
            values.append(+acc)
        vf.append(to_fixed(values[-1]._mpf_, frac))
        residuals[n] = res
        table.n_max = n
        table.precision_bits = max(table.precision_bits, res.bits)
        if checkpoint is not None and (n - start + 1) % checkpoint_every == 0:
            checkpoint(table)
    table.n_max = len(values) - 1
    return table


@dataclass
class ResidualReport:
    kernel: str
    precision_bits: int
    per_n: dict[int, float]

    @property
    def max(self) -> float:
        return max(self.per_n.values(), default=0.0)

    def worst(self, count: int = 5) -> list[tuple[int, float]]:
        return sorted(self.per_n.items(), key=lambda kv: -kv[1])[:count]


def table_residual_report(table: SequenceTable) -> ResidualReport:
    return ResidualReport(table.kernel_name, table.precision_bits,
                          {n: r.worst for n, r in sorted(table.residuals.items())})


def agreement_bits(a: SequenceTable, b: SequenceTable) -> float:
    """Minimum over n of -log2 |a(n) - b(n)| (inf when identical)."""
    worst = mpf(0)
    with mpmath.workprec(max(a.precision_bits, b.precision_bits) + 64):
        for x, y in zip(a.values, b.values):
            worst = max(worst, abs(x - y))
        return float("inf") if worst == 0 else float(-mpmath.log(worst, 2))


# -- pushforward ------------------------------------------------------------

def transition_matrix(kernel: TransitionKernel, n: int, *, limit: int = PUSHFORWARD_LIMIT,
                      bits: int = 128) -> np.ndarray:
    """Dense (n+1) x (n+1) row-stochastic matrix P[m, k] = P(Y(m) = k)."""
    if n > limit:
        raise PushforwardLimitError(n, limit)
    P = np.zeros((n + 1, n + 1))
    for m in range(n + 1):
        P[m, : m + 1] = kernel.pmf_float(m, bits)
    return P


def pushforward_distribution(kernel: TransitionKernel, n: int, k_rounds: int, *,
                             matrix: np.ndarray | None = None,
                             limit: int = PUSHFORWARD_LIMIT) -> np.ndarray:
    """Law of X_k started from X_0 = n, as a vector over {0, ..., n}."""
    if n > limit:
        raise PushforwardLimitError(n, limit)
    P = matrix if matrix is not None else transition_matrix(kernel, n, limit=limit)
    P = P[: n + 1, : n + 1]
    dist = np.zeros(n + 1)
    dist[n] = 1.0
    for _ in range(k_rounds):
        dist = dist @ P
    return dist


def pushforward_laws(kernel: TransitionKernel, n: int, k_max: int, *,
                     matrix: np.ndarray | None = None, limit: int = PUSHFORWARD_LIMIT) -> list[np.ndarray]:
    """[law of X_0, ..., law of X_k_max] from X_0 = n."""
    if n > limit:
        raise PushforwardLimitError(n, limit)
    P = matrix if matrix is not None else transition_matrix(kernel, n, limit=limit)
    P = P[: n + 1, : n + 1]
    dist = np.zeros(n + 1)
    dist[n] = 1.0
    laws = [dist]
    for _ in range(k_max):
        dist = dist @ P
        laws.append(dist)
    return laws


@dataclass
class MartingaleReport:
    n: int
    p_n: float
    deviations: list[float]
    tolerance: float

    @property
    def max_deviation(self) -> float:
        return max(self.deviations, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance


def martingale_check(table: SequenceTable, kernel: TransitionKernel, n: int, k_max: int, *,
                     tolerance: float = 1e-12, matrix: np.ndarray | None = None) -> MartingaleReport:
    """|E[p(X_k)] - p(n)| for k = 0..k_max under the exact pushforward laws."""
    if n > table.n_max:
        raise DomainError(f"table stops at n={table.n_max}")
    p = table.as_array()[: n + 1]
    laws = pushforward_laws(kernel, n, k_max, matrix=matrix)
    devs = [abs(float(law @ p) - p[n]) for law in laws]
    return MartingaleReport(n=n, p_n=float(p[n]), deviations=devs, tolerance=tolerance)


# -- persistence ------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def table_to_json(table: SequenceTable) -> str:
    doc = {
        "kernel": table.kernel_name,
        "n_max": table.n_max,
        "precision_bits": table.precision_bits,
        "values": [float(_fmt(v)) for v in table.values],
        "residual_max": table.residual_max,
    }
    return json.dumps(doc, indent=1) + "\n"


def table_to_csv(table: SequenceTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "p", "residual"])
    for n, v in enumerate(table.values):
        w.writerow([n, _fmt(v), _fmt(table.residual_of(n))])
    return buf.getvalue()


def table_to_native(table: SequenceTable) -> str:
    """Lossless dump: each value stored as an exact (mantissa, exponent) pair."""
    exact = []
    for v in table.values:
        man, exp = v.man_exp if isinstance(v, mpf) else mpf(v).man_exp
        exact.append([int(man), int(exp)])
    doc = {
        "format": "selfavg-native-1",
        "kernel": table.kernel_name,
        "n_max": table.n_max,
        "precision_bits": table.precision_bits,
        "values_exact": exact,
        "residuals": [vars(table.residuals[n]) for n in sorted(table.residuals)],
    }
    return json.dumps(doc) + "\n"


def save_table(table: SequenceTable, path: str | Path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    text = {"json": table_to_json, "csv": table_to_csv, "native": table_to_native}[fmt](table)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def load_table(path: str | Path) -> SequenceTable:
    """Read any of the three dump formats back into a table."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv" or text.startswith("n,p"):
        rows = list(csv.DictReader(io.StringIO(text)))
        values = [mpf(r["p"]) for r in rows]
        kernel = path.stem
        return SequenceTable(kernel, len(values) - 1, values, 53)
    doc = json.loads(text)
    if doc.get("format") == "selfavg-native-1":
        bits = doc["precision_bits"] + 32
        with mpmath.workprec(bits):
            values = [mpmath.ldexp(mpf(m), e) for m, e in doc["values_exact"]]
        res = {r["n"]: RowResidual(**r) for r in doc.get("residuals", [])}
        return SequenceTable(doc["kernel"], doc["n_max"], values, doc["precision_bits"], res)
    values = [mpf(v) for v in doc["values"]]
    return SequenceTable(doc["kernel"], doc["n_max"], values, doc.get("precision_bits", 53))


def build_or_resume(kernel_name: str, n_max: int, precision: PrecisionConfig, checkpoint_path: Path | None,
                    workers: int = 1) -> SequenceTable:
    kernel = get_kernel(kernel_name)
    resume = None
    if checkpoint_path is not None and checkpoint_path.exists():
        resume = load_table(checkpoint_path)
        log.info("resuming %s from n=%d", kernel_name, resume.n_max)
    saver = None if checkpoint_path is None else partial(save_table, path=checkpoint_path, fmt="native")
    table = build_table(kernel, n_max, precision, resume=resume, workers=workers, checkpoint=saver)
    return table

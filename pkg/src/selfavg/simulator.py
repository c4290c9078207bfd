"""Mechanistic Monte Carlo of the elimination games.

The roulette round is simulated shot by shot and never touches the pmf
code, so estimates here are an independent check on the exact tables.
Every batch of trials draws from its own Philox stream derived from
``(seed, batch index)``; results depend only on the seed, the trial count
and the batch size, never on how batches are scheduled.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .kernels import TransitionKernel, get_kernel


@dataclass(frozen=True)
class TrialConfig:
    kernel_name: str = "roulette"
    n_start: int = 10
    trials: int = 10_000
    seed: int = 0
    batch_size: int = 10_000

    def __post_init__(self):
        if self.trials < 1:
            raise DomainError("trials must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.n_start < 0:
            raise DomainError("n_start must be >= 0")

    def batches(self) -> list[int]:
        full, rest = divmod(self.trials, self.batch_size)
        return [self.batch_size] * full + ([rest] if rest else [])


def batch_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for one batch."""
    ss = np.random.SeedSequence(entropy=seed & ((1 << 64) - 1), spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def simulate_roulette_round(n: int, rng: np.random.Generator) -> int:
    """One round with n shooters; returns the number nobody aimed at."""
    if n < 2:
        raise DomainError("a round needs at least two players")
    return int(roulette_rounds(np.array([n]), rng)[0])


def roulette_rounds(pops: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Survivor counts for many independent rounds at once (all pops >= 2)."""
    out = np.empty_like(pops)
    for n in np.unique(pops):
        idx = np.flatnonzero(pops == n)
        # uniform over the n-1 others: draw from {0..n-2} and skip the shooter's own index
        shots = rng.integers(0, n - 1, size=(idx.size, n))
        shots += shots >= np.arange(n)
        hit = np.zeros((idx.size, n), dtype=bool)
        np.put_along_axis(hit, shots, True, axis=1)
        out[idx] = n - hit.sum(axis=1)
    return out


def coinflip_rounds(pops: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Players flipping tails continue; an all-tails round is replayed."""
    out = np.empty_like(pops)
    todo = np.arange(pops.size)
    while todo.size:
        tails = rng.binomial(pops[todo], 0.5)
        done = tails < pops[todo]
        out[todo[done]] = tails[done]
        todo = todo[~done]
    return out


def parity_rounds(pops: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return 2 * rng.binomial(pops // 2, 0.5) + pops % 2


def pmf_rounds(kernel: TransitionKernel, pops: np.ndarray, rng: np.random.Generator,
               cache: dict | None = None) -> np.ndarray:
    """Sample Y(n) from the kernel's pmf (inverse-CDF); used for user kernels and cross-checks."""
    cache = {} if cache is None else cache
    out = np.empty_like(pops)
    for n in np.unique(pops):
        idx = np.flatnonzero(pops == n)
        if n not in cache:
            cdf = np.cumsum(kernel.pmf_float(int(n)))
            cache[n] = cdf / cdf[-1]
        u = rng.random(idx.size)
        out[idx] = np.searchsorted(cache[n], u, side="right")
    return out


MECHANISMS = {"roulette": roulette_rounds, "coinflip": coinflip_rounds, "parity": parity_rounds}


def _stepper(kernel: TransitionKernel, mechanistic: bool = True):
    if mechanistic and kernel.name in MECHANISMS:
        return MECHANISMS[kernel.name]
    cache: dict = {}
    return lambda pops, rng: pmf_rounds(kernel, pops, rng, cache)


@dataclass
class ProcessTrace:
    states: list[int]

    @property
    def rounds(self) -> int:
        return len(self.states) - 1

    @property
    def absorbed_at(self) -> int:
        return self.states[-1]


def _run_batch(kernel: TransitionKernel, n_start: int, size: int, rng, mechanistic=True):
    """Absorption states and round counts for ``size`` independent processes."""
    step = _stepper(kernel, mechanistic)
    pops = np.full(size, n_start, dtype=np.int64)
    rounds = np.zeros(size, dtype=np.int64)
    active = np.flatnonzero(pops > kernel.n0)
    while active.size:
        new = step(pops[active], rng)
        if np.any(new < 0) or np.any(new > pops[active]):
            raise AssertionError("kernel produced a state outside {0..n}")
        pops[active] = new
        rounds[active] += 1
        active = active[new > kernel.n0]
    return pops, rounds


def simulate_process(config: TrialConfig, *, kernel: TransitionKernel | None = None) -> ProcessTrace:
    """A single trajectory X_0 = n_start, X_1, ... until absorption."""
    kernel = kernel or get_kernel(config.kernel_name)
    step = _stepper(kernel)
    rng = batch_rng(config.seed, 0)
    states = [config.n_start]
    while states[-1] > kernel.n0:
        states.append(int(step(np.array([states[-1]]), rng)[0]))
    return ProcessTrace(states)


@dataclass
class SimulationResult:
    kernel: str
    n: int
    trials: int
    seed: int
    boundary: dict = field(default_factory=lambda: {0: 1.0, 1: 0.0})
    absorbed: Counter = field(default_factory=Counter)
    rounds: Counter = field(default_factory=Counter)

    def _moment(self, power: int) -> float:
        return sum(c * self.boundary[s] ** power for s, c in self.absorbed.items()) / self.trials

    @property
    def p_hat(self) -> float:
        """Mean boundary value p(X_end) over the trials."""
        return self._moment(1)

    @property
    def stderr(self) -> float:
        p = self.p_hat
        return math.sqrt(max(self._moment(2) - p * p, 0.0) / self.trials)

    def to_json(self) -> str:
        doc = {"n": self.n, "trials": self.trials, "seed": self.seed, "p_hat": self.p_hat,
               "stderr": self.stderr, "kernel": self.kernel}
        return json.dumps(doc, sort_keys=True) + "\n"

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "value", "count"])
        for k in sorted(self.absorbed):
            w.writerow(["absorbed", k, self.absorbed[k]])
        for k in sorted(self.rounds):
            w.writerow(["rounds", k, self.rounds[k]])
        return buf.getvalue()


def run_trials(config: TrialConfig, *, kernel: TransitionKernel | None = None, threads: int = 1,
               mechanistic: bool = True) -> SimulationResult:
    kernel = kernel or get_kernel(config.kernel_name)
    sizes = config.batches()

    def job(i):
        return _run_batch(kernel, config.n_start, sizes[i], batch_rng(config.seed, i), mechanistic)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, range(len(sizes))))
    else:
        parts = [job(i) for i in range(len(sizes))]
    boundary = {s: float(v) for s, v in kernel.boundary_values.items()}
    res = SimulationResult(kernel.name, config.n_start, config.trials, config.seed, boundary)
    for pops, rounds in parts:
        res.absorbed.update(pops.tolist())
        res.rounds.update(rounds.tolist())
    return res


def estimate_p(config: TrialConfig, **kw) -> tuple[float, float]:
    """Monte Carlo p(n_start) = E[p(absorbing state)] and its standard error."""
    res = run_trials(config, **kw)
    return res.p_hat, res.stderr


@dataclass
class MomentEstimate:
    mean: float
    variance: float
    mean_se: float
    variance_se: float


def sample_one_round(kernel: TransitionKernel, n: int, trials: int, seed: int, *,
                     batch_size: int = 100_000, mechanistic: bool = True) -> np.ndarray:
    step = _stepper(kernel, mechanistic)
    out = []
    done = 0
    i = 0
    while done < trials:
        size = min(batch_size, trials - done)
        out.append(step(np.full(size, n, dtype=np.int64), batch_rng(seed, i)))
        done += size
        i += 1
    return np.concatenate(out)


def estimate_moments(kernel: TransitionKernel, n: int, trials: int, seed: int, **kw) -> MomentEstimate:
    """Sample mean and variance of Y(n) with standard errors."""
    if n < 2:
        raise DomainError("n must be >= 2")
    y = sample_one_round(kernel, n, trials, seed, **kw).astype(float)
    mean = float(y.mean())
    var = float(y.var(ddof=1)) if trials > 1 else 0.0
    m4 = float(((y - mean) ** 4).mean())
    var_se = math.sqrt(max(m4 - var * var, 0.0) / trials)
    return MomentEstimate(mean, var, math.sqrt(var / trials), var_se)

"""Independent reference values computed by brute force in exact arithmetic."""

from fractions import Fraction
from functools import lru_cache
from itertools import product
from math import comb


@lru_cache(maxsize=None)
def enumerated_survivor_law(n: int) -> tuple[Fraction, ...]:
    """P(Y(n)=s), s = 0..n, by listing all (n-1)^n target choices."""
    if n < 2:
        raise ValueError("n >= 2")
    counts = [0] * (n + 1)
    others = [[j for j in range(n) if j != i] for i in range(n)]
    for targets in product(*others):
        counts[n - len(set(targets))] += 1
    total = (n - 1) ** n
    return tuple(Fraction(c, total) for c in counts)


def enumerated_kill_subset(n: int) -> list[Fraction]:
    """q[k-1] = P(the killed set is exactly {0..k-1}), k = 1..n."""
    q = [Fraction(0)] * n
    total = (n - 1) ** n
    others = [[j for j in range(n) if j != i] for i in range(n)]
    for targets in product(*others):
        killed = set(targets)
        if killed == set(range(len(killed))):
            q[len(killed) - 1] += Fraction(1, total)
    return q


def exact_p(n_max: int, law) -> list[Fraction]:
    """p(0..n_max) from p(n) = sum_s P(Y(n)=s) p(s), boundary p(0)=1, p(1)=0."""
    p = [Fraction(1), Fraction(0)]
    for n in range(2, n_max + 1):
        w = law(n)
        acc = sum(w[s] * p[s] for s in range(n))
        p.append(acc / (1 - w[n]) if w[n] else acc)
    return p


def binomial_law(m: int) -> list[Fraction]:
    return [Fraction(comb(m, j), 2 ** m) for j in range(m + 1)]

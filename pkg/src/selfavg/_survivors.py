"""Survivor-count law of one roulette round via a single big-integer product.

With ``G_m = E[binom(Y, m)]`` (the binomial moments of the survivor count Y),

    P(Y = s) = sum_m (-1)^(m-s) binom(m, s) G_m,

    G_m = binom(n, m) * ((n-m)/(n-1))^m * ((n-m-1)/(n-1))^(n-m).

This is the same alternating inversion that the kill-subset recursion
performs one entry at a time, but written as a correlation it can be
evaluated for all s at once.  Both factors are scaled by powers of
``r = 2**rho`` to balance their dynamic range, rounded to fixed point,
packed into two integers (Kronecker substitution) and multiplied once.

The alternating sum loses roughly 0.4 n bits to cancellation; the fixed
point widths below are chosen from magnitude estimates so that every
returned probability carries an absolute error below ``2**-bits``.
"""

from __future__ import annotations

import math

import gmpy2
import mpmath
import numpy as np
from gmpy2 import mpz


def _plan(n: int, bits: int) -> tuple[int, int, int, int, int]:
    """Pick the radix exponent and fixed-point widths (rho, Fa, Fb, la, lb)."""
    top = n - 2
    j = np.arange(top + 1)
    lf = np.concatenate(([0.0], np.cumsum(np.log2(np.arange(1, n + 1)))))
    m = j
    # log2 of m! G_m (before the r^-m rescaling)
    lb0 = lf[n] - lf[n - m] + m * np.log2(n - m) - n * np.log2(n - 1)
    tail = n - m - 1
    lb0 = lb0 + np.where(tail > 0, (n - m) * np.log2(np.maximum(tail, 1)), 0.0)
    best = None
    for rho in range(0, max(1, int(math.log2(n))) + 2):
        la = float(np.max(rho * j - lf[: top + 1]))
        lb = float(np.max(lb0 - rho * m))
        # slot width grows like 4*la + 2*lb
        cost = 4 * la + 2 * lb
        if best is None or cost < best[0]:
            best = (cost, rho, la, lb)
    _, rho, la, lb = best
    la_i = int(math.ceil(max(la, 0.0))) + 4
    lb_i = int(math.ceil(max(lb, 0.0))) + 4
    lg = int(math.ceil(math.log2(n))) + 1
    frac_b = bits + 4 + lg + 2 * la_i
    frac_a = bits + 4 + lg + la_i + lb_i
    return rho, frac_a, frac_b, la_i, lb_i


def _pack(coeffs: list, wbytes: int) -> mpz:
    return mpz(int.from_bytes(b"".join(int(c).to_bytes(wbytes, "little") for c in coeffs), "little"))


def survivor_pmf(n: int, bits: int) -> list:
    """P(Y(n)=s) for s = 0..n-2 as mpmath numbers with absolute error < 2**-bits."""
    if n == 2:
        return [mpmath.mpf(1)]
    top = n - 2
    rho, frac_a, frac_b, la, lb = _plan(n, bits)

    # A_j = floor(2^frac_a * r^j / j!)
    prec_a = la + frac_a + 32
    with gmpy2.context(precision=prec_a):
        a = gmpy2.mul_2exp(gmpy2.mpfr(1), frac_a)
        A = [mpz(gmpy2.floor(a))]
        for j in range(1, top + 1):
            a = gmpy2.mul_2exp(a, rho) / j
            A.append(mpz(gmpy2.floor(a)))

    # B_m = floor(2^frac_b * m! G_m / r^m)
    prec_b = lb + frac_b + 48
    with gmpy2.context(precision=prec_b):
        inv_den = 1 / gmpy2.mpfr(n - 1) ** n
        falling = gmpy2.mpfr(1)
        B = []
        for m in range(top + 1):
            v = falling * gmpy2.mpfr(n - m) ** m * gmpy2.mpfr(n - m - 1) ** (n - m) * inv_den
            B.append(mpz(gmpy2.floor(gmpy2.mul_2exp(v, frac_b - rho * m))))
            falling *= n - m

    # fold signs: A'_j = A_j (j even), cap - A_j (j odd), so all coefficients are >= 0
    cap_bits = max(int(x).bit_length() for x in A)
    cap = mpz(1) << cap_bits
    A_folded = [x if j % 2 == 0 else cap - x for j, x in enumerate(A)]
    odd_tail = [mpz(0)] * (top + 3)
    for s in range(top, -1, -1):
        odd_tail[s] = (B[s + 1] if s + 1 <= top else 0) + odd_tail[s + 2]

    max_b_bits = max(int(x).bit_length() for x in B)
    width = cap_bits + max_b_bits + int(math.ceil(math.log2(top + 1))) + 2
    wbytes = (width + 7) // 8
    prod = _pack(A_folded, wbytes) * _pack(B[::-1], wbytes)
    raw = int(prod).to_bytes((2 * top + 2) * wbytes, "little")

    out = []
    shift = -(frac_a + frac_b)
    with mpmath.workprec(bits + 32 + int(math.log2(n)) + 1):
        r = mpmath.ldexp(mpmath.mpf(1), rho)
        scale = mpmath.mpf(1)
        for s in range(top + 1):
            i = top - s
            conv = int.from_bytes(raw[i * wbytes:(i + 1) * wbytes], "little")
            S = conv - (int(odd_tail[s]) << cap_bits)
            if s:
                scale = scale * r / s
            out.append(mpmath.ldexp(mpmath.mpf(S), shift) * scale)
    return out

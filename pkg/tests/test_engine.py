import csv
import io
import json
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import binomial_law, enumerated_survivor_law, exact_p
from selfavg.engine import (PrecisionConfig, SequenceTable, agreement_bits, build_or_resume, build_table,
                            checked_row, load_table, martingale_check, pushforward_distribution,
                            pushforward_laws, save_table, table_residual_report, table_to_csv, table_to_json,
                            transition_matrix)
from selfavg.errors import DomainError, PrecisionError, PushforwardLimitError
from selfavg.kernels import FunctionKernel, get_kernel


@pytest.fixture(scope="module")
def small():
    return build_table(get_kernel("roulette"), 120)


def test_known_values(small):
    p = small.as_array()
    assert p[:4].tolist() == [1.0, 0.0, 1.0, 0.25]
    assert p[4] == pytest.approx(11 / 27, abs=1e-16)


def as_mpf(q: Fraction):
    with mpmath.workprec(320):
        return mpmath.mpf(q.numerator) / q.denominator


def test_matches_rational_recursion(small):
    exact = exact_p(6, enumerated_survivor_law)
    with mpmath.workprec(320):
        assert max(abs(as_mpf(want) - got) for got, want in zip(small.values, exact)) < 1e-70


def test_boundary_only():
    t = build_table(get_kernel("roulette"), 1)
    assert [float(v) for v in t.values] == [1.0, 0.0]
    assert build_table(get_kernel("roulette"), 0).n_max == 0


def test_values_in_unit_interval(small):
    assert all(0 <= v <= 1 for v in small.values)


def test_residuals_within_tolerance(small):
    rep = table_residual_report(small)
    assert set(rep.per_n) == set(range(2, 121))
    assert rep.max < 1e-20
    assert rep.worst(3)[0][1] == rep.max


def test_parity_fixed_point():
    # every row puts mass 2^-(n//2) on n itself; p(n) is then solved from p = acc + w_n p
    t = build_table(get_kernel("parity"), 200)
    assert np.array_equal(t.as_array(), np.arange(201) % 2)
    assert all(t.residuals[n].support_violation for n in range(2, 201))


def test_coinflip_values():
    exact = exact_p(8, lambda n: [Fraction(c) / (1 - Fraction(1, 2 ** n)) for c in binomial_law(n)[:-1]] + [0])
    t = build_table(get_kernel("coinflip"), 8)
    assert float(t.values[2]) == pytest.approx(1 / 3, abs=1e-16)
    with mpmath.workprec(320):
        assert max(abs(as_mpf(want) - got) for got, want in zip(t.values, exact)) < 1e-60


def test_precision_escalation_and_exhaustion():
    # the subset route loses ~0.4 n bits; 64 bits cannot serve n = 250
    k = get_kernel("roulette")
    k.method = "subset"
    w, res = checked_row(k, 250, PrecisionConfig(initial_bits=64, max_bits=1024))
    assert res.bits > 64 and res.normalization < 1e-20
    with pytest.raises(PrecisionError):
        checked_row(k, 250, PrecisionConfig(initial_bits=64, max_bits=128))


def test_unnormalized_kernel_fails():
    bad = FunctionKernel(name="leaky", n0=1, boundary_values={0: Fraction(1), 1: Fraction(0)},
                         func=lambda n: [0.5] + [0] * (n - 1))
    with pytest.raises(PrecisionError):
        build_table(bad, 5, PrecisionConfig(initial_bits=64, max_bits=256))


def test_precision_config_validation():
    with pytest.raises(DomainError):
        PrecisionConfig(initial_bits=32)
    with pytest.raises(DomainError):
        PrecisionConfig(initial_bits=512, max_bits=256)
    with pytest.raises(DomainError):
        build_table(get_kernel("roulette"), -1)


def test_resume_matches_fresh(small, tmp_path):
    part = build_table(get_kernel("roulette"), 50)
    full = build_table(get_kernel("roulette"), 120, resume=part)
    assert agreement_bits(full, small) == float("inf")
    with pytest.raises(DomainError):
        build_table(get_kernel("parity"), 60, resume=part)


def test_checkpoint_resume(small, tmp_path):
    ckpt = tmp_path / "t.partial.json"
    saved = []
    build_table(get_kernel("roulette"), 45, checkpoint=lambda t: saved.append(t.n_max), checkpoint_every=20)
    assert saved == [21, 41]
    # interrupted run: checkpoint written at n = 60, then resumed to 120
    save_table(build_table(get_kernel("roulette"), 60), ckpt, "native")
    resumed = build_or_resume("roulette", 120, PrecisionConfig(), ckpt)
    assert agreement_bits(resumed, small) == float("inf")


def test_workers_do_not_change_result(small):
    t = build_table(get_kernel("roulette"), 40, workers=2)
    assert all(a == b for a, b in zip(t.values, small.values[:41]))


def test_doubled_precision_agrees(small):
    hi = build_table(get_kernel("roulette"), 120, PrecisionConfig(initial_bits=512, max_bits=8192))
    assert agreement_bits(small, hi) >= 128


@pytest.mark.parametrize("fmt", ["json", "csv", "native"])
def test_round_trip(small, tmp_path, fmt):
    path = save_table(small, tmp_path / ("roulette." + ("csv" if fmt == "csv" else "json")), fmt)
    back = load_table(path)
    assert back.n_max == small.n_max
    if fmt == "native":
        assert agreement_bits(back, small) == float("inf")
        assert back.residuals[7].normalization == small.residuals[7].normalization
    else:
        assert np.array_equal(back.as_array(), small.as_array())


def test_json_and_csv_same_numbers(small):
    doc = json.loads(table_to_json(small))
    rows = list(csv.DictReader(io.StringIO(table_to_csv(small))))
    assert [float(r["p"]) for r in rows] == doc["values"]
    assert doc["kernel"] == "roulette" and doc["precision_bits"] >= 256


def test_dumps_deterministic(small):
    again = build_table(get_kernel("roulette"), 120)
    assert table_to_json(again) == table_to_json(small)


class TestPushforward:
    def test_matrix_rows_stochastic(self):
        P = transition_matrix(get_kernel("roulette"), 60)
        assert np.allclose(P.sum(axis=1), 1, atol=1e-14)
        assert np.all(np.triu(P, -1)[2:] == 0)
        assert P[0, 0] == 1 and P[1, 1] == 1 and P[3].tolist()[:2] == [0.25, 0.75]

    def test_limit(self):
        with pytest.raises(PushforwardLimitError):
            transition_matrix(get_kernel("roulette"), 600)
        with pytest.raises(PushforwardLimitError):
            pushforward_distribution(get_kernel("roulette"), 501, 2)

    def test_laws_consistent(self):
        k = get_kernel("roulette")
        P = transition_matrix(k, 80)
        laws = pushforward_laws(k, 80, 5, matrix=P)
        assert np.allclose(laws[3], pushforward_distribution(k, 80, 3, matrix=P))
        assert laws[0][80] == 1

    def test_martingale(self, small):
        k = get_kernel("roulette")
        P = transition_matrix(k, 120)
        rep = martingale_check(small, k, 120, 10, matrix=P)
        assert rep.passed and len(rep.deviations) == 11
        with pytest.raises(DomainError):
            martingale_check(small, k, 121, 2)

    def test_martingale_detects_wrong_table(self, small):
        k = get_kernel("roulette")
        wrong = SequenceTable("roulette", 120, [v * 0.99 if n == 3 else v for n, v in enumerate(small.values)], 256)
        assert not martingale_check(wrong, k, 40, 10).passed


@settings(max_examples=15, deadline=None)
@given(n=st.integers(2, 120), k=st.integers(1, 12))
def test_pushforward_is_a_law(n, k):
    d = pushforward_distribution(get_kernel("roulette"), n, k)
    assert abs(d.sum() - 1) < 1e-12 and d.min() >= 0
    # support shrinks by at least one per round until absorption
    assert d[max(n - k + 1, 2):].sum() < 1e-12

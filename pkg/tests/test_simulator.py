import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from mpmath import gammainc

from selfavg.errors import DomainError
from selfavg.kernels import get_kernel, roulette_mu, roulette_sigma2
from selfavg.simulator import (TrialConfig, batch_rng, coinflip_rounds, estimate_moments, estimate_p,
                               parity_rounds, roulette_rounds, run_trials, sample_one_round,
                               simulate_process, simulate_roulette_round)


def chi_square_p_value(observed, expected_probs):
    """Pearson test, pooling cells with expected count < 5; p-value via the regularized gamma."""
    total = observed.sum()
    exp = expected_probs * total
    keep = exp >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(exp[keep], exp[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    stat = float(((obs - exp) ** 2 / exp).sum())
    dof = len(obs) - 1
    return float(gammainc(dof / 2, stat / 2, regularized=True))


def test_config_validation():
    with pytest.raises(DomainError):
        TrialConfig(trials=0)
    with pytest.raises(DomainError):
        TrialConfig(batch_size=0)
    with pytest.raises(DomainError):
        TrialConfig(n_start=-1)
    assert TrialConfig(trials=25, batch_size=10).batches() == [10, 10, 5]


def test_single_round():
    rng = batch_rng(1, 0)
    assert simulate_roulette_round(2, rng) == 0
    for _ in range(50):
        assert 0 <= simulate_roulette_round(7, rng) <= 5
    with pytest.raises(DomainError):
        simulate_roulette_round(1, rng)


def test_nobody_shoots_themselves():
    rng = batch_rng(3, 0)
    out = roulette_rounds(np.full(20_000, 3), rng)
    # with three players exactly 0 or 1 survive
    assert set(np.unique(out).tolist()) <= {0, 1}


def test_n2_always_empty():
    res = run_trials(TrialConfig("roulette", 2, 1000, seed=5))
    assert res.p_hat == 1.0 and res.stderr == 0.0


def test_n3_quarter():
    p, se = estimate_p(TrialConfig("roulette", 3, 200_000, seed=11, batch_size=50_000))
    assert abs(p - 0.25) < 4 * se


def test_boundary_starts():
    assert run_trials(TrialConfig("roulette", 1, 100)).p_hat == 0.0
    assert run_trials(TrialConfig("roulette", 0, 100)).p_hat == 1.0


def test_deterministic_and_thread_invariant():
    cfg = TrialConfig("roulette", 25, 40_000, seed=99, batch_size=5_000)
    a = run_trials(cfg)
    b = run_trials(cfg, threads=4)
    assert a.to_json() == b.to_json()
    assert a.histogram_csv() == b.histogram_csv()
    c = run_trials(TrialConfig("roulette", 25, 40_000, seed=100, batch_size=5_000))
    assert c.to_json() != a.to_json()


def test_json_fields():
    doc = json.loads(run_trials(TrialConfig("coinflip", 6, 1000, seed=1)).to_json())
    assert set(doc) == {"n", "trials", "seed", "p_hat", "stderr", "kernel"}


@pytest.mark.parametrize("n", [5, 12, 40])
def test_mechanistic_matches_pmf_law(n):
    y = sample_one_round(get_kernel("roulette"), n, 200_000, seed=n)
    observed = np.bincount(y, minlength=n + 1).astype(float)
    expected = get_kernel("roulette").pmf_float(n)
    assert chi_square_p_value(observed, expected) > 1e-4


def test_pmf_sampler_matches_law():
    k = get_kernel("roulette")
    y = sample_one_round(k, 30, 200_000, seed=8, mechanistic=False)
    observed = np.bincount(y, minlength=31).astype(float)
    assert chi_square_p_value(observed, k.pmf_float(30)) > 1e-4


@pytest.mark.parametrize("name,rounds", [("coinflip", coinflip_rounds), ("parity", parity_rounds)])
def test_other_mechanisms_match_law(name, rounds):
    n = 11
    y = rounds(np.full(200_000, n), batch_rng(4, 0))
    observed = np.bincount(y, minlength=n + 1).astype(float)
    assert chi_square_p_value(observed, get_kernel(name).pmf_float(n)) > 1e-4


def test_moments():
    est = estimate_moments(get_kernel("roulette"), 50, 200_000, seed=2)
    assert abs(est.mean - float(roulette_mu(50))) < 4 * est.mean_se
    assert abs(est.variance - float(roulette_sigma2(50))) < 4 * est.variance_se
    with pytest.raises(DomainError):
        estimate_moments(get_kernel("roulette"), 1, 10, seed=0)


def test_round_counts_near_log():
    res = run_trials(TrialConfig("roulette", 1000, 2000, seed=3, batch_size=500))
    mode = max(res.rounds, key=res.rounds.get)
    assert abs(mode - math.log(1000)) <= 1.5
    lines = res.histogram_csv().splitlines()
    assert lines[0] == "kind,value,count"
    assert sum(int(x.split(",")[2]) for x in lines[1:] if x.startswith("absorbed")) == 2000


def test_trace():
    tr = simulate_process(TrialConfig("roulette", 60, 1, seed=4))
    assert tr.states[0] == 60 and tr.absorbed_at in (0, 1)
    assert all(b <= a - 2 for a, b in zip(tr.states, tr.states[1:]))
    assert tr.rounds == len(tr.states) - 1


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 200), seed=st.integers(0, 2**63 - 1))
def test_round_support(n, seed):
    out = roulette_rounds(np.full(64, n), batch_rng(seed, 0))
    assert np.all(out >= 0) and np.all(out <= n - 2)


@settings(max_examples=10, deadline=None)
@given(trials=st.integers(1, 3000), batch=st.integers(1, 700))
def test_batch_sizes_cover_trials(trials, batch):
    res = run_trials(TrialConfig("parity", 9, trials, seed=0, batch_size=batch))
    # odd populations stay odd and stop at 1, where p = 1
    assert sum(res.absorbed.values()) == trials
    assert res.absorbed[1] == trials and res.p_hat == 1.0

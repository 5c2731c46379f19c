import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from spectproj.rng import INVERSION_LIMIT, philox4x32, poisson, uniform_pair

# Random123 known-answer vectors for Philox4x32-10
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr,key,expect", KAT)
def test_philox_known_answers(ctr, key, expect):
    assert tuple(int(w) for w in philox4x32(ctr, key)) == expect


def test_philox_first_counter_increment_is_frozen():
    # cross-checked once against an independent implementation
    assert tuple(int(w) for w in philox4x32((1, 0, 0, 0), (0, 0))) == (0xF8E4CCA4, 0x5CB200DB, 0xB1A574EB, 0x097EFF67)


def test_philox_broadcasts_over_counters():
    ctrs = np.array([k[0] for k in KAT[:2]])
    keys = np.array([k[1] for k in KAT[:2]])
    out = philox4x32(ctrs, keys)
    assert [tuple(int(w) for w in row) for row in out] == [k[2] for k in KAT[:2]]


def test_uniforms_are_open_interval_and_keyed_by_bin():
    bins = np.arange(50_000)
    u, v = uniform_pair(7, bins, 0)
    assert np.all((u > 0) & (u < 1) & (v > 0) & (v < 1))
    u2, _ = uniform_pair(7, bins[::-1], 0)
    assert np.array_equal(u2, u[::-1])
    assert stats.kstest(u, "uniform").pvalue > 1e-3
    assert abs(np.corrcoef(u, v)[0, 1]) < 0.02


def test_poisson_is_deterministic_and_seed_dependent():
    lam = np.linspace(0.1, 80, 300).reshape(10, 30)
    a, b = poisson(lam, 3), poisson(lam, 3)
    assert np.array_equal(a, b) and a.shape == lam.shape
    assert not np.array_equal(a, poisson(lam, 4))


@given(st.integers(0, 2**32), st.integers(1, 40))
def test_draw_depends_only_on_seed_and_position(seed, n):
    r = np.random.default_rng(seed % 1000)
    lam = r.uniform(0, 30, n)
    full = poisson(lam, seed)
    # zeroing other bins must not disturb this one
    for i in range(0, n, max(1, n // 4)):
        masked = np.zeros_like(lam)
        masked[i] = lam[i]
        assert poisson(masked, seed)[i] == full[i]


def test_zero_mean_gives_zero():
    assert np.array_equal(poisson(np.zeros(10), 1), np.zeros(10))


@pytest.mark.parametrize("lam", [0.3, 2.0, 9.5, 10.0, 37.0, 1000.0])
def test_sample_moments(lam):
    n = 40_000
    k = poisson(np.full(n, lam), 11)
    se = np.sqrt(lam / n)
    assert abs(k.mean() - lam) < 5 * se
    # variance of the sample variance for Poisson is about (lam + 2 lam^2) / n
    assert abs(k.var() - lam) < 5 * np.sqrt((lam + 2 * lam**2) / n)


@pytest.mark.parametrize("lam", [3.0, 25.0])
def test_chi_square_goodness_of_fit(lam):
    n = 40_000
    k = poisson(np.full(n, lam), 5)
    lo, hi = int(stats.poisson.ppf(0.001, lam)), int(stats.poisson.ppf(0.999, lam))
    edges = np.arange(lo, hi + 2)
    observed = np.array([(k < lo).sum()] + [np.sum(k == e) for e in edges[:-1]] + [(k > hi).sum()])
    probs = np.concatenate([[stats.poisson.cdf(lo - 1, lam)], stats.poisson.pmf(edges[:-1], lam),
                            [stats.poisson.sf(hi, lam)]])
    keep = probs > 0
    expected = probs[keep] * n / probs[keep].sum()
    assert stats.chisquare(observed[keep], expected).pvalue > 1e-3


def test_both_samplers_are_exercised_at_the_limit():
    assert INVERSION_LIMIT == 10.0
    k = poisson(np.array([9.999, 10.0]), 0)
    assert k.dtype == np.int64 and np.all(k >= 0)


def test_invalid_means_and_seeds():
    with pytest.raises(ValueError):
        poisson(np.array([-1.0]), 0)
    with pytest.raises(ValueError):
        poisson(np.array([np.nan]), 0)
    with pytest.raises(ValueError):
        poisson(np.array([1.0]), -1)

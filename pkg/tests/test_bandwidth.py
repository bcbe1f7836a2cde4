import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from genckpt.bandwidth import BandwidthModel, ConstantCongestion, LogNormalCongestion, TraceCongestion
from genckpt.errors import ModelError

from oracles import empirical_quantile, lognormal_clipped_mc


@pytest.mark.parametrize("mu,sigma", [(-0.4, 0.5), (0.0, 1.0), (-1.5, 0.3), (0.3, 0.8)])
def test_lognormal_mean_matches_monte_carlo(mu, sigma):
    mc_mean, samples = lognormal_clipped_mc(mu, sigma)
    cong = LogNormalCongestion(mu, sigma)
    assert cong.mean() == pytest.approx(mc_mean, abs=2e-3)
    for p in (0.05, 0.25, 0.5):
        assert cong.quantile(p) == pytest.approx(empirical_quantile(samples, p), rel=1e-2)


def test_lognormal_is_seeded_and_piecewise_constant():
    a, b = LogNormalCongestion(seed=3), LogNormalCongestion(seed=3)
    assert [a.factor(t) for t in range(0, 600, 30)] == [b.factor(t) for t in range(0, 600, 30)]
    assert a.factor(0) == a.factor(59.9)
    assert all(0 < a.factor(60 * k) <= 1 for k in range(200))


def test_trace_lookup():
    tr = TraceCongestion((1.0, 0.5, 0.25), interval=10)
    assert [tr.factor(t) for t in (0, 9.9, 10, 25, 1000)] == [1.0, 1.0, 0.5, 0.25, 0.25]
    assert tr.mean() == pytest.approx(1.75 / 3)


def test_transfer_time_across_intervals():
    model = BandwidthModel(100.0, TraceCongestion((1.0, 0.5), interval=10))
    # 10 s at 100 B/s, then 500 B left at 50 B/s
    assert model.transfer_time(0.0, 1500) == pytest.approx(20.0)
    assert model.transfer_time(5.0, 100) == pytest.approx(1.0)


@given(st.floats(1.0, 1e10), st.floats(0.01, 1.0), st.integers(0, 10**12))
def test_constant_transfer_time(rate, factor, nbytes):
    model = BandwidthModel(rate, ConstantCongestion(factor))
    assert model.transfer_time(0.0, nbytes) == pytest.approx(nbytes / (rate * factor), rel=1e-9)


@pytest.mark.parametrize("bad", [0.0, -1.0, 1.5, math.nan])
def test_invalid_factor(bad):
    with pytest.raises(ModelError):
        ConstantCongestion(bad)


def test_zero_rate():
    with pytest.raises(ModelError):
        BandwidthModel(0.0)

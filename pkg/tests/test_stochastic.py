"""Channel quantizer and the seeded random streams."""
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from ehrelay.stochastic import (ARRIVAL, CHANNEL, HARVEST, ChannelModel, PoissonSampler, RngStream,
                                quantize_gain, sample_arrivals, sample_channel_bins, sample_channels,
                                sample_harvest)

SIX_BINS = ChannelModel()


class TestQuantizer:
    def test_bottom(self):
        assert quantize_gain(SIX_BINS, -10.0) == 0

    def test_boundary_goes_up(self):
        assert quantize_gain(SIX_BINS, -5.41) == 1

    def test_top(self):
        assert quantize_gain(SIX_BINS, 10.0) == 5

    @given(st.floats(-200, 200))
    def test_partition(self, x):
        i = quantize_gain(SIX_BINS, x)
        edges = (-math.inf,) + SIX_BINS.boundaries_db + (math.inf,)
        assert edges[i] <= x < edges[i + 1]

    def test_bin_masses(self):
        p = SIX_BINS.bin_probabilities
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert p[0] == pytest.approx(1 - math.exp(-10 ** (-0.541)), abs=1e-12)
        assert SIX_BINS.num_bins == 6

    def test_representatives(self):
        g = SIX_BINS.representative_gains
        assert np.all(np.diff(g) > 0)
        # conditional means average back to the mean gain
        assert SIX_BINS.bin_probabilities @ g == pytest.approx(1.0, abs=1e-12)
        x = 10 ** (SIX_BINS.boundaries_db[0] / 10)
        assert g[0] == pytest.approx((1 - (x + 1) * math.exp(-x)) / (1 - math.exp(-x)), rel=1e-12)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            ChannelModel((1.0, 0.0))


@pytest.fixture(scope="module")
def draws():
    return np.array(sample_channel_bins(SIX_BINS, RngStream(7, CHANNEL, 0), 1_000_000))


class TestChannelSampling:
    def test_bin0_frequency(self, draws):
        assert abs(np.mean(draws == 0) - 0.2498) < 0.005

    def test_chi_square(self, draws):
        counts = np.bincount(draws, minlength=6)
        _, p = stats.chisquare(counts, SIX_BINS.bin_probabilities * draws.size)
        assert p > 0.01

    def test_relays_uncorrelated(self):
        a = np.array(sample_channel_bins(SIX_BINS, RngStream(3, CHANNEL, 0), 1_000_000))
        b = np.array(sample_channel_bins(SIX_BINS, RngStream(3, CHANNEL, 1), 1_000_000))
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.01

    def test_pairs_use_representatives(self):
        pairs = sample_channels(SIX_BINS, [RngStream(1, CHANNEL, k) for k in range(3)])
        g = SIX_BINS.representative_gains
        assert len(pairs) == 3
        for c in pairs:
            assert c.gain_sr == g[c.bin_sr] and c.gain_rd == g[c.bin_rd]

    def test_deterministic(self):
        a = sample_channel_bins(SIX_BINS, RngStream(5, CHANNEL, 2), 1000)
        b = sample_channel_bins(SIX_BINS, RngStream(5, CHANNEL, 2), 1000)
        assert a == b


class TestPoisson:
    def test_arrival_mean(self):
        s = PoissonSampler(2.0)
        rng = RngStream(11, ARRIVAL)
        x = np.array([sample_arrivals(s, rng) for _ in range(1_000_000)])
        assert abs(x.mean() - 2.0) < 3 * math.sqrt(2.0 / 1e6)
        assert abs(np.mean(x == 0) - math.exp(-2)) < 0.003
        assert x.min() >= 0

    def test_harvest(self):
        s = PoissonSampler(0.5)
        rng = RngStream(11, HARVEST, 4)
        x = np.array([sample_harvest(s, rng) for _ in range(1_000_000)])
        assert abs(np.mean(x == 0) - math.exp(-0.5)) < 0.003
        assert abs(x.mean() - 0.5) < 3 * math.sqrt(0.5 / 1e6)

    def test_inversion_matches_cdf(self):
        s = PoissonSampler(3.0)
        for k in range(10):
            u = stats.poisson.cdf(k, 3.0) - 1e-9
            assert s(u) == k

    def test_zero_mean(self):
        s = PoissonSampler(0.0)
        assert s(0.999) == 0
        assert s.pmf(0) == 1.0 and s.pmf(1) == 0.0

    def test_pmf(self):
        s = PoissonSampler(2.0)
        assert s.pmf(0) == pytest.approx(0.1353352832366127, rel=1e-12)
        assert s.pmf(3) == pytest.approx(stats.poisson.pmf(3, 2.0), rel=1e-12)


class TestStreams:
    def test_same_key_same_sequence(self):
        assert RngStream(9, ARRIVAL).uniforms(5000) == RngStream(9, ARRIVAL).uniforms(5000)

    def test_keys_differ(self):
        a = RngStream(9, CHANNEL, 0).uniforms(10)
        assert a != RngStream(9, CHANNEL, 1).uniforms(10)
        assert a != RngStream(9, HARVEST, 0).uniforms(10)
        assert a != RngStream(10, CHANNEL, 0).uniforms(10)

    def test_interleaving_does_not_matter(self):
        x, y = RngStream(4, CHANNEL, 0), RngStream(4, ARRIVAL, 0)
        mixed_x, mixed_y = [], []
        for i in range(3000):
            mixed_x.append(x.uniform())
            if i % 3 == 0:
                mixed_y.append(y.uniform())
        assert mixed_x == RngStream(4, CHANNEL, 0).uniforms(3000)
        assert mixed_y == RngStream(4, ARRIVAL, 0).uniforms(len(mixed_y))

    def test_resume_mid_block(self):
        r = RngStream(2, HARVEST, 1)
        r.uniforms(RngStream.BLOCK + 17)
        st_ = r.state()
        ahead = r.uniforms(RngStream.BLOCK * 2)
        assert RngStream.from_state(st_).uniforms(RngStream.BLOCK * 2) == ahead

import math
from fractions import Fraction

import numpy as np
import pytest

from crelay import amps
from crelay.amps import PriorModel


def corrupt_rows(rng, clean, count):
    """Distinct positions, replacement value never equal to the original."""
    out = clean.copy()
    for t in range(clean.shape[0]):
        pos = rng.choice(clean.shape[1], size=count, replace=False)
        out[t, pos] ^= rng.integers(1, 256, count, dtype=np.uint8).astype(np.uint8)
    return out


class TestSampling:
    def test_all_zero_payload_gives_zero_bits(self):
        assert not amps.compute_samples(np.zeros(1500, np.uint8), 3).any()

    def test_empty_payload_gives_zero_bits(self):
        assert not amps.compute_samples(np.zeros(0, np.uint8), 3).any()

    def test_deterministic_per_frame_seq(self):
        rng = np.random.default_rng(0)
        pay = rng.integers(0, 256, 1500, dtype=np.uint8)
        a = amps.compute_samples(pay, 9)
        b = amps.compute_samples(pay, 9)
        c = amps.compute_samples(pay, 10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_pack_unpack_round_trip(self):
        rng = np.random.default_rng(1)
        bits = rng.integers(0, 2, 64).astype(np.uint8)
        packed = amps.pack_samples(bits)
        assert len(packed) == 8
        assert np.array_equal(amps.unpack_samples(packed), bits)

    def test_amplified_flip_rate_at_one_percent(self):
        # K=32 samples at byte error ratio 0.01 flip at roughly
        # (1 - 0.99^32)/2; repeated hits on the same bad byte cancel,
        # which keeps the with-replacement rate a shade below it
        rng = np.random.default_rng(2)
        trials = 2000
        clean = rng.integers(0, 256, (trials, 1500), dtype=np.uint8)
        bad = corrupt_rows(rng, clean, 15)
        m = amps.batch_mismatch_counts(clean, bad, np.arange(trials))
        rate = m[:, 1].sum() / (trials * 16)
        assert abs(rate - 0.137) < 0.012

    def test_batch_equals_scalar(self):
        rng = np.random.default_rng(3)
        clean = rng.integers(0, 256, (25, 750), dtype=np.uint8)
        bad = corrupt_rows(rng, clean, 9)
        seqs = rng.integers(0, 60000, 25)
        batch = amps.batch_mismatch_counts(clean, bad, seqs)
        for t in range(25):
            want = amps.mismatch_counts(
                amps.compute_samples(clean[t], int(seqs[t])),
                amps.compute_samples(bad[t], int(seqs[t])),
            )
            assert tuple(batch[t]) == want
        nb = amps.batch_naive_mismatches(clean, bad, seqs)
        for t in range(25):
            pos = amps.naive_positions(int(seqs[t]), 750)
            assert nb[t] == (clean[t][pos] != bad[t][pos]).sum()


class TestPSampleError:
    def p_exact(self, B, c, K):
        if c > B - K:
            return Fraction(1, 2)
        return Fraction(1, 2) * (1 - Fraction(math.comb(B - c, K), math.comb(B, K)))

    def test_boundaries(self):
        assert amps.p_sample_error(1500, 0, 32) == 0.0
        assert amps.p_sample_error(1500, 1500, 32) == 0.5

    def test_against_exact_rational(self):
        for B, c, K in [(1500, 15, 32), (375, 3, 128), (2200, 50, 10), (1500, 1372, 128)]:
            got = amps.p_sample_error(B, c, K)
            assert abs(got - float(self.p_exact(B, c, K))) < 1e-12

    def test_paper_anchor_value(self):
        # hypergeometric evaluation sits right next to (1-0.99^32)/2 = 0.1375
        assert abs(amps.p_sample_error(1500, 15, 32) - 0.137) < 2e-3

    def test_vectorized_matches_scalar(self):
        cs = np.array([0, 1, 15, 200, 1500])
        vec = amps.p_sample_error(1500, cs, 32)
        for i, c in enumerate(cs):
            assert vec[i] == amps.p_sample_error(1500, int(c), 32)


class TestLikelihood:
    def test_degenerate_c_zero(self):
        assert amps.likelihood_m_given_c(0, 0, 16, 1500, 32) == 1.0
        assert amps.likelihood_m_given_c(3, 0, 16, 1500, 32) == 0.0

    def test_normalizes(self):
        for c in (0, 7, 200):
            s = sum(amps.likelihood_m_given_c(m, c, 16, 1500, 32) for m in range(17))
            assert abs(s - 1) < 1e-9

    def test_against_exact_rational(self):
        p = Fraction(1, 2) * (1 - Fraction(math.comb(1485, 32), math.comb(1500, 32)))
        want = float(math.comb(16, 2) * p**2 * (1 - p) ** 14)
        got = amps.likelihood_m_given_c(2, 15, 16, 1500, 32)
        assert abs(got - want) / want < 1e-9


class TestPrior:
    def test_sums_to_one(self):
        for B in amps.REP_FRAME_SIZES:
            for a in (0.02, 1.0, 2.0):
                pr = amps.prior_pmf(PriorModel(a), B)
                assert pr.shape == (B + 1,)
                assert abs(pr.sum() - 1) < 1e-9
                assert (pr >= -1e-15).all()

    def test_ratio_bridging_at_small_counts(self):
        # the 0-error bin only has mass when 1/B reaches past gamma
        assert amps.prior_pmf(PriorModel(2.0), 375)[0] > 0
        assert amps.prior_pmf(PriorModel(2.0), 1500)[0] == 0


class TestMapEstimate:
    def test_no_mismatch_estimates_zero(self):
        assert amps.map_estimate_c(0, PriorModel(2.0), 375, 128, 8) == 0

    def test_monotone_in_m(self):
        for B, K, S in [(375, 128, 8), (1500, 32, 16), (1500, 10, 40), (2200, 10, 40)]:
            for a in (0.02, 1.0, 2.0):
                t = amps.map_table(PriorModel(a), B, K, S)
                assert (np.diff(t.astype(int)) >= 0).all(), (B, K, S, a)

    def test_matches_extended_precision_argmax(self):
        # independent exhaustive posterior evaluation in long double,
        # with the binomial pmf built from exact log-gamma sums
        B, K, S, a = 1500, 10, 40, 0.02
        cs = np.arange(B + 1, dtype=np.longdouble)
        ratio = np.zeros(B + 1, dtype=np.longdouble)
        lg = np.cumsum(np.concatenate(([0.0], np.log(np.arange(1, B + 1, dtype=np.longdouble)))))
        ok = cs <= B - K
        lr = lg[(B - cs[ok]).astype(int)] - lg[(B - cs[ok] - K).astype(int)] - lg[B] + lg[B - K]
        ratio[ok] = np.exp(lr)
        p = 0.5 * (1 - ratio)
        pr = np.asarray(amps.prior_pmf(PriorModel(a), B), dtype=np.longdouble)
        for m in (0, 1, 5, 20, 40):
            with np.errstate(divide="ignore", invalid="ignore"):
                logpost = (
                    m * np.log(p) + (S - m) * np.log1p(-p) + np.log(pr)
                )
            logpost[np.isnan(logpost)] = -np.inf
            want = int(B - np.argmax(logpost[::-1]))
            assert amps.map_estimate_c(m, PriorModel(a), B, K, S) == want, m

    def test_saturated_mismatch_lands_at_discrimination_knee(self):
        # every sample mismatching pushes the likelihood toward the region
        # where p_sample saturates at 1/2; past that point the decreasing
        # prior decides, so the argmax sits at the knee rather than near B
        c_hat = amps.map_estimate_c(40, PriorModel(0.02), 1500, 10, 40)
        assert 400 < c_hat < 900


class TestMaxPerSegment:
    def test_single_segment_point_mass(self):
        assert np.allclose(amps.max_per_segment_dist(7, 1), [0] * 7 + [1])

    def test_zero_errors(self):
        assert np.allclose(amps.max_per_segment_dist(0, 5), [1.0])

    def test_two_balls_two_bins_enumeration(self):
        # placements: AA, AB, BA, BB -> max 2,1,1,2
        assert np.allclose(amps.max_per_segment_dist(2, 2), [0, 0.5, 0.5])

    def test_matches_monte_carlo_grid(self):
        # frozen-seed ball-in-bins oracle across the documented grid
        rng = np.random.default_rng(7)
        for numB in (2, 3, 5, 7, 10):
            for c in (1, 4, 11, 23, 40):
                pmf = amps.max_per_segment_dist(c, numB)
                assert abs(pmf.sum() - 1) < 1e-9
                mx = rng.multinomial(c, [1 / numB] * numB, size=8000).max(axis=1)
                for e in range(c + 1):
                    emp = (mx == e).mean()
                    se = math.sqrt(max(pmf[e] * (1 - pmf[e]), 1e-12) / 8000)
                    assert abs(emp - pmf[e]) <= max(3.5 * se, 2e-3), (numB, c, e)


class TestBoundE:
    def test_floor_applies(self):
        assert amps.bound_e(0, 5) == 3
        assert amps.bound_e(2, 2) == 3

    def test_single_segment_is_identity(self):
        assert amps.bound_e(10, 1) == 10
        assert amps.bound_e(200, 1) == 200

    def test_crossing_against_distribution(self):
        for c, numB in [(10, 10), (30, 5), (100, 15)]:
            e = amps.bound_e(c, numB)
            cdf = np.cumsum(amps.max_per_segment_dist(c, numB))
            assert cdf[e] > 0.95
            if e > 3:
                assert cdf[e - 1] <= 0.95

    def test_quantile_against_monte_carlo(self):
        rng = np.random.default_rng(8)
        mx = rng.multinomial(10, [0.1] * 10, size=100_000).max(axis=1)
        cdf = np.cumsum(amps.max_per_segment_dist(10, 10))
        e = amps.bound_e(10, 10)
        emp_at = (mx <= e).mean()
        emp_below = (mx <= e - 1).mean()
        assert abs(emp_at - cdf[e]) < 0.005
        assert abs(emp_below - cdf[e - 1]) < 0.005
        assert emp_at > 0.95


class TestCombineAndApportion:
    def test_combine_takes_largest(self):
        assert amps.combine_multi_resolution((0, 0, 0)) == 0
        assert amps.combine_multi_resolution((5, 12, 9)) == 12
        assert amps.combine_multi_resolution((7, 7, 7)) == 7

    def test_apportion_examples(self):
        assert amps.apportion(7, [1500]) == [7]
        assert amps.apportion(10, [750, 750]) == [5, 5]
        assert amps.apportion(9, [1000, 500]) == [6, 3]

    def test_apportion_rounds_up(self):
        shares = amps.apportion(10, [700, 800])
        assert sum(shares) >= 10
        assert shares == [math.ceil(10 * 700 / 1500), math.ceil(10 * 800 / 1500)]


class TestFitAlpha:
    def test_all_gamma_snaps_to_grid_maximum(self):
        assert amps.fit_alpha([amps.GAMMA] * 50) == 2.0

    def test_empty_defaults_to_midpoint(self):
        assert amps.fit_alpha([]) == 1.0

    def test_single_ratio_returns_grid_value(self):
        a = amps.fit_alpha([0.05])
        assert a in amps.ALPHA_GRID

    def test_recovers_synthetic_tail(self):
        rng = np.random.default_rng(9)
        g, v, a0 = amps.GAMMA, amps.NU, 0.5
        u = rng.uniform(0, 1, 10_000)
        x = g * (1 - u * (1 - (g / v) ** a0)) ** (-1 / a0)
        assert 0.4 <= amps.fit_alpha(x) <= 0.6


class TestNaive:
    def test_boundaries(self):
        assert amps.naive_estimate(1500, 0) == 0
        assert amps.naive_estimate(1500, 8) == 1500

    def test_misses_small_corruption_most_of_the_time(self):
        # at ratio 0.01 the 8-byte sampler sees nothing with prob ~0.99^8
        rng = np.random.default_rng(10)
        trials = 5000
        clean = rng.integers(0, 256, (trials, 1500), dtype=np.uint8)
        bad = corrupt_rows(rng, clean, 15)
        mis = amps.batch_naive_mismatches(clean, bad, np.arange(trials))
        zero_rate = (mis == 0).mean()
        assert abs(zero_rate - 0.99**8) < 0.015


class TestAmpsBeatsNaive:
    def test_mean_absolute_error_lower(self, amps_tables):
        rng = np.random.default_rng(11)
        B, trials = 1500, 1500
        for ratio in (0.01, 0.08, 0.2):
            c_true = math.ceil(ratio * B)
            clean = rng.integers(0, 256, (trials, B), dtype=np.uint8)
            bad = corrupt_rows(rng, clean, c_true)
            seqs = np.arange(trials) + int(ratio * 1e6)
            m3 = amps.batch_mismatch_counts(clean, bad, seqs)
            alpha = amps.fit_alpha([ratio] * 100)
            ai = amps_tables._alpha_index(alpha)
            per_type = [
                amps_tables.map_c[(ai, B, s.k)][np.minimum(m3[:, i], s.count)]
                for i, s in enumerate(amps.SAMPLE_SPECS)
            ]
            est = np.stack(per_type, axis=1).max(axis=1).astype(float)
            naive = B * amps.batch_naive_mismatches(clean, bad, seqs) / 8
            assert np.abs(est - c_true).mean() < np.abs(naive - c_true).mean(), ratio

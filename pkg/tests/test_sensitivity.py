import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuse_ate import (COWS, SOWS, DgpConfig, InputError, LinkDegeneracyError, SeverityThresholds,
                      cross_fit, estimate_theta_fused_known_alpha, fused_limit, generate_dataset,
                      misspecification_bias, scale_link_from_thresholds, sensitivity_sweep)
from fuse_ate.experiments import true_link
from fuse_ate.sensitivity import parse_grid

CFG = DgpConfig()


def const(c):
    return lambda x: np.full(np.atleast_2d(x).shape[0], float(c))


class TestMisspecificationBias:
    def test_zero_when_correct(self):
        cfg = DgpConfig.varying_link(a2=0.0, rho1=0.1)
        b = misspecification_bias(cfg, cfg.alpha, cfg.alpha, cfg.theta, 10**4)
        assert b.conditional == 0.0 and b.weighted == 0.0

    def test_constants(self):
        b = misspecification_bias(CFG, const(1.5), const(1.0), const(2.0), 10**4)
        assert b.conditional == pytest.approx(1.0, abs=1e-12)
        assert b.weighted == pytest.approx(b.p_s1, abs=1e-12)

    @given(st.floats(-0.9, 2.0), st.floats(0.1, 3.0))
    @settings(max_examples=20, deadline=None)
    def test_linear_in_relative_error(self, eps, c):
        one = misspecification_bias(CFG, const(1.0 + eps), const(1.0), const(0.7), 10**4)
        many = misspecification_bias(CFG, const(1.0 + c * eps), const(1.0), const(0.7), 10**4)
        assert abs(many.conditional - c * one.conditional) <= 1e-12

    def test_sample_source(self):
        s = generate_dataset(CFG.replace(n=500), 1)
        b = misspecification_bias(s, const(2.0), const(1.0), const(1.0))
        assert b.conditional == pytest.approx(1.0)
        assert b.p_s1 == pytest.approx(s.n1 / s.n)

    def test_degenerate_alpha_star(self):
        with pytest.raises(LinkDegeneracyError):
            misspecification_bias(CFG, const(1.0), const(0.0), const(1.0), 10**4)

    def test_fused_limit_at_truth(self):
        assert abs(fused_limit(CFG, CFG.alpha, 10**6) - 0.8) <= 1e-3

    def test_fused_limit_closed_form(self):
        # constant effect and slope: exact weighted-average formula
        cfg = CFG.replace(gamma2=0.0, zeta1=0.0)
        c = 1.5
        p1 = 0.5
        d0 = d1 = 0.25
        alpha, theta = cfg.rho0, cfg.rho0 * cfg.gamma0
        # auxiliary weight in units of the primary one after rescaling by alpha^2
        w1 = p1 * d1 / (c * alpha) ** 2
        w0 = (1 - p1) * d0
        expected = (w0 * theta + w1 * c * alpha * theta / alpha) / (w0 + w1)
        got = fused_limit(cfg.replace(a1=0.0), lambda x: c * cfg.alpha(x), 10**4)
        assert got == pytest.approx(expected, rel=1e-12)


@pytest.fixture(scope="module")
def data():
    s = generate_dataset(CFG, 2)
    return s, cross_fit(s, 5, seed=2)


class TestSweep:
    def test_unit_grid_matches_base(self, data):
        s, fit = data
        ((k, r),) = sensitivity_sweep(s, fit, true_link(CFG), [1.0])
        base = estimate_theta_fused_known_alpha(s, fit, true_link(CFG))
        assert k == 1.0 and r == base

    def test_finite_positive_widths(self, data):
        s, fit = data
        for _, r in sensitivity_sweep(s, fit, true_link(CFG), parse_grid("0.5:1.5:11")):
            width = r.ci_high - r.ci_low
            assert np.isfinite(width) and width > 0

    def test_rejects_nonpositive(self, data):
        s, fit = data
        with pytest.raises(InputError):
            sensitivity_sweep(s, fit, true_link(CFG), [0.0, 1.0])

    def test_truth_closest_at_unit_scale(self):
        grid = parse_grid("0.5:1.5:11")
        hits = 0
        reps = 200
        for r in range(reps):
            s = generate_dataset(CFG, 100, stream=(7, r))
            fit = cross_fit(s, 5, known_primary_propensity=0.5, seed=r)
            curve = sensitivity_sweep(s, fit, true_link(CFG), grid)
            best = min(curve, key=lambda kr: abs(kr[1].estimate - 0.8))[0]
            hits += best == 1.0
        assert hits >= 0.8 * reps


class TestParseGrid:
    def test_inclusive(self):
        assert parse_grid("0.5:1.5:3") == [0.5, 1.0, 1.5]

    @pytest.mark.parametrize("bad", ["1:2", "a:b:c", "0:1:0"])
    def test_invalid(self, bad):
        with pytest.raises(InputError):
            parse_grid(bad)


class TestScaleLink:
    def test_published_thresholds(self):
        alpha, beta = scale_link_from_thresholds(SOWS, COWS, through_origin=True)
        assert alpha == pytest.approx(836.25 / 1344.75, rel=1e-14)
        assert beta == 0.0

    def test_identity(self):
        alpha, beta = scale_link_from_thresholds(SOWS, SOWS)
        assert abs(alpha - 1) <= 1e-12 and beta == 0.0

    def test_pure_rescaling(self):
        a = SeverityThresholds(((1, 3), (4, 8), (9, 20)))
        b = SeverityThresholds(((2, 6), (8, 16), (18, 40)))
        alpha, beta = scale_link_from_thresholds(a, b)
        assert abs(alpha - 0.5) <= 1e-12 and beta == 0.0

    @given(st.floats(0.1, 10.0))
    def test_inverse_consistent(self, k):
        a = SeverityThresholds(((1, 3), (4, 8), (9, 20)))
        b = SeverityThresholds(tuple((k * lo, k * hi) for lo, hi in a.category_ranges))
        ab = scale_link_from_thresholds(a, b)[0]
        ba = scale_link_from_thresholds(b, a)[0]
        assert abs(ab * ba - 1) <= 1e-10

    def test_impute_top(self):
        alpha, _ = scale_link_from_thresholds(SOWS, COWS, top_policy="impute",
                                              close_top=(30.0, 48.0))
        assert 0.59 <= alpha <= 0.63

    def test_intercept_fit(self):
        a = SeverityThresholds(((1, 3), (4, 8), (9, 20)), anchored_at_zero=False)
        b = SeverityThresholds(tuple((2 * lo + 1, 2 * hi + 1) for lo, hi in a.category_ranges),
                               anchored_at_zero=False)
        alpha, beta = scale_link_from_thresholds(b, a, through_origin=True)
        assert alpha == pytest.approx(2.0) and beta == pytest.approx(1.0)

    def test_mismatched_counts(self):
        with pytest.raises(InputError):
            scale_link_from_thresholds(SOWS, SeverityThresholds(((0, 1),)))

    @pytest.mark.parametrize("ranges", [((5, 3),), ((1, 5), (4, 8)), ((1, None), (5, 6))])
    def test_invalid_thresholds(self, ranges):
        with pytest.raises(InputError):
            SeverityThresholds(ranges)

    def test_dict_round_trip(self):
        assert SeverityThresholds.from_dict(COWS.to_dict()) == COWS

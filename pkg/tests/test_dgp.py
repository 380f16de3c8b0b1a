import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuse_ate import (ConfigurationError, DgpConfig, InputError, Observation, PrecisionError,
                      Sample, generate_by_study, generate_dataset, intercept_for_log_ratio,
                      substream, true_ate)
from fuse_ate.dgp import expit

# Independent 10^7-draw brute force over (X1, X2) with P(S=0 | X) weights,
# computed once with numpy's default_rng and frozen here.
GOLDEN_DEFAULT_ATE = 0.800100374410364      # analytic value 0.8
GOLDEN_VARYING_ATE = 0.8577587541201132
GOLDEN_VARYING_SE = 0.00024919416472306266


class TestExpit:
    def test_symmetry_point(self):
        assert expit(0.0) == 0.5

    def test_saturation(self):
        assert abs(expit(40.0) - 1.0) <= 1e-15

    def test_no_overflow(self):
        with np.errstate(all="raise"):
            out = expit(np.array([-700.0, 700.0]))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-300)

    @given(st.floats(-50, 50))
    def test_reflection(self, x):
        assert abs(expit(x) + expit(-x) - 1.0) <= 1e-15

    def test_reflection_example(self):
        assert abs(expit(1.37) + expit(-1.37) - 1.0) <= 1e-15


class TestDgpConfig:
    @pytest.mark.parametrize("bad", [dict(p=2), dict(sigma_w=0.0), dict(sigma_y=-1.0),
                                     dict(n=0), dict(a0=math.nan)])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            DgpConfig(**bad)

    def test_json_round_trip(self):
        cfg = DgpConfig.varying_link(n=123)
        doc = json.loads(cfg.to_json())
        assert doc["schema_version"] == 1
        assert DgpConfig.from_json(cfg.to_json()) == cfg

    def test_field_names(self):
        expected = {"schema_version", "p", "n", "a0", "a1", "a2", "zeta1", "gamma0", "gamma1",
                    "gamma2", "b0", "b1", "b2", "b3", "rho0", "rho1", "sigma_w", "sigma_y"}
        assert set(DgpConfig().to_dict()) == expected

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigurationError):
            DgpConfig.from_dict({"p": 5, "bogus": 1})

    def test_bad_schema_version(self):
        with pytest.raises(ConfigurationError):
            DgpConfig.from_dict({"schema_version": 2})

    def test_theta_factorises(self):
        cfg = DgpConfig.varying_link()
        x = np.random.default_rng(0).standard_normal((50, cfg.p))
        np.testing.assert_allclose(cfg.theta(x), cfg.alpha(x) * cfg.effect_w(x))


class TestSubstreams:
    def test_reproducible(self):
        a = substream(7, 1, 2).standard_normal(5)
        b = substream(7, 1, 2).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_keys_differ(self):
        a = substream(7, 1, 2).standard_normal(5)
        b = substream(7, 2, 1).standard_normal(5)
        assert not np.array_equal(a, b)

    def test_frozen_draws(self):
        # portable golden values of the documented PCG64 / SeedSequence scheme
        got = substream(42, 3).integers(0, 2**32, size=3, dtype=np.uint64)
        np.testing.assert_array_equal(got, [3863084840, 3281066682, 3959326385])
        np.testing.assert_array_equal(substream(20240611, 0, 1, 2).standard_normal(2),
                                      [1.7387130050667996, 0.2424506712253995])


class TestGenerateDataset:
    def test_deterministic(self):
        cfg = DgpConfig(n=300)
        assert generate_dataset(cfg, 11) == generate_dataset(cfg, 11)
        assert generate_dataset(cfg, 11) != generate_dataset(cfg, 12)

    def test_tuple_and_int_streams(self):
        cfg = DgpConfig(n=50)
        assert generate_dataset(cfg, 1, 5) == generate_dataset(cfg, 1, (5,))

    def test_saturated_selection(self):
        s = generate_dataset(DgpConfig(n=500, a0=40.0, a1=0.0, a2=0.0), 3)
        assert s.n1 == 500 and s.n0 == 0

    def test_noiseless_constant_effect(self):
        cfg = DgpConfig(n=2000, sigma_w=1e-300, sigma_y=1e-300, rho1=0.0, gamma1=0.0,
                        gamma2=0.0, rho0=1.7, gamma0=0.6)
        s = generate_dataset(cfg, 4)
        m = (s.s == 0) & (s.t == 1)
        control_mean = cfg.alpha(s.x[m]) * cfg.mean_w(s.x[m], 0)
        np.testing.assert_allclose(s.v[m] - control_mean, cfg.rho0 * cfg.gamma0, rtol=0,
                                   atol=1e-12)

    def test_marginals(self):
        cfg = DgpConfig(n=100_000)
        s = generate_dataset(cfg, 5)
        n = s.n
        assert np.all(np.abs(s.x.mean(axis=0)) <= 4 / math.sqrt(n))
        xq = substream(99, 0).standard_normal((10**6, cfg.p))
        q = cfg.selection_prob(xq).mean()
        assert abs(s.n1 / n - q) <= 4 * math.sqrt(q * (1 - q) / n)
        t0 = s.t[s.s == 0].mean()
        assert abs(t0 - 0.5) <= 4 * math.sqrt(0.25 / s.n0)

    def test_w_model_recovered(self):
        cfg = DgpConfig.varying_link(n=220_000)
        s = generate_dataset(cfg, 6)
        m = s.s == 1
        x, t, w = s.x[m], s.t[m].astype(float), s.v[m]
        assert m.sum() >= 10**5
        design = np.column_stack([np.ones(m.sum()), t, t * x[:, 0], t * x[:, 1],
                                  x[:, 0], x[:, 1], x[:, 2]])
        coef, *_ = np.linalg.lstsq(design, w, rcond=None)
        resid = w - design @ coef
        sigma2 = resid @ resid / (len(w) - design.shape[1])
        se = np.sqrt(np.diag(sigma2 * np.linalg.inv(design.T @ design)))
        truth = [cfg.b0, cfg.gamma0, cfg.gamma1, cfg.gamma2, cfg.b1, cfg.b2, cfg.b3]
        assert np.all(np.abs(coef - truth) <= 5 * se)

    def test_sample_is_read_only(self):
        s = generate_dataset(DgpConfig(n=10), 0)
        with pytest.raises(ValueError):
            s.v[0] = 1.0


class TestGenerateByStudy:
    def test_exact_counts(self):
        s = generate_by_study(DgpConfig(), 37, 150, 1)
        assert (s.n0, s.n1) == (37, 150)
        assert np.all(s.s[:37] == 0)

    def test_primary_only(self):
        s = generate_by_study(DgpConfig(), 20, 0, 1)
        assert s.n1 == 0

    def test_rejects_empty(self):
        with pytest.raises(InputError):
            generate_by_study(DgpConfig(), 0, 0, 1)


class TestSample:
    def test_from_observations(self):
        obs = [Observation(np.array([1.0, 2.0, 3.0]), 0, 1, 0.5),
               Observation(np.array([0.0, 0.0, 1.0]), 1, 0, -1.0)]
        s = Sample.from_observations(obs)
        assert (s.n, s.p, s.n0, s.n1) == (2, 3, 1, 1)
        assert s[1].v == -1.0 and s[1].s == 1

    def test_rejects_non_binary(self):
        with pytest.raises(InputError):
            Sample(np.zeros((2, 3)), [0, 2], [0, 1], [0.0, 0.0])

    def test_rejects_non_finite(self):
        with pytest.raises(InputError):
            Sample(np.zeros((1, 3)), [0], [0], [math.inf])

    def test_counts_sum(self):
        s = generate_dataset(DgpConfig(n=400), 2)
        c = s.counts()
        assert c["n0"] + c["n1"] == c["n"] == 400
        assert c["n0_treated"] + c["n0_control"] == c["n0"]


class TestTrueAte:
    def test_constant_effect_exact(self):
        cfg = DgpConfig(rho1=0.0, gamma1=0.0, gamma2=0.0, rho0=1.3, gamma0=0.7, a2=-0.5)
        assert true_ate(cfg, 10**4).value == pytest.approx(0.91, abs=0, rel=1e-15)

    def test_selection_free_mean_zero_covariate(self):
        cfg = DgpConfig(a1=0.0, a2=0.0, rho0=1.0, rho1=0.0, gamma0=0.0, gamma1=1.0, gamma2=0.0)
        res = true_ate(cfg, 10**5, seed=3)
        assert abs(res.value) <= 4 * res.std_error

    def test_default_matches_golden(self):
        res = true_ate(DgpConfig(), 10**6, seed=1)
        assert abs(res.value - GOLDEN_DEFAULT_ATE) <= 4 * math.hypot(res.std_error, 2.1e-4)

    def test_varying_link_matches_golden(self):
        res = true_ate(DgpConfig.varying_link(), 10**6, seed=1)
        assert abs(res.value - GOLDEN_VARYING_ATE) <= 4 * math.hypot(res.std_error,
                                                                     GOLDEN_VARYING_SE)

    def test_too_few_draws(self):
        with pytest.raises(PrecisionError):
            true_ate(DgpConfig(), 9999)


class TestInterceptForLogRatio:
    @pytest.mark.parametrize("target", [-1.0, 0.0, 2.0])
    def test_hits_target(self, target):
        cfg = DgpConfig(a1=0.8, a2=-0.4)
        a0 = intercept_for_log_ratio(cfg, target)
        x = substream(5, 1).standard_normal((400_000, cfg.p))
        q = cfg.replace(a0=a0).selection_prob(x).mean()
        assert abs(math.log(q / (1 - q)) - target) <= 0.02

    def test_unreachable(self):
        with pytest.raises(ConfigurationError):
            intercept_for_log_ratio(DgpConfig(), 30.0)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-3, 3))
    def test_monotone_in_target(self, target):
        cfg = DgpConfig()
        assert intercept_for_log_ratio(cfg, target) <= intercept_for_log_ratio(cfg, target + 0.5)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuse_ate import (DgpConfig, Observation, PrecisionError, generate_dataset, oracle_context,
                      score_fused, score_joint, score_primary, variance_bound)
from fuse_ate.errors import LinkDegeneracyError, NumericalError
from fuse_ate.scores import _inv2, _joint_information, conditional_information

CFG = DgpConfig()
THETA = 0.8


@pytest.fixture(scope="module")
def ctx():
    return oracle_context(CFG, THETA)


def _obs(x, s, t, v):
    return Observation(np.asarray(x, dtype=float), s, t, v)


class TestPointScores:
    def test_auxiliary_unit_scores_zero_primary(self, ctx):
        assert score_primary(_obs(np.ones(CFG.p), 1, 1, 3.0), ctx) == 0.0

    def test_zero_residual_primary(self, ctx):
        x = np.full(CFG.p, 0.3)
        t = 1
        v = float(ctx.mu_y0(x[None])[0] + THETA * (t - ctx.mu_t0(x[None])[0]))
        assert score_primary(_obs(x, 0, t, v), ctx) == pytest.approx(0.0, abs=1e-15)

    def test_fused_equals_primary_on_primary_units(self, ctx):
        s = generate_dataset(CFG.replace(n=500), 1)
        m = s.s == 0
        np.testing.assert_array_equal(score_fused(s, ctx)[m], score_primary(s, ctx)[m])

    def test_zero_residual_auxiliary(self, ctx):
        x = np.full(CFG.p, -0.2)
        t = 0
        a = ctx.alpha_fn(x[None])[0]
        r_t = t - ctx.mu_t1(x[None])[0]
        v = float(ctx.mu_w1(x[None])[0] + THETA * r_t / a)
        assert score_fused(_obs(x, 1, t, v), ctx) == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(score_joint(_obs(x, 1, t, v), ctx), [0.0, 0.0], atol=1e-15)

    def test_joint_second_coordinate_zero_on_primary(self, ctx):
        s = generate_dataset(CFG.replace(n=300), 2)
        assert np.all(score_joint(s, ctx)[s.s == 0, 1] == 0.0)

    def test_joint_second_coordinate_identity(self, ctx):
        s = generate_dataset(CFG.replace(n=300), 3)
        rb = score_joint(s, ctx)
        m = s.s == 1
        a = ctx.alpha_fn(s.x[m])
        np.testing.assert_allclose(rb[m, 1], -(THETA / a) * score_fused(s, ctx)[m], rtol=1e-12)

    def test_observation_and_sample_agree(self, ctx):
        s = generate_dataset(CFG.replace(n=20), 4)
        batch = score_fused(s, ctx)
        np.testing.assert_allclose([score_fused(o, ctx) for o in s], batch, rtol=1e-14)

    def test_alpha_near_zero(self):
        ctx = oracle_context(CFG.replace(rho0=0.0), THETA)
        with pytest.raises(LinkDegeneracyError):
            score_joint(generate_dataset(CFG.replace(n=50), 5), ctx)


class TestInformation:
    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.2, 3.0), st.floats(-1.0, 1.0), st.floats(0.3, 2.0), st.floats(0.3, 2.0))
    def test_pointwise_ordering(self, rho0, a0, sw, sy):
        cfg = DgpConfig(rho0=rho0, a0=a0, sigma_w=sw, sigma_y=sy)
        x = np.random.default_rng(0).standard_normal((2000, cfg.p))
        info = conditional_information(cfg, oracle_context(cfg, rho0), x)
        assert np.all(info.i1 >= 0)
        assert np.all(info.va <= info.v0)

    def test_block_inversion_per_x(self, ctx):
        x = np.random.default_rng(1).standard_normal((1000, CFG.p))
        info = conditional_information(CFG, ctx, x)
        np.testing.assert_allclose(info.sigma_b()[:, 0, 0], info.v0, rtol=1e-9)

    def test_information_matches_empirical_moments(self, ctx):
        # E[R0^2] against a large simulated sample
        s = generate_dataset(CFG.replace(n=200_000), 6)
        emp = np.mean(score_primary(s, ctx) ** 2)
        x = np.random.default_rng(2).standard_normal((200_000, CFG.p))
        ana = conditional_information(CFG, ctx, x).i0.mean()
        assert abs(emp / ana - 1) <= 0.02

    def test_singular_matrix(self):
        with pytest.raises(NumericalError):
            _inv2(np.array([[1.0, 2.0], [2.0, 4.0]]))

    def test_joint_information_structure(self):
        m = _joint_information(np.array(2.0), np.array(3.0), np.array(0.5))
        np.testing.assert_allclose(m, [[5.0, -1.5], [-1.5, 0.75]])


class TestVarianceBound:
    def test_ordering_and_equivalence(self, ctx):
        b = variance_bound(ctx, cfg=CFG, mc_draws=50_000, seed=3)
        assert b.Va <= b.V0
        assert abs(b.Vb - b.V0) <= 1e-9 * b.V0
        np.testing.assert_allclose(b.Sigma_b, b.Sigma_b.T)

    def test_vanishing_auxiliary_mass(self):
        cfg = CFG.replace(a0=-12.0)
        b = variance_bound(oracle_context(cfg, THETA), cfg=cfg, mc_draws=50_000)
        assert abs(b.Va - b.V0) <= 1e-3 * b.V0

    def test_inverse_aggregate(self, ctx):
        b = variance_bound(ctx, cfg=CFG, mc_draws=20_000, aggregate="inverse")
        assert b.Va <= b.V0 and abs(b.Vb - b.V0) <= 1e-9 * b.V0

    def test_sample_plugin(self, ctx):
        s = generate_dataset(CFG.replace(n=100_000), 7)
        emp = variance_bound(ctx, sample=s)
        mc = variance_bound(ctx, cfg=CFG, mc_draws=100_000)
        assert abs(emp.V0 / mc.V0 - 1) <= 0.03
        assert abs(emp.Va / mc.Va - 1) <= 0.03
        assert abs(emp.Vb / emp.V0 - 1) <= 0.05

    def test_too_few_draws(self, ctx):
        with pytest.raises(PrecisionError):
            variance_bound(ctx, cfg=CFG, mc_draws=10)

    def test_fused_replication_variance_matches_va(self):
        from fuse_ate import run_replications
        res = run_replications(CFG.replace(n=5000), 500, seed=5, methods=("theta_a",),
                               theta_true=THETA)
        b = variance_bound(oracle_context(CFG, THETA), cfg=CFG, mc_draws=10**5)
        assert abs(5000 * res.summary[0].variance / b.Va - 1) <= 0.20

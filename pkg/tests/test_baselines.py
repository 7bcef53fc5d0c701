import numpy as np
import pytest
from scipy.stats import gamma as gamma_dist

from juice import BaselineConfig, build_cluster_map, draw_realization, generate_pilots, irw_l21, msbl, oracle_mmse
from juice.baselines import irw_objective, msbl_em_step
from juice.model import crandn


class TestOracle:
    def test_empty_support(self, rng):
        assert not oracle_mmse(crandn(rng, (4, 2)), generate_pilots(4, 6, rng), set(), np.ones(6), 0.1).any()

    def test_matched_filter_limit(self, rng):
        Phi = generate_pilots(8, 8, rng, orthonormal=True)
        Y = crandn(rng, (8, 3))
        X = oracle_mmse(Y, Phi, {1, 5}, np.ones(8), 1e-12)
        np.testing.assert_allclose(X[:, [1, 5]], (Phi[:, [1, 5]].conj().T @ Y).T, atol=1e-10)
        assert not X[:, [0, 2, 3, 4, 6, 7]].any()

    def test_tiny_noise_nmse(self, rng):
        real = draw_realization(build_cluster_map(40, 8), 4, 20, 2, 3, 1e-8, rng)
        X = oracle_mmse(real.received, real.pilots, real.activity.support, real.path_gains, 1e-8)
        T = real.effective_channels
        assert np.sum(np.abs(X - T) ** 2) / np.sum(np.abs(T) ** 2) < 1e-6


class TestMSBL:
    def test_zero_observation_drives_gammas_to_zero(self, rng):
        # EM approaches zero sublinearly; 500 steps reach well below the noise level
        Phi = generate_pilots(10, 20, rng)
        info = {}
        _, gamma = msbl(np.zeros((10, 3)), Phi, 0.1, info=info)
        assert np.all(gamma < 0.01 * 0.1)

    def test_single_user_support(self, rng):
        # with orthonormal pilots a noise-only row fits gamma = (|y|^2/M - s2)+ and
        # |y|^2/(M s2) ~ Gamma(M, 1/M); pick the threshold for 0.1% false alarms per trial
        thr = gamma_dist.isf(1e-3 / 15, 4, scale=1 / 4) - 1
        hits = 0
        for _ in range(100):
            Phi = generate_pilots(16, 16, rng, orthonormal=True)
            i = int(rng.integers(16))
            X = np.zeros((4, 16), dtype=complex)
            X[:, i] = crandn(rng, 4)
            Y = Phi @ X.T + crandn(rng, (16, 4), 1e-4)
            _, gamma = msbl(Y, Phi, 1e-4)
            hits += set(np.flatnonzero(gamma > thr * 1e-4)) == {i}
        assert hits >= 99

    def test_fixed_point(self, rng):
        Phi = generate_pilots(16, 16, rng, orthonormal=True)
        X = np.zeros((4, 16), dtype=complex)
        X[:, 3] = crandn(rng, 4)
        Y = Phi @ X.T + crandn(rng, (16, 4), 1e-2)
        cfg = BaselineConfig(prune_threshold=1e-300)
        info = {}
        _, gamma = msbl(Y, Phi, 1e-2, cfg, info=info)
        assert info["converged"]
        new, _, _ = msbl_em_step(Y, Phi, 1e-2, gamma)
        assert np.max(np.abs(new - gamma)) <= cfg.tol * np.max(gamma)

    def test_loglik_nondecreasing(self, rng):
        for _ in range(10):
            real = draw_realization(build_cluster_map(30, 6), 3, 12, 2, 3, 0.1, rng)
            info = {}
            msbl(real.received, real.pilots, 0.1, BaselineConfig(max_iters=200), info=info)
            ll = np.array(info["loglik"])
            assert np.all(np.diff(ll) >= -1e-10 * np.abs(ll[1:]).clip(1))

    def test_pruning_is_relative(self, rng):
        real = draw_realization(build_cluster_map(20, 4), 3, 10, 1, 2, 0.01, rng)
        _, gamma = msbl(real.received, real.pilots, 0.01, BaselineConfig(prune_threshold=0.5))
        assert np.all((gamma == 0) | (gamma >= 0.5 * gamma.max()))


class TestIRW:
    def test_lambda_zero_is_least_squares(self, rng):
        Phi = generate_pilots(12, 6, rng)
        Y = crandn(rng, (12, 3))
        X = irw_l21(Y, Phi, 0.0)
        resid = Y - Phi @ X.T
        assert np.max(np.abs(Phi.conj().T @ resid)) < 1e-8

    def test_huge_lambda_gives_zero(self, rng):
        Phi = generate_pilots(6, 10, rng)
        X = irw_l21(crandn(rng, (6, 2)), Phi, 1e9)
        assert np.max(np.abs(X)) < 1e-6

    def test_objective_monotone(self, rng):
        for _ in range(100):
            real = draw_realization(build_cluster_map(20, 4), 3, 8, 2, 2, 0.1, rng)
            lam = rng.uniform(0.05, 2.0)
            info = {}
            irw_l21(real.received, real.pilots, lam, BaselineConfig(reg_epsilon=1e-2), info=info)
            obj = np.array(info["objective"])
            assert np.all(np.diff(obj) <= 1e-9 * np.abs(obj[:-1]).clip(1))

    def test_objective_formula(self, rng):
        Phi, Y, Z = generate_pilots(4, 3, rng), crandn(rng, (4, 2)), crandn(rng, (3, 2))
        s = np.sqrt(np.sum(np.abs(Z) ** 2, axis=1) + 0.01 ** 2)
        ref = np.sum(np.abs(Y - Phi @ Z) ** 2) + 0.7 * np.sum(np.log(s + 0.01))
        assert irw_objective(Y, Phi, Z, 0.7, 0.01) == pytest.approx(ref)


def test_baselines_are_deterministic(rng):
    real = draw_realization(build_cluster_map(20, 4), 3, 10, 2, 2, 0.1, rng)
    a, ga = msbl(real.received, real.pilots, 0.1)
    b, gb = msbl(real.received, real.pilots, 0.1)
    assert np.array_equal(a, b) and np.array_equal(ga, gb)
    assert np.array_equal(irw_l21(real.received, real.pilots, 0.5), irw_l21(real.received, real.pilots, 0.5))


@pytest.mark.parametrize("kw", [dict(max_iters=0), dict(tol=0), dict(reg_epsilon=-1), dict(lam=-0.1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BaselineConfig(**kw)

import numpy as np
import pytest
from scipy.stats import norm

from copulafill.copula_em import FitConfig, fit_standard
from copulafill.data_model import DataTable
from copulafill.evaluation import mae, mask_mcar, sample_gc
from copulafill.imputer import impute_single
from copulafill.lrgc import LowRankParams, fit_lrgc, implied_corr


def random_lowrank(p, k, sigma2, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((p, k))
    w *= np.sqrt(1 - sigma2) / np.linalg.norm(w, axis=1, keepdims=True)
    return LowRankParams(w, sigma2)


class TestImpliedCorr:
    def test_pure_noise_is_identity(self):
        params = LowRankParams(np.zeros((4, 2)) + 1e-30, 1 - 1e-9)
        assert np.allclose(implied_corr(params), np.eye(4), atol=1e-8)

    def test_rank_one_equicorrelation(self):
        w = np.full((5, 1), 0.8)
        params = LowRankParams(w, 1 - 0.64)
        corr = implied_corr(params)
        off = corr[~np.eye(5, dtype=bool)]
        assert np.allclose(off, 0.64, atol=1e-12)
        assert np.allclose(np.diag(corr), 1.0, atol=1e-12)

    def test_unit_diagonal_and_floor_eigenvalue(self):
        params = random_lowrank(12, 3, 0.2, seed=1)
        corr = implied_corr(params)
        assert np.allclose(np.diag(corr), 1.0, atol=1e-12)
        assert np.linalg.eigvalsh(corr).min() >= 0.2 - 1e-10

    def test_rotation_invariance(self):
        params = random_lowrank(8, 3, 0.3, seed=2)
        q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((3, 3)))
        rotated = LowRankParams(params.w @ q, params.sigma2)
        assert np.allclose(implied_corr(params), implied_corr(rotated), atol=1e-12)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            LowRankParams(np.zeros((3, 3)), 0.5)  # k must be < p
        with pytest.raises(ValueError):
            LowRankParams(np.zeros((3, 1)), 0.0)


class TestFit:
    def test_recovers_lowrank_correlation(self):
        truth_params = random_lowrank(15, 3, 0.1, seed=4)
        specs = [norm.ppf] * 15
        tab = sample_gc(1500, specs, lowrank=truth_params, seed=5)
        masked = mask_mcar(tab, 0.2, seed=6)
        model = fit_lrgc(masked, rank=3, config=FitConfig(max_iter=40))
        est = implied_corr(model.lowrank)
        truth = implied_corr(truth_params)
        rel = np.linalg.norm(est - truth) / np.linalg.norm(truth)
        assert rel <= 0.12
        assert 0 < model.lowrank.sigma2 < 1

    def test_full_rank_limit_matches_standard_fit(self):
        truth_params = random_lowrank(4, 2, 0.2, seed=7)
        tab = sample_gc(2500, [norm.ppf] * 4, lowrank=truth_params, seed=8)
        masked = mask_mcar(tab, 0.1, seed=9)
        full = fit_standard(masked)
        low = fit_lrgc(masked, rank=3, config=FitConfig(max_iter=60))
        est = implied_corr(low.lowrank)
        rel = np.linalg.norm(est - full.corr) / np.linalg.norm(full.corr)
        assert rel <= 0.1

    def test_handles_ordinal_columns(self):
        truth_params = random_lowrank(6, 2, 0.2, seed=10)
        rng = np.random.default_rng(11)
        t = rng.standard_normal((800, 2))
        z = t @ truth_params.w.T + np.sqrt(0.2) * rng.standard_normal((800, 6))
        vals = z.copy()
        vals[:, 0] = np.digitize(vals[:, 0], [-0.5, 0.5]).astype(float)
        vals[rng.random((800, 6)) < 0.2] = np.nan
        vals[np.isnan(vals).all(axis=1), 0] = 1.0
        model = fit_lrgc(DataTable(vals), rank=2)
        assert np.isfinite(implied_corr(model.lowrank)).all()

    def test_rank_bounds(self):
        tab = DataTable(np.random.default_rng(12).standard_normal((50, 4)))
        with pytest.raises(ValueError, match="rank"):
            fit_lrgc(tab, rank=4)
        with pytest.raises(ValueError, match="rank"):
            fit_lrgc(tab, rank=0)

    def test_unit_diagonal_every_iteration(self):
        params = random_lowrank(10, 2, 0.3, seed=13)
        tab = sample_gc(400, [norm.ppf] * 10, lowrank=params, seed=14)
        masked = mask_mcar(tab, 0.2, seed=15)
        model = fit_lrgc(masked, rank=2, config=FitConfig(max_iter=5))
        norms2 = (model.lowrank.w ** 2).sum(axis=1)
        assert np.allclose(norms2 + model.lowrank.sigma2, 1.0, atol=1e-10)

    def test_imputation_close_to_full_model(self):
        truth_params = random_lowrank(12, 2, 0.15, seed=16)
        tab = sample_gc(1200, [norm.ppf] * 12, lowrank=truth_params, seed=17)
        masked = mask_mcar(tab, 0.2, seed=18)
        full = fit_standard(masked)
        low = fit_lrgc(masked, rank=2)
        mae_full = mae(impute_single(full, masked).imputed, tab, masked)
        mae_low = mae(impute_single(low, masked).imputed, tab, masked)
        assert mae_low <= 1.05 * mae_full

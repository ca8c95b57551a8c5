"""Single and multiple imputation plus confidence intervals from a fitted model.

Every operation builds the per-row latent posterior under the fitted
correlation, fills missing coordinates, and maps back through the fitted
marginals. Rows without any observed cell fall back to latent zero, i.e.
each marginal's median-type value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cho_factor, cholesky
from scipy.special import ndtr, ndtri

from .copula_em import CopulaModel, encode_table
from .data_model import DataTable
from .latent import batch_posterior
from .lrgc import _lowrank_posterior


@dataclass
class ImputationResult:
    """Completed table plus the latent means behind it.

    ``ci_lower``/``ci_upper`` are populated by
    :func:`confidence_intervals` and are NaN at observed cells.
    """

    imputed: np.ndarray
    latent_means: np.ndarray
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None


def _coerce_values(model: CopulaModel, table) -> np.ndarray:
    values = table.values if isinstance(table, DataTable) else np.asarray(table, float)
    values = np.atleast_2d(values)
    if values.shape[1] != model.n_cols:
        raise ValueError(
            f"table has {values.shape[1]} columns, model expects {model.n_cols}"
        )
    return values


def _model_posterior(model: CopulaModel, values: np.ndarray):
    """(latent mean, missing-coordinate variance) grids for all rows.

    All-missing rows get the prior: mean 0, variance 1.
    """
    lower, upper = encode_table(model.marginals, values)
    n, p = lower.shape
    mean = np.zeros((n, p))
    mvar = np.where(np.isnan(values), 1.0, 0.0)
    has_obs = ~np.isnan(lower).all(axis=1)
    if has_obs.any():
        if model.lowrank is None:
            post = batch_posterior(model.corr, lower[has_obs], upper[has_obs],
                                   sweeps=model.sweeps)
        else:
            post = _lowrank_posterior(model.lowrank, lower[has_obs],
                                      upper[has_obs], model.sweeps,
                                      want_moments=False)
        mean[has_obs] = post.mean
        mvar[has_obs] = post.mvar
    return mean, mvar


def _decode_missing(model: CopulaModel, values: np.ndarray, latent: np.ndarray):
    out = values.copy()
    missing = np.isnan(values)
    for j, marg in enumerate(model.marginals):
        cells = missing[:, j]
        if cells.any():
            out[cells, j] = marg.from_latent(latent[cells, j])
    return out


def impute_single(model: CopulaModel, table) -> ImputationResult:
    """Fill missing cells with the transform of their conditional latent mean."""
    values = _coerce_values(model, table)
    mean, _ = _model_posterior(model, values)
    return ImputationResult(_decode_missing(model, values, mean), mean)


def transform_out_of_sample(model: CopulaModel, rows) -> ImputationResult:
    """Impute new rows with the already-fitted marginals and correlation."""
    return impute_single(model, rows)


def confidence_intervals(
    model: CopulaModel,
    table,
    alpha: float = 0.05,
    kind: str = "analytic",
    num_samples: int = 200,
    seed: int = 0,
):
    """Per-missing-cell confidence bounds at level 1 - alpha.

    ``analytic`` maps the latent mean +- z-quantile band through the
    marginal transform; ``quantile`` takes empirical percentiles over
    ``num_samples`` multiple imputations. Bounds are NaN at observed cells.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if kind not in ("analytic", "quantile"):
        raise ValueError(f"unknown interval kind {kind!r}")
    values = _coerce_values(model, table)
    missing = np.isnan(values)
    if kind == "quantile":
        draws = impute_multiple(model, values, num=num_samples, seed=seed)
        lower = np.quantile(draws, alpha / 2, axis=0)
        upper = np.quantile(draws, 1 - alpha / 2, axis=0)
    else:
        mean, mvar = _model_posterior(model, values)
        margin = ndtri(1 - alpha / 2) * np.sqrt(mvar)
        lower = _decode_missing(model, values, mean - margin)
        upper = _decode_missing(model, values, mean + margin)
    lower[~missing] = np.nan
    upper[~missing] = np.nan
    return lower, upper


def impute_multiple(model: CopulaModel, table, num: int, seed: int = 0) -> np.ndarray:
    """Draw ``num`` imputed tables, shape (num, n, p).

    Interval-valued observed coordinates are sampled from their independent
    truncated-normal conditionals, missing coordinates from the Gaussian
    conditional given the sampled observed latent values. The RNG is split
    per row, so draws are independent of evaluation order.
    """
    if num < 1:
        raise ValueError(f"num must be >= 1, got {num}")
    values = _coerce_values(model, table)
    n, p = values.shape
    lower, upper = encode_table(model.marginals, values)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    latent = np.zeros((num, n, p))
    has_obs = ~np.isnan(lower).all(axis=1)

    if model.lowrank is None:
        _sample_full(model, lower, upper, latent, rngs, has_obs, num)
    else:
        _sample_lowrank(model, lower, upper, latent, rngs, has_obs, num)
    for i in np.flatnonzero(~has_obs):
        latent[:, i, :] = _prior_draws(model, rngs[i], num)

    out = np.empty((num, n, p))
    missing = np.isnan(values)
    for d in range(num):
        out[d] = values.copy()
        for j, marg in enumerate(model.marginals):
            cells = missing[:, j]
            if cells.any():
                out[d][cells, j] = marg.from_latent(latent[d, cells, j])
    return out


def _prior_draws(model: CopulaModel, rng, num: int) -> np.ndarray:
    """Unconditional latent draws for rows with no observed cells."""
    p = model.n_cols
    if model.lowrank is not None:
        params = model.lowrank
        t = rng.standard_normal((num, params.rank))
        return t @ params.w.T + np.sqrt(params.sigma2) * rng.standard_normal((num, p))
    chol = cholesky(model.corr + 1e-10 * np.eye(p), lower=True)
    return rng.standard_normal((num, p)) @ chol.T


def _truncnorm_draws(rng, mu, sd, lo, hi, num):
    """Inverse-CDF truncated normal draws, shape (num,)."""
    u_lo = ndtr((lo - mu) / sd)
    u_hi = ndtr((hi - mu) / sd)
    u = rng.uniform(u_lo, u_hi, size=num)
    return mu + sd * ndtri(np.clip(u, 1e-15, 1 - 1e-15))


def _sample_full(model, lower, upper, latent, rngs, has_obs, num):
    post = batch_posterior(model.corr, lower[has_obs], upper[has_obs],
                           sweeps=model.sweeps)
    rows_with_obs = np.flatnonzero(has_obs)
    for g in post.groups:
        obs, mis = g.obs_idx, g.mis_idx
        chol_mis = (
            cholesky(g.cov_pure + 1e-10 * np.eye(len(mis)), lower=True)
            if mis.size else None
        )
        jz_all = g.z_hat @ g.prec
        interval = upper[np.ix_(rows_with_obs[g.rows], obs)] > \
            lower[np.ix_(rows_with_obs[g.rows], obs)]
        for r_local, r_batch in enumerate(g.rows):
            i = rows_with_obs[r_batch]
            rng = rngs[i]
            z_obs = np.tile(g.z_hat[r_local], (num, 1))
            for c in np.flatnonzero(interval[r_local]):
                cvar = 1.0 / g.prec[c, c]
                cmu = g.z_hat[r_local, c] - jz_all[r_local, c] * cvar
                z_obs[:, c] = _truncnorm_draws(
                    rng, cmu, np.sqrt(cvar),
                    lower[i, obs[c]], upper[i, obs[c]], num)
            latent[:, i, obs] = z_obs
            if mis.size:
                eps = rng.standard_normal((num, len(mis)))
                latent[:, i, mis] = z_obs @ g.coef + eps @ chol_mis.T


def _sample_lowrank(model, lower, upper, latent, rngs, has_obs, num):
    params = model.lowrank
    w, s2 = params.w, params.sigma2
    k = params.rank
    post = _lowrank_posterior(params, lower[has_obs], upper[has_obs],
                              model.sweeps, want_moments=False)
    rows_with_obs = np.flatnonzero(has_obs)
    lo_obs = lower[has_obs]
    hi_obs = upper[has_obs]
    missing = np.isnan(lo_obs)
    for r_batch in range(lo_obs.shape[0]):
        i = rows_with_obs[r_batch]
        rng = rngs[i]
        obs = np.flatnonzero(~missing[r_batch])
        mis = np.flatnonzero(missing[r_batch])
        w_o = w[obs]
        gram = s2 * np.eye(k) + w_o.T @ w_o
        factor = cho_factor(gram, lower=True)
        u = cho_solve(factor, w_o.T)
        z_hat = post.mean[r_batch, obs]
        z_obs = np.tile(z_hat, (num, 1))
        interval = hi_obs[r_batch, obs] > lo_obs[r_batch, obs]
        if interval.any():
            diag_h = np.einsum("ij,ji->i", w_o, u)
            ft_row = z_hat @ u.T
            for c in np.flatnonzero(interval):
                cvar = s2 / (1.0 - diag_h[c])
                jz_c = (z_hat[c] - ft_row @ w_o[c]) / s2
                cmu = z_hat[c] - jz_c * cvar
                z_obs[:, c] = _truncnorm_draws(
                    rng, cmu, np.sqrt(cvar),
                    lo_obs[r_batch, obs[c]], hi_obs[r_batch, obs[c]], num)
        latent[:, i, obs] = z_obs
        if mis.size:
            cov_t = s2 * cho_solve(factor, np.eye(k))
            chol_t = cholesky(cov_t + 1e-12 * np.eye(k), lower=True)
            ft = z_obs @ u.T
            t_draw = ft + rng.standard_normal((num, k)) @ chol_t.T
            noise = rng.standard_normal((num, len(mis))) * np.sqrt(s2)
            latent[:, i, mis] = t_draw @ w[mis].T + noise

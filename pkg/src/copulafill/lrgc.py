"""Low-rank Gaussian copula: EM over the factorization Sigma = W W^T + s2 I.

All E/M computations run through k x k factor-space systems via the
Woodbury identity; no p x p matrix is formed. Because the implied
correlation must have a unit diagonal with isotropic noise, every row of W
carries the same norm sqrt(1 - s2); the M-step keeps the fitted row
directions and projects the scales back onto that constraint.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.sparse.linalg import svds

from .copula_em import CopulaModel, FitConfig, _prepare_fit, _rel_change
from .latent import _LOG_2PI, _truncmoments


@dataclass
class LowRankParams:
    """Loading matrix W (p x k) and isotropic noise variance sigma2."""

    w: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 2:
            raise ValueError("W must be a p x k matrix")
        p, k = self.w.shape
        if not 1 <= k < p:
            raise ValueError(f"rank must satisfy 1 <= k < p, got k={k}, p={p}")
        if not 0 < self.sigma2 < 1:
            raise ValueError(f"sigma2 must lie in (0, 1), got {self.sigma2}")

    @property
    def rank(self) -> int:
        return self.w.shape[1]


def implied_corr(params: LowRankParams) -> np.ndarray:
    """Materialize the implied p x p correlation W W^T + sigma2 I."""
    corr = params.w @ params.w.T
    corr[np.diag_indices(len(corr))] += params.sigma2
    return corr


def _project_unit_diag(w: np.ndarray, sigma2: float) -> tuple[np.ndarray, float]:
    """Rescale onto the constraint set ||W_j||^2 + sigma2 = 1 for all rows."""
    norms2 = (w * w).sum(axis=1)
    sigma2 = float(np.clip(sigma2 / np.mean(norms2 + sigma2), 1e-4, 1.0 - 1e-4))
    scale = np.sqrt(1.0 - sigma2) / np.maximum(np.sqrt(norms2), 1e-12)
    return w * scale[:, None], sigma2


@dataclass
class _LowRankPost:
    mean: np.ndarray       # (n, p) conditional latent means
    ivar: np.ndarray       # (n, p) interval-coordinate variances
    mvar: np.ndarray       # (n, p) missing-coordinate variances
    loglik: float          # total observed-data log-likelihood
    # M-step accumulators
    s1: np.ndarray         # (p, k, k) sums of E[t t^T] over rows observing j
    s2: np.ndarray         # (p, k) sums of E[t] z_j
    q: np.ndarray          # (p,) sums of z_j^2 + interval variance
    n_cells: int


def _lowrank_posterior(params: LowRankParams, lower, upper, sweeps,
                       want_moments=True) -> _LowRankPost:
    w, s2 = params.w, params.sigma2
    p, k = w.shape
    lower = np.atleast_2d(lower)
    upper = np.atleast_2d(upper)
    n = lower.shape[0]
    missing = np.isnan(lower)
    if np.any(missing.all(axis=1)):
        row = int(np.flatnonzero(missing.all(axis=1))[0])
        raise ValueError(f"row {row} has no observed coordinates")

    mean = np.zeros((n, p))
    ivar = np.zeros((n, p))
    mvar = np.zeros((n, p))
    loglik = 0.0
    s1 = np.zeros((p, k, k))
    s2_acc = np.zeros((p, k))
    q = np.zeros(p)
    n_cells = 0

    _, inverse = np.unique(missing, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for g in range(inverse.max() + 1):
        rows = np.flatnonzero(inverse == g)
        obs = np.flatnonzero(~missing[rows[0]])
        mis = np.flatnonzero(missing[rows[0]])
        w_o = w[obs]
        lo = lower[np.ix_(rows, obs)]
        hi = upper[np.ix_(rows, obs)]
        gram = s2 * np.eye(k) + w_o.T @ w_o
        try:
            factor = cho_factor(gram, lower=True)
        except LinAlgError:
            factor = cho_factor(gram + 1e-8 * np.eye(k), lower=True)
        u = cho_solve(factor, w_o.T)              # (k, o) = G^-1 W_O^T

        interval = hi > lo
        z = np.where(np.isfinite(lo), lo, 0.0).copy()
        v = np.zeros_like(z)
        if interval.any():
            m0, v0, _ = _truncmoments(0.0, 1.0, lo[interval], hi[interval])
            z[interval] = m0
            v[interval] = v0
        ft = z @ u.T                              # (r, k) factor means
        if interval.any():
            diag_h = np.einsum("ij,ji->i", w_o, u)
            diag_j = (1.0 - diag_h) / s2
            for _ in range(sweeps):
                for c in np.flatnonzero(interval.any(axis=0)):
                    sel = interval[:, c]
                    if not sel.any():
                        continue
                    jz_c = (z[sel, c] - ft[sel] @ w_o[c]) / s2
                    cvar = 1.0 / diag_j[c]
                    cmu = z[sel, c] - jz_c * cvar
                    mzc, vzc, _ = _truncmoments(cmu, cvar, lo[sel, c], hi[sel, c])
                    delta = mzc - z[sel, c]
                    z[sel, c] = mzc
                    v[sel, c] = vzc
                    ft[sel] += delta[:, None] * u[:, c][None, :]
            for c in np.flatnonzero(interval.any(axis=0)):
                sel = interval[:, c]
                jz_c = (z[sel, c] - ft[sel] @ w_o[c]) / s2
                cvar = 1.0 / diag_j[c]
                cmu = z[sel, c] - jz_c * cvar
                _, _, mass = _truncmoments(cmu, cvar, lo[sel, c], hi[sel, c])
                loglik += float(np.log(np.maximum(mass, 1e-300)).sum())

        mean[np.ix_(rows, obs)] = z
        ivar[np.ix_(rows, obs)] = v
        cov_t = s2 * cho_solve(factor, np.eye(k))  # (k, k) factor covariance
        if mis.size:
            w_m = w[mis]
            mean[np.ix_(rows, mis)] = ft @ w_m.T
            mvar[np.ix_(rows, mis)] = (
                np.einsum("ij,jk,ik->i", w_m, cov_t, w_m)[None, :] + s2
            )
        # observed-data Gaussian log-density via the determinant lemma
        o = len(obs)
        logdet = (o - k) * np.log(s2) + 2.0 * np.log(np.diag(factor[0])).sum()
        s_vec = z @ w_o                            # (r, k) W_O^T z
        quad = ((z * z).sum(axis=1) - np.einsum(
            "ij,ij->i", s_vec @ cho_solve(factor, np.eye(k)), s_vec)) / s2
        loglik += float((-0.5 * (logdet + quad + o * _LOG_2PI)).sum())

        if want_moments:
            r = len(rows)
            block = r * cov_t + ft.T @ ft
            s1[obs] += block[None, :, :]
            s2_acc[obs] += z.T @ ft
            q[obs] += (z * z + v).sum(axis=0)
            n_cells += r * o
    return _LowRankPost(mean, ivar, mvar, loglik, s1, s2_acc, q, n_cells)


def _mstep_lowrank(post: _LowRankPost, k: int) -> tuple[np.ndarray, float]:
    p = post.s1.shape[0]
    w_new = np.empty((p, k))
    for j in range(p):
        w_new[j] = np.linalg.solve(post.s1[j] + 1e-10 * np.eye(k), post.s2[j])
    resid = post.q - 2.0 * np.einsum("jk,jk->j", w_new, post.s2) + np.einsum(
        "jk,jkl,jl->j", w_new, post.s1, w_new)
    sigma2 = float(max(resid.sum() / post.n_cells, 1e-6))
    return _project_unit_diag(w_new, sigma2)


def _init_lowrank(lower, upper, k) -> LowRankParams:
    z = lower.copy()
    interval = ~np.isnan(lower) & (upper > lower)
    if interval.any():
        m0, _, _ = _truncmoments(0.0, 1.0, lower[interval], upper[interval])
        z[interval] = m0
    z = np.nan_to_num(z, nan=0.0)
    n = z.shape[0]
    u, s, vt = svds(z, k=k, random_state=0)
    w = vt.T * (s / np.sqrt(n))[None, :]
    total = (z * z).sum() / z.size
    signal = (w * w).sum(axis=1).mean()
    sigma2 = float(np.clip(total - signal, 0.01, 0.99))
    w, sigma2 = _project_unit_diag(w, sigma2)
    return LowRankParams(w, sigma2)


def fit_lrgc(
    table,
    rank: int,
    config: FitConfig | None = None,
    types=None,
    min_ord_ratio: float = 0.1,
) -> CopulaModel:
    """Fit the low-rank copula by EM over (W, sigma2).

    Per-iteration cost scales with the observed-entry count times rank^2;
    the correlation is kept factored and only materialized by
    :func:`implied_corr`.
    """
    config = config or FitConfig()
    table, marginals, vartypes, lower, upper, _ = _prepare_fit(
        table, types, min_ord_ratio
    )
    n, p = lower.shape
    if not 1 <= rank < p:
        raise ValueError(f"rank must satisfy 1 <= rank < n_cols, got {rank} (p={p})")
    if rank >= n:
        raise ValueError(f"rank {rank} needs more than {n} fitted rows")
    params = _init_lowrank(lower, upper, rank)
    trace = []
    converged = False
    for it in range(1, config.max_iter + 1):
        post = _lowrank_posterior(params, lower, upper, config.sweeps)
        w_new, s2_new = _mstep_lowrank(post, rank)
        change = _rel_change(params.w, w_new)
        params = LowRankParams(w_new, s2_new)
        loglik = post.loglik / n
        trace.append((change, loglik))
        if config.verbose:
            print(f"Iteration {it}: copula parameter change {change:.4f}, "
                  f"likelihood {loglik:.4f}")
        if change < config.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"EM did not converge within {config.max_iter} iterations")
    return CopulaModel(None, marginals, vartypes, list(table.col_names),
                       fit_trace=trace, converged=converged, lowrank=params,
                       sweeps=config.sweeps)

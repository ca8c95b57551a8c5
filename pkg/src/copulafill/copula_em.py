"""EM fitting of the copula correlation, standard and mini-batch offline.

The E-step turns each row's observed cells into expected latent first and
second moments (see :mod:`copulafill.latent`); the M-step normalizes the
pooled expected second-moment matrix back to a correlation matrix. The fit
terminates when the relative Frobenius change of the correlation falls
below ``tol``.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data_model import DataTable, VariableType, detect_variable_types
from .latent import _truncmoments, batch_posterior
from .marginals import Marginal, fit_marginal

TRAINING_MODES = ("standard", "minibatch-offline", "minibatch-online")


def default_stepsize(t: int, c: float = 5.0) -> float:
    return c / (c + t)


@dataclass
class FitConfig:
    """Settings shared by the offline training modes."""

    tol: float = 0.01
    max_iter: int = 50
    training_mode: str = "standard"
    batch_size: int = 100
    num_pass: int = 2
    stepsize: Callable[[int], float] = default_stepsize
    seed: int = 0
    n_workers: int = 1
    sweeps: int = 2
    verbose: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.training_mode not in TRAINING_MODES:
            raise ValueError(f"unknown training mode {self.training_mode!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_pass < 1:
            raise ValueError(f"num_pass must be >= 1, got {self.num_pass}")
        if self.n_workers < 1:
            raise ValueError(f"n_workers must be >= 1, got {self.n_workers}")
        if self.sweeps < 0:
            raise ValueError(f"sweeps must be >= 0, got {self.sweeps}")
        validate_stepsize(self.stepsize, self.max_iter)


def validate_stepsize(stepsize, horizon: int) -> None:
    """Step sizes must lie in (0, 1) and decrease monotonically."""
    vals = [stepsize(t) for t in range(1, horizon + 1)]
    if any(not 0.0 < v < 1.0 for v in vals):
        raise ValueError("stepsize must lie in (0, 1) for every iteration")
    if any(b >= a for a, b in zip(vals, vals[1:])):
        raise ValueError("stepsize must be monotonically decreasing")


@dataclass
class CopulaModel:
    """Fitted Gaussian copula: correlation matrix plus per-column marginals.

    ``corr`` is None for low-rank fits, where the correlation is held in
    factored form in ``lowrank`` and materialized on demand.
    """

    corr: np.ndarray | None
    marginals: list[Marginal]
    vartypes: list[VariableType]
    col_names: list[str]
    fit_trace: list[tuple[float, float]] = field(default_factory=list)
    converged: bool = True
    lowrank: object | None = None
    sweeps: int = 2

    @property
    def n_cols(self) -> int:
        return len(self.marginals)

    def correlation(self) -> np.ndarray:
        if self.corr is not None:
            return self.corr
        from .lrgc import implied_corr

        return implied_corr(self.lowrank)


@dataclass
class EStepResult:
    s_sum: np.ndarray        # sum over rows of E[z z^T | observed cells]
    m_sum: np.ndarray        # sum over rows of E[z | observed cells]
    loglik: float            # average observed-data log-likelihood
    latent_mean: np.ndarray  # (n, p) per-row conditional means


def encode_table(marginals: list[Marginal], values: np.ndarray):
    """Latent lower/upper bound grids for a value grid (NaN where missing)."""
    values = np.asarray(values, dtype=float)
    lower = np.empty_like(values)
    upper = np.empty_like(values)
    for j, m in enumerate(marginals):
        lower[:, j], upper[:, j] = m.latent_bounds(values[:, j])
    return lower, upper


def _estep_chunk(corr, lower, upper, sweeps):
    post = batch_posterior(corr, lower, upper, sweeps=sweeps)
    p = corr.shape[0]
    s = post.mean.T @ post.mean
    s[np.diag_indices(p)] += post.ivar.sum(axis=0)
    for g in post.groups:
        if g.mis_idx.size == 0:
            continue
        block = len(g.rows) * g.cov_pure
        vsum = g.ivar.sum(axis=0)
        if vsum.any():
            block = block + g.coef.T @ (vsum[:, None] * g.coef)
        s[np.ix_(g.mis_idx, g.mis_idx)] += block
    loglik_total = float((post.gauss_ll + post.log_mass).sum())
    return s, post.mean.sum(axis=0), loglik_total, post.mean


def estep(corr, lower, upper, sweeps: int = 2, n_workers: int = 1) -> EStepResult:
    """Expected latent moments of an encoded batch under ``corr``.

    Rows are split across ``n_workers`` processes; the partial sums merge by
    addition, so results agree with the serial path up to summation order.
    """
    corr = np.asarray(corr, dtype=float)
    lower = np.atleast_2d(np.asarray(lower, dtype=float))
    upper = np.atleast_2d(np.asarray(upper, dtype=float))
    n = lower.shape[0]
    if n == 0:
        raise ValueError("estep requires at least one row")
    if n_workers == 1 or n < 2 * n_workers:
        s, m, ll, zimp = _estep_chunk(corr, lower, upper, sweeps)
        return EStepResult(s, m, ll / n, zimp)
    bounds = np.linspace(0, n, n_workers + 1).astype(int)
    args = [
        (corr, lower[a:b], upper[a:b], sweeps)
        for a, b in zip(bounds[:-1], bounds[1:])
    ]
    s = np.zeros_like(corr)
    m = np.zeros(corr.shape[0])
    ll = 0.0
    parts = []
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        for s_c, m_c, ll_c, z_c in pool.map(_estep_chunk_star, args):
            s += s_c
            m += m_c
            ll += ll_c
            parts.append(z_c)
    return EStepResult(s, m, ll / n, np.concatenate(parts, axis=0))


def _estep_chunk_star(args):
    return _estep_chunk(*args)


def mstep(s_sum: np.ndarray, n: int) -> np.ndarray:
    """Correlation matrix associated with the expected covariance S/n."""
    sn = np.asarray(s_sum, dtype=float) / n
    sn = (sn + sn.T) / 2.0
    d = np.diag(sn)
    if np.any(d <= 0):
        j = int(np.flatnonzero(d <= 0)[0])
        raise ValueError(f"expected covariance has nonpositive diagonal at column {j}")
    corr = sn / np.sqrt(np.outer(d, d))
    np.fill_diagonal(corr, 1.0)
    return _ensure_psd(corr)


def _ensure_psd(corr: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Eigenvalue clip + diagonal renormalization, only when needed."""
    w = np.linalg.eigvalsh(corr)
    if w.min() >= floor:
        return corr
    w, v = np.linalg.eigh(corr)
    w = np.clip(w, max(floor, 1e-12), None)
    corr = (v * w) @ v.T
    d = np.diag(corr).copy()
    corr = corr / np.sqrt(np.outer(d, d))
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    return corr


def _pin_single_level(corr: np.ndarray, idx: list[int]) -> np.ndarray:
    for j in idx:
        corr[j, :] = 0.0
        corr[:, j] = 0.0
        corr[j, j] = 1.0
    return corr


def initial_corr(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Warm-start correlation from point-encoded latent values.

    Interval cells are replaced by their univariate truncated-normal means;
    the pairwise-complete sample correlation is then projected to the
    nearest positive-definite correlation matrix. Entries with fewer than
    two complete pairs fall back to zero.
    """
    z = lower.copy()
    interval = ~np.isnan(lower) & (upper > lower)
    if interval.any():
        m0, _, _ = _truncmoments(0.0, 1.0, lower[interval], upper[interval])
        z[interval] = m0
    obs = ~np.isnan(z)
    x = np.where(obs, z, 0.0)
    w = obs.astype(float)
    n_jk = w.T @ w
    s_jk = x.T @ x
    a_jk = x.T @ w                    # sum of x_j over rows where k observed
    q_jk = (x * x).T @ w              # sum of x_j^2 over the same rows
    with np.errstate(all="ignore"):
        mean_jk = a_jk / n_jk
        var_jk = q_jk / n_jk - mean_jk**2
        cov = s_jk / n_jk - mean_jk * mean_jk.T
        corr = cov / np.sqrt(var_jk * var_jk.T)
    corr[(n_jk < 2) | ~np.isfinite(corr)] = 0.0
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return _ensure_psd(corr, floor=1e-4)


def _prepare_fit(table, types, min_ord_ratio):
    if not isinstance(table, DataTable):
        table = DataTable(np.asarray(table, dtype=float))
    if table.n_rows == 0 or table.n_cols == 0:
        raise ValueError("cannot fit an empty table")
    detected = detect_variable_types(table, min_ord_ratio=min_ord_ratio)
    if types is not None:
        if len(types) != table.n_cols:
            raise ValueError(f"{len(types)} type overrides for {table.n_cols} columns")
        detected = [t if t is not None else d for t, d in zip(types, detected)]
    marginals = [
        fit_marginal(table.values[:, j], detected[j]) for j in range(table.n_cols)
    ]
    vartypes = [m.vartype for m in marginals]
    lower, upper = encode_table(marginals, table.values)
    keep = ~np.isnan(lower).all(axis=1)
    if not keep.all():
        dropped = np.flatnonzero(~keep)
        warnings.warn(
            f"{dropped.size} rows with no observed cells excluded from fitting "
            f"(first: row {dropped[0]})"
        )
    single = [j for j, m in enumerate(marginals) if len(m.values) == 1]
    return table, marginals, vartypes, lower[keep], upper[keep], single


def fit_standard(
    table,
    config: FitConfig | None = None,
    types: list[VariableType | None] | None = None,
    min_ord_ratio: float = 0.1,
) -> CopulaModel:
    """Fit marginals and the copula correlation by standard EM."""
    config = config or FitConfig()
    table, marginals, vartypes, lower, upper, single = _prepare_fit(
        table, types, min_ord_ratio
    )
    if lower.shape[0] == 0:
        raise ValueError("no rows with observed cells to fit on")
    corr = _pin_single_level(initial_corr(lower, upper), single)
    n = lower.shape[0]
    trace = []
    converged = False
    for it in range(1, config.max_iter + 1):
        res = estep(corr, lower, upper, sweeps=config.sweeps,
                    n_workers=config.n_workers)
        new_corr = _pin_single_level(mstep(res.s_sum, n), single)
        change = _rel_change(corr, new_corr)
        corr = new_corr
        trace.append((change, res.loglik))
        if config.verbose:
            print(f"Iteration {it}: copula parameter change {change:.4f}, "
                  f"likelihood {res.loglik:.4f}")
        if change < config.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"EM did not converge within {config.max_iter} iterations")
    return CopulaModel(corr, marginals, vartypes, list(table.col_names),
                       fit_trace=trace, converged=converged, sweeps=config.sweeps)


def fit_minibatch_offline(
    table,
    config: FitConfig | None = None,
    types: list[VariableType | None] | None = None,
    min_ord_ratio: float = 0.1,
) -> CopulaModel:
    """Mini-batch EM: per-batch estimates blended with a decaying step size.

    Performs exactly ceil(n / batch_size) * num_pass iterations over a
    seed-shuffled row order; requires batch_size >= n_cols so every
    observed block stays invertible.
    """
    config = config or FitConfig()
    table, marginals, vartypes, lower, upper, single = _prepare_fit(
        table, types, min_ord_ratio
    )
    n, p = lower.shape
    if n == 0:
        raise ValueError("no rows with observed cells to fit on")
    if config.batch_size < p:
        raise ValueError(
            f"mini-batch training needs batch size >= number of columns "
            f"({config.batch_size} < {p}); use the low-rank model for wide data"
        )
    n_batches = int(np.ceil(n / config.batch_size))
    total_iters = n_batches * config.num_pass
    validate_stepsize(config.stepsize, total_iters)

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    batches = np.array_split(perm, n_batches)
    corr = _pin_single_level(initial_corr(lower, upper), single)
    trace = []
    t = 0
    for _ in range(config.num_pass):
        for idx in batches:
            t += 1
            res = estep(corr, lower[idx], upper[idx], sweeps=config.sweeps,
                        n_workers=config.n_workers)
            batch_corr = _pin_single_level(mstep(res.s_sum, len(idx)), single)
            eta = config.stepsize(t)
            new_corr = (1.0 - eta) * corr + eta * batch_corr
            change = _rel_change(corr, new_corr)
            corr = new_corr
            trace.append((change, res.loglik))
            if config.verbose:
                print(f"Iteration {t}: copula parameter change {change:.4f}, "
                      f"likelihood {res.loglik:.4f}")
    return CopulaModel(corr, marginals, vartypes, list(table.col_names),
                       fit_trace=trace, converged=True, sweeps=config.sweeps)


def approx_loglik(model: CopulaModel, table) -> float:
    """Average observed-data log-likelihood of the latent Gaussian part.

    Exact for all-continuous rows; interval coordinates enter at their
    conditional means plus their per-coordinate conditional interval
    log-masses. A monitoring quantity, not a convergence criterion.
    """
    values = table.values if isinstance(table, DataTable) else np.asarray(table, float)
    lower, upper = encode_table(model.marginals, values)
    keep = ~np.isnan(lower).all(axis=1)
    post = batch_posterior(model.correlation(), lower[keep], upper[keep],
                           sweeps=model.sweeps)
    return float((post.gauss_ll + post.log_mass).mean())


def _rel_change(old: np.ndarray, new: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / np.linalg.norm(old))

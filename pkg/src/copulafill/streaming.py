"""Online mode: impute each arriving row, then update marginals and the
correlation.

Marginals are re-estimated from per-column sliding windows of the most
recent observed values; the correlation follows the constant-step blend of
per-batch EM estimates. Decay weights, when enabled, reweight only the
imputation quantiles, never the model update.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .copula_em import encode_table, estep, initial_corr, mstep
from .data_model import DataTable, ORDINAL, VariableType, detect_variable_types
from .latent import batch_posterior
from .marginals import Marginal, decayed_weights, fit_marginal


@dataclass
class StreamConfig:
    window_size: int = 200
    const_stepsize: float = 0.1
    batch_size: int = 40
    decay: float = 1.0
    n_train: int = 25
    sweeps: int = 2

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError(f"window_size must be >= 2, got {self.window_size}")
        if not 0 < self.const_stepsize < 1:
            raise ValueError(
                f"const_stepsize must be in (0, 1), got {self.const_stepsize}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.n_train < 2:
            raise ValueError(f"n_train must be >= 2, got {self.n_train}")


@dataclass
class StreamState:
    """Mutable stream model; :func:`step` is the single writer."""

    config: StreamConfig
    vartypes: list[VariableType]
    col_names: list[str]
    buffers: list[deque]
    corr: np.ndarray
    marginals: list[Marginal] = field(default_factory=list)
    pending_lower: list[np.ndarray] = field(default_factory=list)
    pending_upper: list[np.ndarray] = field(default_factory=list)
    n_seen: int = 0

    @property
    def n_cols(self) -> int:
        return len(self.buffers)


def _window_marginal(state: StreamState, j: int, weights=None) -> Marginal:
    vals = np.fromiter(state.buffers[j], dtype=float)
    try:
        return fit_marginal(vals, state.vartypes[j], weights)
    except ValueError:
        # a truncated window may momentarily hold boundary values only;
        # treat it as ordinal until interior values return
        return fit_marginal(vals, VariableType(ORDINAL), weights)


def _refit_marginals(state: StreamState) -> None:
    state.marginals = [_window_marginal(state, j) for j in range(state.n_cols)]


def init_stream(rows, config: StreamConfig | None = None, types=None,
                min_ord_ratio: float = 0.1) -> StreamState:
    """Initialize marginals and the correlation from the first rows."""
    config = config or StreamConfig()
    table = rows if isinstance(rows, DataTable) else DataTable(np.asarray(rows, float))
    obs_counts = table.observed_mask().sum(axis=0)
    if (obs_counts < 2).any():
        j = int(np.flatnonzero(obs_counts < 2)[0])
        raise ValueError(
            f"column {table.col_names[j]!r} has fewer than 2 observed values "
            "in the initialization block"
        )
    detected = detect_variable_types(table, min_ord_ratio=min_ord_ratio)
    if types is not None:
        detected = [t if t is not None else d for t, d in zip(types, detected)]
    buffers = []
    for j in range(table.n_cols):
        col = table.values[:, j]
        buffers.append(deque(col[~np.isnan(col)], maxlen=config.window_size))
    state = StreamState(config, detected, list(table.col_names), buffers,
                        corr=np.eye(table.n_cols))
    _refit_marginals(state)
    lower, upper = encode_table(state.marginals, table.values)
    keep = ~np.isnan(lower).all(axis=1)
    state.corr = initial_corr(lower[keep], upper[keep])
    return state


def _impute_row(state: StreamState, lower, upper, row) -> np.ndarray:
    missing = np.isnan(row)
    if not missing.any():
        return row.copy()
    if np.isnan(lower).all():
        latent = np.zeros(state.n_cols)
    else:
        post = batch_posterior(state.corr, lower[None, :], upper[None, :],
                               sweeps=state.config.sweeps)
        latent = post.mean[0]
    out = row.copy()
    decay = state.config.decay
    for j in np.flatnonzero(missing):
        if decay < 1.0:
            weights = decayed_weights(len(state.buffers[j]), decay)[::-1]
            marg = _window_marginal(state, j, weights)
        else:
            marg = state.marginals[j]
        out[j] = marg.from_latent(latent[j])
    return out


def step(state: StreamState, row, revealed=None):
    """Impute one arriving row, then fold it into the model.

    ``revealed``, when given, must agree with ``row`` at the row's observed
    cells and may expose additional values; the revealed values are what
    enters the windows and the correlation update.
    """
    row = np.asarray(row, dtype=float).ravel()
    if row.size != state.n_cols:
        raise ValueError(f"row has {row.size} cells, expected {state.n_cols}")
    if revealed is not None:
        revealed = np.asarray(revealed, dtype=float).ravel()
        if revealed.size != row.size:
            raise ValueError("revealed row length mismatch")
        obs = ~np.isnan(row)
        if not np.array_equal(row[obs], revealed[obs]):
            j = int(np.flatnonzero(obs)[
                np.flatnonzero(row[obs] != revealed[obs])[0]])
            raise ValueError(
                f"revealed row disagrees with the input row at observed "
                f"column {state.col_names[j]!r}"
            )

    # encode against the marginals current at ingest time, impute, then update
    lower, upper = encode_table(state.marginals, row[None, :])
    imputed = _impute_row(state, lower[0], upper[0], row)

    source = revealed if revealed is not None else row
    src_lower, src_upper = encode_table(state.marginals, source[None, :])
    observed = ~np.isnan(source)
    for j in np.flatnonzero(observed):
        state.buffers[j].append(source[j])
    if observed.any():
        state.pending_lower.append(src_lower[0])
        state.pending_upper.append(src_upper[0])
    _refit_marginals(state)
    state.n_seen += 1

    if len(state.pending_lower) >= state.config.batch_size:
        res = estep(state.corr, np.vstack(state.pending_lower),
                    np.vstack(state.pending_upper), sweeps=state.config.sweeps)
        batch_corr = mstep(res.s_sum, len(state.pending_lower))
        eta = state.config.const_stepsize
        state.corr = (1.0 - eta) * state.corr + eta * batch_corr
        state.pending_lower.clear()
        state.pending_upper.clear()
    return imputed, state

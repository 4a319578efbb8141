"""Exponentially weighted combination of seasonal experts.

Each customer carries a cumulative regret vector over its M experts.
Weights are the softmax of ``eta_t * R`` with ``eta_t = sqrt(8 ln M / t)``;
for losses normalized to [0, 1] the worst-case regret after m rounds is
bounded by :func:`regret_bound`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

SEASONS = ("winter", "spring", "summer", "autumn")
_MONTH_SEASON = np.array([0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 0])  # Jan..Dec


def season_of(timestamps):
    """Season index (0=DJF, 1=MAM, 2=JJA, 3=SON) for datetime64 values."""
    ts = np.asarray(timestamps, dtype="datetime64[h]")
    month = ts.astype("datetime64[M]").astype(int) % 12
    return _MONTH_SEASON[month]


def season_partition(timestamps):
    """Four disjoint index arrays covering ``timestamps`` (meteorological seasons)."""
    s = season_of(timestamps)
    return [np.flatnonzero(s == j) for j in range(4)]


def _check_weights(weights):
    w = np.asarray(weights, dtype=float)
    total = w.sum(axis=-1)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if np.any(total <= 0):
        raise ValueError("weights sum to zero")
    return w, total


def combine(forecasts, weights):
    """Weighted mean of expert forecasts; broadcasts over leading axes."""
    w, total = _check_weights(weights)
    f = np.asarray(forecasts, dtype=float)
    out = np.sum(w * f, axis=-1) / total
    # guard the hull against rounding
    return np.clip(out, f.min(axis=-1), f.max(axis=-1))


def combine_variance(variances, weights):
    """sum_j w_j^2 var_j / (sum_j w_j)^2."""
    w, total = _check_weights(weights)
    v = np.asarray(variances, dtype=float)
    if np.any(v < 0):
        raise ValueError("variances must be nonnegative")
    return np.sum(w**2 * v, axis=-1) / total**2


def eta(t, M):
    return math.sqrt(8.0 * math.log(M) / t)


@dataclass
class RegretState:
    M: int = 4
    loss_scale: float = 1.0
    R: np.ndarray = None
    t: int = 0
    aggregate_loss: float = 0.0
    expert_loss: np.ndarray = None

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("need at least two experts")
        if not self.loss_scale > 0:
            raise ValueError("loss_scale must be positive")
        if self.R is None:
            self.R = np.zeros(self.M)
        if self.expert_loss is None:
            self.expert_loss = np.zeros(self.M)

    def copy(self):
        return RegretState(self.M, self.loss_scale, self.R.copy(), self.t, self.aggregate_loss, self.expert_loss.copy())

    @property
    def max_regret(self):
        return float(self.R.max())


def weights_from_regret(state):
    """Softmax of eta_t * R; uniform at t = 0."""
    if state.t == 0:
        return np.full(state.M, 1.0 / state.M)
    z = eta(state.t, state.M) * state.R
    z = np.exp(z - z.max())
    return z / z.sum()


def regret_update(state, forecasts, combined, target):
    """Add r_j = (|P_hat - P| - |f_j - P|) / loss_scale to R_j; returns a new state.

    ``target=None`` (no feedback this round) leaves the state unchanged.
    """
    if target is None or not np.isfinite(target):
        return state
    f = np.asarray(forecasts, dtype=float)
    la = abs(combined - target)
    lf = np.abs(f - target)
    r = (la - lf) / state.loss_scale
    return RegretState(
        state.M,
        state.loss_scale,
        state.R + r,
        state.t + 1,
        state.aggregate_loss + la,
        state.expert_loss + lf,
    )


def regret_bound(m, M):
    """2 sqrt(m ln M / 2) + sqrt(ln M / 8) for normalized losses."""
    if m < 1 or M < 2:
        raise ValueError("need m >= 1 and M >= 2")
    lm = math.log(M)
    return 2.0 * math.sqrt(m * lm / 2.0) + math.sqrt(lm / 8.0)


@dataclass
class WeightTrace:
    """Per-round record for one customer; exported as CSV."""

    rows: list = field(default_factory=list)

    def record(self, state, weights):
        e = eta(state.t, state.M) if state.t > 0 else float("nan")
        b = regret_bound(state.t, state.M) if state.t > 0 else float("nan")
        self.rows.append((state.t, *map(float, weights), e, state.max_regret, b))

    def write(self, path, header_comment=None):
        write_weight_trace(self.rows, path, header_comment)


WEIGHT_TRACE_HEADER = ["t", "season_weight_1", "season_weight_2", "season_weight_3", "season_weight_4", "eta", "max_regret", "bound"]


def write_weight_trace(rows, path, header_comment=None, extra_columns=()):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(list(extra_columns) + WEIGHT_TRACE_HEADER)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else ""
    return str(v)

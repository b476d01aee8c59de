"""Nash-Sutcliffe efficiency, runoff ratio, state-trajectory export, and the
per-basin evaluation report.

NSE = 1 - sum((y_hat - y)^2) / sum((y - mean(y))^2); 1 is a perfect
forecast, 0 matches always predicting the observed mean, negative is worse
than that.  The headline score is window-averaged NSE: each forecast window
is scored on its own K steps and the scores averaged, with constant-
observation windows excluded (and counted) rather than assigned infinities.
A pooled NSE over all forecast values is reported alongside.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import BasinSeries
from .model import LatentState


class UndefinedNseError(ValueError):
    """NSE is undefined (constant observations or no scorable windows)."""


def nse(y_obs: np.ndarray, y_hat: np.ndarray) -> float:
    y_obs = np.asarray(y_obs, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y_obs.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y_obs.shape} vs {y_hat.shape}")
    if len(y_obs) < 2:
        raise ValueError(f"need at least 2 values, got {len(y_obs)}")
    denom = float(np.sum((y_obs - y_obs.mean()) ** 2))
    if denom == 0.0:
        raise UndefinedNseError("observations are constant; NSE undefined")
    num = float(np.sum((y_hat - y_obs) ** 2))
    return 1.0 - num / denom


@dataclass
class WindowedNse:
    value: float  # mean NSE over scorable windows
    pooled: float  # single NSE over all forecast values
    n_windows: int  # scored windows
    n_skipped: int  # constant-observation windows excluded


def windowed_nse(y_obs_windows, y_hat_windows, flat_std_tol: float = 0.01) -> WindowedNse:
    """Score each forecast window separately and average.

    Accepts parallel sequences of per-window observation/prediction arrays
    (each of the window's forecast length).  Flat-low-flow windows, whose
    observed standard deviation falls below ``flat_std_tol`` times the
    overall observed standard deviation, are excluded and counted instead
    of contributing near-infinite scores.  The threshold scales with the
    data, so the whole procedure stays affine invariant."""
    if len(y_obs_windows) != len(y_hat_windows):
        raise ValueError(f"window counts differ: {len(y_obs_windows)} vs {len(y_hat_windows)}")
    obs_arrays = [np.asarray(o, dtype=np.float64).reshape(-1) for o in y_obs_windows]
    overall_std = float(np.std(np.concatenate(obs_arrays))) if obs_arrays else 0.0
    floor = flat_std_tol * overall_std
    scores = []
    skipped = 0
    all_obs = []
    all_hat = []
    for obs, hat in zip(obs_arrays, y_hat_windows):
        if float(np.std(obs)) <= floor:
            skipped += 1
            continue
        scores.append(nse(obs, hat))
        all_obs.append(obs)
        all_hat.append(np.asarray(hat).reshape(-1))
    if not scores:
        raise UndefinedNseError(f"no scorable windows ({skipped} skipped as flat)")
    pooled = nse(np.concatenate(all_obs), np.concatenate(all_hat))
    return WindowedNse(value=float(np.mean(scores)), pooled=pooled, n_windows=len(scores), n_skipped=skipped)


def runoff_ratio(series: BasinSeries, start=None, end=None, precip_name: str = "precip") -> float:
    """Total flow over total precipitation in (start, end]."""
    if precip_name not in series.driver_names:
        raise ValueError(f"{series.basin_id}: no driver column {precip_name!r}")
    mask = series.range_mask(start, end)
    precip = float(series.drivers[mask, series.driver_names.index(precip_name)].sum())
    if precip <= 0.0:
        raise ValueError(f"{series.basin_id}: no precipitation in range")
    return float(series.response[mask].sum()) / precip


# ---------------------------------------------------------------------------
# State trajectories


def state_rows(state: LatentState):
    """Flatten per-scale trajectories to (scale, step, original index, mean
    hidden value) rows; the mean runs over the hidden dimensions of the
    direction-summed vector."""
    rows = []
    for scale in ("fast", "medium", "slow"):
        if scale not in state.trajectories:
            continue
        traj = state.trajectories[scale]
        orig = state.original_indices[scale]
        means = traj.mean(axis=1)  # (steps, B)
        for step in range(traj.shape[0]):
            rows.append((scale, step, int(orig[step]), float(means[step, 0])))
    return rows


def export_states(state: LatentState, path) -> None:
    rows = state_rows(state)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "step_index", "original_time_index", "mean_hidden_value"])
        for scale, step, orig, value in rows:
            writer.writerow([scale, step, orig, repr(value)])


# ---------------------------------------------------------------------------
# Evaluation report


@dataclass
class BasinEval:
    basin_id: str
    horizon: int
    n_windows: int
    n_skipped: int
    nse_windowed: float
    nse_pooled: float
    runoff_ratio: float


@dataclass
class EvalReport:
    rows: list[BasinEval]
    mean_nse: float
    median_nse: float
    mean_pooled: float
    median_pooled: float


def summarize(rows: list[BasinEval]) -> EvalReport:
    if not rows:
        raise ValueError("cannot summarize an empty result set")
    win = [r.nse_windowed for r in rows]
    pooled = [r.nse_pooled for r in rows]
    return EvalReport(
        rows=list(rows),
        mean_nse=float(np.mean(win)),
        median_nse=float(np.median(win)),
        mean_pooled=float(np.mean(pooled)),
        median_pooled=float(np.median(pooled)),
    )


_REPORT_HEADER = ["basin_id", "horizon", "n_windows", "n_skipped", "nse_windowed", "nse_pooled", "runoff_ratio"]


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REPORT_HEADER)
        for r in report.rows:
            writer.writerow(
                [r.basin_id, r.horizon, r.n_windows, r.n_skipped, repr(r.nse_windowed), repr(r.nse_pooled), repr(r.runoff_ratio)]
            )
        horizon = report.rows[0].horizon
        n_win = sum(r.n_windows for r in report.rows)
        n_skip = sum(r.n_skipped for r in report.rows)
        ratios = [r.runoff_ratio for r in report.rows]
        writer.writerow(
            ["__mean__", horizon, n_win, n_skip, repr(report.mean_nse), repr(report.mean_pooled), repr(float(np.mean(ratios)))]
        )
        writer.writerow(
            ["__median__", horizon, n_win, n_skip, repr(report.median_nse), repr(report.median_pooled), repr(float(np.median(ratios)))]
        )


def read_report(path) -> EvalReport:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _REPORT_HEADER:
            raise ValueError(f"{path}: unexpected report header {header}")
        for rec in reader:
            if rec[0] in ("__mean__", "__median__"):
                continue
            rows.append(
                BasinEval(
                    basin_id=rec[0],
                    horizon=int(rec[1]),
                    n_windows=int(rec[2]),
                    n_skipped=int(rec[3]),
                    nse_windowed=float(rec[4]),
                    nse_pooled=float(rec[5]),
                    runoff_ratio=float(rec[6]),
                )
            )
    return summarize(rows)


def spearman_rank_correlation(a, b) -> float:
    """Rank correlation without a scipy dependency; average ranks on ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length 1-D arrays of length >= 2")

    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(1, len(x) + 1, dtype=np.float64)
        # average ranks over ties
        for val in np.unique(x):
            mask = x == val
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(np.sum(ra**2)) * float(np.sum(rb**2)))
    if denom == 0.0:
        return 0.0
    return float(np.sum(ra * rb)) / denom

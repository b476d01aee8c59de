"""Optimization loops: local per-basin training, pooled multi-basin (global)
training with one-hot basin codes, pretraining on simulated flow, and
fine-tuning from a pretrained checkpoint, plus seed ensembles.

Determinism contract: (seed, config, data) fully determine every reported
number.  Weight initialization draws from a generator keyed on [seed, 1]
and batch shuffling from an independent generator keyed on [seed, 2], so
data order and initialization vary independently across ensemble members.
Early stopping always restores the best-validation checkpoint.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    BasinSeries,
    DataError,
    NormStats,
    SplitSpec,
    apply_norm,
    fit_norm,
    invert_norm,
    make_windows,
    stack_windows,
    windows_in_range,
    with_one_hot,
)
from .metrics import BasinEval, UndefinedNseError, WindowedNse, runoff_ratio, windowed_nse
from .model import Forecaster, ModelConfig, build_forecaster
from .numerics import AdamState, adam_step, clip_global_norm

log = logging.getLogger("fhnn")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    grad_clip: float = 1.0
    teacher_forcing: bool = False
    train_stride: int = 1
    eval_stride: int = 1
    stop_at_val_nse: float | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("need lr > 0, batch_size >= 1, patience >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_nse: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def epochs_run(self) -> int:
        return len(self.train_loss)


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_nse,wall_time_s,is_best\n")
        for i, (loss, v, w) in enumerate(zip(history.train_loss, history.val_nse, history.wall_time)):
            fh.write(f"{i},{loss!r},{v!r},{w:.3f},{int(i == history.best_epoch)}\n")


@dataclass
class PreparedBasin:
    """A basin readied for one training/evaluation run: raw series for
    physical-unit metrics, normalized (and possibly one-hot-tagged) series
    for the model, and the fitted stats to invert predictions."""

    raw: BasinSeries
    norm: BasinSeries
    stats: NormStats
    basin_index: int = 0


def prepare_local(series: BasinSeries, split: SplitSpec, train_start=None) -> PreparedBasin:
    stats = fit_norm(series, split, train_start)
    return PreparedBasin(raw=series, norm=apply_norm(series, stats), stats=stats)


def prepare_global(series_list: list[BasinSeries], split: SplitSpec, train_start=None) -> list[PreparedBasin]:
    n = len(series_list)
    prepared = []
    for i, series in enumerate(series_list):
        stats = fit_norm(series, split, train_start)
        tagged = with_one_hot(apply_norm(series, stats), i, n)
        prepared.append(PreparedBasin(raw=series, norm=tagged, stats=stats, basin_index=i))
    return prepared


# ---------------------------------------------------------------------------
# Prediction / scoring helpers


def predict_windows(fc: Forecaster, windows, batch_size: int = 128) -> np.ndarray:
    """Free-running predictions for a window list, shape (n_windows, K),
    in the model's (normalized) units."""
    was_tf = getattr(fc, "teacher_forcing", False)
    if was_tf:
        fc.teacher_forcing = False
    try:
        chunks = []
        for lo in range(0, len(windows), batch_size):
            xh, yh, xf, _ = stack_windows(windows[lo : lo + batch_size])
            y_hat = fc.predict_batch(xh, yh, xf)  # (K, 1, B)
            chunks.append(y_hat[:, 0, :].T)
        return np.concatenate(chunks, axis=0)
    finally:
        if was_tf:
            fc.teacher_forcing = True


def score_windows(fc: Forecaster, windows, stats: NormStats, batch_size: int = 128) -> WindowedNse:
    """Window-averaged NSE of de-normalized predictions against observations."""
    preds = predict_windows(fc, windows, batch_size)
    y_obs = [invert_norm(w.y_fcst[:, 0], stats) for w in windows]
    y_hat = [invert_norm(preds[i], stats) for i in range(len(windows))]
    return windowed_nse(y_obs, y_hat)


def _median_val_nse(fc: Forecaster, val_groups, batch_size: int = 128):
    """Median windowed NSE across basin groups; returns (median, per_group).
    Groups with no scorable windows contribute nothing."""
    values = {}
    for key, windows, stats in val_groups:
        if not windows:
            continue
        try:
            values[key] = score_windows(fc, windows, stats, batch_size).value
        except UndefinedNseError:
            continue
    if not values:
        return None, values
    return float(np.median(list(values.values()))), values


# ---------------------------------------------------------------------------
# Core fit loop


@dataclass
class TrainResult:
    forecaster: Forecaster
    history: TrainHistory
    prepared: list[PreparedBasin]
    val_nse: float | None = None
    per_basin_val_nse: dict | None = None


def fit(fc: Forecaster, train_windows, val_groups, cfg: TrainConfig) -> tuple[TrainHistory, float | None, dict]:
    """Mini-batch Adam over shuffled training windows with early stopping on
    the median validation NSE (falls back to train loss when no validation
    group is scorable).  Restores the best checkpoint before returning."""
    if not train_windows:
        raise DataError("no training windows")
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    adam = AdamState(lr=cfg.lr)
    history = TrainHistory()
    best_key = -math.inf
    best_values = fc.params.copy_values()
    best_val = None
    best_per_basin: dict = {}
    n = len(train_windows)
    if hasattr(fc, "teacher_forcing"):
        fc.teacher_forcing = cfg.teacher_forcing

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = [train_windows[j] for j in order[lo : lo + cfg.batch_size]]
            xh, yh, xf, yf = stack_windows(batch)
            fc.params.zero_grads()
            loss = fc.loss_and_grads(xh, yh, xf, yf)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, bi)
            clip_global_norm(fc.params, cfg.grad_clip)
            adam_step(fc.params, adam)
            epoch_loss += loss * len(batch)
        epoch_loss /= n

        if hasattr(fc, "teacher_forcing"):
            fc.teacher_forcing = False
        val, per_basin = _median_val_nse(fc, val_groups)
        if hasattr(fc, "teacher_forcing"):
            fc.teacher_forcing = cfg.teacher_forcing

        history.train_loss.append(epoch_loss)
        history.val_nse.append(math.nan if val is None else val)
        history.wall_time.append(time.perf_counter() - t0)

        key = val if val is not None else -epoch_loss
        if key > best_key:
            best_key = key
            best_values = fc.params.copy_values()
            best_val = val
            best_per_basin = per_basin
            history.best_epoch = epoch
        if cfg.stop_at_val_nse is not None and val is not None and val >= cfg.stop_at_val_nse:
            break
        if epoch - history.best_epoch >= cfg.patience:
            break

    fc.params.load_values(best_values)
    if hasattr(fc, "teacher_forcing"):
        fc.teacher_forcing = False
    return history, best_val, best_per_basin


def _val_group(prepared: PreparedBasin, split: SplitSpec, model_cfg: ModelConfig, stride: int):
    wins = make_windows(prepared.norm, model_cfg.t_in, model_cfg.k_fcst, stride, prepared.basin_index)
    return (
        prepared.raw.basin_id,
        windows_in_range(wins, split.train_end, split.val_end),
        prepared.stats,
    )


def _train_windows(prepared: PreparedBasin, split: SplitSpec, model_cfg: ModelConfig, stride: int, train_start):
    wins = make_windows(prepared.norm, model_cfg.t_in, model_cfg.k_fcst, stride, prepared.basin_index)
    return windows_in_range(wins, train_start, split.train_end)


# ---------------------------------------------------------------------------
# Training regimes


def train_local(
    series: BasinSeries,
    split: SplitSpec,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_start=None,
    initial: Forecaster | None = None,
) -> TrainResult:
    """Single-basin training (the per-entity objective); optionally continues
    from an existing forecaster's weights (used by fine-tuning)."""
    prepared = prepare_local(series, split, train_start)
    if model_cfg.d_x != prepared.norm.d_x:
        raise DataError(f"model expects d_x={model_cfg.d_x} but data has {prepared.norm.d_x} drivers")
    fc = build_forecaster(model_cfg, seed=cfg.seed)
    if initial is not None:
        if initial.config.to_dict() != model_cfg.to_dict():
            raise DataError("checkpoint configuration does not match the requested model")
        fc.params.load_values(initial.params.copy_values())
    train_wins = _train_windows(prepared, split, model_cfg, cfg.train_stride, train_start)
    val_groups = [_val_group(prepared, split, model_cfg, cfg.eval_stride)]
    history, best_val, per_basin = fit(fc, train_wins, val_groups, cfg)
    return TrainResult(fc, history, [prepared], best_val, per_basin)


def train_global(
    series_list: list[BasinSeries],
    split: SplitSpec,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_start=None,
    initial: Forecaster | None = None,
) -> TrainResult:
    """One parameter set over the pooled window stream of all basins, each
    identified by a one-hot driver block; early stopping on the median
    per-basin validation NSE."""
    if not series_list:
        raise DataError("global training needs at least one basin")
    n = len(series_list)
    prepared = prepare_global(series_list, split, train_start)
    base_d_x = series_list[0].d_x
    want = base_d_x + n
    if model_cfg.d_x == base_d_x:
        model_cfg = replace(model_cfg, d_x=want)
    if model_cfg.d_x != want:
        raise DataError(f"global model needs d_x={want} (base {base_d_x} + {n} basins), got {model_cfg.d_x}")
    fc = build_forecaster(model_cfg, seed=cfg.seed)
    _zero_one_hot_columns(fc, base_d_x, n)
    if initial is not None:
        fc.params.load_values(initial.params.copy_values())

    pooled = []
    for p in prepared:
        wins = _train_windows(p, split, model_cfg, cfg.train_stride, train_start)
        if not wins:
            log.warning("basin %s has no training windows; excluded from the pool", p.raw.basin_id)
            continue
        pooled.extend(wins)
    val_groups = [_val_group(p, split, model_cfg, cfg.eval_stride) for p in prepared]
    history, best_val, per_basin = fit(fc, pooled, val_groups, cfg)
    return TrainResult(fc, history, prepared, best_val, per_basin)


def _zero_one_hot_columns(fc: Forecaster, base_d_x: int, n_basins: int) -> None:
    """Basin-embedding columns start at zero so pooled training begins
    basin-agnostic (and twin basins stay exactly symmetric under full-batch
    updates)."""
    for name in ("fast.fwd.w_ih", "fast.bwd.w_ih", "decoder.w_ih", "lstm.w_ih", "lstm_ar.w_ih"):
        if name in fc.params:
            fc.params[name].value[:, base_d_x : base_d_x + n_basins] = 0.0


def pretrain_sim(
    series: BasinSeries,
    split: SplitSpec,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_start=None,
) -> TrainResult:
    """Same loop as local training with the simulated flow substituted for
    the observed response, in both the encoder input and the loss target
    (validation therefore scores against the simulated flow too)."""
    if series.sim_response is None:
        raise DataError(f"{series.basin_id}: no sim_response column; cannot pretrain")
    swapped = series.with_response(series.sim_response.copy())
    return train_local(swapped, split, model_cfg, cfg, train_start)


def finetune(
    pretrained: Forecaster,
    series: BasinSeries,
    split: SplitSpec,
    cfg: TrainConfig,
    train_start=None,
) -> TrainResult:
    """Continue optimization from a checkpoint on observed data with a fresh
    Adam state (the pretraining moments target a different objective)."""
    return train_local(series, split, pretrained.config, cfg, train_start, initial=pretrained)


# ---------------------------------------------------------------------------
# Ensembles


def train_ensemble(k: int, train_fn, base_seed: int) -> list[TrainResult]:
    """k independent runs with seeds base_seed..base_seed+k-1; a diverged
    member is dropped as long as at least ceil(k/2) members survive."""
    if k < 1:
        raise ValueError(f"ensemble size must be >= 1, got {k}")
    results = []
    failures = 0
    for i in range(k):
        try:
            results.append(train_fn(base_seed + i))
        except TrainingDiverged as exc:
            failures += 1
            log.warning("ensemble member %d diverged: %s", i, exc)
    if len(results) < math.ceil(k / 2):
        raise TrainingDiverged(-1, -1)
    return results


def predict_ensemble(members: list[Forecaster], windows, stats: NormStats, batch_size: int = 128) -> np.ndarray:
    """Arithmetic mean of the members' de-normalized predictions, (n, K)."""
    if not members:
        raise ValueError("empty ensemble")
    total = None
    for fc in members:
        pred = invert_norm(predict_windows(fc, windows, batch_size), stats)
        total = pred if total is None else total + pred
    return total / len(members)


def evaluate_ensemble(
    members: list[Forecaster],
    prepared: PreparedBasin,
    split: SplitSpec,
    range_name: str = "test",
    eval_stride: int = 1,
    batch_size: int = 128,
) -> BasinEval:
    """Windowed/pooled NSE of the ensemble-mean prediction on one basin's
    chosen evaluation range, plus the basin's runoff ratio over that range."""
    bounds = {
        "train": (None, split.train_end),
        "val": (split.train_end, split.val_end),
        "test": (split.val_end, split.test_end),
    }
    if range_name not in bounds:
        raise ValueError(f"unknown evaluation range {range_name!r}")
    lo, hi = bounds[range_name]
    cfg = members[0].config
    wins = windows_in_range(
        make_windows(prepared.norm, cfg.t_in, cfg.k_fcst, eval_stride, prepared.basin_index), lo, hi
    )
    if not wins:
        raise DataError(f"{prepared.raw.basin_id}: no {range_name} windows to evaluate")
    preds = predict_ensemble(members, wins, prepared.stats, batch_size)
    y_obs = [invert_norm(w.y_fcst[:, 0], prepared.stats) for w in wins]
    res = windowed_nse(y_obs, [preds[i] for i in range(len(wins))])
    ratio = runoff_ratio(prepared.raw, lo, hi)
    return BasinEval(
        basin_id=prepared.raw.basin_id,
        horizon=cfg.k_fcst,
        n_windows=res.n_windows,
        n_skipped=res.n_skipped,
        nse_windowed=res.value,
        nse_pooled=res.pooled,
        runoff_ratio=ratio,
    )


# ---------------------------------------------------------------------------
# Worker-pool helper (outermost loops only; results keep submission order)


def parallel_map(fn, items, threads: int = 1) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))

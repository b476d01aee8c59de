"""Basin time-series ingestion, normalization, chronological splits, and
sliding-window construction.

CSV schema (UTF-8, comma separated, header mandatory):
``timestamp,<driver_1>,...,<driver_k>,flow[,sim_flow]`` with ISO-8601
timestamps on a strictly uniform step.  A dataset manifest is a flat
``key = value`` file carrying the split dates and one ``basin.<id>`` entry
per CSV (simulator manifests add ``ratio.*`` / ``truth.*`` / ``sim.*``
records, which the loader tolerates).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np


class DataError(ValueError):
    """Malformed input data (CSV, manifest, or split specification)."""


@dataclass
class BasinSeries:
    """One basin's aligned drivers and response on a uniform time step."""

    basin_id: str
    timestamps: np.ndarray  # (N,) datetime64[s], strictly increasing, uniform
    driver_names: list[str]
    drivers: np.ndarray  # (N, d_x)
    response: np.ndarray  # (N,)
    sim_response: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.timestamps)
        if self.drivers.shape != (n, len(self.driver_names)):
            raise DataError(
                f"{self.basin_id}: drivers shape {self.drivers.shape} != ({n}, {len(self.driver_names)})"
            )
        if self.response.shape != (n,):
            raise DataError(f"{self.basin_id}: response length {self.response.shape} != {n}")
        if self.sim_response is not None and self.sim_response.shape != (n,):
            raise DataError(f"{self.basin_id}: sim_response length mismatch")
        if n >= 2:
            steps = np.diff(self.timestamps)
            if steps[0] <= np.timedelta64(0, "s") or not np.all(steps == steps[0]):
                bad = int(np.argmax(steps != steps[0])) + 1
                raise DataError(f"{self.basin_id}: non-uniform time step at index {bad}")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def d_x(self) -> int:
        return self.drivers.shape[1]

    def range_mask(self, start=None, end=None) -> np.ndarray:
        """Boolean mask for timestamps in (start, end]."""
        mask = np.ones(len(self), dtype=bool)
        if start is not None:
            mask &= self.timestamps > np.datetime64(start, "s")
        if end is not None:
            mask &= self.timestamps <= np.datetime64(end, "s")
        return mask

    def with_response(self, response: np.ndarray, keep_sim: bool = False) -> "BasinSeries":
        return replace(self, response=response, sim_response=self.sim_response if keep_sim else None)


@dataclass
class SplitSpec:
    """Chronological boundaries: train ends at train_end, validation at
    val_end, test at test_end (each range is half-open on the left)."""

    train_end: np.datetime64
    val_end: np.datetime64
    test_end: np.datetime64

    def __post_init__(self):
        self.train_end = np.datetime64(self.train_end, "s")
        self.val_end = np.datetime64(self.val_end, "s")
        self.test_end = np.datetime64(self.test_end, "s")
        if not (self.train_end < self.val_end < self.test_end):
            raise DataError(
                f"split boundaries must be ordered: {self.train_end} < {self.val_end} < {self.test_end}"
            )


# ---------------------------------------------------------------------------
# CSV ingestion / emission


def _parse_timestamp(field: str, row_num: int) -> np.datetime64:
    try:
        return np.datetime64(field.strip(), "s")
    except ValueError:
        raise DataError(f"row {row_num}: bad timestamp {field!r}") from None


def ingest_csv(path, basin_id: str | None = None) -> BasinSeries:
    """Parse one basin CSV.  Column order is fixed: timestamp, drivers...,
    flow, then optionally sim_flow."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "timestamp":
            raise DataError(f"{path}: first column must be 'timestamp', got {header[:1]}")
        if "flow" not in header:
            raise DataError(f"{path}: missing required column 'flow'")
        flow_idx = header.index("flow")
        has_sim = header[-1] == "sim_flow"
        if has_sim and flow_idx != len(header) - 2:
            raise DataError(f"{path}: 'flow' must immediately precede 'sim_flow'")
        if not has_sim and flow_idx != len(header) - 1:
            raise DataError(f"{path}: 'flow' must be the last column (or followed only by 'sim_flow')")
        driver_names = header[1:flow_idx]
        if not driver_names:
            raise DataError(f"{path}: no driver columns between 'timestamp' and 'flow'")

        ts, rows = [], []
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_num}: expected {len(header)} fields, got {len(row)}")
            ts.append(_parse_timestamp(row[0], row_num))
            vals = []
            for col, field in zip(header[1:], row[1:]):
                try:
                    v = float(field)
                except ValueError:
                    raise DataError(f"{path}: row {row_num}: non-numeric value {field!r} in column {col!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}: row {row_num}: non-finite value in column {col!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    timestamps = np.array(ts, dtype="datetime64[s]")
    steps = np.diff(timestamps)
    if len(steps) and (steps[0] <= np.timedelta64(0, "s") or not np.all(steps == steps[0])):
        bad = int(np.argmax(steps != steps[0])) if np.any(steps != steps[0]) else 0
        raise DataError(f"{path}: non-uniform timestamp step at row {bad + 3}")
    table = np.array(rows, dtype=np.float64)
    if basin_id is None:
        basin_id = os.path.splitext(os.path.basename(path))[0]
    return BasinSeries(
        basin_id=basin_id,
        timestamps=timestamps,
        driver_names=driver_names,
        drivers=table[:, : len(driver_names)],
        response=table[:, len(driver_names)],
        sim_response=table[:, len(driver_names) + 1] if has_sim else None,
    )


def write_csv(series: BasinSeries, path) -> None:
    header = ["timestamp"] + series.driver_names + ["flow"]
    if series.sim_response is not None:
        header.append("sim_flow")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        stamps = np.datetime_as_string(series.timestamps, unit="s")
        for i in range(len(series)):
            row = [stamps[i]]
            row += [f"{v:.12g}" for v in series.drivers[i]]
            row.append(f"{series.response[i]:.12g}")
            if series.sim_response is not None:
                row.append(f"{series.sim_response[i]:.12g}")
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormStats:
    """Per-feature z-score statistics fitted on the training range only.
    Features with zero variance are flagged constant and passed through."""

    driver_mean: np.ndarray
    driver_std: np.ndarray
    driver_const: np.ndarray  # bool per driver
    resp_mean: float
    resp_std: float
    resp_const: bool


def fit_norm(series: BasinSeries, split: SplitSpec, train_start=None) -> NormStats:
    mask = series.range_mask(train_start, split.train_end)
    if not np.any(mask):
        raise DataError(f"{series.basin_id}: empty training range for normalization")
    drv = series.drivers[mask]
    resp = series.response[mask]
    d_mean = drv.mean(axis=0)
    d_std = drv.std(axis=0)
    d_const = d_std <= 0.0
    r_mean = float(resp.mean())
    r_std = float(resp.std())
    r_const = r_std <= 0.0
    return NormStats(
        driver_mean=np.where(d_const, 0.0, d_mean),
        driver_std=np.where(d_const, 1.0, d_std),
        driver_const=d_const,
        resp_mean=0.0 if r_const else r_mean,
        resp_std=1.0 if r_const else r_std,
        resp_const=r_const,
    )


def apply_norm(series: BasinSeries, stats: NormStats) -> BasinSeries:
    drivers = (series.drivers - stats.driver_mean) / stats.driver_std
    response = (series.response - stats.resp_mean) / stats.resp_std
    return replace(series, drivers=drivers, response=response)


def invert_norm(y_norm: np.ndarray, stats: NormStats) -> np.ndarray:
    return y_norm * stats.resp_std + stats.resp_mean


# ---------------------------------------------------------------------------
# Windows


@dataclass
class Window:
    """One training/evaluation sample: T history steps plus K horizon steps.
    Arrays are views into the parent series."""

    basin_id: str
    basin_index: int
    x_hist: np.ndarray  # (T, d_x)
    y_hist: np.ndarray  # (T, 1)
    x_fcst: np.ndarray  # (K, d_x)
    y_fcst: np.ndarray  # (K, 1)
    t_start: np.datetime64
    fcst_start: np.datetime64
    fcst_end: np.datetime64


def window_count(n_steps: int, t_in: int, k_fcst: int, stride: int) -> int:
    if n_steps < t_in + k_fcst:
        return 0
    return (n_steps - (t_in + k_fcst)) // stride + 1


def make_windows(series: BasinSeries, t_in: int, k_fcst: int, stride: int = 1, basin_index: int = 0) -> list[Window]:
    """All sliding windows at the given stride, oldest first."""
    n = len(series)
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if n < t_in + k_fcst:
        raise DataError(f"{series.basin_id}: series length {n} < window span {t_in + k_fcst}")
    y2d = series.response[:, None]
    out = []
    for start in range(0, n - (t_in + k_fcst) + 1, stride):
        mid = start + t_in
        end = mid + k_fcst
        out.append(
            Window(
                basin_id=series.basin_id,
                basin_index=basin_index,
                x_hist=series.drivers[start:mid],
                y_hist=y2d[start:mid],
                x_fcst=series.drivers[mid:end],
                y_fcst=y2d[mid:end],
                t_start=series.timestamps[start],
                fcst_start=series.timestamps[mid],
                fcst_end=series.timestamps[end - 1],
            )
        )
    return out


def windows_in_range(windows: list[Window], start=None, end=None) -> list[Window]:
    """Windows whose full forecast range lies in (start, end].  History may
    reach back into the preceding range; only forecast steps decide split
    membership, so no forecast target ever crosses a boundary."""
    out = []
    start = None if start is None else np.datetime64(start, "s")
    end = None if end is None else np.datetime64(end, "s")
    for w in windows:
        if start is not None and w.fcst_start <= start:
            continue
        if end is not None and w.fcst_end > end:
            continue
        out.append(w)
    return out


def split_windows(windows: list[Window], split: SplitSpec, train_start=None) -> dict[str, list[Window]]:
    return {
        "train": windows_in_range(windows, train_start, split.train_end),
        "val": windows_in_range(windows, split.train_end, split.val_end),
        "test": windows_in_range(windows, split.val_end, split.test_end),
    }


def stack_windows(windows: list[Window]):
    """Stack windows along a trailing batch axis: (T, d, B) / (K, d, B)."""
    if not windows:
        raise DataError("cannot stack an empty window list")
    x_hist = np.stack([w.x_hist for w in windows], axis=2)
    y_hist = np.stack([w.y_hist for w in windows], axis=2)
    x_fcst = np.stack([w.x_fcst for w in windows], axis=2)
    y_fcst = np.stack([w.y_fcst for w in windows], axis=2)
    return x_hist, y_hist, x_fcst, y_fcst


# ---------------------------------------------------------------------------
# Global-model basin encoding


def one_hot_basin(index: int, n_basins: int) -> np.ndarray:
    if not (0 <= index < n_basins):
        raise DataError(f"basin index {index} out of range [0, {n_basins})")
    v = np.zeros(n_basins)
    v[index] = 1.0
    return v


def with_one_hot(series: BasinSeries, index: int, n_basins: int) -> BasinSeries:
    """Append the basin's one-hot code to every driver step (history and
    forecast alike), raising d_x by n_basins."""
    code = one_hot_basin(index, n_basins)
    block = np.broadcast_to(code, (len(series), n_basins))
    return replace(
        series,
        drivers=np.concatenate([series.drivers, block], axis=1),
        driver_names=series.driver_names + [f"basin_{j}" for j in range(n_basins)],
    )


# ---------------------------------------------------------------------------
# Manifest files


_MANIFEST_SCALAR_KEYS = {"train_end", "val_end", "test_end", "step_hours", "seed", "regime", "years"}
_MANIFEST_PREFIXES = ("basin.", "ratio.", "truth.", "sim.")


def parse_kv_file(path) -> list[tuple[int, str, str]]:
    """Read a flat ``key = value`` file; returns (line_number, key, value)."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_num, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {line_num}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            entries.append((line_num, key.strip(), value.strip()))
    return entries


def load_manifest(path):
    """Parse a dataset manifest.  Returns (basins, split, extras) where
    basins is an ordered {basin_id: absolute csv path} map."""
    base = os.path.dirname(os.path.abspath(path))
    basins: dict[str, str] = {}
    scalars: dict[str, str] = {}
    extras: dict[str, str] = {}
    for line_num, key, value in parse_kv_file(path):
        if key in _MANIFEST_SCALAR_KEYS:
            scalars[key] = value
        elif key.startswith("basin."):
            bid = key[len("basin.") :]
            if bid in basins:
                raise DataError(f"{path}: line {line_num}: duplicate basin {bid!r}")
            basins[bid] = value if os.path.isabs(value) else os.path.join(base, value)
        elif key.startswith(_MANIFEST_PREFIXES):
            extras[key] = value
        else:
            raise DataError(f"{path}: line {line_num}: unknown manifest key {key!r}")
    for want in ("train_end", "val_end", "test_end"):
        if want not in scalars:
            raise DataError(f"{path}: missing required key {want!r}")
    if not basins:
        raise DataError(f"{path}: no basin entries")
    split = SplitSpec(scalars["train_end"], scalars["val_end"], scalars["test_end"])
    extras.update({k: v for k, v in scalars.items() if k not in ("train_end", "val_end", "test_end")})
    return basins, split, extras


def load_basins(path) -> tuple[list[BasinSeries], SplitSpec, dict]:
    basins, split, extras = load_manifest(path)
    series = [ingest_csv(csv_path, basin_id=bid) for bid, csv_path in basins.items()]
    return series, split, extras


def write_manifest(path, basin_paths: dict[str, str], split: SplitSpec, extras: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"train_end = {np.datetime_as_string(split.train_end, unit='s')}\n")
        fh.write(f"val_end = {np.datetime_as_string(split.val_end, unit='s')}\n")
        fh.write(f"test_end = {np.datetime_as_string(split.test_end, unit='s')}\n")
        for key, value in (extras or {}).items():
            fh.write(f"{key} = {value}\n")
        for bid, rel in basin_paths.items():
            fh.write(f"basin.{bid} = {rel}\n")

"""Signal pipeline: CSV IO, smoothing, differencing, scaling, splits, windows.

Differences are aligned with the sample they lead into: the diff row at time
``t`` is ``x[t] - x[t-1]`` (the forward difference taken at ``t-1``).  With
that alignment a window ending before ``t`` sees diffs up to ``t-1`` only,
and the targets of a forecast made at ``t`` are diff rows ``t .. t+h-1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .graph import HeteroGraph, NodeType


@dataclass(frozen=True)
class SignalFrame:
    """Time-indexed sensor matrix ``X`` and control matrix ``U``.

    ``timestamps`` are POSIX seconds (UTC).  ``sampling`` holds the native
    sampling period ``S_j`` (in samples) of every sensor channel.
    """

    timestamps: np.ndarray
    X: np.ndarray
    U: np.ndarray
    sensor_names: tuple[str, ...]
    control_names: tuple[str, ...] = ()
    sampling: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.X.ndim != 2 or self.U.ndim != 2:
            raise UsageError("X and U must be matrices")
        if self.X.shape[0] != len(self.timestamps) or self.U.shape[0] != len(self.timestamps):
            raise UsageError("X, U and timestamps must share their length")
        if self.X.shape[1] != len(self.sensor_names) or self.U.shape[1] != len(self.control_names):
            raise UsageError("channel names do not match matrix widths")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def dt(self) -> float:
        if len(self.timestamps) < 2:
            return 1.0
        return float(self.timestamps[1] - self.timestamps[0])

    def rows(self, start: int, stop: int) -> "SignalFrame":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            X=self.X[start:stop],
            U=self.U[start:stop],
        )


# ------------------------------------------------------------------ CSV IO


def parse_timestamp(text: str) -> float:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(ts: float) -> str:
    dt = datetime.fromtimestamp(float(ts), tz=timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def write_csv(path, timestamps: Sequence[float], names: Sequence[str], data: np.ndarray) -> None:
    """Write the telemetry CSV; floats use ``repr`` so reloads are exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["timestamp", *names])
        for ts, row in zip(timestamps, data):
            wr.writerow([format_timestamp(ts), *(repr(float(v)) for v in row)])


def read_csv(path) -> tuple[np.ndarray, list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise UsageError(f"{path}: empty CSV") from None
        if len(header) < 2:
            raise UsageError(f"{path}: header needs a timestamp and at least one channel")
        stamps: list[float] = []
        rows: list[list[float]] = []
        for line_no, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise UsageError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                stamps.append(parse_timestamp(row[0]))
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise UsageError(f"{path}:{line_no}: {exc}") from None
            if any(not math.isfinite(v) for v in vals):
                raise UsageError(f"{path}:{line_no}: missing or non-finite value")
            rows.append(vals)
    ts = np.asarray(stamps)
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    check_timestamps(ts)
    return ts, header[1:], data


def check_timestamps(ts: np.ndarray) -> None:
    if ts.size < 2:
        return
    step = np.diff(ts)
    if np.any(step <= 0):
        raise UsageError("timestamps must be strictly increasing")
    if np.max(np.abs(step - step[0])) > 1e-6 * max(1.0, abs(step[0])):
        raise UsageError("timestamps must have a constant step (gaps are not supported)")


def frame_from_table(
    timestamps: np.ndarray,
    names: Sequence[str],
    data: np.ndarray,
    graph: HeteroGraph,
    sampling: Optional[dict[str, int]] = None,
) -> SignalFrame:
    """Split CSV columns into sensors and controls according to the graph."""
    sensor_cols = graph.sensor_columns()
    control_cols = graph.control_columns()
    width = data.shape[1]
    for c in sensor_cols + control_cols:
        if c >= width:
            raise UsageError(f"graph references data column {c}, CSV has {width}")
    s_names = tuple(names[c] for c in sensor_cols)
    periods = None
    if sampling:
        periods = tuple(int(sampling.get(n, 1)) for n in s_names)
    return SignalFrame(
        np.asarray(timestamps, dtype=np.float64),
        data[:, sensor_cols].copy(),
        data[:, control_cols].copy() if control_cols else np.zeros((len(timestamps), 0)),
        s_names,
        tuple(names[c] for c in control_cols),
        periods,
    )


# ----------------------------------------------------------- transformations


def moving_average_smooth(frame: SignalFrame, periods: Optional[Sequence[int]] = None) -> SignalFrame:
    """Trailing mean over each channel's last ``S_j`` samples.

    The first ``S_j - 1`` rows average over the history that exists.
    """
    periods = periods if periods is not None else frame.sampling
    if periods is None:
        return frame
    periods = [int(p) for p in periods]
    if len(periods) != frame.X.shape[1]:
        raise ConfigError("one sampling period per sensor channel is required")
    if any(p < 1 for p in periods):
        raise ConfigError("sampling periods must be >= 1")
    X = frame.X.copy()
    for j, p in enumerate(periods):
        if p == 1:
            continue
        x = frame.X[:, j]
        padded = np.concatenate([np.full(p - 1, np.nan), x])
        win = np.lib.stride_tricks.sliding_window_view(padded, p)
        # offsets from the current value keep constant stretches bit-exact
        dev = win - x[:, None]
        X[:, j] = x + np.nansum(dev, axis=1) / np.sum(~np.isnan(dev), axis=1)
    return replace(frame, X=X)


def forward_diff(x: np.ndarray, dt: float = 1.0) -> np.ndarray:
    """Row ``t`` is ``(x[t+1] - x[t]) / dt``; output is one row shorter."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise UsageError("forward_diff needs at least two rows")
    return (x[1:] - x[:-1]) / dt


def chronological_split(frame: SignalFrame, fractions=(0.7, 0.15, 0.15)):
    """Contiguous train/val/test split; train and val are floored, test takes the rest."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1: {fractions}")
    T = len(frame)
    n_train = int(math.floor(T * fractions[0] + 1e-9))
    n_val = int(math.floor(T * fractions[1] + 1e-9))
    n_test = T - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise UsageError(f"frame of length {T} is too short to split into {fractions}")
    a, b = n_train, n_train + n_val
    return frame.rows(0, a), frame.rows(a, b), frame.rows(b, T)


def time_encodings(timestamps: np.ndarray) -> np.ndarray:
    """Columns sin/cos of time of day and sin/cos of (fractional) day of week."""
    ts = np.asarray(timestamps, dtype=np.float64)
    tod = np.mod(ts, 86400.0)
    # 1970-01-01 was a Thursday: shift so Monday 00:00 is phase zero
    dow = np.mod(ts / 86400.0 + 3.0, 7.0)
    a = 2 * np.pi * tod / 86400.0
    b = 2 * np.pi * dow / 7.0
    return np.column_stack([np.sin(a), np.cos(a), np.sin(b), np.cos(b)])


# ------------------------------------------------------------------- scalers


@dataclass
class ScalerParams:
    """Training-split statistics.

    Values and controls are min-max scaled; their aligned diffs are divided by
    the training std (and shifted by the mean only if ``center_diffs``).
    """

    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    xd_mean: np.ndarray
    xd_std: np.ndarray
    ud_mean: np.ndarray
    ud_std: np.ndarray
    center_diffs: bool = False
    sensor_names: tuple[str, ...] = ()
    control_names: tuple[str, ...] = ()

    @property
    def x_span(self) -> np.ndarray:
        return _safe_span(self.x_min, self.x_max)

    @property
    def u_span(self) -> np.ndarray:
        return _safe_span(self.u_min, self.u_max)

    @property
    def constant_sensors(self) -> list[str]:
        return [n for n, lo, hi in zip(self.sensor_names, self.x_min, self.x_max) if hi == lo]

    @property
    def flat_diff_sensors(self) -> list[str]:
        return [n for n, s in zip(self.sensor_names, self.xd_std) if s == 0]

    def scale_x(self, X: np.ndarray) -> np.ndarray:
        return _minmax(X, self.x_min, self.x_max)

    def unscale_x(self, Xs: np.ndarray, cols=slice(None)) -> np.ndarray:
        lo, hi = self.x_min[cols], self.x_max[cols]
        return np.where(hi > lo, Xs * _safe_span(lo, hi) + lo, Xs - 0.5 + lo)

    def scale_u(self, U: np.ndarray) -> np.ndarray:
        return _minmax(U, self.u_min, self.u_max)

    def z_xd(self, D: np.ndarray) -> np.ndarray:
        return _zscore(D, self.xd_mean, self.xd_std, self.center_diffs)

    def unz_xd(self, Z: np.ndarray, cols=slice(None)) -> np.ndarray:
        std = np.where(self.xd_std[cols] > 0, self.xd_std[cols], 1.0)
        out = Z * std
        if self.center_diffs:
            out = out + self.xd_mean[cols]
        return out

    def z_ud(self, D: np.ndarray) -> np.ndarray:
        return _zscore(D, self.ud_mean, self.ud_std, self.center_diffs)

    # flat key-value serialization; repr() of a float round-trips exactly
    def to_text(self) -> str:
        lines = ["# scaler params v1", f"center_diffs = {int(self.center_diffs)}"]
        for kind, names, fields in (
            ("x", self.sensor_names, ("x_min", "x_max", "xd_mean", "xd_std")),
            ("u", self.control_names, ("u_min", "u_max", "ud_mean", "ud_std")),
        ):
            lines.append(f"{kind}.count = {len(names)}")
            for i, n in enumerate(names):
                lines.append(f"{kind}.{i}.name = {n}")
                for f in fields:
                    lines.append(f"{kind}.{i}.{f} = {float(getattr(self, f)[i])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ScalerParams":
        kv: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad scaler line {raw!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        out: dict = {"center_diffs": bool(int(kv.get("center_diffs", "0")))}
        for kind, fields in (("x", ("x_min", "x_max", "xd_mean", "xd_std")),
                             ("u", ("u_min", "u_max", "ud_mean", "ud_std"))):
            n = int(kv[f"{kind}.count"])
            out["sensor_names" if kind == "x" else "control_names"] = tuple(
                kv[f"{kind}.{i}.name"] for i in range(n)
            )
            for f in fields:
                out[f] = np.array([float(kv[f"{kind}.{i}.{f}"]) for i in range(n)])
        return cls(**out)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ScalerParams":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _safe_span(lo, hi):
    span = hi - lo
    return np.where(span > 0, span, 1.0)


def _minmax(X, lo, hi):
    # constant training channels map to 0.5
    out = (X - lo) / _safe_span(lo, hi)
    return np.where(hi > lo, out, 0.5 + (X - lo))


def _zscore(D, mean, std, center):
    s = np.where(std > 0, std, 1.0)
    return (D - mean) / s if center else D / s


def aligned_diff(Xs: np.ndarray) -> np.ndarray:
    """Row t holds ``Xs[t] - Xs[t-1]``; row 0 is NaN (no predecessor)."""
    out = np.full_like(Xs, np.nan)
    if Xs.shape[0] > 1:
        out[1:] = forward_diff(Xs)
    return out


def fit_scalers(train: SignalFrame, center_diffs: bool = False) -> ScalerParams:
    """Statistics from the training split only."""
    Xs_lo, Xs_hi = train.X.min(axis=0), train.X.max(axis=0)
    if train.U.shape[1]:
        U_lo, U_hi = train.U.min(axis=0), train.U.max(axis=0)
    else:
        U_lo = U_hi = np.zeros(0)
    p = ScalerParams(Xs_lo, Xs_hi, U_lo, U_hi, None, None, None, None, center_diffs,
                     train.sensor_names, train.control_names)
    xd = forward_diff(p.scale_x(train.X))
    p.xd_mean, p.xd_std = xd.mean(axis=0), xd.std(axis=0)
    if train.U.shape[1]:
        ud = forward_diff(p.scale_u(train.U))
        p.ud_mean, p.ud_std = ud.mean(axis=0), ud.std(axis=0)
    else:
        p.ud_mean = p.ud_std = np.zeros(0)
    return p


@dataclass
class ScaledSplit:
    """A split after min-max scaling and diff standardization.

    ``S`` is the model input matrix ``[X, X', U, U']`` (diffs aligned, row 0
    NaN); ``Xs`` keeps the scaled values and ``raw`` the frame they came from.
    """

    raw: SignalFrame
    Xs: np.ndarray
    Us: np.ndarray
    S: np.ndarray
    tenc: np.ndarray

    @property
    def D(self) -> int:
        return self.Xs.shape[1]

    @property
    def K(self) -> int:
        return self.Us.shape[1]

    def __len__(self) -> int:
        return self.Xs.shape[0]


def apply_scalers(frame: SignalFrame, p: ScalerParams) -> ScaledSplit:
    Xs = p.scale_x(frame.X)
    Us = p.scale_u(frame.U) if frame.U.shape[1] else frame.U.copy()
    Xd = p.z_xd(aligned_diff(Xs))
    Ud = p.z_ud(aligned_diff(Us)) if frame.U.shape[1] else Us.copy()
    S = np.hstack([Xs, Xd, Us, Ud])
    return ScaledSplit(frame, Xs, Us, S, time_encodings(frame.timestamps))


def fit_apply_scalers(train: SignalFrame, val: SignalFrame, test: SignalFrame, center_diffs=False):
    p = fit_scalers(train, center_diffs)
    return (apply_scalers(train, p), apply_scalers(val, p), apply_scalers(test, p)), p


# ------------------------------------------------------------------- windows


@dataclass
class WindowSample:
    inputs: np.ndarray  # (w, 2D+2K)
    target_diffs: np.ndarray  # (h, d), standardized
    anchor: np.ndarray  # (d,), scaled value at t-1
    controls: np.ndarray  # (K,), scaled controls at t
    time_enc: np.ndarray  # (4,), encodings at t
    truth: np.ndarray  # (h, d), scaled values t .. t+h-1
    t: int


@dataclass
class WindowSet:
    """All valid forecast origins of one split (``len == T - w - h``)."""

    split: ScaledSplit
    w: int
    h: int
    target_cols: np.ndarray
    starts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise UsageError("w and h must be >= 1")
        T = len(self.split)
        if T < self.w + self.h + 1:
            raise UsageError(f"split of length {T} is too short for w={self.w}, h={self.h}")
        self.target_cols = np.asarray(self.target_cols, dtype=np.int64)
        if self.starts is None:
            self.starts = np.arange(self.w + 1, T - self.h + 1)

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i: int) -> WindowSample:
        t = int(self.starts[i])
        sp = self.split
        d = self.target_cols
        D = sp.D
        return WindowSample(
            sp.S[t - self.w:t],
            sp.S[t:t + self.h, D + d],
            sp.Xs[t - 1, d],
            sp.Us[t],
            sp.tenc[t],
            sp.Xs[t:t + self.h, d],
            t,
        )

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.split, self.w, self.h, self.target_cols, self.starts[np.asarray(idx)])

    # batched accessors used by the models
    def window_rows(self, idx) -> np.ndarray:
        t = self.starts[np.asarray(idx)]
        return t[:, None] + np.arange(-self.w, 0)[None, :]

    def target_diffs(self, idx) -> np.ndarray:
        t = self.starts[np.asarray(idx)]
        rows = t[:, None] + np.arange(self.h)[None, :]
        return self.split.S[rows][:, :, self.split.D + self.target_cols]

    def anchors(self, idx) -> np.ndarray:
        t = self.starts[np.asarray(idx)]
        return self.split.Xs[t - 1][:, self.target_cols]

    def truth_scaled(self, idx) -> np.ndarray:
        t = self.starts[np.asarray(idx)]
        rows = t[:, None] + np.arange(self.h)[None, :]
        return self.split.Xs[rows][:, :, self.target_cols]

    def truth_raw(self, idx) -> np.ndarray:
        t = self.starts[np.asarray(idx)]
        rows = t[:, None] + np.arange(self.h)[None, :]
        return self.split.raw.X[rows][:, :, self.target_cols]

    def forecast_times(self, idx) -> np.ndarray:
        t = self.starts[np.asarray(idx)]
        rows = t[:, None] + np.arange(self.h)[None, :]
        return self.split.raw.timestamps[rows]


def make_windows(split: ScaledSplit, w: int, h: int, target_cols) -> WindowSet:
    return WindowSet(split, w, h, target_cols)


def target_columns(graph: HeteroGraph, frame: SignalFrame) -> np.ndarray:
    """X-column positions of every elec-node channel, in node order."""
    pos = {c: i for i, c in enumerate(graph.sensor_columns())}
    cols: list[int] = []
    for n in graph.nodes_of(NodeType.ELEC):
        cols.extend(pos[c] for c in range(n.start, n.end))
    return np.asarray(cols, dtype=np.int64)


@dataclass
class Prepared:
    """Everything the models consume: windows for all splits plus scalers."""

    graph: HeteroGraph
    scalers: ScalerParams
    train: WindowSet
    val: WindowSet
    test: WindowSet
    target_names: tuple[str, ...]

    def split(self, name: str) -> WindowSet:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise UsageError(f"unknown split {name!r}") from None


def prepare(
    frame: SignalFrame,
    graph: HeteroGraph,
    w: int,
    h: int,
    fractions=(0.7, 0.15, 0.15),
    center_diffs: bool = False,
    scalers: Optional[ScalerParams] = None,
) -> Prepared:
    """Smooth, split, scale and window a frame.

    Pass ``scalers`` (for example from a checkpoint) to reuse stored
    statistics instead of fitting them on the training split.
    """
    frame = moving_average_smooth(frame)
    tr, va, te = chronological_split(frame, fractions)
    if scalers is None:
        (s_tr, s_va, s_te), scalers = fit_apply_scalers(tr, va, te, center_diffs)
    else:
        if tuple(scalers.sensor_names) != tuple(frame.sensor_names):
            raise UsageError("stored scalers were fitted on different sensor channels")
        s_tr, s_va, s_te = (apply_scalers(f, scalers) for f in (tr, va, te))
    cols = target_columns(graph, frame)
    names = tuple(frame.sensor_names[c] for c in cols)
    return Prepared(
        graph,
        scalers,
        make_windows(s_tr, w, h, cols),
        make_windows(s_va, w, h, cols),
        make_windows(s_te, w, h, cols),
        names,
    )


def load_frame(csv_path, graph: HeteroGraph, sampling: Optional[dict[str, int]] = None) -> SignalFrame:
    ts, names, data = read_csv(csv_path)
    return frame_from_table(ts, names, data, graph, sampling)

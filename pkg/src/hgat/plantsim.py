"""Synthetic pumped-storage plant telemetry.

Each generating unit follows a dispatch timetable made of constant blocks of
``schedule_period`` seconds.  The block levels are seeded random draws; the
sequence of levels repeats every ``cycle_period`` seconds (one day by
default) and is scaled by a per-weekday factor.  The hydraulic side answers
slowly: unit flows are first-order lags of the dispatch, penstock pressure
carries a slow surge disturbance, and the lake level integrates the net
flow.  The electrical side answers fast: active power steps with the dispatch
and picks up the surge of its penstock one sample later, scaled by
``coupling_gain``.  Reactive power, voltage and current are derived from
active power.  With ``coupling_gain = 0`` the two domains only share the
dispatch, which the model receives as a control input anyway.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .dataset import SignalFrame, frame_from_table, write_csv
from .graph import HeteroGraph, build_graph, save_graph_spec

# 2021-01-04 is a Monday; day-of-week encodings start at phase zero
EPOCH = datetime(2021, 1, 4, tzinfo=timezone.utc)


@dataclass
class PlantConfig:
    n_units: int = 7
    seed: int = 0
    duration: float = 3 * 86400.0
    sampling_period: float = 60.0
    schedule_period: float = 1800.0
    cycle_period: float = 86400.0
    elec_noise: float = 0.004
    hydro_noise: float = 0.0005
    hydro_time_constant: float = 900.0
    surge_std: float = 0.05
    surge_time_constant: float = 3000.0
    coupling_gain: float = 1.0
    rated_power: float = 50.0
    nominal_voltage: float = 15.0
    lake_gain: float = 1e-5
    lake_initial: float = 100.0
    units_per_penstock: int = 2
    constant_dispatch: Optional[float] = None
    # unit-to-unit electrical edges: "chain" (G1-G2-...), "pairs" (units on one penstock) or "none"
    elec_topology: str = "chain"

    def validate(self) -> None:
        if self.n_units < 1:
            raise ConfigError("n_units must be >= 1")
        if self.units_per_penstock < 1:
            raise ConfigError("units_per_penstock must be >= 1")
        for name in ("duration", "sampling_period", "schedule_period", "cycle_period",
                     "hydro_time_constant", "surge_time_constant", "rated_power",
                     "nominal_voltage"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        ratio = self.cycle_period / self.schedule_period
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("cycle_period must be a whole multiple of schedule_period")
        for name in ("elec_noise", "hydro_noise", "surge_std", "lake_gain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not math.isfinite(self.coupling_gain):
            raise ConfigError("coupling_gain must be finite")
        if self.elec_topology not in ("chain", "pairs", "none"):
            raise ConfigError("elec_topology must be chain, pairs or none")
        if self.duration < 2 * self.sampling_period:
            raise ConfigError("duration must cover at least two samples")

    @property
    def n_samples(self) -> int:
        return int(self.duration // self.sampling_period)

    @property
    def blocks_per_cycle(self) -> int:
        return int(round(self.cycle_period / self.schedule_period))


@dataclass
class Timetable:
    """Seeded dispatch levels: a periodic base pattern and weekday factors."""

    base: np.ndarray  # (n_units, blocks_per_cycle), signed: < 0 pumping
    weekday: np.ndarray  # (n_units, 7)
    cfg: PlantConfig = field(repr=False)

    @classmethod
    def draw(cls, cfg: PlantConfig) -> "Timetable":
        rng = np.random.default_rng([cfg.seed, 1])
        shape = (cfg.n_units, cfg.blocks_per_cycle)
        pumping = rng.random(shape) < 0.3
        level = np.where(pumping, -rng.uniform(0.5, 1.0, shape), rng.uniform(0.2, 1.0, shape))
        weekday = rng.uniform(0.6, 1.0, (cfg.n_units, 7))
        return cls(level, weekday, cfg)

    def base_level(self, t) -> np.ndarray:
        """Periodic pattern before weekday scaling; shape (n_units, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        block = np.floor(t / self.cfg.schedule_period).astype(np.int64)
        return self.base[:, np.mod(block, self.cfg.blocks_per_cycle)]

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if self.cfg.constant_dispatch is not None:
            return np.full((self.cfg.n_units, t.size), float(self.cfg.constant_dispatch))
        day = (t // 86400.0).astype(int) % 7
        return self.base_level(t) * self.weekday[:, day]


def schedule(cfg: PlantConfig, t) -> np.ndarray:
    """Per-unit dispatch level at time(s) ``t`` (seconds since start)."""
    return Timetable.draw(cfg)(t)


@dataclass
class SimResult:
    timestamps: np.ndarray  # POSIX seconds, UTC
    data: np.ndarray  # (T, n_columns)
    columns: list[str]
    graph: HeteroGraph
    n_sensor: int
    config: PlantConfig

    @property
    def sensor_names(self) -> list[str]:
        return self.columns[: self.n_sensor]

    @property
    def control_names(self) -> list[str]:
        return self.columns[self.n_sensor:]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def frame(self) -> SignalFrame:
        return frame_from_table(self.timestamps, self.columns, self.data, self.graph)

    def write(self, out_dir, csv_name: str = "telemetry.csv", spec_name: str = "plant.graph") -> tuple[Path, Path]:
        """Write the telemetry CSV and its graph spec; returns both paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, spec_path = out / csv_name, out / spec_name
        write_csv(csv_path, self.timestamps, self.columns, self.data)
        save_graph_spec(self.graph, spec_path)
        return csv_path, spec_path


def penstock_groups(cfg: PlantConfig) -> list[list[int]]:
    units = list(range(cfg.n_units))
    k = cfg.units_per_penstock
    return [units[i:i + k] for i in range(0, cfg.n_units, k)]


def simulate(cfg: PlantConfig) -> SimResult:
    cfg.validate()
    T = cfg.n_samples
    dt = cfg.sampling_period
    n = cfg.n_units
    groups = penstock_groups(cfg)
    rng = np.random.default_rng([cfg.seed, 2])

    t = np.arange(T) * dt
    s = Timetable.draw(cfg)(t).T  # (T, n)

    a = min(dt / cfg.hydro_time_constant, 1.0)
    rho = math.exp(-dt / cfg.surge_time_constant)
    q = np.empty((T, n))
    q[0] = s[0]
    for k in range(T - 1):
        q[k + 1] = q[k] + a * (s[k] - q[k])

    surge = np.empty((T, len(groups)))
    surge[0] = cfg.surge_std * rng.standard_normal(len(groups))
    innov = cfg.surge_std * math.sqrt(1.0 - rho * rho) * rng.standard_normal((T, len(groups)))
    for k in range(T - 1):
        surge[k + 1] = rho * surge[k] + innov[k + 1]

    unit_group = np.empty(n, dtype=int)
    for g, members in enumerate(groups):
        unit_group[members] = g

    # electrical response: dispatch step plus head surge seen one sample late
    lagged = np.vstack([surge[:1], surge[:-1]])[:, unit_group]
    p = s + cfg.coupling_gain * lagged
    p = p + cfg.elec_noise * rng.standard_normal((T, n))
    q_react = 0.1 + 0.3 * p * p + cfg.elec_noise * rng.standard_normal((T, n))
    volt = 1.0 + 0.05 * q_react - 0.04 * p + 0.25 * cfg.elec_noise * rng.standard_normal((T, n))
    current = np.sqrt(p * p + q_react * q_react) / volt
    current = current + cfg.elec_noise * rng.standard_normal((T, n))

    P = cfg.rated_power * p
    Q = cfg.rated_power * q_react
    U = cfg.nominal_voltage * volt
    I = cfg.rated_power / cfg.nominal_voltage * current

    hn = cfg.hydro_noise
    flow_meas = q + hn * rng.standard_normal((T, n))
    pressure = np.empty((T, len(groups)))
    for g, members in enumerate(groups):
        pressure[:, g] = 1.0 - 0.3 * q[:, members].sum(axis=1) + surge[:, g]
    pressure = pressure + hn * rng.standard_normal(pressure.shape)

    net = q.sum(axis=1)
    level = np.empty(T)
    level[0] = cfg.lake_initial
    level[1:] = cfg.lake_initial - cfg.lake_gain * dt * np.cumsum(net[:-1])

    columns: list[str] = []
    blocks: list[np.ndarray] = []
    nodes: list[tuple] = []
    edges: list[tuple[str, str]] = []
    col = 0
    for u in range(n):
        name = f"G{u + 1}"
        for feat, arr in (("P", P), ("Q", Q), ("U", U), ("I", I)):
            columns.append(f"{name}_{feat}")
            blocks.append(arr[:, u])
        nodes.append([name, "elec", col, col + 4])
        col += 4
    for g, members in enumerate(groups):
        name = f"PS{g + 1}"
        start = col
        for u in members:
            columns.append(f"{name}_flow{u + 1}")
            blocks.append(flow_meas[:, u])
            col += 1
        columns.append(f"{name}_pressure")
        blocks.append(pressure[:, g])
        col += 1
        nodes.append([name, "hydro", start, col])
    columns += ["LAKE_level", "LAKE_netflow"]
    blocks += [level, net]
    nodes.append(["LAKE", "hydro", col, col + 2])
    col += 2
    n_sensor = col
    for u in range(n):
        columns.append(f"G{u + 1}_cmd")
        blocks.append(s[:, u])
        nodes[u].append((col, col + 1))
        col += 1

    if cfg.elec_topology == "chain":
        for u in range(n - 1):
            edges.append((f"G{u + 1}", f"G{u + 2}"))
    elif cfg.elec_topology == "pairs":
        for members in groups:
            for a, b in zip(members, members[1:]):
                edges.append((f"G{a + 1}", f"G{b + 1}"))
    for g, members in enumerate(groups):
        edges.append(("LAKE", f"PS{g + 1}"))
    for g, members in enumerate(groups):
        for u in members:
            edges.append((f"PS{g + 1}", f"G{u + 1}"))

    graph = build_graph([tuple(nd) for nd in nodes], edges)
    stamps = EPOCH.timestamp() + t
    return SimResult(stamps, np.column_stack(blocks), columns, graph, n_sensor, cfg)


def config_dict(cfg: PlantConfig) -> dict:
    return asdict(cfg)

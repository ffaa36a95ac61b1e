"""Reference forecasters sharing the HGAT train/predict interface.

Every forecaster exposes ``params``, ``trainable``, ``predict(ws, idx,
scalers)`` and, when trainable, ``make_batch`` and ``loss`` for
:func:`hgat.training.fit`.
"""
from __future__ import annotations

import enum
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Prepared, WindowSet
from .encoders import gru_sequence
from .errors import ConfigError
from .graph import drop_heterogeneous_edges
from .model import HGATModel, ModelConfig, NodeLayout, to_forecast, uniform_param


class BaselineKind(str, enum.Enum):
    PERSISTENCE = "persistence"
    RECURRENT_SIGNALWISE = "gru_signal"
    GAT_HOMOGENEOUS = "gat"
    HGNN = "hgnn"
    HGAT_DIRECT = "hgat_d"


MODEL_KINDS = ("hgat", "hgat_small", "hgat_d", "gat", "hgnn", "gru_signal", "persistence")


class PersistenceForecaster:
    """Repeats the last observed value over the horizon."""

    trainable = False
    params: dict = {}

    def predict(self, ws: WindowSet, idx, scalers=None, batch_size: int = 0) -> np.ndarray:
        return persistence_forecast(ws, idx)

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state) -> None:
        pass


def persistence_forecast(ws: WindowSet, idx) -> np.ndarray:
    t = ws.starts[np.asarray(idx)]
    last = ws.split.raw.X[t - 1][:, ws.target_cols]
    return np.repeat(last[:, None, :], ws.h, axis=1)


class SignalGRUForecaster:
    """One GRU plus head shared by all target channels, fed one channel at a time.

    Each sequence is a single channel's scaled values and standardized diffs;
    the head predicts that channel's next ``h`` diffs, integrated like HGAT.
    """

    trainable = True

    def __init__(self, d_emb: int, hidden: int, h: int, seed: int = 0, act_slope: float = 0.01):
        self.h = h
        self.act_slope = act_slope
        self.mode = "diff"
        p = {}
        p["gru.Wx"] = uniform_param(seed, "signal.gru.Wx", (2, 3 * d_emb), 2)
        p["gru.Wh"] = uniform_param(seed, "signal.gru.Wh", (d_emb, 3 * d_emb), d_emb)
        p["gru.b"] = uniform_param(seed, "signal.gru.b", (3 * d_emb,), d_emb)
        p["head.W1"] = uniform_param(seed, "signal.head.W1", (d_emb, hidden), d_emb)
        p["head.b1"] = uniform_param(seed, "signal.head.b1", (hidden,), d_emb)
        p["head.W2"] = Tensor(np.zeros((hidden, h)), requires_grad=True)
        p["head.b2"] = Tensor(np.zeros(h), requires_grad=True)
        self.params = p

    def make_batch(self, ws: WindowSet, idx):
        idx = np.asarray(idx, dtype=np.int64)
        S = ws.split.S[ws.window_rows(idx)]  # (B, w, C)
        D = ws.split.D
        cols = ws.target_cols
        x = np.stack([S[:, :, cols], S[:, :, D + cols]], axis=-1)  # (B, w, d, 2)
        B, w, d, _ = x.shape
        seq = np.ascontiguousarray(x.transpose(1, 0, 2, 3).reshape(w, B * d, 2))
        target = ws.target_diffs(idx).transpose(0, 2, 1).reshape(-1, 1)  # (B*d*h, 1)
        return _SignalBatch(B, d, seq, target)

    def forward(self, batch) -> Tensor:
        p = self.params
        hN = gru_sequence(batch.seq, p["gru.Wx"], p["gru.Wh"], p["gru.b"])
        hid = ad.leaky_relu(ad.add_bias(ad.matmul(hN, p["head.W1"]), p["head.b1"]), self.act_slope)
        return ad.reshape(ad.add_bias(ad.matmul(hid, p["head.W2"]), p["head.b2"]), (-1, 1))

    def loss(self, batch) -> Tensor:
        return ad.frobenius_mse(self.forward(batch), batch.target)

    def predict(self, ws: WindowSet, idx, scalers, batch_size: int = 256) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        d = len(ws.target_cols)
        out = np.empty((idx.size, self.h, d))
        for lo in range(0, idx.size, batch_size):
            part = idx[lo:lo + batch_size]
            b = self.make_batch(ws, part)
            y = self.forward(b).values.reshape(part.size, d, self.h).transpose(0, 2, 1)
            out[lo:lo + part.size] = to_forecast(y, ws, part, scalers, "diff")
        return out

    def state_dict(self) -> dict:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        if set(state) != set(self.params):
            raise ConfigError("parameter names differ from the signal-wise GRU layout")
        for k, v in state.items():
            self.params[k].values = np.array(v, dtype=np.float64)

    def n_parameters(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))


class _SignalBatch:
    def __init__(self, B, d, seq, target):
        self.size = B
        self.d = d
        self.seq = seq
        self.target = target


# ----------------------------------------------------------- constructors

SIZE_PRESETS = {
    "hgat": {"d_emb": 128, "hidden": 64},
    "hgat_small": {"d_emb": 32, "hidden": 32},
}


def model_config_for(kind: str, base: ModelConfig) -> ModelConfig:
    """Model configuration a kind implies on top of user settings."""
    if kind == "hgat":
        return base
    if kind == "hgat_small":
        return replace(base, **SIZE_PRESETS["hgat_small"])
    if kind == "hgat_d":
        return replace(base, mode="direct")
    if kind == "gat":
        return replace(base, shared_relations=True)
    if kind == "hgnn":
        return replace(base, message="mean")
    raise ConfigError(f"{kind!r} is not a graph model kind")


def gat_homogeneous(cfg: ModelConfig, prepared: Prepared) -> HGATModel:
    g = drop_heterogeneous_edges(prepared.graph)
    return _graph_model(replace(cfg, shared_relations=True), g, prepared)


def hgnn(cfg: ModelConfig, prepared: Prepared) -> HGATModel:
    return _graph_model(replace(cfg, message="mean"), prepared.graph, prepared)


def hgat_direct(cfg: ModelConfig, prepared: Prepared) -> HGATModel:
    return _graph_model(replace(cfg, mode="direct"), prepared.graph, prepared)


def _graph_model(cfg: ModelConfig, graph, prepared: Prepared) -> HGATModel:
    sp = prepared.train.split
    return HGATModel(cfg, NodeLayout(graph, sp.D, sp.K, cfg.hydro_time_encodings), prepared.train.h)


def make_forecaster(kind: str, prepared: Prepared, cfg: ModelConfig = ModelConfig()):
    """Forecaster for a CLI model kind; graph kinds share ``cfg`` apart from their ablation."""
    if kind == "persistence":
        return PersistenceForecaster()
    if kind == "gru_signal":
        return SignalGRUForecaster(cfg.d_emb, cfg.hidden, prepared.train.h, cfg.seed, cfg.act_slope)
    if kind == "gat":
        return gat_homogeneous(cfg, prepared)
    if kind == "hgnn":
        return hgnn(cfg, prepared)
    if kind == "hgat_d":
        return hgat_direct(cfg, prepared)
    if kind in ("hgat", "hgat_small"):
        return _graph_model(model_config_for(kind, cfg), prepared.graph, prepared)
    raise ConfigError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")

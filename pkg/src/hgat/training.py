"""Optimization, evaluation metrics and checkpoints.

Any model with a ``params`` dict of tensors, ``make_batch(ws, idx)``,
``loss(batch)`` and ``predict(ws, idx, scalers)`` can be trained here.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .dataset import Prepared, ScalerParams, WindowSet
from .errors import ConfigError, NumericalError, UsageError
from .graph import HeteroGraph, NodeType, serialize_graph

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
FEATURES = ("P", "Q", "U", "I")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    patience: int = 10
    select_on: str = "val_nrmse"  # or "val_loss"
    eval_batch: int = 256

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.select_on not in ("val_nrmse", "val_loss"):
            raise ConfigError("select_on must be val_nrmse or val_loss")


def training_loss(pred, true) -> ad.Tensor:
    """Mean squared residual between predicted and true standardized diffs."""
    return ad.frobenius_mse(pred, true)


class AdamW:
    """Adam with decoupled weight decay, applied in place to tensor values."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.values
            p.values = p.values - self.lr * update


def gradients(model, batch) -> tuple[float, dict]:
    with ad.Tape() as tape:
        loss = model.loss(batch)
        if loss._tape is not tape:
            return float(loss.values), {k: np.zeros_like(p.values) for k, p in model.params.items()}
        tape.backward(loss)
        grads = tape.grads_for(model.params.values())
    return float(loss.values), dict(zip(model.params, grads))


# ------------------------------------------------------------------ metrics


def channel_errors(pred: np.ndarray, truth: np.ndarray):
    """Per-channel RMSE, MAE and ground-truth range over (N, h, d) arrays."""
    err = (pred - truth).reshape(-1, pred.shape[-1])
    tr = truth.reshape(-1, truth.shape[-1])
    rmse = np.sqrt(np.mean(err * err, axis=0))
    mae = np.mean(np.abs(err), axis=0)
    rng = tr.max(axis=0) - tr.min(axis=0)
    return rmse, mae, rng


def feature_of(channel: str) -> str:
    return channel.rsplit("_", 1)[-1] if "_" in channel else channel


def compute_metrics(pred, truth, channel_names, channel_nodes) -> dict:
    """NRMSE and NMAE per channel, feature class, node and overall.

    Each channel is normalized by the range of its ground truth over the
    evaluated targets; aggregates are unweighted means over channels.
    """
    rmse, mae, rng = channel_errors(pred, truth)
    keep = rng > 0
    excluded = [n for n, k in zip(channel_names, keep) if not k]
    for n in excluded:
        log.warning("channel %s has a constant ground truth; excluded from metrics", n)
    out: dict = {"schema_version": METRICS_SCHEMA_VERSION, "excluded_channels": excluded, "channels": {}}
    per = {}
    for name, node, r, a, g, k in zip(channel_names, channel_nodes, rmse, mae, rng, keep):
        if k:
            per[name] = {"NRMSE": float(r / g), "NMAE": float(a / g), "node": node, "feature": feature_of(name)}
            out["channels"][name] = {"NRMSE": per[name]["NRMSE"], "NMAE": per[name]["NMAE"]}
    nodes = list(dict.fromkeys(channel_nodes))
    for metric in ("NRMSE", "NMAE"):
        vals = [c[metric] for c in per.values()]
        block: dict = {"overall": _mean(vals)}
        for f in FEATURES:
            block[f] = _mean([c[metric] for c in per.values() if c["feature"] == f])
        block["nodes"] = {}
        for node in nodes:
            mine = [c for c in per.values() if c["node"] == node]
            nb = {"overall": _mean([c[metric] for c in mine])}
            for f in FEATURES:
                nb[f] = _mean([c[metric] for c in mine if c["feature"] == f])
            block["nodes"][node] = nb
        out[metric] = block
    out["x100"] = {m: _times100(out[m]) for m in ("NRMSE", "NMAE")}
    return out


def _mean(vals):
    return float(np.mean(vals)) if vals else None


def _times100(block):
    if isinstance(block, dict):
        return {k: _times100(v) for k, v in block.items()}
    return None if block is None else block * 100.0


def target_nodes(graph: HeteroGraph) -> list[str]:
    return [n.id for n in graph.nodes_of(NodeType.ELEC) for _ in range(n.k)]


def evaluate_forecasts(pred, ws: WindowSet, prepared: Prepared) -> dict:
    truth = ws.truth_raw(np.arange(len(ws)))
    return compute_metrics(pred, truth, prepared.target_names, target_nodes(prepared.graph))


def evaluate(model, prepared: Prepared, split: str = "test", batch_size: int = 256) -> dict:
    ws = prepared.split(split)
    pred = model.predict(ws, np.arange(len(ws)), prepared.scalers, batch_size)
    m = evaluate_forecasts(pred, ws, prepared)
    m["split"] = split
    return m


# ----------------------------------------------------------------- training


@dataclass
class FitResult:
    history: list[dict]
    best_epoch: int
    best_score: float
    best_state: dict
    initial_train_loss: float
    initial_val_nrmse: float
    stopped_early: bool = False

    @property
    def final_train_loss(self) -> float:
        return self.history[-1]["train_loss"]


def dataset_loss(model, ws: WindowSet, batch_size: int = 256) -> float:
    """Mean training loss over a whole window set at the current parameters."""
    total, n = 0.0, 0
    for lo in range(0, len(ws), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ws)))
        batch = model.make_batch(ws, idx)
        total += float(model.loss(batch).values) * idx.size
        n += idx.size
    return total / max(n, 1)


def fit(
    model,
    prepared: Prepared,
    cfg: TrainConfig,
    history_path=None,
    checkpoint_fn: Optional[Callable[[int, float], None]] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> FitResult:
    """Mini-batch AdamW with validation-based checkpoint selection.

    The checkpoint is chosen among the trained epochs; the score of the
    initial parameters is reported but never selected.
    """
    cfg.validate()
    train, val = prepared.train, prepared.val
    if len(train) == 0 or len(val) == 0:
        raise UsageError("train and validation window sets must be nonempty")
    opt = AdamW(model.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])

    def score() -> tuple[float, float]:
        m = evaluate(model, prepared, "val", cfg.eval_batch)
        loss = dataset_loss(model, val, cfg.eval_batch) if cfg.select_on == "val_loss" else math.nan
        return m["NRMSE"]["overall"], loss

    init_loss = dataset_loss(model, train, cfg.eval_batch)
    init_nrmse, init_vloss = score()
    history: list[dict] = []
    best = (math.inf, 0, model.state_dict())
    stale = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = model.make_batch(train, order[lo:lo + cfg.batch_size])
            loss, grads = gradients(model, batch)
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", best[2], history)
            try:
                opt.step(grads)
            except NumericalError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}", best[2], history) from exc
            losses.append(loss * batch.size)
        train_loss = float(np.sum(losses) / len(order))
        val_nrmse, val_loss = score()
        row = {"epoch": epoch, "train_loss": train_loss, "val_nrmse": val_nrmse}
        history.append(row)
        if progress:
            progress(row)
        crit = val_nrmse if cfg.select_on == "val_nrmse" else val_loss
        if crit < best[0]:
            best = (crit, epoch, model.state_dict())
            stale = 0
            if checkpoint_fn:
                checkpoint_fn(epoch, crit)
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped = epoch < cfg.epochs
                break
    model.load_state_dict(best[2])
    result = FitResult(history, best[1], best[0], best[2], init_loss, init_nrmse, stopped)
    if history_path is not None:
        write_history(history_path, history)
    return result


class TrainingAborted(NumericalError):
    def __init__(self, message, best_state, history):
        super().__init__(message)
        self.best_state = best_state
        self.history = history


def write_history(path, history: list[dict]) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "train_loss", "val_nrmse"])
    for row in history:
        wr.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_nrmse"])])
    atomic_write_text(path, buf.getvalue())


def read_history(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]), "val_nrmse": float(r["val_nrmse"])}
            for r in csv.DictReader(fh)
        ]


# --------------------------------------------------------------- checkpoints


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def fingerprint(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def data_fingerprint(prepared: Prepared, fractions) -> str:
    return fingerprint({
        "graph": serialize_graph(prepared.graph),
        "sensors": list(prepared.scalers.sensor_names),
        "controls": list(prepared.scalers.control_names),
        "w": prepared.train.w,
        "h": prepared.train.h,
        "fractions": list(fractions),
    })


@dataclass
class Checkpoint:
    header: dict
    state: dict
    scalers: ScalerParams

    @property
    def fingerprint(self) -> str:
        return self.header["data_fingerprint"]


def save_checkpoint(path, state: dict, scalers: ScalerParams, header: dict) -> None:
    """Parameters, scaler statistics and a JSON header in one ``.npz`` file."""
    head = dict(header, version=CHECKPOINT_VERSION, parameters=sorted(state))
    arrays = {f"param/{k}": np.asarray(v) for k, v in state.items()}
    arrays["__header__"] = np.array(json.dumps(head, sort_keys=True))
    arrays["__scalers__"] = np.array(scalers.to_text())
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            scalers = ScalerParams.from_text(str(z["__scalers__"]))
            state = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return Checkpoint(header, state, scalers)


def config_as_dict(cfg) -> dict:
    return asdict(cfg)

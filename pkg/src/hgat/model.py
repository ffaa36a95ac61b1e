"""Heterogeneous graph attention forecaster.

Pipeline per batch of windows: type-specific GRU encoders, covariates
appended to elec embeddings, per-type input projections to the hidden width,
``L`` layers of per-relation attention message passing summed over relations,
and a two-layer head on elec nodes.  In diff mode the head predicts
standardized first differences which are integrated onto the last observed
value; in direct mode it predicts scaled values.

A batch of ``B`` windows is evaluated as the disjoint union of ``B`` copies
of the graph: node ``v`` of copy ``b`` has row ``b * n_type + v``.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Tensor
from .dataset import WindowSet
from .encoders import GRUParams, run_gru
from .errors import ConfigError, DimensionError
from .graph import (
    ELEC_ELEC,
    RELATIONS,
    HeteroGraph,
    NodeType,
    RelationType,
    relation_segments,
)

TYPES = (NodeType.ELEC, NodeType.HYDRO)


@dataclass
class ModelConfig:
    layers: int = 3
    d_emb: int = 128
    hidden: int = 64
    heads: int = 1
    attn_slope: float = 0.2
    act_slope: float = 0.01
    mode: str = "diff"  # "diff" (integrate predicted diffs) or "direct"
    message: str = "attention"  # "attention" or "mean" (degree-normalized, HGNN)
    attention_form: str = "gatv2"  # "gatv2": a.T lrelu(W_a[..]); "printed": lrelu(a.T W_a[..])
    joint_softmax: bool = False
    shared_relations: bool = False
    hydro_time_encodings: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if min(self.d_emb, self.hidden, self.heads) < 1:
            raise ConfigError("d_emb, hidden and heads must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        for key, allowed in (("mode", ("diff", "direct")), ("message", ("attention", "mean")),
                             ("attention_form", ("gatv2", "printed"))):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")


# ------------------------------------------------------------------ layout


@dataclass
class Batch:
    size: int
    inputs: dict  # NodeType -> (w, B*n_type, width) GRU input
    covariates: dict  # NodeType -> (B*n_type, c) block appended after the GRU, or None
    target: np.ndarray  # (B*h*d, 1) training target (z-diffs or scaled values)
    idx: np.ndarray


class NodeLayout:
    """Maps graph nodes to columns of the window input matrix ``[X, X', U, U']``."""

    def __init__(self, graph: HeteroGraph, D: int, K: int, hydro_time_encodings: bool = False):
        self.graph = graph
        self.D, self.K = D, K
        self.hydro_time_encodings = hydro_time_encodings
        xpos = {c: i for i, c in enumerate(graph.sensor_columns())}
        upos = {c: i for i, c in enumerate(graph.control_columns())}
        self.counts = {t: graph.count(t) for t in TYPES}
        self.input_index: dict[NodeType, np.ndarray] = {}
        self.cov_index: dict[NodeType, Optional[np.ndarray]] = {}
        pad = 2 * D + 2 * K  # index of the zero column appended to each window
        for t in TYPES:
            nodes = graph.nodes_of(t)
            if not nodes:
                continue
            kmax = max(n.k for n in nodes)
            cmax = max(n.n_controls for n in nodes) if t is NodeType.ELEC else 0
            rows = []
            for n in nodes:
                xs = [xpos[c] for c in range(n.start, n.end)]
                row = _padded(xs, kmax, pad) + _padded([D + i for i in xs], kmax, pad)
                if t is NodeType.ELEC and cmax:
                    us = [upos[c] for c in range(*n.controls)] if n.controls else []
                    row += _padded([2 * D + i for i in us], cmax, pad)
                    row += _padded([2 * D + K + i for i in us], cmax, pad)
                rows.append(row)
            self.input_index[t] = np.asarray(rows, dtype=np.int64)
            if t is NodeType.ELEC:
                cov = [
                    _padded([upos[c] for c in range(*n.controls)] if n.controls else [], cmax, K)
                    for n in nodes
                ]
                self.cov_index[t] = np.asarray(cov, dtype=np.int64).reshape(len(nodes), cmax)
            else:
                self.cov_index[t] = None
        elec = graph.nodes_of(NodeType.ELEC)
        if not elec:
            raise ConfigError("the graph needs at least one elec node to forecast")
        self.k_out = max(n.k for n in elec)
        self.target_node = np.concatenate([np.full(n.k, i) for i, n in enumerate(elec)])
        self.target_chan = np.concatenate([np.arange(n.k) for n in elec])
        self.d = len(self.target_node)

    def input_width(self, t: NodeType) -> int:
        return self.input_index[t].shape[1] if t in self.input_index else 0

    def cov_width(self, t: NodeType) -> int:
        if t is NodeType.ELEC:
            return 2 * self.cov_index[t].shape[1] + 4
        return 4 if self.hydro_time_encodings else 0

    def output_index(self, B: int, h: int) -> np.ndarray:
        """Rows of the flattened head output in (sample, step, target) order."""
        n_el = self.counts[NodeType.ELEC]
        b = np.arange(B)[:, None, None]
        k = np.arange(h)[None, :, None]
        node = self.target_node[None, None, :]
        chan = self.target_chan[None, None, :]
        return (((b * n_el + node) * h + k) * self.k_out + chan).reshape(-1)

    def make_batch(self, ws: WindowSet, idx, mode: str = "diff") -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        B = idx.size
        sp = ws.split
        S = sp.S[ws.window_rows(idx)]  # (B, w, C)
        S = np.concatenate([S, np.zeros(S.shape[:2] + (1,))], axis=2)
        t = ws.starts[idx]
        inputs, covs = {}, {}
        for typ, index in self.input_index.items():
            n = index.shape[0]
            x = S[:, :, index]  # (B, w, n, width)
            inputs[typ] = np.ascontiguousarray(x.transpose(1, 0, 2, 3).reshape(ws.w, B * n, -1))
            tenc = np.repeat(sp.tenc[t], n, axis=0)
            if typ is NodeType.ELEC:
                # commands known at the forecast step: their level and their change
                zero = np.zeros((B, 1))
                U = np.concatenate([sp.Us[t], zero], axis=1)
                dU = np.concatenate([sp.S[t, 2 * sp.D + sp.K:], zero], axis=1)
                cu = U[:, self.cov_index[typ]].reshape(B * n, -1)
                cd = dU[:, self.cov_index[typ]].reshape(B * n, -1)
                covs[typ] = np.concatenate([cu, cd, tenc], axis=1)
            else:
                covs[typ] = tenc if self.hydro_time_encodings else None
        target = ws.target_diffs(idx) if mode == "diff" else ws.truth_scaled(idx)
        return Batch(B, inputs, covs, target.reshape(-1, 1), idx)


def _padded(cols: list[int], width: int, pad: int) -> list[int]:
    return list(cols) + [pad] * (width - len(cols))


# --------------------------------------------------------------- parameters


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per parameter name, so init does not depend on creation order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def uniform_param(seed: int, name: str, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(param_rng(seed, name).uniform(-bound, bound, shape), requires_grad=True)


def relation_key(cfg: ModelConfig, layer: int, r: RelationType) -> str:
    rel = ELEC_ELEC if cfg.shared_relations else r
    return f"layer{layer}.{rel.name}"


class HGATModel:
    """Parameters plus the forward pass for one graph layout."""

    trainable = True

    def __init__(self, cfg: ModelConfig, layout: NodeLayout, h: int):
        cfg.validate()
        self.cfg = cfg
        self.layout = layout
        self.h = h
        self.params: dict[str, Tensor] = {}
        self._seg_cache: dict[int, dict] = {}
        self._build()

    # parameters -----------------------------------------------------------
    def _add(self, name, shape, fan_in, zero=False):
        if name in self.params:
            return
        if zero:
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            self.params[name] = uniform_param(self.cfg.seed, name, shape, fan_in)

    def _build(self) -> None:
        cfg, lay = self.cfg, self.layout
        E = cfg.d_emb
        for t in TYPES:
            if not lay.counts.get(t):
                continue
            n_in = lay.input_width(t)
            self._add(f"gru.{t.value}.Wx", (n_in, 3 * E), n_in)
            self._add(f"gru.{t.value}.Wh", (E, 3 * E), E)
            self._add(f"gru.{t.value}.b", (3 * E,), E)
            width = E + lay.cov_width(t)
            self._add(f"proj.{t.value}.W", (width, cfg.hidden), width)
            self._add(f"proj.{t.value}.b", (cfg.hidden,), width)
        dh = cfg.hidden // cfg.heads
        for layer in range(cfg.layers):
            for r in self.active_relations():
                key = relation_key(cfg, layer, r)
                for k in range(cfg.heads):
                    pre = f"{key}.head{k}"
                    self._add(f"{pre}.W_gat", (cfg.hidden, dh), cfg.hidden)
                    if cfg.message == "attention":
                        self._add(f"{pre}.W_a_dst", (cfg.hidden, dh), 2 * cfg.hidden)
                        self._add(f"{pre}.W_a_src", (cfg.hidden, dh), 2 * cfg.hidden)
                        self._add(f"{pre}.a", (dh, 1), dh)
        self._add("head.W1", (cfg.hidden, cfg.hidden), cfg.hidden)
        self._add("head.b1", (cfg.hidden,), cfg.hidden)
        out = self.h * lay.k_out
        self._add("head.W2", (cfg.hidden, out), cfg.hidden, zero=True)
        self._add("head.b2", (out,), cfg.hidden, zero=True)

    def active_relations(self) -> list[RelationType]:
        sizes = self.layout.graph.relation_sizes()
        return [r for r in RELATIONS if sizes.get(r.name, 0) > 0]

    def gru(self, t: NodeType) -> GRUParams:
        p = self.params
        return GRUParams(p[f"gru.{t.value}.Wx"], p[f"gru.{t.value}.Wh"], p[f"gru.{t.value}.b"])

    def n_parameters(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].values = np.array(v, dtype=np.float64)

    # structure ------------------------------------------------------------
    def segments(self, B: int) -> dict:
        """Batched edge lists per relation (and per target type when joint)."""
        if B in self._seg_cache:
            return self._seg_cache[B]
        g = self.layout.graph
        counts = self.layout.counts
        rel = {}
        for r in self.active_relations():
            src, tgt, _ = relation_segments(g, r)
            ns, nt = counts[r.source_type], counts[r.target_type]
            off = np.arange(B)[:, None]
            s = (off * ns + src[None, :]).reshape(-1)
            d = (off * nt + tgt[None, :]).reshape(-1)
            idx = SegmentIndex(d, B * nt)
            deg = np.bincount(d, minlength=B * nt).astype(np.float64)
            rel[r] = (s, d, idx, 1.0 / deg[d])
        joint = {}
        for t in TYPES:
            rs = [r for r in rel if r.target_type is t]
            if not rs:
                continue
            d = np.concatenate([rel[r][1] for r in rs])
            deg = np.bincount(d, minlength=B * counts[t]).astype(np.float64)
            bounds = np.cumsum([0] + [len(rel[r][1]) for r in rs])
            joint[t] = (rs, SegmentIndex(d, B * counts[t]), 1.0 / deg[d], bounds)
        self._seg_cache[B] = out = {"rel": rel, "joint": joint}
        return out

    # forward --------------------------------------------------------------
    def embed(self, batch: Batch) -> dict:
        p = self.params
        H = {}
        for t, x in batch.inputs.items():
            h = run_gru(self.gru(t), x)
            cov = batch.covariates.get(t)
            if cov is not None:
                h = ad.concat(h, cov)
            H[t] = ad.add_bias(ad.matmul(h, p[f"proj.{t.value}.W"]), p[f"proj.{t.value}.b"])
        return H

    def _logits(self, key, H, r, s, d) -> Tensor:
        p = self.params
        pdst = ad.matmul(H[r.target_type], p[f"{key}.W_a_dst"])
        psrc = ad.matmul(H[r.source_type], p[f"{key}.W_a_src"])
        e = ad.add(ad.gather_rows(pdst, d), ad.gather_rows(psrc, s))
        if self.cfg.attention_form == "gatv2":
            z = ad.matmul(ad.leaky_relu(e, self.cfg.attn_slope), p[f"{key}.a"])
        else:
            z = ad.leaky_relu(ad.matmul(e, p[f"{key}.a"]), self.cfg.attn_slope)
        return ad.reshape(z, (len(s),))

    def attention(self, layer: int, H: dict, B: int) -> dict:
        """Attention weights per (relation, head) for one layer."""
        cfg = self.cfg
        seg = self.segments(B)
        alphas: dict = {}
        for k in range(cfg.heads):
            if cfg.message == "mean":
                if cfg.joint_softmax:
                    for t, (rs, _, inv, bounds) in seg["joint"].items():
                        for i, r in enumerate(rs):
                            alphas[r, k] = Tensor(inv[bounds[i]:bounds[i + 1]])
                else:
                    for r, (_, _, _, inv) in seg["rel"].items():
                        alphas[r, k] = Tensor(inv)
                continue
            logits = {}
            for r, (s, d, _, _) in seg["rel"].items():
                logits[r] = self._logits(f"{relation_key(cfg, layer, r)}.head{k}", H, r, s, d)
            if not cfg.joint_softmax:
                for r, (_, _, idx, _) in seg["rel"].items():
                    alphas[r, k] = ad.segment_softmax(logits[r], idx)
                continue
            for t, (rs, jidx, _, bounds) in seg["joint"].items():
                cat = logits[rs[0]]
                for r in rs[1:]:
                    cat = ad.concat(cat, logits[r])
                a = ad.segment_softmax(cat, jidx)
                if len(rs) == 1:
                    alphas[rs[0], k] = a
                    continue
                col = ad.reshape(a, (-1, 1))
                for i, r in enumerate(rs):
                    part = ad.gather_rows(col, np.arange(bounds[i], bounds[i + 1]))
                    alphas[r, k] = ad.reshape(part, (bounds[i + 1] - bounds[i],))
        return alphas

    def layer_forward(self, layer: int, H: dict, B: int, record: Optional[list] = None) -> dict:
        cfg = self.cfg
        seg = self.segments(B)
        alphas = self.attention(layer, H, B)
        if record is not None:
            record.append({key: a.values.copy() for key, a in alphas.items()})
        out = {}
        for t in H:
            total = None
            for r, (s, d, idx, _) in seg["rel"].items():
                if r.target_type is not t:
                    continue
                heads = []
                for k in range(cfg.heads):
                    W = self.params[f"{relation_key(cfg, layer, r)}.head{k}.W_gat"]
                    m = ad.gather_rows(ad.matmul(H[r.source_type], W), s)
                    heads.append(ad.segment_sum(ad.scale_rows(m, alphas[r, k]), idx, H[t].shape[0]))
                agg = heads[0]
                for extra in heads[1:]:
                    agg = ad.concat(agg, extra)
                total = agg if total is None else ad.add(total, agg)
            if total is None:
                total = Tensor(np.zeros((H[t].shape[0], cfg.hidden)))
            out[t] = ad.leaky_relu(total, cfg.act_slope)
        return out

    def graph_head(self, z) -> Tensor:
        p = self.params
        hid = ad.leaky_relu(ad.add_bias(ad.matmul(z, p["head.W1"]), p["head.b1"]), self.cfg.act_slope)
        return ad.add_bias(ad.matmul(hid, p["head.W2"]), p["head.b2"])

    def forward(self, batch: Batch, record: Optional[list] = None) -> Tensor:
        """Flattened predictions ``(B*h*d, 1)`` in the training-target space."""
        H = self.embed(batch)
        for layer in range(self.cfg.layers):
            H = self.layer_forward(layer, H, batch.size, record)
        out = self.graph_head(H[NodeType.ELEC])
        flat = ad.reshape(out, (-1, 1))
        return ad.gather_rows(flat, self.layout.output_index(batch.size, self.h))

    def make_batch(self, ws: WindowSet, idx) -> Batch:
        return self.layout.make_batch(ws, idx, self.cfg.mode)

    def loss(self, batch: Batch) -> Tensor:
        return ad.frobenius_mse(self.forward(batch), batch.target)

    def predict(self, ws: WindowSet, idx, scalers, batch_size: int = 256) -> np.ndarray:
        """Forecasts in original units, shape ``(len(idx), h, d)``."""
        idx = np.asarray(idx, dtype=np.int64)
        out = np.empty((idx.size, self.h, self.layout.d))
        for lo in range(0, idx.size, batch_size):
            part = idx[lo:lo + batch_size]
            batch = self.layout.make_batch(ws, part, self.cfg.mode)
            y = self.forward(batch).values.reshape(part.size, self.h, self.layout.d)
            out[lo:lo + part.size] = to_forecast(y, ws, part, scalers, self.cfg.mode)
        return out


def to_forecast(y: np.ndarray, ws: WindowSet, idx, scalers, mode: str) -> np.ndarray:
    """Map head outputs (z-diffs or scaled values) to original units."""
    cols = ws.target_cols
    if mode == "direct":
        return scalers.unscale_x(y, cols)
    raw_diffs = scalers.unz_xd(y, cols) * scalers.x_span[cols]
    anchor = ws.split.raw.X[ws.starts[np.asarray(idx)] - 1][:, cols]
    return euler_integrate(anchor, raw_diffs)


def euler_integrate(anchor, diffs) -> np.ndarray:
    """``X[t+k] = anchor + sum_{i<=k} diffs[i]`` along the horizon axis."""
    anchor = np.asarray(anchor, dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.shape[:-2] + diffs.shape[-1:] != anchor.shape:
        raise DimensionError(f"anchor {anchor.shape} does not match diffs {diffs.shape}")
    return anchor[..., None, :] + np.cumsum(diffs, axis=-2)


def build_model(cfg: ModelConfig, graph: HeteroGraph, ws: WindowSet) -> HGATModel:
    layout = NodeLayout(graph, ws.split.D, ws.split.K, cfg.hydro_time_encodings)
    return HGATModel(cfg, layout, ws.h)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)

"""Type-specific GRU window encoders.

Gate weights are stored fused: ``Wx`` is ``n x 3d`` and ``Wh`` is ``d x 3d``
with column blocks ordered (update z, reset r, candidate).  :func:`gru_step`
composes tape primitives and serves as the readable reference;
:func:`gru_sequence` runs a whole unroll as one recorded op with a hand
written backward-through-time rule, which is what the models use.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _emit, _register, _sigmoid
from .errors import DimensionError
from .graph import NodeType


@dataclass
class GRUParams:
    Wx: Tensor
    Wh: Tensor
    b: Tensor

    def __post_init__(self):
        n, d3 = self.Wx.shape
        if d3 % 3 or self.Wh.shape != (d3 // 3, d3) or self.b.shape != (d3,):
            raise DimensionError(
                f"inconsistent GRU shapes Wx={self.Wx.shape} Wh={self.Wh.shape} b={self.b.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.Wx.shape[0]

    @property
    def d(self) -> int:
        return self.Wh.shape[0]

    @classmethod
    def zeros(cls, n_in: int, d: int) -> "GRUParams":
        return cls(Tensor(np.zeros((n_in, 3 * d))), Tensor(np.zeros((d, 3 * d))), Tensor(np.zeros(3 * d)))

    @classmethod
    def init(cls, n_in: int, d: int, rng: np.random.Generator) -> "GRUParams":
        bound = 1.0 / np.sqrt(d)
        return cls(
            Tensor(rng.uniform(-bound, bound, (n_in, 3 * d)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, (d, 3 * d)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, 3 * d), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}


def gru_step(p: GRUParams, x, h) -> Tensor:
    """One GRU update for a batch of rows (``x``: N x n, ``h``: N x d)."""
    x, h = ad.as_tensor(x), ad.as_tensor(h)
    if x.values.ndim == 1:
        x = ad.reshape(x, (1, -1))
    if h.values.ndim == 1:
        h = ad.reshape(h, (1, -1))
    if x.shape[1] != p.n_in or h.shape[1] != p.d or x.shape[0] != h.shape[0]:
        raise DimensionError(f"gru_step: x {x.shape}, h {h.shape} for GRU({p.n_in}->{p.d})")
    d = p.d
    xa = ad.add_bias(ad.matmul(x, p.Wx), p.b)
    z = ad.sigmoid(ad.add(ad.slice_cols(xa, 0, d), ad.matmul(h, ad.slice_cols(p.Wh, 0, d))))
    r = ad.sigmoid(ad.add(ad.slice_cols(xa, d, 2 * d), ad.matmul(h, ad.slice_cols(p.Wh, d, 2 * d))))
    c = ad.tanh(ad.add(ad.slice_cols(xa, 2 * d, 3 * d), ad.matmul(ad.mul(r, h), ad.slice_cols(p.Wh, 2 * d, 3 * d))))
    keep = ad.sub(1.0, z)
    return ad.add(ad.mul(keep, h), ad.mul(z, c))


def gru_sequence(X, Wx, Wh, b) -> Tensor:
    """Final hidden state of a GRU run from zero over ``X`` (w x N x n)."""
    X, Wx, Wh, b = (ad.as_tensor(t) for t in (X, Wx, Wh, b))
    xv, wx, wh, bv = X.values, Wx.values, Wh.values, b.values
    if xv.ndim != 3 or wx.ndim != 2 or xv.shape[2] != wx.shape[0]:
        raise DimensionError(f"gru_sequence: inputs {X.shape} vs Wx {Wx.shape}")
    d = wh.shape[0]
    if wx.shape[1] != 3 * d or wh.shape != (d, 3 * d) or bv.shape != (3 * d,):
        raise DimensionError(f"gru_sequence: Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}")
    w, N, _ = xv.shape
    # input contributions of all steps in one matmul
    xa = (xv.reshape(w * N, -1) @ wx + bv).reshape(w, N, 3 * d)
    wzr, wc = wh[:, :2 * d], wh[:, 2 * d:]
    hs = np.empty((w + 1, N, d))  # hs[t] is the state entering step t
    zr = np.empty((w, N, 2 * d))
    cs = np.empty((w, N, d))
    rh = np.empty((w, N, d))
    hs[0] = 0.0
    for t in range(w):
        h = hs[t]
        zr[t] = _sigmoid(xa[t, :, :2 * d] + h @ wzr)
        np.multiply(zr[t, :, d:], h, out=rh[t])
        cs[t] = np.tanh(xa[t, :, 2 * d:] + rh[t] @ wc)
        z = zr[t, :, :d]
        hs[t + 1] = h + z * (cs[t] - h)
    need_x = X.requires_grad

    def backward(g):
        dxa = np.empty((w, N, 3 * d))
        dh = g
        wzr_t, wc_t = wzr.T, wc.T
        for t in range(w - 1, -1, -1):
            hp, c = hs[t], cs[t]
            z, r = zr[t, :, :d], zr[t, :, d:]
            dac = dh * z * (1.0 - c * c)
            drh = dac @ wc_t
            dzr = dxa[t, :, :2 * d]
            dzr[:, :d] = dh * (c - hp) * z * (1.0 - z)
            dzr[:, d:] = drh * hp * r * (1.0 - r)
            dxa[t, :, 2 * d:] = dac
            dh = dh * (1.0 - z) + drh * r + dzr @ wzr_t
        dwh = np.empty_like(wh)
        hp_all = hs[:w].reshape(w * N, d)
        flat = dxa.reshape(w * N, 3 * d)
        dwh[:, :2 * d] = hp_all.T @ flat[:, :2 * d]
        dwh[:, 2 * d:] = rh.reshape(w * N, d).T @ flat[:, 2 * d:]
        dwx = xv.reshape(w * N, -1).T @ flat
        dX = (flat @ wx.T).reshape(xv.shape) if need_x else None
        return dX, dwx, dwh, flat.sum(axis=0)

    return _emit(hs[w].copy(), (X, Wx, Wh, b), backward)


_register("gru_sequence")


def run_gru(p: GRUParams, X) -> Tensor:
    return gru_sequence(X, p.Wx, p.Wh, p.b)


def encode_node_window(bank: dict, node_type: NodeType, window) -> Tensor:
    """Embedding of one node window (``w x n``) with the GRU of its type."""
    p = bank[NodeType(node_type)]
    window = np.asarray(ad.as_tensor(window).values)
    if window.ndim != 2 or window.shape[1] != p.n_in:
        raise DimensionError(
            f"{NodeType(node_type).value} encoder expects windows of width {p.n_in}, got {window.shape}"
        )
    return ad.reshape(run_gru(p, window[:, None, :]), (p.d,))


def append_covariates(h, covariates) -> Tensor:
    """``[h | covariates]``; an empty covariate block leaves ``h`` unchanged."""
    cov = ad.as_tensor(covariates)
    if cov.values.size == 0:
        return ad.as_tensor(h)
    return ad.concat(h, cov)


def pad_columns(a: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad the last axis of ``a`` to ``width``."""
    extra = width - a.shape[-1]
    if extra < 0:
        raise DimensionError(f"cannot pad width {a.shape[-1]} down to {width}")
    if extra == 0:
        return a
    pad = [(0, 0)] * (a.ndim - 1) + [(0, extra)]
    return np.pad(a, pad)

"""Finite-difference checks for every recorded op and a tiny end-to-end model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import encoders  # noqa: F401  (registers gru_sequence)
from .autodiff import SegmentIndex, Tensor
from .encoders import gru_sequence

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalar that depends on every output entry with a distinct weight."""
    w = rng.uniform(0.5, 1.5, out.shape)
    return ad.sum_all(ad.mul(out, w))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def op_cases(seed: int = 0) -> dict[str, list[tuple[Callable, np.ndarray]]]:
    """For each registered op, (function of one input, input value) pairs."""
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    C = rng.normal(size=(3, 4))
    v = rng.normal(size=4)
    tgt = np.array([2, 0, 2, 1, 0, 2])
    idx = SegmentIndex(tgt, 3)
    msg = rng.normal(size=(6, 3))
    logits = rng.normal(size=6)
    X = rng.normal(size=(4, 3, 2))
    Wx, Wh, b = rng.normal(size=(2, 9)) * 0.5, rng.normal(size=(3, 9)) * 0.5, rng.normal(size=9) * 0.5
    rows = np.array([0, 2, 2, 1])
    fac = rng.normal(size=3)
    W = lambda f: (lambda t: _weighted(f(t), np.random.default_rng(seed + 1)))  # noqa: E731

    return {
        "matmul": [(W(lambda t: ad.matmul(t, B)), A), (W(lambda t: ad.matmul(A, t)), B)],
        "add": [(W(lambda t: ad.add(t, C)), A), (W(lambda t: ad.add(t, 2.5)), A),
                (W(lambda t: ad.add(A, ad.sum_all(t))), v)],
        "sub": [(W(lambda t: ad.sub(t, C)), A), (W(lambda t: ad.sub(C, t)), A), (W(lambda t: ad.sub(1.0, t)), A)],
        "mul": [(W(lambda t: ad.mul(t, C)), A), (W(lambda t: ad.mul(t, t)), A), (W(lambda t: ad.mul(3.0, t)), A)],
        "scale": [(W(lambda t: ad.scale(t, -1.7)), A)],
        "leaky_relu": [(W(lambda t: ad.leaky_relu(t, 0.2)), _away_from_zero(rng, (3, 4)))],
        "sigmoid": [(W(ad.sigmoid), A)],
        "tanh": [(W(ad.tanh), A)],
        "exp": [(W(ad.exp), A * 0.5)],
        "concat": [(W(lambda t: ad.concat(t, C)), A), (W(lambda t: ad.concat(C, t)), A),
                   (W(lambda t: ad.concat(t, v)), v)],
        "gather_rows": [(W(lambda t: ad.gather_rows(t, rows)), A)],
        "add_bias": [(W(lambda t: ad.add_bias(t, v)), A), (W(lambda t: ad.add_bias(A, t)), v)],
        "scale_rows": [(W(lambda t: ad.scale_rows(t, fac)), A), (W(lambda t: ad.scale_rows(A, t)), fac)],
        "reshape": [(W(lambda t: ad.reshape(t, (2, 6))), A)],
        "slice_cols": [(W(lambda t: ad.slice_cols(t, 1, 3)), A)],
        "sum_all": [(lambda t: ad.mul(ad.sum_all(t), ad.sum_all(t)), A)],
        "segment_softmax": [(W(lambda t: ad.segment_softmax(t, idx)), logits)],
        "segment_sum": [(W(lambda t: ad.segment_sum(t, idx, 4)), msg)],
        "frobenius_mse": [(lambda t: ad.frobenius_mse(t, C), A), (lambda t: ad.frobenius_mse(C, t), A)],
        "gru_sequence": [
            (W(lambda t: gru_sequence(t, Wx, Wh, b)), X),
            (W(lambda t: gru_sequence(X, t, Wh, b)), Wx),
            (W(lambda t: gru_sequence(X, Wx, t, b)), Wh),
            (W(lambda t: gru_sequence(X, Wx, Wh, t)), b),
        ],
    }


def check_ops(names: Optional[list[str]] = None, eps: float = 1e-6) -> list[CheckResult]:
    cases = op_cases()
    names = list(ad.REGISTERED_OPS) if names is None else names
    out = []
    for name in names:
        if name not in cases:
            out.append(CheckResult(name, float("inf"), OP_TOLERANCE))
            continue
        err = max(ad.finite_difference_check(f, Tensor(x), eps) for f, x in cases[name])
        out.append(CheckResult(name, err, OP_TOLERANCE))
    return out


def tiny_model_check(seed: int = 0, eps: float = 1e-6) -> CheckResult:
    """End-to-end gradient of a 4-node, one-layer model with d_emb = 2."""
    from .dataset import prepare
    from .model import ModelConfig, build_model
    from .plantsim import PlantConfig, simulate

    sim = simulate(PlantConfig(n_units=2, duration=6 * 3600.0, seed=seed))
    prep = prepare(sim.frame(), sim.graph, w=4, h=2)
    model = build_model(ModelConfig(layers=1, d_emb=2, hidden=2, seed=seed), sim.graph, prep.train)
    rng = np.random.default_rng(seed)
    # the head's output layer starts at zero, which would hide upstream gradients
    model.params["head.W2"].values = rng.normal(size=model.params["head.W2"].shape)
    model.params["head.b2"].values = rng.normal(size=model.params["head.b2"].shape)
    batch = model.make_batch(prep.train, np.arange(3))
    f, theta = flat_loss(model, batch)
    return CheckResult("hgat_end_to_end", ad.finite_difference_check(f, theta, eps), MODEL_TOLERANCE)


def flat_loss(model, batch):
    """Loss as a function of one vector holding every parameter."""
    names = list(model.params)
    shapes = [model.params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    theta = Tensor(np.concatenate([model.params[n].values.reshape(-1) for n in names]))
    total = int(sum(sizes))

    def f(t: Tensor) -> Tensor:
        saved = dict(model.params)
        row = ad.reshape(t, (1, total))
        off = 0
        try:
            for n, shp, sz in zip(names, shapes, sizes):
                model.params[n] = ad.reshape(ad.slice_cols(row, off, off + sz), shp)
                off += sz
            return model.loss(batch)
        finally:
            model.params.update(saved)

    return f, theta


def run_all() -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = check_ops()
    results.append(tiny_model_check())
    return results, time.perf_counter() - start

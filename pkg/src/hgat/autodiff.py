"""Dense reverse-mode automatic differentiation on top of numpy.

A :class:`Tape` records every operation whose operands require gradients
while it is the active tape of the current thread.  Operations executed with
no active tape simply compute values, which is the fast path used for
inference.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    ...     grads = tape.backward(loss)
    >>> float(tape.grad(x)[0])
    6.0
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericalError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "SegmentIndex",
    "active_tape",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "exp",
    "concat",
    "gather_rows",
    "add_bias",
    "scale_rows",
    "reshape",
    "slice_cols",
    "sum_all",
    "segment_softmax",
    "segment_sum",
    "frobenius_mse",
    "finite_difference_check",
    "REGISTERED_OPS",
]

# names of every op that records a backward rule; gradcheck iterates these
REGISTERED_OPS: list[str] = []


def _register(name: str) -> None:
    if name not in REGISTERED_OPS:
        REGISTERED_OPS.append(name)


class Tensor:
    """A float64 array plus an optional handle into the active tape."""

    __slots__ = ("values", "requires_grad", "node_id", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out_id", "in_ids", "backward")

    def __init__(self, out_id, in_ids, backward):
        self.out_id = out_id
        self.in_ids = in_ids
        self.backward = backward


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> Optional["Tape"]:
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Single-use record of the operations of one forward pass.

    Leaves (tensors created with ``requires_grad=True``) are registered the
    first time an operation consumes them; their handles are local to this
    tape so that shared parameter tensors can be used by several tapes on
    different threads at once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._next_id = 0
        self._leaf_ids: dict[int, int] = {}
        self._leaf_refs: dict[int, Tensor] = {}
        self._outputs: set[int] = set()
        self._grads: Optional[dict[int, np.ndarray]] = None
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def watch(self, t: Tensor) -> int:
        """Return the handle of ``t`` on this tape, registering leaves on demand."""
        if t._tape is self:
            return t.node_id
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None:
            nid = self._new_id()
            self._leaf_ids[key] = nid
            self._leaf_refs[nid] = t
        return nid

    def _record(self, values: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        if self.consumed:
            raise UsageError("tape already consumed by backward(); start a new Tape")
        in_ids = tuple(self.watch(t) if t.requires_grad else None for t in inputs)
        out = Tensor(values, requires_grad=True)
        out.node_id = self._new_id()
        out._tape = self
        self._outputs.add(out.node_id)
        self._records.append(_Record(out.node_id, in_ids, backward))
        return out

    @property
    def operations(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate d(loss)/d(leaf) for every leaf reached from ``loss``."""
        if self.consumed:
            raise UsageError("backward() called twice on the same tape")
        if loss.values.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise UsageError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
        for rec in reversed(self._records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for nid, ig in zip(rec.in_ids, in_grads):
                if nid is None or ig is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = ig if prev is None else prev + ig
        self._grads = {nid: g for nid, g in grads.items() if nid in self._leaf_refs}
        self._records = []
        return {nid: Tensor(g) for nid, g in self._grads.items()}

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient for leaf ``t`` after backward(), or None if it was not reached."""
        if self._grads is None:
            raise UsageError("call backward() first")
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            return None
        return self._grads.get(nid)

    def grads_for(self, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients aligned with ``params``; unreached leaves get zeros."""
        out = []
        for p in params:
            g = self.grad(p)
            out.append(np.zeros_like(p.values) if g is None else g)
        return out


def _emit(values: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(values)
    return tape._record(values, inputs, backward)


# --------------------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), backward)


_register("matmul")


def _is_scalar(x) -> bool:
    return (x.values if isinstance(x, Tensor) else np.asarray(x)).ndim == 0


def _binary(name, a, b, fwd, da, db) -> Tensor:
    a_scalar, b_scalar = _is_scalar(a), _is_scalar(b)
    a, b = as_tensor(a), as_tensor(b)
    if not (a_scalar or b_scalar) and a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    out = fwd(av, bv)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = da(g, av, bv)
            ga = np.sum(ga) if a_scalar and not b_scalar else np.broadcast_to(ga, out.shape)
            ga = np.asarray(ga, dtype=np.float64).reshape(av.shape)
        if b.requires_grad:
            gb = db(g, av, bv)
            gb = np.sum(gb) if b_scalar and not a_scalar else np.broadcast_to(gb, out.shape)
            gb = np.asarray(gb, dtype=np.float64).reshape(bv.shape)
        return ga, gb

    return _emit(out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


for _n in ("add", "sub", "mul"):
    _register(_n)


def scale(a, c: float) -> Tensor:
    """Multiply by a constant python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _emit(a.values * c, (a,), lambda g: (g * c,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    x = a.values
    pos = x > 0
    out = np.where(pos, x, slope * x)
    return _emit(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.values)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow for any finite input
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.values)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.values)
    return _emit(y, (a,), lambda g: (g * y,))


for _n in ("scale", "leaky_relu", "sigmoid", "tanh", "exp"):
    _register(_n)

_UNARY = {"leaky_relu": leaky_relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None, *, slope: float = 0.01) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op in _BINARY:
        if b is None:
            raise UsageError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op == "leaky_relu":
        return leaky_relu(a, slope)
    if op in _UNARY:
        return _UNARY[op](a)
    raise UsageError(f"unknown elementwise op {op!r}")


def concat(a, b) -> Tensor:
    """Column-wise concatenation (1-D tensors are joined end to end)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim == 1 and bv.ndim == 1:
        p = av.shape[0]
        out = np.concatenate([av, bv])
        return _emit(out, (a, b), lambda g: (g[:p], g[p:]))
    if av.ndim != 2 or bv.ndim != 2 or av.shape[0] != bv.shape[0]:
        raise DimensionError(f"concat: leading dimensions differ, {a.shape} vs {b.shape}")
    p = av.shape[1]
    out = np.concatenate([av, bv], axis=1)
    return _emit(out, (a, b), lambda g: (g[:, :p], g[:, p:]))


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]`` (indices may repeat)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise GraphError(f"gather index out of range for {n} rows")
    shape = a.shape

    def backward(g):
        return (scatter_add_rows(g, index, shape),)

    return _emit(a.values[index], (a,), backward)


def scatter_add_rows(g: np.ndarray, index: np.ndarray, shape) -> np.ndarray:
    """``out[index[i]] += g[i]`` via a stable sort and one reduceat."""
    out = np.zeros(shape)
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    si = index[order]
    starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
    out[si[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def add_bias(a, bias) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix."""
    a, bias = as_tensor(a), as_tensor(bias)
    if a.values.ndim != 2 or bias.values.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {a.shape} with bias {bias.shape}")
    return _emit(a.values + bias.values, (a, bias), lambda g: (g, g.sum(axis=0)))


def scale_rows(a, c) -> Tensor:
    """Multiply row i of ``a`` by ``c[i]``."""
    a, c = as_tensor(a), as_tensor(c)
    if a.values.ndim != 2 or c.values.ndim != 1 or a.shape[0] != c.shape[0]:
        raise DimensionError(f"scale_rows: {a.shape} with row factors {c.shape}")
    av, cv = a.values, c.values

    def backward(g):
        return (g * cv[:, None], np.einsum("ij,ij->i", g, av))

    return _emit(av * cv[:, None], (a, c), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a matrix."""
    a = as_tensor(a)
    if a.values.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise DimensionError(f"slice_cols: [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _emit(a.values[:, start:stop], (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


for _n in ("concat", "gather_rows", "add_bias", "scale_rows", "reshape", "slice_cols", "sum_all"):
    _register(_n)


# ------------------------------------------------------------------ segment ops


class SegmentIndex:
    """Groups edges by the ordinal of their target node.

    ``target_of_edge[e]`` is the target of edge ``e``.  Edges need not be
    sorted; a stable sort permutation is kept internally.  Only targets that
    actually occur form segments, so no segment is ever empty.
    """

    def __init__(self, target_of_edge, n_targets: Optional[int] = None):
        tgt = np.asarray(target_of_edge, dtype=np.int64).reshape(-1)
        if tgt.size and tgt.min() < 0:
            raise GraphError("negative target ordinal in segment index")
        if n_targets is not None and tgt.size and tgt.max() >= n_targets:
            raise GraphError(
                f"segment target {int(tgt.max())} out of range for {n_targets} targets"
            )
        self.target_of_edge = tgt
        self.n_edges = tgt.size
        self.n_targets = n_targets
        self.is_sorted = bool(np.all(tgt[1:] >= tgt[:-1])) if tgt.size > 1 else True
        self.order = None if self.is_sorted else np.argsort(tgt, kind="stable")
        st = tgt if self.is_sorted else tgt[self.order]
        if st.size:
            change = np.flatnonzero(st[1:] != st[:-1]) + 1
            self.starts = np.concatenate([[0], change]).astype(np.int64)
            self.segment_targets = st[self.starts]
            counts = np.diff(np.concatenate([self.starts, [st.size]]))
            # segment id of each edge in sorted order
            self._seg_of_sorted = np.repeat(np.arange(self.starts.size), counts)
        else:
            self.starts = np.zeros(0, dtype=np.int64)
            self.segment_targets = np.zeros(0, dtype=np.int64)
            self._seg_of_sorted = np.zeros(0, dtype=np.int64)

    def segments(self) -> dict[int, list[int]]:
        """Map target ordinal -> list of edge positions (original order)."""
        pos = np.arange(self.n_edges) if self.order is None else self.order
        out: dict[int, list[int]] = {}
        for seg, p in zip(self._seg_of_sorted, pos):
            out.setdefault(int(self.segment_targets[seg]), []).append(int(p))
        return out

    def sort(self, x: np.ndarray) -> np.ndarray:
        return x if self.order is None else x[self.order]

    def unsort(self, xs: np.ndarray) -> np.ndarray:
        if self.order is None:
            return xs
        out = np.empty_like(xs)
        out[self.order] = xs
        return out

    def reduce_sum(self, xs_sorted: np.ndarray) -> np.ndarray:
        """Per-segment sums of sorted rows, one row per segment."""
        return np.add.reduceat(xs_sorted, self.starts, axis=0)

    def broadcast(self, per_segment: np.ndarray) -> np.ndarray:
        """Per-segment values spread back to every sorted edge."""
        return per_segment[self._seg_of_sorted]


def segment_softmax(logits, idx: SegmentIndex) -> Tensor:
    """Softmax of ``logits`` within each group of edges sharing a target."""
    logits = as_tensor(logits)
    lv = logits.values
    if lv.ndim != 1 or lv.shape[0] != idx.n_edges:
        raise DimensionError(f"segment_softmax: logits {logits.shape} vs {idx.n_edges} edges")
    if idx.n_edges == 0:
        return _emit(np.zeros(0), (logits,), lambda g: (np.zeros(0),))
    ls = idx.sort(lv)
    seg_max = np.maximum.reduceat(ls, idx.starts)
    e = np.exp(ls - idx.broadcast(seg_max))
    ys = e / idx.broadcast(idx.reduce_sum(e))
    y = idx.unsort(ys)

    def backward(g):
        gs = idx.sort(g)
        dot = idx.broadcast(idx.reduce_sum(gs * ys))
        return (idx.unsort(ys * (gs - dot)),)

    return _emit(y, (logits,), backward)


def segment_sum(messages, idx: SegmentIndex, n_targets: int) -> Tensor:
    """Sum message rows into their target rows; absent targets get zeros."""
    messages = as_tensor(messages)
    mv = messages.values
    if mv.ndim != 2 or mv.shape[0] != idx.n_edges:
        raise DimensionError(f"segment_sum: messages {messages.shape} vs {idx.n_edges} edges")
    if idx.n_edges and idx.segment_targets.max() >= n_targets:
        raise GraphError(
            f"segment_sum: target {int(idx.segment_targets.max())} >= n_targets={n_targets}"
        )
    out = np.zeros((n_targets, mv.shape[1]))
    if idx.n_edges:
        out[idx.segment_targets] = idx.reduce_sum(idx.sort(mv))
    tgt = idx.target_of_edge
    return _emit(out, (messages,), lambda g: (g[tgt],))


def frobenius_mse(pred, target) -> Tensor:
    """Mean of squared entrywise residuals."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"frobenius_mse: {pred.shape} vs {target.shape}")
    r = pred.values - target.values
    n = max(r.size, 1)
    out = np.asarray(np.sum(r * r) / n)

    def backward(g):
        gr = (2.0 * float(g) / n) * r
        return (gr if pred.requires_grad else None, -gr if target.requires_grad else None)

    return _emit(out, (pred, target), backward)


for _n in ("segment_softmax", "segment_sum", "frobenius_mse"):
    _register(_n)


# ------------------------------------------------------------ gradient oracle


def finite_difference_check(
    f: Callable[[Tensor], Tensor], params: Tensor, eps: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the parameter tensor to a scalar tensor.  The relative error of
    each coordinate is ``|a - b| / max(|a|, |b|, floor)``; the floor keeps
    coordinates whose true gradient is essentially zero from being judged on
    the round-off of the difference quotient alone.
    """
    if not (0.0 < eps <= 1e-2):
        raise UsageError(f"eps must lie in (0, 1e-2], got {eps}")
    params = Tensor(np.array(params.values, copy=True), requires_grad=True)
    with Tape() as tape:
        loss = f(params)
        if loss.values.size != 1:
            raise UsageError("finite_difference_check: f must return a scalar")
        if loss._tape is not tape:
            analytic = np.zeros_like(params.values)
        else:
            tape.backward(loss)
            g = tape.grad(params)
            analytic = np.zeros_like(params.values) if g is None else g

    base = params.values
    flat = base.reshape(-1)
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(Tensor(base)).values)
        flat[i] = old - eps
        fm = float(f(Tensor(base)).values)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"f is not finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    a = analytic.reshape(-1)
    if not np.all(np.isfinite(a)):
        raise NumericalError("tape gradient is not finite")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(np.max(np.abs(a - numeric) / denom))

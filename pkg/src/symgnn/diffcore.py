"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D ``numpy`` array wrapped in a :class:`Tensor`.  Ops build
the graph eagerly; :func:`backward` walks it in reverse topological order.
Constant operands (adjacency matrices, masks, sparse features) are passed as
plain arrays or ``scipy.sparse`` matrices and never receive gradients.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "__weakref__")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None, op="leaf"):
        value = np.asarray(value, dtype=DTYPE)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        if value.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {value.shape}")
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.op = op
        if parents:
            _record(self)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar; keeps model code readable
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    __slots__ = ("name", "decay")

    def __init__(self, value, name: str, decay: bool = True):
        super().__init__(np.array(value, dtype=DTYPE, copy=True), requires_grad=True, op="param")
        self.name = name
        self.decay = decay

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParameterSet(OrderedDict):
    """Ordered ``name -> Parameter`` map with unique names."""

    def add(self, name: str, value, decay: bool = True) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(value, name, decay)
        self[name] = p
        return p

    def count(self) -> int:
        return int(sum(p.value.size for p in self.values()))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.items()}

    def load(self, values: Dict[str, np.ndarray]):
        for k, v in values.items():
            if self[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != parameter shape {self[k].shape}")
            self[k].value = np.array(v, dtype=DTYPE, copy=True)

    def zero_grad(self):
        for p in self.values():
            p.grad = None


# ---------------------------------------------------------------------------
# activation accounting


class Tape:
    """Records every non-leaf node created while active.

    Only shapes are kept, so the tape never extends node lifetimes.  Used for
    the peak-activation metric and to assert which dense shapes a forward
    pass materialized.
    """

    def __init__(self):
        self.shapes: List[tuple] = []
        self.ops: List[str] = []

    @property
    def elements(self) -> int:
        return int(sum(r * c for r, c in self.shapes))

    def largest(self) -> tuple:
        return max(self.shapes, key=lambda s: s[0] * s[1], default=(0, 0))

    def has_shape(self, shape) -> bool:
        return tuple(shape) in self.shapes

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


_TAPES: List[Tape] = []


def _record(node: Tensor):
    for tape in _TAPES:
        tape.shapes.append(node.value.shape)
        tape.ops.append(node.op)


# ---------------------------------------------------------------------------
# ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.value.T, a.value.T @ g

    return Tensor(a.value @ b.value, (a, b), back, op="matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g), op="add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return Tensor(a.value - b.value, (a, b), lambda g: (g, -g), op="sub")


def add_n(nodes: Sequence[Tensor]) -> Tensor:
    nodes = [_as_tensor(n) for n in nodes]
    if not nodes:
        raise ValueError("add_n needs at least one operand")
    for n in nodes[1:]:
        _check_same(nodes[0], n, "add_n")
    total = nodes[0].value.copy()
    for n in nodes[1:]:
        total += n.value
    return Tensor(total, nodes, lambda g: tuple(g for _ in nodes), op="add_n")


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "hadamard")
    return Tensor(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value), op="hadamard")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.value.T.copy(), (a,), lambda g: (g.T,), op="transpose")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return Tensor(a.value * c, (a,), lambda g: (g * c,), op="scale")


def add_row(x, b) -> Tensor:
    """``x + b`` with a 1 x c row ``b`` broadcast over the rows of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_row: bias shape {b.shape} does not fit {x.shape}")
    return Tensor(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)), op="add_row")


def mul_col(x, s) -> Tensor:
    """Scale row ``i`` of ``x`` by ``s[i]``; ``s`` is n x 1 (i.e. ``diag(s) @ x``)."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.shape != (x.shape[0], 1):
        raise ShapeError(f"mul_col: scale shape {s.shape} does not fit {x.shape}")

    def back(g):
        return g * s.value, (g * x.value).sum(axis=1, keepdims=True)

    return Tensor(x.value * s.value, (x, s), back, op="mul_col")


def affine_scalar(x, a, b) -> Tensor:
    """``a * x + b`` with 1 x 1 tensors ``a`` and ``b``."""
    x, a, b = _as_tensor(x), _as_tensor(a), _as_tensor(b)
    if a.shape != (1, 1) or b.shape != (1, 1):
        raise ShapeError(f"affine_scalar: expected 1x1 scalars, got {a.shape} and {b.shape}")
    av, bv = a.value[0, 0], b.value[0, 0]

    def back(g):
        return g * av, np.array([[np.sum(g * x.value)]]), np.array([[np.sum(g)]])

    return Tensor(av * x.value + bv, (x, a, b), back, op="affine_scalar")


def const_matmul(c, x) -> Tensor:
    """``c @ x`` for a constant (dense or scipy.sparse) left operand."""
    x = _as_tensor(x)
    if c.shape[1] != x.shape[0]:
        raise ShapeError(f"const_matmul: shape mismatch {c.shape} @ {x.shape}")
    out = np.asarray(c @ x.value)

    def back(g):
        return (np.asarray(c.T @ g),)

    return Tensor(out, (x,), back, op="const_matmul")


def take_rows(x, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]

    def back(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    if len(idx) == n and np.array_equal(idx, np.arange(n)):
        return x
    return Tensor(x.value[idx], (x,), back, op="take_rows")


def take_cols(x, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.atleast_1d(np.asarray(idx, dtype=np.intp))

    def back(g):
        out = np.zeros_like(x.value)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return Tensor(x.value[:, idx], (x,), back, op="take_cols")


def concat_cols(nodes: Sequence[Tensor]) -> Tensor:
    nodes = [_as_tensor(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[n.shape for n in nodes]}")
    widths = np.cumsum([0] + [n.shape[1] for n in nodes])

    def back(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(nodes)))

    return Tensor(np.concatenate([n.value for n in nodes], axis=1), nodes, back, op="concat_cols")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")


def activation(x, kind: str) -> Tensor:
    x = _as_tensor(x)
    if kind == "linear":
        return x
    if kind == "relu":
        active = x.value > 0
        return Tensor(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,), op="relu")
    if kind == "sigmoid":
        s = _sigmoid(x.value)
        return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),), op="sigmoid")
    if kind == "tanh":
        t = np.tanh(x.value)
        return Tensor(t, (x,), lambda g: (g * (1.0 - t * t),), op="tanh")
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def row_softmax_gram(u, v) -> Tensor:
    """Row-wise softmax of the inner-product matrix ``u @ v.T``.

    ``out[i, j] = exp(<u_i, v_j>) / sum_k exp(<u_i, v_k>)``, stabilized by
    subtracting each row's maximum logit.  Pass the same tensor twice for
    within-network attention.
    """
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape[1] != v.shape[1]:
        raise ShapeError(f"row_softmax_gram: embedding widths differ {u.shape} vs {v.shape}")
    logits = u.value @ v.value.T
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    same = u is v

    def back(g):
        # softmax Jacobian applied row-wise, then through the gram product
        gl = p * (g - np.sum(g * p, axis=1, keepdims=True))
        gu = gl @ v.value
        gv = gl.T @ u.value
        if same:
            return (gu + gv,)
        return gu, gv

    parents = (u,) if same else (u, v)
    return Tensor(p, parents, back, op="row_softmax_gram")


def masked_mse(pred, h, mask, normalizer: Optional[float] = None) -> Tensor:
    """Sum of squared errors over observed entries, optionally divided by ``normalizer``.

    Accumulated with ``math.fsum`` so the value does not depend on how the
    rows were batched.
    """
    pred = _as_tensor(pred)
    h = np.asarray(h, dtype=DTYPE)
    mask = np.asarray(mask)
    if pred.shape != h.shape or h.shape != mask.shape:
        raise ShapeError(f"masked_mse: shapes differ pred={pred.shape} h={h.shape} mask={mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("masked_mse: mask must be binary")
    m = mask.astype(DTYPE)
    resid = m * (h - pred.value)
    denom = 1.0 if normalizer is None else float(normalizer)
    total = math.fsum((resid[mask.astype(bool)] ** 2).tolist()) / denom

    def back(g):
        return (g[0, 0] * (-2.0 / denom) * resid,)

    return Tensor(np.array([[total]]), (pred,), back, op="masked_mse")


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    return Tensor(np.array([[x.value.sum()]]), (x,), lambda g: (np.full(x.shape, g[0, 0]),), op="sum_all")


# ---------------------------------------------------------------------------
# backward


def _topological(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[str, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Returns the gradients of this loss alone, by name, for every reachable
    :class:`Parameter` leaf; ``.grad`` keeps accumulating until zeroed.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    grads = {id(loss): np.ones((1, 1))}
    out = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            if isinstance(node, Parameter):
                out[node.name] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if parent.shape != pg.shape:
                raise ShapeError(f"{node.op}: gradient shape {pg.shape} for parent {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam step with decoupled weight decay, in place.

    Decay ``p <- p - lr * wd * p`` is applied before the Adam delta and only
    to parameters with ``decay=True``.  Parameters missing from ``grads`` are
    treated as having zero gradient.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        if m.shape != p.shape:
            raise ShapeError(f"adam: moment shape {m.shape} != parameter {name} shape {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        value = p.value
        if p.decay and state.weight_decay:
            value = value - state.lr * state.weight_decay * value
        p.value = value - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def failures(self) -> List[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def table(self) -> str:
        lines = [f"{'parameter':<28} {'max rel err':>12}  status"]
        for k, e in self.errors.items():
            lines.append(f"{k:<28} {e:12.3e}  {'ok' if e < self.tolerance else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max absolute deviation scaled by the larger of the two gradient magnitudes.

    The scale never drops below ``floor`` so a gradient that is zero up to
    rounding is not reported as a 100% error.
    """
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                      eps: float = 1e-6, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare :func:`backward` against central differences for each parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call and return a scalar tensor.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    errors = {}
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.value)
        base = p.value
        for idx in np.ndindex(*p.shape):
            plus = base.copy()
            plus[idx] += eps
            p.value = plus
            f_plus = loss_fn().value[0, 0]
            minus = base.copy()
            minus[idx] -= eps
            p.value = minus
            f_minus = loss_fn().value[0, 0]
            numeric[idx] = (f_plus - f_minus) / (2.0 * eps)
        p.value = base
        errors[p.name] = relative_error(analytic, numeric)
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# initialization and checkpoints


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


MAGIC = b"SYMGNNCK"
FORMAT_VERSION = 1


def save_archive(path, arrays: Dict[str, np.ndarray]):
    """Write a flat named-matrix archive.

    Layout (little endian): magic, u32 version, u32 count, then per entry
    u32 name length, utf-8 name, u64 rows, u64 cols, rows*cols f64 row-major.
    """
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            if arr.ndim != 2:
                raise ShapeError(f"archive entries are matrices; {name} has shape {arr.shape}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<QQ", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_archive(path) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a parameter archive (bad magic header)")
        version, count = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported archive version {version}")
        def read(size):
            chunk = f.read(size)
            if len(chunk) != size:
                raise ValueError(f"{path}: archive is truncated")
            return chunk

        for _ in range(count):
            (n,) = struct.unpack("<I", read(4))
            name = read(n).decode("utf-8")
            rows, cols = struct.unpack("<QQ", read(16))
            data = np.frombuffer(read(8 * rows * cols), dtype="<f8")
            out[name] = data.reshape(rows, cols).astype(DTYPE)
    return out

"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Graph` (used as a
context manager) whenever at least one input requires gradients. Outside a
graph nothing is recorded, which is how teacher forwards stay gradient free.

Training runs in float32. ``precision("float64")`` switches newly created
tensors to float64 for gradient checking.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

__all__ = [
    "Tensor", "Graph", "DimensionError", "GradientError", "OptimizerError",
    "AdamWState", "GradCheckReport",
    "tensor", "parameter", "precision", "default_dtype", "set_deterministic",
    "is_deterministic",
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "activation",
    "softmax", "log_softmax", "softmax_family", "layer_norm", "multihead_attention", "l2_normalize",
    "cross_entropy_soft", "sum", "mean", "reshape", "transpose", "concat",
    "backward", "adamw_step", "grad_check", "zero_grads",
]


class DimensionError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class OptimizerError(RuntimeError):
    pass


_state = {"dtype": np.float32, "deterministic": False, "limiter": None}
_graphs: list["Graph"] = []


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily change the dtype of newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = {"float32": np.float32, "float64": np.float64}[name]
    try:
        yield
    finally:
        _state["dtype"] = old


def set_deterministic(flag: bool = True) -> None:
    """Pin BLAS to a single thread so reductions have one fixed order."""
    from threadpoolctl import threadpool_limits

    if flag and _state["limiter"] is None:
        _state["limiter"] = threadpool_limits(limits=1)
    elif not flag and _state["limiter"] is not None:
        _state["limiter"].restore_original_limits()
        _state["limiter"] = None
    _state["deterministic"] = bool(flag)


def is_deterministic() -> bool:
    return _state["deterministic"]


class Tensor:
    """Row-major float array plus optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape. Intermediate results inside a graph are marked as
    requiring grad but their gradients live only in the backward scratch.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, False)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{rg})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=_state["dtype"]), False)


@dataclass
class _Node:
    op: str
    parents: tuple
    out: Tensor
    backward: Callable


class Graph:
    """Ordered record of differentiable ops; insertion order is topological."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graphs.append(self)
        return self

    def __exit__(self, *exc):
        _graphs.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _emit(op: str, data: np.ndarray, parents: tuple, bwd: Callable) -> Tensor:
    graph = _graphs[-1] if _graphs else None
    track = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor._result(data, track)
    if track:
        graph.nodes.append(_Node(op, parents, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dims when ``b`` is 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[1])

        def bwd(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", out, (a, b), bwd)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data
    out = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _emit("linear", out, parents, bwd)


# --- nonlinearities ---------------------------------------------------------

def activation(x, kind: str) -> Tensor:
    """Elementwise ``gelu`` (tanh form), ``tanh``, ``sigmoid`` or ``relu``."""
    x = _as_tensor(x)
    xd = x.data
    if kind == "gelu":
        dt = xd.dtype.type
        x2 = xd * xd
        t = x2 * dt(_GELU_A)
        t += 1
        t *= xd
        t *= dt(_GELU_C)
        np.tanh(t, out=t)
        out = t + 1
        out *= xd
        out *= 0.5

        def bwd(g):
            # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
            d = x2 * dt(3 * _GELU_A)
            d += 1
            d *= dt(_GELU_C)
            d *= xd
            d *= 1 - t * t
            d += t
            d += 1
            d *= 0.5
            d *= g
            return (d,)

    elif kind == "tanh":
        out = np.tanh(xd)

        def bwd(g):
            return (g * (1.0 - out * out),)

    elif kind == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * xd))

        def bwd(g):
            return (g * out * (1.0 - out),)

    elif kind == "relu":
        out = np.maximum(xd, 0)

        def bwd(g):
            return (g * (xd > 0),)

    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _emit(kind, out, (x,), bwd)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    y = x - x.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return y


def softmax_family(x, axis: int = -1, log: bool = False) -> Tensor:
    """Max-shifted softmax or log-softmax along ``axis``."""
    x = _as_tensor(x)
    if not log and (axis == -1 or axis == x.ndim - 1):
        rows = np.ascontiguousarray(x.data).reshape(-1, x.shape[-1])
        out = _softmax_last(rows)

        def bwd(g):
            g2 = np.ascontiguousarray(g).reshape(out.shape)
            return (K.softmax_rows_bwd(out, g2, 1.0).reshape(x.shape),)

        return _emit("softmax", out.reshape(x.shape), (x,), bwd)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=axis, keepdims=True)
    if log:
        out = shifted - np.log(z)
        sm = e / z

        def bwd(g):
            return (g - sm * g.sum(axis=axis, keepdims=True),)

        return _emit("log_softmax", out, (x,), bwd)
    out = e / z

    def bwd(g):
        gs = g * out
        gs -= out * gs.sum(axis=axis, keepdims=True)
        return (gs,)

    return _emit("softmax", out, (x,), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    return softmax_family(x, axis, log=False)


def log_softmax(x, axis: int = -1) -> Tensor:
    return softmax_family(x, axis, log=True)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis with population statistics, then scale/shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, d)
    y, xhat, rstd = K.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g2 * xhat).sum(axis=0)
        if beta.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gx = K.layer_norm_bwd(g2, xhat, rstd, gamma.data).reshape(x.shape)
        return gx, gg, gb

    return _emit("layer_norm", y.reshape(x.shape), (x, gamma, beta), bwd)


def multihead_attention(qkv, heads: int, store: list | None = None) -> Tensor:
    """Scaled dot-product self-attention on packed projections.

    ``qkv`` is B x N x 3d laid out as (q | k | v), each split into ``heads``
    contiguous head slices. Returns B x N x d. Attention matrices are
    appended to ``store`` when given.
    """
    qkv = _as_tensor(qkv)
    b, n, d3 = qkv.shape
    d = d3 // 3
    dh = d // heads
    scale = dh ** -0.5
    parts = np.ascontiguousarray(qkv.data.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4))
    q, k, v = parts[0], parts[1], parts[2]
    scores = np.matmul(q, k.transpose(0, 1, 3, 2))
    scores *= scale
    attn = _softmax_last(scores.reshape(-1, n)).reshape(b, heads, n, n)
    if store is not None:
        store.append(attn)
    out = np.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)

    def bwd(g):
        go = np.ascontiguousarray(g.reshape(b, n, heads, dh).transpose(0, 2, 1, 3))
        ga = np.matmul(go, v.transpose(0, 1, 3, 2))
        grads = np.empty_like(parts)
        np.matmul(attn.transpose(0, 1, 3, 2), go, out=grads[2])
        gs = K.softmax_rows_bwd(attn.reshape(-1, n), ga.reshape(-1, n), scale).reshape(b, heads, n, n)
        np.matmul(gs, k, out=grads[0])
        np.matmul(gs.transpose(0, 1, 3, 2), q, out=grads[1])
        return (grads.transpose(1, 3, 0, 2, 4).reshape(b, n, d3),)

    return _emit("attention", np.ascontiguousarray(out), (qkv,), bwd)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def bwd(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * proj * (norm > eps)) / denom
        return (gx,)

    return _emit("l2_normalize", out, (x,), bwd)


def cross_entropy_soft(student_logits, teacher_probs, tau_s: float = 1.0) -> Tensor:
    """Mean over rows of ``-sum_k p[k] * log_softmax(logits / tau_s)[k]``."""
    if tau_s <= 0:
        raise ValueError(f"temperature must be positive, got {tau_s}")
    s, p = _as_tensor(student_logits), _as_tensor(teacher_probs)
    if s.shape != p.shape or s.ndim != 2:
        raise DimensionError(f"cross_entropy_soft expects matching B x K, got {s.shape} and {p.shape}")
    z = s.data / tau_s
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    b = s.shape[0]
    loss = -(p.data * logp).sum() / b

    def bwd(g):
        gs = gp = None
        if s.requires_grad:
            sm = e / se
            gs = (sm * p.data.sum(axis=1, keepdims=True) - p.data) * (g / (tau_s * b))
        if p.requires_grad:
            gp = -logp * (g / b)
        return gs, gp

    return _emit("cross_entropy_soft", np.asarray(loss, dtype=s.data.dtype), (s, p), bwd)


# --- reductions and shape ops -----------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size // max(out.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean", out, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = _as_tensor(x)
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bwd(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", np.ascontiguousarray(out), (x,), bwd)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, xs, bwd)


# --- backward ---------------------------------------------------------------

def backward(graph: Graph, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every leaf ``grad`` buffer.

    Gradients add onto existing buffers; call :func:`zero_grads` between
    independent passes.
    """
    if root.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    scratch: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = scratch.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.grad is not None:
                p.grad += pg
            else:
                key = id(p)
                prev = scratch.get(key)
                scratch[key] = pg if prev is None else prev + pg


def zero_grads(params: Iterable[Tensor] | dict) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: dict,
    grads: dict | None,
    state: AdamWState,
    *,
    lr: float | None = None,
    weight_decay: float | None = None,
    no_decay: Iterable[str] = (),
) -> None:
    """One AdamW update with bias correction and decoupled weight decay.

    ``grads`` defaults to each parameter's ``grad`` buffer. Names listed in
    ``no_decay`` skip the decay term. A non-finite gradient aborts the step
    before any parameter or moment is touched.
    """
    lr = state.lr if lr is None else lr
    wd = state.weight_decay if weight_decay is None else weight_decay
    skip = set(no_decay)
    gs = {name: (p.grad if grads is None else grads[name]) for name, p in params.items()}
    for name, g in gs.items():
        if g is None:
            raise OptimizerError(f"parameter {name!r} has no gradient buffer")
        if g.shape != params[name].shape:
            raise OptimizerError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {name!r}; step rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = gs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        upd = (m / c1) / denom
        if wd and name not in skip:
            upd += wd * p.data
        p.data -= (lr * upd).astype(p.data.dtype, copy=False)


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: dict | Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
    *,
    max_coords: int | None = None,
    floor: float = 1e-6,
    rng=None,
) -> GradCheckReport:
    """Compare backward against central differences in float64.

    ``f`` rebuilds the scalar output from the current parameter values.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_coords`` set, that many coordinates per parameter are drawn
    from ``rng`` (a :class:`~stainssl.rng.SplitMix`) instead of all of them.
    """
    items = list(params.items()) if isinstance(params, dict) else [(str(i), p) for i, p in enumerate(params)]
    saved = [(p.data, p.grad) for _, p in items]
    try:
        with precision("float64"):
            for _, p in items:
                p.data = p.data.astype(np.float64)
                p.grad = np.zeros_like(p.data)
            with Graph() as g:
                out = f()
            backward(g, out)
            worst, max_err, n = None, 0.0, 0
            for name, p in items:
                analytic = p.grad.copy()
                flat = p.data.reshape(-1)
                if max_coords is not None and max_coords < flat.size:
                    coords = rng.choice(flat.size, max_coords)
                else:
                    coords = range(flat.size)
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + h
                    fp = float(f().data)
                    flat[c] = orig - h
                    fm = float(f().data)
                    flat[c] = orig
                    num = (fp - fm) / (2 * h)
                    a = float(analytic.reshape(-1)[c])
                    err = abs(a - num) / max(abs(a), abs(num), floor)
                    n += 1
                    if err > max_err or worst is None:
                        max_err = max(err, max_err)
                        worst = (name, int(c), a, num)
    finally:
        for (_, p), (d, gr) in zip(items, saved):
            p.data, p.grad = d, gr
    return GradCheckReport(max_err, n, tol, worst)

"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately closed: matmul, add, mul, softmax, layer_norm,
gelu, avg_pool2d, embedding, concat, reshape, transpose_last and
cross_entropy cover every computation in the model. Higher-level layers
(patchified convolutions, attention, losses) are compositions of these, so
a single finite-difference harness can certify the whole stack.

Tensors are value-like after creation: ops never mutate their inputs, and
the only sanctioned in-place traffic is gradient accumulation (plus the
finite-difference checker, which nudges parameter storage and restores it).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

ParamId = int


class ShapeError(ValueError):
    """An op received operands whose shapes violate its contract."""


class NonFiniteError(ValueError):
    """softmax / cross_entropy saw NaN or infinity on the way in."""


class _Node:
    __slots__ = ("op", "parents", "fn")

    def __init__(self, op: str, parents: tuple["Tensor", ...], fn) -> None:
        self.op = op
        self.parents = parents
        self.fn = fn


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend graph recording (generation / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "node", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # not ascontiguousarray: that would promote 0-d scalars to shape (1,)
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _tracked(parents: Sequence[Tensor]) -> bool:
    return _grad_enabled and any(p.requires_grad or p.node is not None for p in parents)


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(data)
    if _tracked(parents):
        out.node = _Node(op, parents, fn)
    return out


def _accum(grads: dict[int, np.ndarray], t: Tensor, val: np.ndarray) -> None:
    if not (t.requires_grad or t.node is not None):
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + val
    else:
        grads[key] = val


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into `.grad` of every reachable tensor with
    `requires_grad`; unreachable parameters are left untouched. The tape is
    freed afterwards.
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad = loss.grad + np.ones((), np.float64)
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), np.float64)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        if t.node is not None:
            t.node.fn(g, grads)
    for t in order:
        t.node = None


# ---------------------------------------------------------------------------
# broadcast plumbing (suffix rule: the smaller shape tiles over leading axes)

def _broadcast_sides(op: str, a: Tensor, b: Tensor) -> int:
    """0: equal shapes, 1: a broadcasts over b's leading axes, 2: vice versa."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return 0
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return 2
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return 1
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not match under the leading-axis broadcast rule")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# core ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = a.data @ b.data

    def fn(g, grads):
        _accum(grads, a, g @ b.data.T)
        _accum(grads, b, a.data.T @ g)

    return _result("matmul", out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    side = _broadcast_sides("add", a, b)
    out = a.data + b.data

    def fn(g, grads):
        _accum(grads, a, _reduce_to(g, a.shape) if side == 1 else g)
        _accum(grads, b, _reduce_to(g, b.shape) if side == 2 else g)

    return _result("add", out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    side = _broadcast_sides("mul", a, b)
    out = a.data * b.data

    def fn(g, grads):
        ga = g * b.data
        gb = g * a.data
        _accum(grads, a, _reduce_to(ga, a.shape) if side == 1 else ga)
        _accum(grads, b, _reduce_to(gb, b.shape) if side == 2 else gb)

    return _result("mul", out, (a, b), fn)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g, grads):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(grads, x, y * (g - dot))

    return _result("softmax", y, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.data.ndim else 0
    if x.data.ndim < 1:
        raise ShapeError("layer_norm needs at least one axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + bias.data

    def fn(g, grads):
        gg = g * gain.data
        term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        _accum(grads, x, inv * term)
        lead = tuple(range(g.ndim - 1))
        _accum(grads, gain, (g * xhat).sum(axis=lead))
        _accum(grads, bias, g.sum(axis=lead))

    return _result("layer_norm", out, (x, gain, bias), fn)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def fn(g, grads):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(grads, x, g * (cdf + x.data * pdf))

    return _result("gelu", out, (x,), fn)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool2d expects (H, W, C), got {x.shape}")
    if factor < 1:
        raise ShapeError(f"avg_pool2d: factor must be >= 1, got {factor}")
    h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: factor {factor} does not divide spatial dims {(h, w)}")
    hh, ww = h // factor, w // factor
    out = x.data.reshape(hh, factor, ww, factor, c).mean(axis=(1, 3))

    def fn(g, grads):
        spread = np.broadcast_to(
            (g / (factor * factor))[:, None, :, None, :], (hh, factor, ww, factor, c)
        )
        _accum(grads, x, np.ascontiguousarray(spread).reshape(h, w, c))

    return _result("avg_pool2d", out, (x,), fn)


def embedding(table: Tensor, ids) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.shape}")
    idx = np.asarray(ids)
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding ids must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): min {idx.min()}, max {idx.max()}"
        )
    out = table.data[idx]

    def fn(g, grads):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accum(grads, table, buf)

    return _result("embedding", out, (table,), fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    rank = tensors[0].data.ndim
    ax = axis + rank if axis < 0 else axis
    if not 0 <= ax < rank:
        raise ShapeError(f"concat: axis {axis} out of range for rank {rank}")
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise ShapeError(f"concat: mixed ranks {tensors[0].shape} vs {t.shape}")
        for d in range(rank):
            if d != ax and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    offsets = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g, grads):
        for t, piece in zip(tensors, np.split(g, offsets, axis=ax)):
            _accum(grads, t, np.ascontiguousarray(piece))

    return _result("concat", out, tuple(tensors), fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    new = tuple(int(s) for s in shape)
    if math.prod(new) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {new}")
    out = x.data.reshape(new)

    def fn(g, grads):
        _accum(grads, x, g.reshape(x.shape))

    return _result("reshape", out, (x,), fn)


def transpose_last(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last needs rank >= 2, got {x.shape}")
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))

    def fn(g, grads):
        _accum(grads, x, np.ascontiguousarray(np.swapaxes(g, -1, -2)))

    return _result("transpose_last", out, (x,), fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-position negative log-likelihood over the last axis."""
    if logits.data.ndim < 1:
        raise ShapeError("cross_entropy needs at least one axis of logits")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("cross_entropy: non-finite logits")
    tgt = np.asarray(targets)
    if tgt.size and not np.issubdtype(tgt.dtype, np.integer):
        raise ShapeError(f"cross_entropy targets must be integers, got dtype {tgt.dtype}")
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets shape {tgt.shape} must match logits batch {logits.shape[:-1]}"
        )
    v = logits.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise ShapeError(f"cross_entropy: target ids out of range [0, {v})")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(logits.data, tgt[..., None], axis=-1)[..., 0]
    out = lse - picked

    def fn(g, grads):
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        _accum(grads, logits, g[..., None] * (p - onehot))

    return _result("cross_entropy", out, (logits,), fn)


# ---------------------------------------------------------------------------
# parameter registry and the finite-difference oracle

class ParameterStore:
    """Ordered name -> parameter registry; the insertion index is the ParamId.

    Ids are dense, start at 0 and are stable across checkpoint save/load as
    long as the model is constructed the same way.
    """

    def __init__(self) -> None:
        self._names: list[str] = []
        self._by_name: dict[str, Tensor] = {}

    def register(self, name: str, t: Tensor) -> ParamId:
        if name in self._by_name:
            raise ValueError(f"parameter {name!r} registered twice")
        t.requires_grad = True
        t.name = name
        self._names.append(name)
        self._by_name[name] = t
        return len(self._names) - 1

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def names(self) -> list[str]:
        return list(self._names)

    def tensor(self, name: str) -> Tensor:
        return self._by_name[name]

    def id_of(self, name: str) -> ParamId:
        return self._names.index(name)

    def items(self) -> Iterator[tuple[ParamId, str, Tensor]]:
        for i, name in enumerate(self._names):
            yield i, name, self._by_name[name]

    def tensors(self) -> list[Tensor]:
        return [self._by_name[n] for n in self._names]

    def zero_grads(self) -> None:
        for t in self._by_name.values():
            t.grad = None

    def select(self, predicate: Callable[[str], bool]) -> frozenset[ParamId]:
        return frozenset(i for i, name in enumerate(self._names) if predicate(name))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic grads of f() and central differences.

    `f` must rebuild its graph from the parameters' current storage on every
    call and be deterministic. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be positive, got {eps}")
    plist = list(params)
    for p in plist:
        if not p.requires_grad:
            raise ValueError(f"finite_diff_check: {p!r} is not a trainable parameter")
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in plist]

    worst = 0.0
    with no_grad():
        for p, an in zip(plist, analytic):
            flat = p.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * eps)
                err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
                worst = max(worst, err)
    for p in plist:
        p.grad = None
    return float(worst)

"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the graph in reverse
topological order, accumulating gradients additively on fan-out.

Broadcasting is restricted to *suffix* broadcasting: an operand whose shape is
a trailing suffix of the other's (a row vector against a matrix, a matrix
against a batch of matrices). Anything else is a shape error.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape and requires_grad:
            raise ValueError("trainable tensors must be non-empty")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Forward passes inside record no graph (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_suffix(big: tuple[int, ...], small: tuple[int, ...]) -> None:
    if len(small) > len(big) or big[len(big) - len(small):] != small:
        raise ValueError(f"shapes {big} and {small} are not suffix-broadcastable")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


def _binary_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.ndim >= b.ndim:
        _check_suffix(a.shape, b.shape)
        return a.shape
    _check_suffix(b.shape, a.shape)
    return b.shape


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _node(a.data + b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def back(g):
        return (
            _reduce_to(g * bd, sa) if a.requires_grad else None,
            _reduce_to(g * ad, sb) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if a.ndim < b.ndim:
        raise ValueError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), back)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, True = keep) is a constant."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _reduce_to(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _reduce_to(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _node(xhat * gd + beta.data, (x, gamma, beta), back)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    rows = table.shape

    def back(g):
        out = np.zeros(rows, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (out,)

    return _node(table.data[ids], (table,), back)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is True."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != t.shape:
        raise ValueError("targets must match logits without the class axis")
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    tc = np.where(m, t, 0)
    picked = np.take_along_axis(logp, tc[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / count

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tc[..., None], 1.0, axis=-1)
        return ((p - onehot) * (m[..., None] * (g / count)),)

    return _node(np.asarray(loss, dtype=DTYPE), (logits,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), back)


def slice_(x: Tensor, index) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.array(x.data[index], dtype=DTYPE), (x,), back)


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis), dtype=DTYPE), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * d_inner),)

    return _node(0.5 * xd * (1.0 + th), (x,), back)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity (same values, fresh array), zero backward."""
    return Tensor(x.data.copy())


def straight_through(x: Tensor, forward_value) -> Tensor:
    """Takes the value of ``forward_value`` exactly; gradient passes to ``x`` unchanged.

    Equivalent to ``x + stop_gradient(forward_value - x)`` without the rounding
    of the add/subtract pair.
    """
    fv = np.array(forward_value.data if isinstance(forward_value, Tensor) else forward_value, dtype=DTYPE)
    if fv.shape != x.shape:
        raise ValueError(f"straight_through shape mismatch {x.shape} vs {fv.shape}")
    return _node(fv, (x,), lambda g: (g,))


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientError("graph already consumed by a previous backward; run a new forward")
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # free the closure; intermediate nodes are not reusable for a second pass
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param, dtype=DTYPE), np.zeros_like(param, dtype=DTYPE), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              name: str = "param") -> tuple[np.ndarray, AdamState]:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if param.shape != grad.shape:
        raise ValueError(f"{name}: grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise GradientError(f"non-finite gradient for {name}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


class Adam:
    """Adam over a named dict of trainable tensors; updates ``.data`` in place."""

    def __init__(self, params: dict[str, Tensor], **kw):
        self.params = params
        self.states = {k: AdamState.zeros_like(p.data, **kw) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.states[k] = adam_step(p.data, g, self.states[k], lr, name=k)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- oracles


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0))
        flat[i] = orig - h
        fm = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative error ``max|a-b| / max(max|a|, max|b|)``."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    if denom == 0.0:
        return float(diff)
    return float(diff / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between ``backward`` and central differences over ``params``.

    With ``max_coords`` only a random subset of coordinates per tensor is probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst


# ---------------------------------------------------------------- params


@dataclass
class ParamStore:
    """Ordered named parameters; insertion order is the initialization order."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.tensors):
            raise KeyError("parameter names do not match")
        for k, t in self.tensors.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = np.array(arrays[k], dtype=DTYPE)

"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` records the operation that produced it together with a
backward rule. :func:`backward` walks the recorded graph in reverse
topological order, accumulating gradients into every leaf that requires them,
and then drops the recorded graph.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import ContractError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # ``owned``: g is a fresh array nobody else holds, so it may be adopted
        if self.grad is None:
            self.grad = g if owned and g.flags.writeable and g.dtype == DTYPE \
                else np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, k: power(self, k)
    __getitem__ = lambda self, idx: getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _make(a.value + b.value, (a, b), backward)


def broadcast_add(x, bias) -> Tensor:
    """Add a bias row vector to every row of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.value.ndim != 1 or x.value.ndim != 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"broadcast_add: incompatible shapes {x.shape} and {bias.shape}")
    return add(x, bias)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))
    return _make(a.value - b.value, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: a._accumulate(-g, True))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape), True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape), True)
    return _make(a.value * b.value, (a, b), backward)


elementwise_mul = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape), True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.value, b.shape), True)
    return _make(out, (a, b), backward)


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value ** k, (a,), lambda g: a._accumulate(g * k * a.value ** (k - 1), True))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * 0.5 / out, True))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: a._accumulate(g / a.value, True))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * out, True))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: a._accumulate(g * inside, True))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out), True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for large |x|
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out), True))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: a._accumulate(g * mask, True))


# -- structural --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T, True)
        if b.requires_grad:
            b._accumulate(a.value.T @ g, True)
    return _make(a.value @ b.value, (a, b), backward)


def spmm(m: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    x = as_tensor(x)
    if x.value.ndim != 2 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {m.shape} and {x.shape}")
    m = sp.csr_matrix(m)
    return _make(np.asarray(m @ x.value), (x,), lambda g: x._accumulate(np.asarray(m.T @ g), True))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
    return _make(out, ts, backward)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        a._accumulate(full, True)
    return _make(a.value[idx], (a,), backward)


slice_ = getitem


def _fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))
    return _make(out, (a,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


# -- backward ----------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        for p in it:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss._accumulate(np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


# -- initialisation, parameters, optimisation --------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ParameterStore:
    """Named parameters partitioned into groups by the prefix before the first dot."""

    def __init__(self, params: Iterable[tuple[str, np.ndarray]] = ()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in params:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self._params)
        return [n for n in self._params if n.split(".", 1)[0] == group]

    @property
    def groups(self) -> list[str]:
        return list(OrderedDict.fromkeys(n.split(".", 1)[0] for n in self._params))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def digest(self, group: str | None = None) -> str:
        h = hashlib.sha256()
        for n in self.names(group):
            h.update(n.encode())
            h.update(self._params[n].value.tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.value.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self._params.items():
            if n not in state:
                raise ContractError(f"state lacks parameter {n!r}")
            v = np.asarray(state[n], dtype=DTYPE)
            if v.shape != t.shape:
                raise ShapeError(f"{n}: stored shape {v.shape} != {t.shape}")
            t.value = v.copy()


def adam_update(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step; returns ``(value, m, v)``. ``t`` counts steps from 1."""
    if not (value.shape == grad.shape == m.shape == v.shape):
        raise ContractError(
            f"adam: shapes value {value.shape}, grad {grad.shape}, m {m.shape}, v {v.shape}"
        )
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(t.value) for n, t in store}
        self.v = {n: np.zeros_like(t.value) for n, t in store}
        self.t = {n: 0 for n, _ in store}

    def step(self, groups: Iterable[str]) -> None:
        """Update every parameter of ``groups`` that holds a gradient."""
        for group in groups:
            names = self.store.names(group)
            if not names:
                raise ContractError(f"unknown parameter group {group!r}")
            for n in names:
                p = self.store[n]
                if p.grad is None:
                    continue
                self.t[n] += 1
                p.value, self.m[n], self.v[n] = adam_update(
                    p.value, p.grad, self.m[n], self.v[n], self.t[n],
                    self.lr, self.beta1, self.beta2, self.eps,
                )

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"{n}@adam.m"] = self.m[n]
            out[f"{n}@adam.v"] = self.v[n]
            out[f"{n}@adam.t"] = np.array(float(self.t[n]))
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n in self.m:
            if f"{n}@adam.m" in state:
                self.m[n] = np.array(state[f"{n}@adam.m"])
                self.v[n] = np.array(state[f"{n}@adam.v"])
                self.t[n] = int(state[f"{n}@adam.t"])


# -- LSTM --------------------------------------------------------------------

def lstm_cell(x, h_prev, c_prev, w_x, w_h, b) -> tuple[Tensor, Tensor]:
    """Standard LSTM cell; gate blocks of ``w_x``/``w_h``/``b`` are ordered i, f, g, o.

    The cell is one fused tape node with a hand-written backward rule; ``h``
    and ``c`` are views into its output.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    w_x, w_h, b = as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    hidden = w_h.shape[0]
    if x.value.ndim != 2 or w_x.shape != (x.shape[1], 4 * hidden) \
            or w_h.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,) \
            or h_prev.shape != (x.shape[0], hidden) or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}"
        )
    H = hidden
    z = x.value @ w_x.value + h_prev.value @ w_h.value + b.value
    gates = np.empty_like(z)
    gates[:, :2 * H] = _sigmoid(z[:, :2 * H])
    gates[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
    gates[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
    i, f, g, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    c = f * c_prev.value + i * g
    tc = np.tanh(c)
    out = np.concatenate([o * tc, c], axis=1)

    def backward(grad):
        gh, gc = grad[:, :H], grad[:, H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev.value * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = gh * tc * o * (1.0 - o)
        if x.requires_grad:
            x._accumulate(dz @ w_x.value.T, True)
        if h_prev.requires_grad:
            h_prev._accumulate(dz @ w_h.value.T, True)
        if c_prev.requires_grad:
            c_prev._accumulate(dc * f, True)
        if w_x.requires_grad:
            w_x._accumulate(x.value.T @ dz, True)
        if w_h.requires_grad:
            w_h._accumulate(h_prev.value.T @ dz, True)
        if b.requires_grad:
            b._accumulate(dz.sum(axis=0), True)

    both = _make(out, (x, h_prev, c_prev, w_x, w_h, b), backward)
    return both[:, :H], both[:, H:]


def lstm_cell_reference(x, h_prev, c_prev, w_x, w_h, b) -> tuple[Tensor, Tensor]:
    """The same cell composed from primitive ops; used to cross-check the fused rule."""
    hidden = w_h.shape[0]
    z = as_tensor(x) @ w_x + as_tensor(h_prev) @ w_h + b
    i = sigmoid(z[:, 0:hidden])
    f = sigmoid(z[:, hidden:2 * hidden])
    g = tanh(z[:, 2 * hidden:3 * hidden])
    o = sigmoid(z[:, 3 * hidden:])
    c = f * c_prev + i * g
    return o * tanh(c), c


def masked_update(new, old, mask: np.ndarray) -> Tensor:
    """``old + mask * (new - old)`` for a constant 0/1 ``mask``: rows with mask 0 keep ``old``."""
    new, old = as_tensor(new), as_tensor(old)
    keep = 1.0 - mask

    def backward(g):
        if new.requires_grad:
            new._accumulate(g * mask, True)
        if old.requires_grad:
            old._accumulate(g * keep, True)
    return _make(old.value + mask * (new.value - old.value), (new, old), backward)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"TGAMLCK\0"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        return _read_checkpoint(path)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ContractError(f"{path}: corrupt checkpoint ({exc})") from None


def _read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (k,) = struct.unpack("<I", fh.read(4))
            name = fh.read(k).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(shape)) if rank else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ContractError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(DTYPE)
    return out

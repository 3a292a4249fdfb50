"""Reverse-mode automatic differentiation over small dense float64 matrices.

Everything the scoring model computes is assembled from the primitives in
this module.  Each op records a backward closure; ``Tensor.backward()``
replays them in reverse topological order.  Rank is capped at 2: scalars are
shape (1, 1) and vectors are rows.  Any op that produces a non-finite value
raises ``NumericError`` naming the producing op.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


class NumericError(RuntimeError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands violate an op's shape contract."""


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"rank-{arr.ndim} array not supported (max rank 2)")
    return np.atleast_2d(arr)


class Tensor:
    """A 2-D float64 array plus the bookkeeping needed for ``backward()``."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = _as_matrix(data)
        if not np.isfinite(self.data).all():
            raise NumericError(f"op '{op}' produced non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on shape {self.shape}")
        return float(self.data[0, 0])

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Nodes used along several paths sum their incoming gradients.
        """
        if self.shape != (1, 1):
            raise ShapeError(f"backward() needs a scalar, got {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backprop is not None:
                node._backprop()
                # every contribution to this node landed before its backprop
                # ran, so its gradient buffer is dead weight from here on
                node.grad = None

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return sub(0.0, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False, op="const")


def parameter(value, name: str = "param") -> Tensor:
    t = Tensor(value, requires_grad=True, op=name)
    t.grad = np.zeros_like(t.data)
    return t


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


def _finish(out: Tensor, parents: tuple[Tensor, ...], backprop: Callable[[], None]) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    return out


def _accum(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add one gradient contribution.

    ``owned`` marks ``g`` as a fresh array with no other references, which the
    first contribution may adopt without copying.  Views into another node's
    gradient must stay unowned or later accumulation would corrupt it.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # gradient of a broadcast operand collapses over the broadcast axes
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] > 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] > 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_op(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(_broadcast_op(np.add, a, b, "add"), op="add")

    def backprop():
        if a.requires_grad:
            g = _unbroadcast(out.grad, a.shape)
            _accum(a, g, owned=g is not out.grad)
        if b.requires_grad:
            g = _unbroadcast(out.grad, b.shape)
            _accum(b, g, owned=g is not out.grad)

    return _finish(out, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(_broadcast_op(np.subtract, a, b, "sub"), op="sub")

    def backprop():
        if a.requires_grad:
            g = _unbroadcast(out.grad, a.shape)
            _accum(a, g, owned=g is not out.grad)
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad, b.shape), owned=True)

    return _finish(out, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(_broadcast_op(np.multiply, a, b, "mul"), op="mul")

    def backprop():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.shape), owned=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.shape), owned=True)

    return _finish(out, (a, b), backprop)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor(a.data @ b.data, op="matmul")

    def backprop():
        if a.requires_grad:
            _accum(a, out.grad @ b.data.T, owned=True)
        if b.requires_grad:
            _accum(b, a.data.T @ out.grad, owned=True)

    return _finish(out, (a, b), backprop)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.T), op="transpose")

    def backprop():
        _accum(a, np.ascontiguousarray(out.grad.T), owned=True)

    return _finish(out, (a,), backprop)


def hstack(*tensors) -> Tensor:
    """Concatenate along columns; row counts must agree."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    ts = [_wrap(t) for t in tensors]
    rows = ts[0].shape[0]
    if any(t.shape[0] != rows for t in ts):
        raise ShapeError(f"hstack: row counts differ: {[t.shape for t in ts]}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=1), op="hstack")
    offsets = np.cumsum([0] + [t.shape[1] for t in ts])

    def backprop():
        for t, j0, j1 in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accum(t, out.grad[:, j0:j1])

    return _finish(out, tuple(ts), backprop)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] of {a.shape}")
    out = Tensor(a.data[:, start:stop].copy(), op="slice_cols")

    def backprop():
        buf = np.zeros_like(a.data)
        buf[:, start:stop] = out.grad
        _accum(a, buf, owned=True)

    return _finish(out, (a,), backprop)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; duplicate indices scatter-add on backward."""
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx], op="gather_rows")

    def backprop():
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, out.grad)
        _accum(a, buf, owned=True)

    return _finish(out, (a,), backprop)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row k times consecutively."""
    if k < 1:
        raise ShapeError("repeat_rows: k must be >= 1")
    out = Tensor(np.repeat(a.data, k, axis=0), op="repeat_rows")

    def backprop():
        _accum(a, out.grad.reshape(a.shape[0], k, a.shape[1]).sum(axis=1), owned=True)

    return _finish(out, (a,), backprop)


def sum_row_groups(a: Tensor, k: int) -> Tensor:
    """Sum consecutive groups of k rows; inverse layout of ``repeat_rows``."""
    n, m = a.shape
    if k < 1 or n % k != 0:
        raise ShapeError(f"sum_row_groups: {n} rows not divisible by k={k}")
    out = Tensor(a.data.reshape(n // k, k, m).sum(axis=1), op="sum_row_groups")

    def backprop():
        _accum(a, np.repeat(out.grad, k, axis=0), owned=True)

    return _finish(out, (a,), backprop)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: {a.shape} -> ({rows}, {cols})")
    out = Tensor(a.data.reshape(rows, cols), op="reshape")

    def backprop():
        _accum(a, out.grad.reshape(a.shape))

    return _finish(out, (a,), backprop)


def row_sums(a: Tensor) -> Tensor:
    """Sum each row; returns an (n, 1) column."""
    out = Tensor(a.data.sum(axis=1, keepdims=True), op="row_sums")

    def backprop():
        _accum(a, np.broadcast_to(out.grad, a.shape))

    return _finish(out, (a,), backprop)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.array([[a.data.sum()]]), op="sum_all")

    def backprop():
        _accum(a, np.full(a.shape, out.grad[0, 0]), owned=True)

    return _finish(out, (a,), backprop)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Scalar product of two equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"dot: {a.shape} vs {b.shape}")
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), op="tanh")

    def backprop():
        _accum(a, out.grad * (1.0 - out.data * out.data), owned=True)

    return _finish(out, (a,), backprop)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), op="relu")

    def backprop():
        _accum(a, out.grad * (a.data > 0.0), owned=True)

    return _finish(out, (a,), backprop)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(_sigmoid_data(a.data), op="sigmoid")

    def backprop():
        _accum(a, out.grad * out.data * (1.0 - out.data), owned=True)

    return _finish(out, (a,), backprop)


def log_sigmoid(a: Tensor) -> Tensor:
    out = Tensor(-np.logaddexp(0.0, -a.data), op="log_sigmoid")

    def backprop():
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        _accum(a, out.grad * np.exp(-np.logaddexp(0.0, a.data)), owned=True)

    return _finish(out, (a,), backprop)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax; each output row is a probability vector."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, op="softmax_rows")

    def backprop():
        inner = (out.grad * out.data).sum(axis=1, keepdims=True)
        _accum(a, (out.grad - inner) * out.data, owned=True)

    return _finish(out, (a,), backprop)


def elementwise_gate(s, a, b) -> Tensor:
    """s ⊙ a + (1 - s) ⊙ b, broadcasting s as needed."""
    s = _wrap(s)
    return add(mul(s, a), mul(sub(1.0, s), b))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# gated recurrent unit
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    """Weights of one gated recurrent cell (update z, reset r, candidate c)."""

    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wc: Tensor
    uc: Tensor
    bc: Tensor


def gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One recurrence step: h' = (1 - z) ⊙ h + z ⊙ tanh(xWc + (r ⊙ h)Uc + bc)."""
    z = sigmoid(add(affine(x, p.wz, p.bz), matmul(h, p.uz)))
    r = sigmoid(add(affine(x, p.wr, p.br), matmul(h, p.ur)))
    c = tanh(add(affine(x, p.wc, p.bc), matmul(mul(r, h), p.uc)))
    return elementwise_gate(z, c, h)


def gru_run(xs, p: GruParams, h0: Tensor | None = None) -> Tensor:
    """Run the cell over a sequence of row tensors; returns the last hidden state.

    An empty sequence yields the (zero) initial state.
    """
    xs = list(xs)
    if h0 is None:
        width = p.uz.shape[0]
        rows = xs[0].shape[0] if xs else 1
        h0 = constant(np.zeros((rows, width)))
    h = h0
    for x in xs:
        h = gru_cell(x, h, p)
    return h


# ---------------------------------------------------------------------------
# parameter registry, Adam, gradient checking
# ---------------------------------------------------------------------------


class ParamRegistry:
    """Named learnable tensors with persistent gradient buffers."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, bool]] = {}

    def register(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64, copy=True),
                   requires_grad=trainable, op=f"param:{name}")
        t.grad = np.zeros_like(t.data)
        self._entries[name] = (t, trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[tuple[str, Tensor, bool]]:
        for name, (t, trainable) in self._entries.items():
            yield name, t, trainable

    def trainable_items(self) -> Iterable[tuple[str, Tensor]]:
        for name, (t, trainable) in self._entries.items():
            if trainable:
                yield name, t

    def zero_grads(self) -> None:
        for t, _ in self._entries.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad.fill(0.0)

    def l2_penalty(self) -> Tensor:
        """Sum of squared entries over every trainable tensor, on the tape."""
        total: Tensor | None = None
        for _, t in self.trainable_items():
            term = sum_all(square(t))
            total = term if total is None else add(total, term)
        if total is None:
            return constant(0.0)
        return total

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, (t, _) in self._entries.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            self[name].data[...] = arr


class AdamState:
    """Per-parameter moment estimates for bias-corrected Adam."""

    def __init__(self, registry: ParamRegistry, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in registry.trainable_items()}
        self._v = {name: np.zeros_like(t.data) for name, t in registry.trainable_items()}

    def step(self, registry: ParamRegistry, eta: float) -> None:
        """Apply one update to all trainable parameters, then zero gradients."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in registry.trainable_items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= eta * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.isfinite(p.data).all():
                raise NumericError(f"adam update produced non-finite values in {name!r}")
        registry.zero_grads()


def finite_difference_check(f: Callable[[], Tensor], registry: ParamRegistry,
                            names: Iterable[str] | None = None, eps: float = 1e-5,
                            max_coords: int = 20,
                            rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    Perturbs a random sample of coordinates per parameter and returns the
    worst relative error  |a - n| / max(|a|, |n|, 1)  over the sample.  ``f``
    must be a pure function of the registry values.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if names is None:
        names = [name for name, _ in registry.trainable_items()]
    names = list(names)
    loss = f()
    registry.zero_grads()
    loss.backward()
    analytic = {name: registry[name].grad.copy() for name in names}
    registry.zero_grads()
    worst = 0.0
    for name in names:
        p = registry[name]
        size = p.data.size
        coords = rng.choice(size, size=min(max_coords, size), replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = f().item()
            flat[c] = orig - eps
            f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"KGCK"
_CKPT_VERSION = 1


def save_checkpoint(path, registry: ParamRegistry, meta: dict) -> None:
    """Write all registered tensors with a fixed-layout little-endian header."""
    entries = list(registry.items())
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IIIIII", _CKPT_VERSION, meta["dim"], meta["n_users"],
                             meta["n_entities"], meta["n_relations"], len(entries)))
        for name, t, _ in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", t.shape[0], t.shape[1]))
            fh.write(t.data.astype("<f8").tobytes())


def read_checkpoint_meta(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, dim, n_users, n_entities, n_relations, count = struct.unpack(
            "<IIIIII", fh.read(24))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
    return {"dim": dim, "n_users": n_users, "n_entities": n_entities,
            "n_relations": n_relations, "n_params": count}


def load_checkpoint(path, registry: ParamRegistry) -> dict:
    """Load saved tensors into an already-shaped registry; validates shapes."""
    meta = read_checkpoint_meta(path)
    loaded: set[str] = set()
    try:
        with open(path, "rb") as fh:
            fh.seek(4 + 24)
            for _ in range(meta["n_params"]):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode("utf-8")
                rows, cols = struct.unpack("<II", fh.read(8))
                payload = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
                if payload.size != rows * cols:
                    raise ValueError(f"{path}: checkpoint is truncated")
                if name not in registry:
                    raise ValueError(f"{path}: unknown parameter {name!r}")
                p = registry[name]
                if p.shape != (rows, cols):
                    raise ValueError(
                        f"{path}: parameter {name!r} has shape ({rows}, {cols}), "
                        f"expected {p.shape}")
                p.data[...] = payload.reshape(rows, cols)
                loaded.add(name)
    except struct.error:
        raise ValueError(f"{path}: checkpoint is truncated") from None
    missing = set(registry.names()) - loaded
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return meta

"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the two surrogate architectures and the physics residual
need are provided: broadcasting arithmetic, pointwise nonlinearities,
reductions, reshaping/slicing, 2-D convolution, 2x2 max pooling with recorded
indices and the matching unpooling, and inverted dropout.

Leaf tensors created with ``requires_grad=True`` own a gradient buffer that
``backward`` accumulates into; call ``zero_grad`` between steps.  Intermediate
results only keep their gradient when ``retain_grad`` was called on them.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, CorruptionError, DimensionError, ValidityError

_GRAD_ENABLED = True
# op kind -> multiplicative corruption applied to that op's backward output
_BACKWARD_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5):
    """Scale the backward rule of every ``op`` node by ``factor``.

    Used to prove that the gradient checker catches a broken rule.
    """
    _BACKWARD_FAULTS[op] = factor
    try:
        yield
    finally:
        _BACKWARD_FAULTS.pop(op, None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._retain = False
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_valid(self) -> bool:
        """True when every value (and gradient, if any) is finite."""
        ok = bool(np.isfinite(self.data).all())
        if self.grad is not None:
            ok = ok and bool(np.isfinite(self.grad).all())
        return ok

    def check_valid(self, what: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise ValidityError(f"{what} contains non-finite values")
        return self

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")

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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            if node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            factor = _BACKWARD_FAULTS.get(node.op)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Strict elementwise product: operand shapes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return mul(a, b)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    n = float(exponent)
    if n == 2.0:
        return square(x)
    out = np.power(x.data, n)
    return Tensor._from_op(out, (x,), lambda g: (g * n * np.power(x.data, n - 1.0),), "power")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return Tensor._from_op(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def elementwise(kind: str, *operands, factor: float | None = None) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu, hadamard, add or scale."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    if kind in unary:
        (x,) = operands
        return unary[kind](x)
    if kind == "hadamard":
        return hadamard(*operands)
    if kind == "add":
        a, b = (as_tensor(o) for o in operands)
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
        return add(a, b)
    if kind == "scale":
        (x,) = operands
        return scale(x, 1.0 if factor is None else factor)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- reductions and shape manipulation --------------------------------------
def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose"
    )


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward, "stack")


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows ``numpy.pad``."""
    x = as_tensor(x)
    pad_width = tuple(tuple(int(v) for v in p) for p in pad_width)
    out = np.pad(x.data, pad_width)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return Tensor._from_op(out, (x,), lambda g: (g[crop],), "pad")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- convolution ------------------------------------------------------------
def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x[N,C,H,W]`` with ``kernel[O,C,kh,kw]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    p = int(padding)
    if h + 2 * p < kh or w + 2 * p < kw:
        raise DimensionError("conv2d: kernel larger than padded input")
    x.check_valid("conv2d input")

    # column buffer laid out (C, kh, kw, N, H', W') so the product is one GEMM
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    xt = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p))) if p else xt
    cols = np.empty((c, kh, kw, n, ho, wo))
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, :, a : a + ho, b : b + wo]
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = wmat @ cols2
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gk = (gmat @ cols2.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a : a + ho, b : b + wo] += gcols[:, a, b]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gk
        return gx, gk, gmat.sum(axis=1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


# -- pooling ----------------------------------------------------------------
@dataclass(frozen=True)
class IndexMap:
    """Argmax positions of a 2x2 max pool.

    ``indices[n, c, i, j]`` is the row-major linear index, within the
    ``input_shape[2] x input_shape[3]`` plane, of the maximum of window (i, j).
    """

    indices: np.ndarray
    input_shape: tuple[int, int, int, int]


def maxpool2x2_with_indices(x: Tensor) -> tuple[Tensor, IndexMap]:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    blocks = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    # argmax returns the first maximum: window-local order matches linear-index order
    local = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + local // 2
    cols = 2 * np.arange(wo)[None, :] + local % 2
    indices = rows * w + cols
    imap = IndexMap(indices=indices, input_shape=(n, c, h, w))

    def backward(g):
        return (_scatter(g, indices, (n, c, h, w)),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool"), imap


def _scatter(values: np.ndarray, indices: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    flat = np.zeros((n, c, h * w))
    np.put_along_axis(flat, indices.reshape(n, c, -1), values.reshape(n, c, -1), axis=2)
    return flat.reshape(shape)


def _check_indices(imap: IndexMap) -> None:
    n, c, h, w = imap.input_shape
    ho, wo = imap.indices.shape[2:]
    idx = imap.indices
    rows, cols = idx // w, idx % w
    ok = (
        (idx >= 0)
        & (idx < h * w)
        & (rows // 2 == np.arange(ho)[:, None])
        & (cols // 2 == np.arange(wo)[None, :])
    )
    if not ok.all():
        raise CorruptionError("unpool index map points outside its 2x2 window")


def max_unpool2x2(x: Tensor, imap: IndexMap) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = imap.input_shape
    if x.shape != (n, c, h // 2, w // 2) or imap.indices.shape != x.shape:
        raise DimensionError(f"unpool: input {x.shape} does not match index map for {imap.input_shape}")
    _check_indices(imap)
    out = _scatter(x.data, imap.indices, (n, c, h, w))
    flat_idx = imap.indices.reshape(n, c, -1)

    def backward(g):
        picked = np.take_along_axis(g.reshape(n, c, h * w), flat_idx, axis=2)
        return (picked.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "unpool")


def parameters_valid(params: Iterable[Tensor]) -> bool:
    return all(p.is_valid() for p in params)

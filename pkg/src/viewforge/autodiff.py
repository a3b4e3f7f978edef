"""Small reverse-mode automatic differentiation engine on top of numpy.

Tensors record the operation that produced them; calling :func:`backward` on a
scalar walks the recorded graph in reverse topological order and accumulates
gradients into every tensor that requires them. Graphs are rebuilt on every
forward pass and are never fused or optimised.

float32 is the training default; pass float64 arrays for gradient checking.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's domain (e.g. log of a non-positive)."""


class GraphError(RuntimeError):
    """The computation graph cannot be differentiated as requested."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_operands(a: ArrayLike, b: ArrayLike, op: str) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else (b if isinstance(b, Tensor) else None)
    ta, tb = as_tensor(a, like), as_tensor(b, like)
    if ta.shape != tb.shape and ta.size != 1 and tb.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {ta.shape} and {tb.shape}")
    return ta, tb


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # undo scalar broadcast
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands(a, b, "add")
    data = ta.data + tb.data

    def bw(g):
        return _reduce_to(g, ta.shape), _reduce_to(g, tb.shape)

    return _make("add", data, (ta, tb), bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands(a, b, "sub")
    data = ta.data - tb.data

    def bw(g):
        return _reduce_to(g, ta.shape), _reduce_to(-g, tb.shape)

    return _make("sub", data, (ta, tb), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands(a, b, "mul")
    data = ta.data * tb.data

    def bw(g):
        return _reduce_to(g * tb.data, ta.shape), _reduce_to(g * ta.data, tb.shape)

    return _make("mul", data, (ta, tb), bw)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands(a, b, "div")
    if np.any(tb.data == 0):
        raise DomainError("div: division by zero")
    data = ta.data / tb.data

    def bw(g):
        ga = g / tb.data
        gb = -g * ta.data / (tb.data * tb.data)
        return _reduce_to(ga, ta.shape), _reduce_to(gb, tb.shape)

    return _make("div", data, (ta, tb), bw)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make("exp", data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: requires strictly positive input, min is {a.data.min()!r}")
    data = np.log(a.data)
    return _make("log", data, (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # gradient 0 at exactly 0
    data = np.where(mask, a.data, 0).astype(a.dtype)
    return _make("relu", data, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _make("tanh", data, (a,), lambda g: (g * (1 - data * data),))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)  # sign(0) = 0
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} exceeds hi={hi}")
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", data, (a,), lambda g: (g * mask,))


_UNARY = {"exp": exp, "log": log, "relu": relu, "tanh": tanh, "abs": abs, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, *inputs: ArrayLike, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op_kind in _UNARY:
        if len(inputs) != 1:
            raise TypeError(f"{op_kind} takes one input, got {len(inputs)}")
        return _UNARY[op_kind](inputs[0])
    if op_kind in _BINARY:
        if len(inputs) != 2:
            raise TypeError(f"{op_kind} takes two inputs, got {len(inputs)}")
        return _BINARY[op_kind](*inputs)
    if op_kind == "clamp":
        return clamp(inputs[0], lo, hi)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def gradient_reversal(a: Tensor, scale: float = 1.0) -> Tensor:
    """Identity on the forward pass; multiplies incoming gradients by ``-scale``."""
    a = as_tensor(a)
    return _make("grad_reverse", a.data, (a,), lambda g: (-scale * g,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", data, (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; gradients are summed back."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc

    def bw(g):
        lead = g.ndim - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast_to", np.ascontiguousarray(data), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", data, tensors, bw)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    data = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(data), (a,), bw)


def pixel_shuffle(a: Tensor, factor: int = 2) -> Tensor:
    """Rearrange B×(C·r²)×H×W into B×C×(H·r)×(W·r) (sub-pixel upsampling)."""
    a = as_tensor(a)
    if a.ndim != 4 or a.shape[1] % (factor * factor):
        raise ShapeError(f"pixel_shuffle: channel count of {a.shape} is not divisible by {factor * factor}")
    B, Cr, H, W = a.shape
    C = Cr // (factor * factor)
    data = a.data.reshape(B, C, factor, factor, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * factor, W * factor)

    def bw(g):
        g = g.reshape(B, C, H, factor, W, factor).transpose(0, 1, 3, 5, 2, 4)
        return (g.reshape(B, Cr, H, W),)

    return _make("pixel_shuffle", np.ascontiguousarray(data), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", data, (a, b), bw)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of a B×Cin×H×W batch with a Cout×Cin×k×k kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = kernel.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cin} ({x.shape} vs {kernel.shape})")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)

    # im2col in channels-last order: rows are output positions, columns (i, j, c)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    xp = np.zeros((B, Hp, Wp, C), dtype=x.dtype)
    xp[:, padding:padding + H, padding:padding + W, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]
    cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    del xp
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * C, Cout)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias, x)
        if bias.shape != (Cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {Cout} output channels")
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        gk = None
        if kernel.requires_grad:
            gk = (cols.T @ gmat).reshape(kh, kw, C, Cout).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros((B, Hp, Wp, C), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += (
                        dcols[:, :, :, i, j, :]
                    )
            gx = np.ascontiguousarray(gxp[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gk
        return gx, gk, gmat.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make("conv2d", out, parents, bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is invalid for a {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op_kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """sum / mean / l1norm / l2norm over ``axes`` (all axes when None)."""
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    kept_shape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1

    if op_kind == "sum":
        data = a.data.sum(axis=ax, keepdims=True)
        local = lambda g: np.broadcast_to(g, a.shape)
    elif op_kind == "mean":
        data = a.data.sum(axis=ax, keepdims=True) / count
        local = lambda g: np.broadcast_to(g / count, a.shape)
    elif op_kind == "l1norm":
        data = np.abs(a.data).sum(axis=ax, keepdims=True)
        sign = np.sign(a.data)
        local = lambda g: g * sign
    elif op_kind == "l2norm":
        norm = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
        data = norm

        def local(g):
            safe = np.where(norm > 0, norm, 1)
            return g * np.where(norm > 0, a.data / safe, 0)
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")

    out_shape = kept_shape if keepdims else tuple(n for i, n in enumerate(a.shape) if i not in ax)
    data = data.reshape(out_shape).astype(a.dtype, copy=False)

    def bw(g):
        return (np.ascontiguousarray(local(g.reshape(kept_shape))),)

    return _make(op_kind, data, (a,), bw)


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axes, keepdims)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


def l1norm(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("l1norm", a, axes, keepdims)


def l2norm(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("l2norm", a, axes, keepdims)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor ``t``."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward called on a tensor that is not attached to any tracked graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors, iterated in sorted-id order."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._params: dict[str, Tensor] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter id {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return ((k, self._params[k]) for k in sorted(self._params))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            t = self._params[k]
            if v.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: stored shape {v.shape} vs expected {t.shape}")
            t.data = np.array(v, dtype=t.dtype)

    def tobytes(self) -> bytes:
        return b"".join(k.encode() + t.data.tobytes() for k, t in self.items())


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0) -> None:
    """Momentum SGD: ``v = momentum*v + grad; p -= lr*v``; gradients are cleared afterwards."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for name, p in params.items():
        if p.grad is None:
            raise GraphError(f"parameter {name!r} has no gradient")
    for name, p in params.items():
        v = params.velocity.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        params.velocity[name] = v
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)
        p.grad = None

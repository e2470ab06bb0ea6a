"""Small reverse-mode autodiff engine over numpy float64 arrays.

Every op records its parents and a backward closure on the output tensor; the
topological order reconstructed at ``backward()`` time is the tape. Once a
graph has been differentiated its closures are released, so a second
``backward()`` through the same graph raises instead of silently doubling
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition on values (not shapes) was violated."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_freed", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._freed = False
        self.op = "leaf"

    # -- construction -------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap ``data`` as the result of an op; used to define custom differentiable ops."""
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out._freed = False
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse pass -------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        if self._freed:
            raise RuntimeError("graph already consumed by a previous backward(); run a new forward pass")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node._freed:
                    raise RuntimeError("graph already consumed by a previous backward(); run a new forward pass")
                # leaf
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary ------------------------------------------------
def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return Tensor.from_op(a.data * keep, (a,), lambda g: (g * keep,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def complex_abs(re: Tensor, im: Tensor) -> Tensor:
    """Elementwise |re + i*im|, with gradient 0 at the origin."""
    re, im = as_tensor(re), as_tensor(im)
    if re.shape != im.shape:
        raise DimensionError(f"real part {re.shape} and imaginary part {im.shape} differ")
    mag = np.hypot(re.data, im.data)
    safe = np.where(mag > 0, mag, 1.0)
    nz = mag > 0

    def backward(g):
        scale = np.where(nz, g / safe, 0.0)
        return scale * re.data, scale * im.data

    return Tensor.from_op(mag, (re, im), backward, "complex_abs")


def l1_mean(a: Tensor) -> Tensor:
    """mean(|a|); subgradient 0 at 0."""
    n = a.size
    return Tensor.from_op(np.abs(a.data).mean(), (a,), lambda g: (g * np.sign(a.data) / n,), "l1_mean")


# -- reductions and shape ---------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor.from_op(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return Tensor.from_op(out, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum(sizes)[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into ``sections`` equal parts along ``axis``."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if n % sections:
        raise DimensionError(f"axis of length {n} does not split into {sections} parts")
    step = n // sections
    return [take(a, np.arange(i * step, (i + 1) * step), axis=ax) for i in range(sections)]


# -- linear algebra ---------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (both operands at least 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "matmul")


_FFT_CONV_THRESHOLD = 200_000  # x.size * K above which the FFT path is used


def conv1d(x, kernel, method: str = "auto") -> Tensor:
    """Valid cross-correlation along the last axis of ``x``.

    ``kernel`` of shape (K,) maps (..., T) to (..., T-K+1). A filter bank of
    shape (F, K) maps (..., T) to (..., F, T-K+1). ``method`` is "direct",
    "fft" or "auto" (FFT for large inputs).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim not in (1, 2):
        raise DimensionError(f"kernel must be (K,) or (F, K), got {kernel.shape}")
    k = kernel.data if kernel.ndim == 2 else kernel.data[None, :]
    K = k.shape[-1]
    T = x.shape[-1]
    if K > T:
        raise DimensionError(f"kernel length {K} exceeds signal length {T} (x {x.shape}, kernel {kernel.shape})")
    L = T - K + 1
    if method == "auto":
        method = "fft" if x.size * K > _FFT_CONV_THRESHOLD else "direct"
    if method == "direct":
        out, backward = _conv_direct(x, k, kernel.requires_grad)
    elif method == "fft":
        out, backward = _conv_fft(x, k, kernel.requires_grad)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if kernel.ndim == 1:
        out = out[..., 0, :]

    def wrapped(g):
        gf = g if kernel.ndim == 2 else g[..., None, :]
        gx, gk = backward(gf)
        if gk is not None and kernel.ndim == 1:
            gk = gk[0]
        return gx, gk

    return Tensor.from_op(out, (x, kernel), wrapped, "conv1d")


def _conv_direct(x: Tensor, k: np.ndarray, need_gk: bool):
    K = k.shape[-1]
    L = x.shape[-1] - K + 1
    windows = sliding_window_view(x.data, K, axis=-1)  # (..., L, K)
    out = np.einsum("...lk,fk->...fl", windows, k)

    def backward(g):
        gx = gk = None
        if need_gk:
            F = g.shape[-2]
            gk = np.einsum("mfl,mlk->fk", g.reshape(-1, F, L), windows.reshape(-1, L, K))
        if x.requires_grad:
            contrib = np.einsum("...fl,fk->...kl", g, k)
            gx = np.zeros(x.shape)
            for j in range(K):
                gx[..., j:j + L] += contrib[..., j, :]
        return gx, gk

    return out, backward


def _conv_fft(x: Tensor, k: np.ndarray, need_gk: bool):
    K = k.shape[-1]
    T = x.shape[-1]
    L = T - K + 1
    n = 1 << (T - 1).bit_length()  # n >= T keeps every used index free of wrap-around
    Xf = np.fft.rfft(x.data, n, axis=-1)
    out = np.fft.irfft(Xf[..., None, :] * np.fft.rfft(k[:, ::-1], n, axis=-1), n, axis=-1)[..., K - 1:T]

    def backward(g):
        gx = gk = None
        Gf = np.fft.rfft(g, n, axis=-1)  # (..., F, n//2+1)
        if need_gk:
            lead = tuple(range(Gf.ndim - 2))
            S = (Xf[..., None, :] * np.conj(Gf)).sum(axis=lead)
            gk = np.fft.irfft(S, n, axis=-1)[:, :K]
        if x.requires_grad:
            full = (Gf * np.fft.rfft(k, n, axis=-1)).sum(axis=-2)
            gx = np.fft.irfft(full, n, axis=-1)[..., :T]
        return gx, gk

    return out, backward


# -- losses -----------------------------------------------------------
def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (logits,), backward, "log_softmax")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax (no graph)."""
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, target_probs, reduction: str = "mean") -> Tensor:
    """Soft-target cross-entropy, -sum_c p_c log softmax(z)_c per row.

    ``reduction="none"`` returns the per-row values.
    """
    logits = as_tensor(logits)
    p = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs, dtype=np.float64)
    if logits.ndim != 2 or p.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} and targets {p.shape} must both be (B, C)")
    if logits.shape[1] < 2:
        raise ContractError("cross_entropy needs at least 2 classes")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6) or np.any(p < 0):
        raise ContractError("each target row must be a probability distribution (sum to 1 within 1e-6)")
    per_row = neg(tsum(mul(log_softmax(logits, axis=1), Tensor(p)), axis=1))
    if reduction == "none":
        return per_row
    return mean(per_row)


# -- optimizer --------------------------------------------------------
@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.epsilon <= 0:
            raise ContractError("need 0 < beta1, beta2 < 1 and epsilon > 0")


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError("optimizer state was created for a different parameter list")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"parameter {p.shape}, gradient {g.shape}, moment {m.shape} disagree")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    step_size = state.learning_rate / bc1
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        # in place: no temporaries beyond one scratch buffer per parameter
        tmp = np.empty_like(p)
        np.multiply(g, 1.0 - b1, out=tmp)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.multiply(v, 1.0 / bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.epsilon
        np.divide(m, tmp, out=tmp)
        tmp *= step_size
        p -= tmp


class Adam:
    """Adam over a list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.state, [p.data for p in self.params], grads)

"""Reverse-mode automatic differentiation over float64 numpy arrays.

Define-by-run: every primitive evaluated while a ``Tape`` is active and fed
by at least one tracked tensor appends a node holding its backward rule.
Nothing is recorded when no tape is active, which doubles as the plain
inference path.
"""
from __future__ import annotations

import contextvars
import logging
import weakref
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal, special

logger = logging.getLogger(__name__)

GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_K = 0.044715

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    def __init__(self, op: str, shape_a, shape_b) -> None:
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shape mismatch {self.shape_a} vs {self.shape_b}")


class DomainError(ValueError):
    pass


class TapeError(ValueError):
    pass


@dataclass(frozen=True)
class PrimitiveInfo:
    name: str
    doc: str


_PRIMITIVES: Dict[str, PrimitiveInfo] = {}


def _register(name: str, doc: str):
    def decorator(func):
        _PRIMITIVES[name] = PrimitiveInfo(name=name, doc=doc)
        return func

    return decorator


def primitive_set() -> tuple[PrimitiveInfo, ...]:
    return tuple(_PRIMITIVES.values())


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple[Optional[int], ...]
    vjp: Optional[VJP]
    shape: tuple[int, ...]
    leaf: Optional["DiffTensor"] = None


class DiffTensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "node_id", "_tape_ref", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str = "") -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id: Optional[int] = None
        self._tape_ref: Optional[weakref.ref] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def _node_on(self, tape: "Tape") -> Optional[int]:
        if self._tape_ref is not None and self._tape_ref() is tape:
            return self.node_id
        if self.requires_grad:
            return tape.watch(self)
        return None

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[DiffTensor, float, int, np.ndarray]


class ComplexPair(NamedTuple):
    re: DiffTensor
    im: DiffTensor


def parameter(value, name: str = "") -> DiffTensor:
    return DiffTensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> DiffTensor:
    return DiffTensor(value)


def _as_tensor(x: TensorLike) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


class Tape:
    """Append-only node list. Node inputs always point to earlier nodes."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.grads: list[Optional[np.ndarray]] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, *tensors: DiffTensor) -> Optional[int]:
        node_id = None
        for tensor in tensors:
            if tensor._tape_ref is not None and tensor._tape_ref() is self:
                node_id = tensor.node_id
                continue
            node_id = self._append(Node("leaf", (), None, tensor.shape, leaf=tensor))
            tensor.node_id = node_id
            tensor._tape_ref = weakref.ref(self)
            tensor.requires_grad = True
            tensor.grad = None
        return node_id

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        self.grads.append(None)
        return len(self.nodes) - 1

    def backward(self, loss: DiffTensor) -> Dict[str, np.ndarray]:
        if not self.nodes:
            raise TapeError("backward called on an empty tape")
        if loss.value.ndim != 0:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape_ref is None or loss._tape_ref() is not self or loss.node_id is None:
            raise TapeError("loss was not recorded on this tape")

        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones((), dtype=np.float64)
        for index in range(loss.node_id, -1, -1):
            grad = grads[index]
            node = self.nodes[index]
            if grad is None or node.vjp is None:
                continue
            for input_id, input_grad in zip(node.inputs, node.vjp(grad)):
                if input_id is None or input_grad is None:
                    continue
                input_grad = np.asarray(input_grad, dtype=np.float64)
                if grads[input_id] is None:
                    grads[input_id] = input_grad
                else:
                    grads[input_id] = grads[input_id] + input_grad
        self.grads = grads

        result: Dict[str, np.ndarray] = {}
        for index, node in enumerate(self.nodes):
            if node.leaf is None:
                continue
            grad = grads[index]
            if grad is None:
                grad = np.zeros(node.shape, dtype=np.float64)
            node.leaf.grad = grad
            result[node.leaf.name or f"leaf{index}"] = grad
        return result


def backward(tape: Tape, loss: DiffTensor) -> Dict[str, np.ndarray]:
    return tape.backward(loss)


def _record(op: str, inputs: Sequence[DiffTensor], value: np.ndarray, vjp: VJP) -> DiffTensor:
    out = DiffTensor(value)
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    ids = tuple(t._node_on(tape) for t in inputs)
    if all(i is None for i in ids):
        return out
    out.node_id = tape._append(Node(op, ids, vjp, out.shape))
    out._tape_ref = weakref.ref(tape)
    out.requires_grad = True
    return out


def _check_binary(op: str, a: DiffTensor, b: DiffTensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise ---------------------------------------------------------


@_register("add", "elementwise a + b; either operand may be a 0-d scalar")
def add(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.value + b.value, lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


@_register("sub", "elementwise a - b; either operand may be a 0-d scalar")
def sub(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.value - b.value, lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


@_register("mul", "elementwise a * b; either operand may be a 0-d scalar")
def mul(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("mul", a, b)
    av, bv = a.value, b.value
    return _record(
        "mul",
        (a, b),
        av * bv,
        lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)),
    )


@_register("div", "elementwise a / b; either operand may be a 0-d scalar")
def div(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(
        "div",
        (a, b),
        out,
        lambda g: (_reduce_to(g / bv, av.shape), _reduce_to(-g * out / bv, bv.shape)),
    )


@_register(
    "power",
    "x ** a with gradients for both x and a; x >= 0 unless a is integral. "
    "At x = 0 both partial derivatives are taken as 0 (subgradient at silent samples).",
)
def power(x: TensorLike, a: TensorLike) -> DiffTensor:
    x, a = _as_tensor(x), _as_tensor(a)
    _check_binary("power", x, a)
    xv, av = x.value, a.value
    negative = xv < 0
    if np.any(negative):
        shape = np.broadcast_shapes(xv.shape, av.shape)
        exponents = np.broadcast_to(av, shape)[np.broadcast_to(negative, shape)]
        if np.any(exponents != np.round(exponents)):
            raise DomainError("power: negative base with non-integer exponent")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(xv, av)

    def vjp(g):
        positive = xv > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            dx = np.where(xv != 0, av * np.power(np.where(xv != 0, xv, 1.0), av - 1.0), 0.0)
            log_x = np.log(np.where(positive, xv, 1.0))
            da = np.where(positive, out * log_x, 0.0)
        return _reduce_to(g * dx, xv.shape), _reduce_to(g * da, av.shape)

    return _record("power", (x, a), out, vjp)


@_register("exp", "elementwise exponential")
def exp(x: TensorLike) -> DiffTensor:
    x = _as_tensor(x)
    out = np.exp(x.value)
    return _record("exp", (x,), out, lambda g: (g * out,))


@_register("log", "elementwise natural logarithm, x > 0")
def log(x: TensorLike) -> DiffTensor:
    x = _as_tensor(x)
    xv = x.value
    if np.any(xv <= 0):
        raise DomainError("log: non-positive input")
    return _record("log", (x,), np.log(xv), lambda g: (g / xv,))


@_register("cos", "elementwise cosine")
def cos(x: TensorLike) -> DiffTensor:
    x = _as_tensor(x)
    xv = x.value
    return _record("cos", (x,), np.cos(xv), lambda g: (-g * np.sin(xv),))


@_register("abs", "elementwise absolute value, subgradient 0 at 0")
def tabs(x: TensorLike) -> DiffTensor:
    x = _as_tensor(x)
    xv = x.value
    return _record("abs", (x,), np.abs(xv), lambda g: (g * np.sign(xv),))


@_register("relu", "max(x, 0), gradient 0 for x <= 0")
def relu(x: TensorLike) -> DiffTensor:
    x = _as_tensor(x)
    mask = x.value > 0
    return _record("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


@_register("gelu", "GeLU, tanh approximation 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))")
def gelu(x: TensorLike) -> DiffTensor:
    x = _as_tensor(x)
    xv = x.value
    t = np.tanh(GELU_C * (xv + GELU_K * xv**3))
    out = 0.5 * xv * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xv * xv)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * dt),)

    return _record("gelu", (x,), out, vjp)


@_register("sigmoid", "logistic function")
def sigmoid(x: TensorLike) -> DiffTensor:
    x = _as_tensor(x)
    out = special.expit(x.value)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


# --- reductions ----------------------------------------------------------


def _expand_grad(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@_register("sum", "sum over all elements or the given axes")
def tsum(x: TensorLike, axis=None, keepdims: bool = False) -> DiffTensor:
    x = _as_tensor(x)
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)
    return _record("sum", (x,), np.asarray(out), lambda g: (_expand_grad(g, shape, axis, keepdims),))


@_register("mean", "mean over all elements or the given axes")
def tmean(x: TensorLike, axis=None, keepdims: bool = False) -> DiffTensor:
    x = _as_tensor(x)
    shape = x.shape
    out = np.mean(x.value, axis=axis, keepdims=keepdims)
    count = x.size / max(np.asarray(out).size, 1)
    return _record(
        "mean",
        (x,),
        np.asarray(out),
        lambda g: (_expand_grad(g / count, shape, axis, keepdims),),
    )


@_register("l1_distance", "mean |a - b| over all elements")
def l1_distance(a: TensorLike, b: TensorLike) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("l1_distance", a.shape, b.shape)
    diff = a.value - b.value
    n = max(diff.size, 1)

    def vjp(g):
        s = g * np.sign(diff) / n
        return s, -s

    return _record("l1_distance", (a, b), np.asarray(np.abs(diff).mean()), vjp)


# --- structural ----------------------------------------------------------


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


@_register("getitem", "numpy-style slicing and integer-array indexing")
def getitem(x: TensorLike, index) -> DiffTensor:
    x = _as_tensor(x)
    shape = x.shape
    basic = _is_basic_index(index)

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _record("getitem", (x,), np.array(x.value[index]), vjp)


@_register("reshape", "reshape, element order preserved (row-major)")
def reshape(x: TensorLike, shape) -> DiffTensor:
    x = _as_tensor(x)
    original = x.shape
    return _record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(original),))


@_register("transpose", "axis permutation")
def transpose(x: TensorLike, axes=None) -> DiffTensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.value, axes), lambda g: (np.transpose(g, inverse),))


@_register("concat", "concatenation along an existing axis")
def concat(tensors: Sequence[TensorLike], axis: int = 0) -> DiffTensor:
    tensors = [_as_tensor(t) for t in tensors]
    values = [t.value for t in tensors]
    for t in tensors[1:]:
        a_shape = list(tensors[0].shape)
        b_shape = list(t.shape)
        if len(a_shape) != len(b_shape) or any(
            i != axis % len(a_shape) and m != n for i, (m, n) in enumerate(zip(a_shape, b_shape))
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [v.shape[axis] for v in values]
    bounds = np.cumsum(sizes)[:-1]
    return _record(
        "concat",
        tensors,
        np.concatenate(values, axis=axis),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


@_register("stack", "stack along a new axis")
def stack(tensors: Sequence[TensorLike], axis: int = 0) -> DiffTensor:
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)
    count = len(tensors)
    return _record(
        "stack",
        tensors,
        np.stack([t.value for t in tensors], axis=axis),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)),
    )


@_register("broadcast_to", "explicit expansion to a larger shape; backward sums the expanded axes")
def broadcast_to(x: TensorLike, shape) -> DiffTensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    original = x.shape
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeError("broadcast_to", original, shape) from exc
    return _record("broadcast_to", (x,), out, lambda g: (_sum_to_shape(g, original),))


def _frame_index(n_frames: int, win: int, hop: int) -> np.ndarray:
    return hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]


@_register("frame", "overlapping frames (n_frames x win) of a 1-D signal; adjoint of overlap_add")
def frame(x: TensorLike, win: int, hop: int, n_frames: int) -> DiffTensor:
    x = _as_tensor(x)
    length = x.shape[0]
    if x.ndim != 1 or (n_frames - 1) * hop + win > length:
        raise ShapeError("frame", x.shape, (n_frames, win))
    idx = _frame_index(n_frames, win, hop)

    def vjp(g):
        return (np.bincount(idx.ravel(), weights=g.ravel(), minlength=length),)

    return _record("frame", (x,), x.value[idx], vjp)


@_register("overlap_add", "sum overlapping frames into a 1-D signal; adjoint of frame")
def overlap_add(frames: TensorLike, hop: int, length: int) -> DiffTensor:
    frames = _as_tensor(frames)
    if frames.ndim != 2:
        raise ShapeError("overlap_add", frames.shape, ("frames", "win"))
    n_frames, win = frames.shape
    if (n_frames - 1) * hop + win > length:
        raise ShapeError("overlap_add", frames.shape, (length,))
    idx = _frame_index(n_frames, win, hop)
    out = np.bincount(idx.ravel(), weights=frames.value.ravel(), minlength=length)
    return _record("overlap_add", (frames,), out, lambda g: (g[idx],))


# --- linear maps ---------------------------------------------------------


@_register("affine", "dense map x @ W + b over the last axis of x")
def affine(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> DiffTensor:
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("affine", x.shape, weight.shape)
    inputs = [x, weight]
    out = x.value @ weight.value
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("affine", bias.shape, (weight.shape[1],))
        inputs.append(bias)
        out = out + bias.value
    xv, wv = x.value, weight.value

    def vjp(g):
        flat_x = xv.reshape(-1, wv.shape[0])
        flat_g = g.reshape(-1, wv.shape[1])
        grads = [g @ wv.T, flat_x.T @ flat_g]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return grads

    return _record("affine", inputs, out, vjp)


LARGE_KERNEL = 25


@_register(
    "conv2d",
    "2-D cross-correlation with zero same-padding: x (C, F, T), w (O, C, kh, kw) with odd kh, kw, "
    "optional bias (O,)",
)
def conv2d(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> DiffTensor:
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    out_ch, in_ch, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", x.shape, weight.shape)
    hh, hw = kh // 2, kw // 2
    _, n_f, n_t = x.shape
    xv, wv = x.value, weight.value
    inputs = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (out_ch,):
            raise ShapeError("conv2d", bias.shape, (out_ch,))
        inputs.append(bias)

    if out_ch == 1 and in_ch == 1 and kh * kw > LARGE_KERNEL:
        # Single large kernel (modulation filters): scipy picks direct or FFT evaluation.
        out = signal.correlate(xv[0], wv[0, 0], mode="same")[None, :, :]

        def kernel_grads(g):
            gx = signal.convolve(g[0], wv[0, 0], mode="same")[None, :, :]
            padded = np.pad(xv[0], ((hh, hh), (hw, hw)))
            gw = signal.correlate(padded, g[0], mode="valid")[None, None, :, :]
            return gx, gw

    else:
        padded = np.pad(xv, ((0, 0), (hh, hh), (hw, hw)))
        view = sliding_window_view(padded, (kh, kw), axis=(1, 2))
        out = np.einsum("cftab,ocab->oft", view, wv, optimize=True)

        def kernel_grads(g):
            gw = np.einsum("oft,cftab->ocab", g, view, optimize=True)
            gpad = np.zeros(padded.shape, dtype=np.float64)
            for a in range(kh):
                for b in range(kw):
                    gpad[:, a : a + n_f, b : b + n_t] += np.tensordot(wv[:, :, a, b], g, axes=([0], [0]))
            return gpad[:, hh : hh + n_f, hw : hw + n_t], gw

    if bias is not None:
        out = out + bias.value[:, None, None]

    def vjp(g):
        gx, gw = kernel_grads(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _record("conv2d", inputs, out, vjp)


# --- Fourier transforms --------------------------------------------------


@_register("rfft", "real-input FFT along the last axis, returned as (re, im); gradient is the adjoint transform")
def rfft(x: TensorLike) -> ComplexPair:
    x = _as_tensor(x)
    n = x.shape[-1]
    spectrum = np.fft.rfft(x.value, axis=-1)
    bins = spectrum.shape[-1]

    def vjp(g):
        weights = np.full(bins, 0.5)
        weights[0] = 1.0
        if n % 2 == 0:
            weights[-1] = 1.0
        packed = (g[0] + 1j * g[1]) * weights
        return (n * np.fft.irfft(packed, n=n, axis=-1),)

    packed = _record("rfft", (x,), np.stack([spectrum.real, spectrum.imag]), vjp)
    return ComplexPair(getitem(packed, 0), getitem(packed, 1))


@_register("irfft", "inverse real FFT of (re, im) along the last axis to length n; gradient is the adjoint transform")
def irfft(spectrum: ComplexPair, n: int) -> DiffTensor:
    re, im = _as_tensor(spectrum.re), _as_tensor(spectrum.im)
    if re.shape != im.shape:
        raise ShapeError("irfft", re.shape, im.shape)
    bins = n // 2 + 1
    if re.shape[-1] != bins:
        raise ShapeError("irfft", re.shape, re.shape[:-1] + (bins,))
    out = np.fft.irfft(re.value + 1j * im.value, n=n, axis=-1)

    def vjp(g):
        back = np.fft.rfft(g, axis=-1)
        scale = np.full(bins, 2.0 / n)
        scale[0] = 1.0 / n
        if n % 2 == 0:
            scale[-1] = 1.0 / n
        g_re = back.real * scale
        g_im = back.imag * scale
        g_im[..., 0] = 0.0
        if n % 2 == 0:
            g_im[..., -1] = 0.0
        return g_re, g_im

    return _record("irfft", (re, im), out, vjp)


def cmul(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    return ComplexPair(
        sub(mul(a.re, b.re), mul(a.im, b.im)),
        add(mul(a.re, b.im), mul(a.im, b.re)),
    )

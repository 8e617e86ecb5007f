"""Small dense-tensor engine with tape-based reverse-mode autodiff.

Only the operations the MVTT network needs are provided. Feature maps use the
layout ``(slice, channel, height, width)``: the slice axis doubles as the batch
axis for 2D convolutions. All arithmetic is float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

# names of ops whose backward pass is deliberately corrupted (gradcheck test hook)
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(op_name: str):
    """Corrupt the backward pass of ``op_name`` inside the block."""
    _FAULTS.add(op_name)
    try:
        yield
    finally:
        _FAULTS.discard(op_name)


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-d float64 array that records how it was produced."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; same-shape semantics throughout
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad with d(loss)/d(leaf).

    Gradients accumulate into leaves across calls; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order DFS
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------- conv2d

@dataclass(frozen=True)
class ConvSpec:
    kernel_size: tuple[int, int]
    in_channels: int
    out_channels: int
    stride: tuple[int, int] = (1, 1)
    dilation: int = 1
    padding: str = "same"

    def __post_init__(self):
        kh, kw = self.kernel_size
        sh, sw = self.stride
        if min(kh, kw, sh, sw, self.dilation, self.in_channels, self.out_channels) < 1:
            raise ValueError(f"invalid ConvSpec {self}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def receptive_field(self) -> tuple[int, int]:
        kh, kw = self.kernel_size
        return (kh - 1) * self.dilation + 1, (kw - 1) * self.dilation + 1

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel_size)

    def pads(self, h: int, w: int) -> tuple[int, int, int, int]:
        """(top, bottom, left, right); odd totals put the extra cell at the end."""
        if self.padding == "valid":
            return 0, 0, 0, 0
        out = []
        for size, stride, eff in zip((h, w), self.stride, self.receptive_field):
            n_out = -(-size // stride)
            total = max((n_out - 1) * stride + eff - size, 0)
            out += [total // 2, total - total // 2]
        return tuple(out)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        top, bottom, left, right = self.pads(h, w)
        eh, ew = self.receptive_field
        sh, sw = self.stride
        return (h + top + bottom - eh) // sh + 1, (w + left + right - ew) // sw + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Dilated, strided 2D cross-correlation over a (N, C, H, W) batch."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (slice, channel, h, w), got shape {x.shape}")
    if weight.shape != spec.weight_shape():
        raise ShapeError(f"conv2d weight shape {weight.shape} does not match spec {spec.weight_shape()}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d input shape {x.shape} has {x.shape[1]} channels, "
                         f"weights {weight.shape} expect {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias shape {bias.shape} vs expected ({spec.out_channels},)")
    if not np.all(np.isfinite(weight.data)):
        raise ValueError("conv2d weights contain non-finite values")

    n, ci, h, w = x.shape
    kh, kw = spec.kernel_size
    sh, sw = spec.stride
    d = spec.dilation
    top, bottom, left, right = spec.pads(h, w)
    ho, wo = spec.output_hw(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for receptive field {spec.receptive_field}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.empty((n, ci, len(taps), ho, wo))
    for t, (i, j) in enumerate(taps):
        cols[:, :, t] = xp[:, :, i * d: i * d + sh * (ho - 1) + 1: sh, j * d: j * d + sw * (wo - 1) + 1: sw]
    cols = cols.reshape(n, ci * len(taps), ho * wo)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, spec.out_channels, ho, wo)

    def _backward(g):
        g2 = g.reshape(n, spec.out_channels, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
            if "conv2d" in _FAULTS:
                gw = gw * 1.01
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(n, ci, len(taps), ho, wo)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                gxp[:, :, i * d: i * d + sh * (ho - 1) + 1: sh, j * d: j * d + sw * (wo - 1) + 1: sw] += gcols[:, :, t]
            gx = gxp[:, :, top: top + h, left: left + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _backward, "conv2d")


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    # expit rounds to exactly 0 or 1 once |x| is large; keep the open interval
    y = np.clip(expit(x.data), _SIGMOID_LO, _SIGMOID_HI)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, **kw) -> "BatchNormState":
        return cls(gamma=Tensor(np.ones(channels), requires_grad=True),
                   beta=Tensor(np.zeros(channels), requires_grad=True),
                   running_mean=np.zeros(channels), running_var=np.ones(channels), **kw)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("BatchNorm epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("BatchNorm running_var must be nonnegative")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"BatchNorm mode must be 'train' or 'eval', got {self.mode!r}")


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization over the (slice, height, width) axes."""
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batch_norm input {x.shape} vs {state.gamma.shape[0]} channels")
    gamma, beta = state.gamma, state.beta
    axes = (0, 2, 3)
    bshape = (1, -1, 1, 1)

    if state.mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        x_hat = (x.data - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = gamma.data.reshape(bshape) * x_hat + beta.data.reshape(bshape)

        def _backward_eval(g):
            gx = g * (gamma.data * inv_std).reshape(bshape)
            return gx, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

        return _make(out, (x, gamma, beta), _backward_eval, "batch_norm")

    m = x.data.size // x.shape[1]
    if m < 2:
        raise ValueError("batch_norm in train mode needs more than one element per channel")
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * x_hat + beta.data.reshape(bshape)

    mom = state.momentum
    state.running_mean = (1 - mom) * state.running_mean + mom * mean
    state.running_var = (1 - mom) * state.running_var + mom * var * m / (m - 1)

    def _backward(g):
        dgamma = (g * x_hat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        gx = (inv_std.reshape(bshape) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(bshape)
            - x_hat * (dxhat * x_hat).sum(axis=axes).reshape(bshape)
        )
        return gx, dgamma, dbeta

    return _make(out, (x, gamma, beta), _backward, "batch_norm")


# ------------------------------------------------------------- elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_same_shape(a, b, "hadamard")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    q = a.data / b.data
    return _make(q, (a, b), lambda g: (g / b.data, -g * q / b.data), "div")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "hadamard":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    return _make(x.data + c, (x,), lambda g: (g,), "shift")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


# --------------------------------------------------------------- shape ops

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ShapeError(f"concat along axis {axis}: shape mismatch {ref} vs {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def _backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(out, tuple(tensors), _backward, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous sub-range ``start:stop`` along ``axis``."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def _backward(g):
        gx = np.zeros(shape)
        gx[idx] = g
        return (gx,)

    return _make(x.data[idx].copy(), (x,), _backward, "narrow")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate single-slice tensors (1, C, H, W) into (T, C, H, W)."""
    return concat(tensors, axis=0)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute_axes(x: Tensor, order: Sequence[int]) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {order} for a {x.ndim}-d tensor")
    inverse = tuple(np.argsort(order))
    return _make(np.ascontiguousarray(x.data.transpose(order)), (x,),
                 lambda g: (g.transpose(inverse),), "permute")


def inverse_permutation(order: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argsort(order))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]

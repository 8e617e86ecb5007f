"""ConvLSTM with Hadamard peepholes and ReLU cell/output nonlinearities.

Gate equations, for slice t::

    f_t = sigmoid(W_xf * x_t + W_hf * h_{t-1} + W_cf o c_{t-1} + b_f)
    i_t = sigmoid(W_xi * x_t + W_hi * h_{t-1} + W_ci o c_{t-1} + b_i)
    c_t = f_t o c_{t-1} + i_t o relu(W_xc * x_t + W_hc * h_{t-1} + b_c)
    o_t = sigmoid(W_xo * x_t + W_ho * h_{t-1} + W_co o c_t + b_o)
    h_t = o_t o relu(c_t)

``*`` is a same-padded 2D convolution and ``o`` the elementwise product.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor_core as tc
from .tensor_core import ConvSpec, ShapeError, Tensor

GATES = ("f", "i", "c", "o")


@dataclass
class ConvLstmParams:
    W_xf: Tensor
    W_hf: Tensor
    W_xi: Tensor
    W_hi: Tensor
    W_xc: Tensor
    W_hc: Tensor
    W_xo: Tensor
    W_ho: Tensor
    W_cf: Tensor
    W_ci: Tensor
    W_co: Tensor
    b_f: Tensor
    b_i: Tensor
    b_c: Tensor
    b_o: Tensor

    def __post_init__(self):
        k = self.W_xf.shape[2:]
        hidden = self.W_xf.shape[0]
        for g in GATES:
            wx, wh = getattr(self, f"W_x{g}"), getattr(self, f"W_h{g}")
            if wx.shape[0] != hidden or wh.shape != (hidden, hidden, *k) or wx.shape[2:] != k:
                raise ShapeError(f"ConvLSTM gate {g}: kernel shapes {wx.shape}, {wh.shape} are inconsistent")
            if getattr(self, f"b_{g}").shape != (hidden,):
                raise ShapeError(f"ConvLSTM bias b_{g} must have shape ({hidden},)")
        for name in ("W_cf", "W_ci", "W_co"):
            pe = getattr(self, name)
            if pe.ndim != 3 or pe.shape[0] != hidden:
                raise ShapeError(f"peephole {name} must be (hidden, h, w), got {pe.shape}")

    @property
    def hidden_channels(self) -> int:
        return self.W_xf.shape[0]

    @property
    def in_channels(self) -> int:
        return self.W_xf.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.W_cf.shape[1:]

    def named(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    @classmethod
    def init(cls, in_channels: int, hidden: int, spatial: tuple[int, int], rng: np.random.Generator,
             kernel: int = 3, forget_bias: float = 1.0) -> "ConvLstmParams":
        """Xavier-uniform gate kernels, zero peepholes, forget bias 1."""
        def xavier(cin):
            fan_in, fan_out = cin * kernel * kernel, hidden * kernel * kernel
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(hidden, cin, kernel, kernel))
            return Tensor(w.astype(np.float32), requires_grad=True)

        kw = {}
        for g in GATES:
            kw[f"W_x{g}"] = xavier(in_channels)
            kw[f"W_h{g}"] = xavier(hidden)
        for g in ("f", "i", "o"):
            kw[f"W_c{g}"] = Tensor(np.zeros((hidden, *spatial)), requires_grad=True)
        for g in GATES:
            kw[f"b_{g}"] = Tensor(np.full(hidden, forget_bias if g == "f" else 0.0), requires_grad=True)
        return cls(**kw)


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, spatial: tuple[int, int]) -> "ConvLstmState":
        return cls(h=Tensor(np.zeros((1, hidden, *spatial))), c=Tensor(np.zeros((1, hidden, *spatial))))


def _peephole(params: ConvLstmParams, name: str) -> Tensor:
    pe = getattr(params, name)
    return tc.reshape(pe, (1, *pe.shape))


def _check(x_t: Tensor, prev: ConvLstmState, params: ConvLstmParams) -> None:
    if x_t.ndim != 4 or x_t.shape[0] != 1:
        raise ShapeError(f"ConvLSTM input slice must be (1, C, H, W), got {x_t.shape}")
    if x_t.shape[1] != params.in_channels:
        raise ShapeError(f"ConvLSTM input has {x_t.shape[1]} channels, params expect {params.in_channels}")
    expected = (1, params.hidden_channels, *params.spatial)
    if prev.h.shape != expected or prev.c.shape != expected:
        raise ShapeError(f"ConvLSTM state shapes {prev.h.shape}/{prev.c.shape}, expected {expected}")
    if tuple(x_t.shape[2:]) != tuple(params.spatial):
        raise ShapeError(f"ConvLSTM input spatial dims {x_t.shape[2:]} vs state {params.spatial}")


def _fused(params: ConvLstmParams, side: str) -> tuple[Tensor, Tensor | None]:
    """Gate kernels stacked along the output axis in (f, i, c, o) order."""
    w = tc.concat([getattr(params, f"W_{side}{g}") for g in GATES], axis=0)
    b = tc.concat([getattr(params, f"b_{g}") for g in GATES], axis=0) if side == "x" else None
    return w, b


def _input_preactivations(x: Tensor, params: ConvLstmParams) -> Tensor:
    w, b = _fused(params, "x")
    spec = ConvSpec(kernel_size=tuple(w.shape[2:]), in_channels=params.in_channels,
                    out_channels=4 * params.hidden_channels)
    return tc.conv2d(x, w, b, spec)


def _advance(gx_t: Tensor, prev: ConvLstmState, params: ConvLstmParams, wh: Tensor):
    C = params.hidden_channels
    spec = ConvSpec(kernel_size=tuple(wh.shape[2:]), in_channels=C, out_channels=4 * C)
    pre = tc.add(gx_t, tc.conv2d(prev.h, wh, None, spec))

    def gate(k):
        return tc.narrow(pre, 1, k * C, (k + 1) * C)

    f = tc.sigmoid(tc.add(gate(0), tc.mul(_peephole(params, "W_cf"), prev.c)))
    i = tc.sigmoid(tc.add(gate(1), tc.mul(_peephole(params, "W_ci"), prev.c)))
    cand = tc.relu(gate(2))
    c = tc.add(tc.mul(f, prev.c), tc.mul(i, cand))
    o = tc.sigmoid(tc.add(gate(3), tc.mul(_peephole(params, "W_co"), c)))
    h = tc.mul(o, tc.relu(c))
    return ConvLstmState(h=h, c=c), {"f": f, "i": i, "o": o, "g": cand}


def convlstm_step(x_t: Tensor, prev: ConvLstmState, params: ConvLstmParams, return_gates: bool = False):
    """One recurrence step. With ``return_gates`` also returns {'f','i','o','g'} tensors."""
    _check(x_t, prev, params)
    wh, _ = _fused(params, "h")
    state, gates = _advance(_input_preactivations(x_t, params), prev, params, wh)
    return (state, gates) if return_gates else state


def convlstm_run(sequence: list[Tensor], params: ConvLstmParams, init: ConvLstmState | None = None) -> list[Tensor]:
    """Fold ``convlstm_step`` over slices in ascending order; returns h_1..h_T.

    The input-side convolutions do not depend on the recurrence, so they are
    computed for all slices in one batched call.
    """
    if not sequence:
        raise ValueError("convlstm_run needs a nonempty sequence")
    shape = sequence[0].shape
    for x in sequence:
        if x.shape != shape:
            raise ShapeError(f"ConvLSTM sequence has mixed slice shapes {shape} and {x.shape}")
    state = init if init is not None else ConvLstmState.zeros(params.hidden_channels, params.spatial)
    _check(sequence[0], state, params)
    gx = _input_preactivations(tc.stack(sequence), params)
    wh, _ = _fused(params, "h")
    out = []
    for t in range(len(sequence)):
        state, _ = _advance(tc.narrow(gx, 0, t, t + 1), state, params, wh)
        out.append(state.h)
    return out

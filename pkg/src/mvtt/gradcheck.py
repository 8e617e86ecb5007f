"""Central finite-difference checks of every differentiable op and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .mvtt_net import MvttConfig, MvttNet, hybrid_loss
from .recurrent import ConvLstmParams, ConvLstmState, convlstm_run
from .tensor_core import BatchNormState, ConvSpec, Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_param: str
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def numerical_grad(loss_fn: Callable[[], Tensor], t: Tensor, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)  # view: perturbations write through
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn().item()
        flat[i] = orig - step
        down = loss_fn().item()
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(name: str, loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
          step: float = STEP) -> CheckResult:
    t0 = time.perf_counter()
    for _, p in params:
        p.data = np.array(p.data, dtype=np.float64)  # own, writable buffer
        p.zero_grad()
    loss_fn().backward()
    analytic = {n: p.grad.copy() for n, p in params}
    worst, worst_name = 0.0, ""
    for n, p in params:
        err = relative_error(analytic[n], numerical_grad(loss_fn, p, step))
        if err >= worst:
            worst, worst_name = err, n
    return CheckResult(name, worst, worst_name, time.perf_counter() - t0)


def _project(out: Tensor, cot: np.ndarray) -> Tensor:
    """Scalar loss <out, cot>; a generic cotangent keeps every gradient nonzero."""
    return tc.sum(tc.mul(out, Tensor(cot)))


def _leaf(rng, shape, away_from_zero: bool = False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.1)
    return Tensor(x, requires_grad=True)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    for d in (1, 2, 5):
        for padding in ("same", "valid"):
            size = 12 if padding == "valid" and d == 5 else 7
            spec = ConvSpec((3, 3), 2, 3, dilation=d, padding=padding)
            x, w, b = _leaf(rng, (2, 2, size, size)), _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
            cot = rng.normal(size=(2, 3, *spec.output_hw(size, size)))
            results.append(check(f"conv2d[d={d},{padding}]",
                                 lambda x=x, w=w, b=b, spec=spec, cot=cot:
                                 _project(tc.conv2d(x, w, b, spec), cot),
                                 [("input", x), ("weight", w), ("bias", b)]))
    spec = ConvSpec((3, 2), 2, 2, stride=(2, 1), padding="same")
    x, w = _leaf(rng, (1, 2, 7, 6)), _leaf(rng, (2, 2, 3, 2))
    cot = rng.normal(size=(1, 2, *spec.output_hw(7, 6)))
    results.append(check("conv2d[stride=2,1,no bias]",
                         lambda: _project(tc.conv2d(x, w, None, spec), cot),
                         [("input", x), ("weight", w)]))

    x = _leaf(rng, (2, 3, 4, 4), away_from_zero=True)
    cot = rng.normal(size=x.shape)
    results.append(check("relu", lambda: _project(tc.relu(x), cot), [("input", x)]))
    x = _leaf(rng, (2, 3, 4, 4))
    results.append(check("sigmoid", lambda: _project(tc.sigmoid(x), cot), [("input", x)]))

    for mode in ("train", "eval"):
        bn = BatchNormState.create(3, mode=mode)
        bn.gamma.data = rng.uniform(0.5, 1.5, size=3)
        bn.beta.data = rng.normal(size=3)
        bn.running_mean, bn.running_var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        x = _leaf(rng, (3, 3, 4, 4))
        cot_bn = rng.normal(size=x.shape)
        results.append(check(f"batch_norm[{mode}]",
                             lambda bn=bn, x=x, cot_bn=cot_bn: _project(tc.batch_norm(x, bn), cot_bn),
                             [("input", x), ("gamma", bn.gamma), ("beta", bn.beta)]))

    a, b = _leaf(rng, (2, 3, 4, 4)), _leaf(rng, (2, 3, 4, 4))
    b_pos = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4, 4)), requires_grad=True)
    results.append(check("add", lambda: _project(tc.add(a, b), cot), [("a", a), ("b", b)]))
    results.append(check("hadamard", lambda: _project(tc.mul(a, b), cot), [("a", a), ("b", b)]))
    results.append(check("div", lambda: _project(tc.div(a, b_pos), cot), [("a", a), ("b", b_pos)]))
    results.append(check("scale_shift", lambda: _project(tc.shift(tc.scale(a, -2.5), 0.3), cot),
                         [("a", a)]))

    c1, c2 = _leaf(rng, (2, 2, 3, 3)), _leaf(rng, (2, 3, 3, 3))
    cot_cat = rng.normal(size=(2, 5, 3, 3))
    results.append(check("concat_channels", lambda: _project(tc.concat_channels([c1, c2]), cot_cat),
                         [("first", c1), ("second", c2)]))
    p = _leaf(rng, (2, 3, 4, 5))
    cot_p = rng.normal(size=(5, 3, 2, 4))
    results.append(check("permute_axes", lambda: _project(tc.permute_axes(p, (3, 1, 0, 2)), cot_p),
                         [("input", p)]))
    cot_n = rng.normal(size=(2, 2, 4, 5))
    results.append(check("narrow", lambda: _project(tc.narrow(p, 1, 1, 3), cot_n), [("input", p)]))
    cot_r = rng.normal(size=(6, 20))
    results.append(check("reshape", lambda: _project(tc.reshape(p, (6, 20)), cot_r), [("input", p)]))
    return results


def convlstm_check(seed: int = 0, steps: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = ConvLstmParams.init(2, 3, (5, 5), rng)
    for _, t in params.named():
        t.data = t.data + rng.normal(scale=0.3, size=t.shape)
    seq = [Tensor(rng.normal(size=(1, 2, 5, 5))) for _ in range(steps)]
    init = ConvLstmState(h=Tensor(rng.uniform(0, 1, size=(1, 3, 5, 5))), c=Tensor(rng.uniform(0, 1, size=(1, 3, 5, 5))))
    cots = [rng.normal(size=(1, 3, 5, 5)) for _ in range(steps)]

    def loss():
        hs = convlstm_run(seq, params, init)
        return tc.add_n([_project(h, c) for h, c in zip(hs, cots)])

    return check(f"convlstm[{steps}-step unroll]", loss, params.named())


def tiny_model(seed: int = 0) -> MvttNet:
    return MvttNet(MvttConfig(slice_shape=(6, 6), base_channels=16, width_multiplier="1/8", seed=seed))


def model_check(seed: int = 0) -> CheckResult:
    """Full hybrid-loss gradient of a C=2 model on a 3x6x6 volume."""
    rng = np.random.default_rng(seed + 1)
    model = tiny_model(seed)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    vol = rng.normal(size=(3, 6, 6))
    g_l = (rng.uniform(size=vol.shape) < 0.5).astype(float)
    g_as = (rng.uniform(size=vol.shape) < 0.2).astype(float)

    def loss():
        m_l, m_as = model.forward(vol)
        return hybrid_loss(m_l, g_l, m_as, g_as)

    return check("mvtt_model[C=2,3x6x6]", loss, list(model.named_parameters()))


def run_all(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + [convlstm_check(seed), model_check(seed)]

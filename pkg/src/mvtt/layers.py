"""Parameter containers built on ``tensor_core``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .recurrent import ConvLstmParams
from .tensor_core import BatchNormState, ConvSpec, Tensor


class Module:
    """Named tree of parameters and BatchNorm states, in registration order."""

    def __init__(self):
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, (Module, Tensor, BatchNormState, ConvLstmParams)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, child in self._children.items():
            full = f"{prefix}{name}"
            if isinstance(child, Module):
                yield from child.named_parameters(full + ".")
            elif isinstance(child, Tensor):
                if child.requires_grad:
                    yield full, child
            elif isinstance(child, BatchNormState):
                yield f"{full}.gamma", child.gamma
                yield f"{full}.beta", child.beta
            elif isinstance(child, ConvLstmParams):
                for pname, t in child.named():
                    yield f"{full}.{pname}", t

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, child in self._children.items():
            full = f"{prefix}{name}"
            if isinstance(child, Module):
                yield from child.named_buffers(full + ".")
            elif isinstance(child, BatchNormState):
                yield full, child

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, bn in self.named_buffers():
            bn.mode = "train" if mode else "eval"
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _uniform(rng: np.random.Generator, limit: float, shape) -> Tensor:
    # parameters start on the float32 grid so checkpoints round-trip exactly
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(np.float32), requires_grad=True)


class Conv(Module):
    """2D convolution. ``init`` is 'he' (feeds ReLU) or 'xavier' (feeds sigmoid)."""

    def __init__(self, cin: int, cout: int, k: int = 3, dilation: int = 1, *,
                 rng: np.random.Generator, init: str = "he", bias: bool = True):
        super().__init__()
        self.spec = ConvSpec(kernel_size=(k, k), in_channels=cin, out_channels=cout, dilation=dilation)
        fan_in, fan_out = cin * k * k, cout * k * k
        if init == "he":
            limit = np.sqrt(6.0 / fan_in)
        elif init == "xavier":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = _uniform(rng, limit, self.spec.weight_shape())
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, self.spec)


class ConvBNReLU(Module):
    """conv -> BatchNorm -> ReLU. The conv has no bias: BN's beta absorbs it."""

    def __init__(self, cin: int, cout: int, k: int = 3, dilation: int = 1, *, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv(cin, cout, k, dilation, rng=rng, init="he", bias=False)
        self.bn = BatchNormState.create(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.relu(tc.batch_norm(self.conv(x), self.bn))

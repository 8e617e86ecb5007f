"""The multiview two-task network, its hybrid Dice loss, and inference."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import reduce

import numpy as np

from . import tensor_core as tc
from .layers import Conv, ConvBNReLU, Module
from .recurrent import ConvLstmParams, convlstm_run
from .tensor_core import ShapeError, Tensor
from .volume import Volume, reslice

# (slice, C, h, w) layouts of each view mapped back to axial (Z, C, Y, X)
SAGITTAL_TO_AXIAL = (3, 1, 2, 0)  # (X, C, Y, Z) -> (Z, C, Y, X)
CORONAL_TO_AXIAL = (3, 1, 0, 2)   # (Y, C, X, Z) -> (Z, C, Y, X)


@dataclass
class MvttConfig:
    slice_shape: tuple[int, int]
    base_channels: int = 16
    kernel: int = 3
    hdc_rates: tuple[int, ...] = (1, 2, 5)
    residual_blocks_per_branch: int = 2
    width_multiplier: str = "1"
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.slice_shape = tuple(int(s) for s in self.slice_shape)
        self.hdc_rates = tuple(int(r) for r in self.hdc_rates)
        self.width_multiplier = str(Fraction(self.width_multiplier))
        if len(self.slice_shape) != 2 or min(self.slice_shape) < 1:
            raise ValueError(f"slice_shape must be two positive ints, got {self.slice_shape}")
        if self.kernel < 1:
            raise ValueError("kernel must be >= 1")
        if not self.hdc_rates or min(self.hdc_rates) < 1:
            raise ValueError(f"hdc_rates must be positive, got {self.hdc_rates}")
        if len(self.hdc_rates) > 1 and reduce(math.gcd, self.hdc_rates) > 1:
            raise ValueError(f"hdc_rates {self.hdc_rates} share a common factor (gridding)")
        if Fraction(self.width_multiplier) <= 0:
            raise ValueError("width_multiplier must be positive")
        if self.channels < 1 or Fraction(self.base_channels) * Fraction(self.width_multiplier) != self.channels:
            raise ValueError(f"base_channels * width_multiplier must be a positive integer, "
                             f"got {self.base_channels} * {self.width_multiplier}")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def channels(self) -> int:
        return int(Fraction(self.base_channels) * Fraction(self.width_multiplier))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slice_shape"] = list(self.slice_shape)
        d["hdc_rates"] = list(self.hdc_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MvttConfig":
        return cls(**d)


@dataclass
class FusedFeatures:
    F_a: Tensor
    F_s: Tensor
    F_c: Tensor
    F_v: Tensor


@dataclass
class SegmentationPair:
    m_l: np.ndarray
    m_as: np.ndarray
    anatomy_mask: np.ndarray
    scar_mask: np.ndarray


# ------------------------------------------------------------------ branches

class AxialBranch(Module):
    def __init__(self, C: int, slice_shape, k: int, rng):
        super().__init__()
        self.enc1 = ConvBNReLU(1, C, k, rng=rng)
        self.enc2 = ConvBNReLU(C, C, k, rng=rng)
        self.lstm = ConvLstmParams.init(C, C, slice_shape, rng, kernel=k)

    def __call__(self, axial: Tensor) -> Tensor:
        f_a = self.enc2(self.enc1(axial))
        seq = [tc.narrow(f_a, 0, t, t + 1) for t in range(f_a.shape[0])]
        return tc.stack(convlstm_run(seq, self.lstm))


class ResidualBlock(Module):
    """Three dilated convs (one per HDC rate) with an identity shortcut."""

    def __init__(self, C: int, rates, k: int, rng):
        super().__init__()
        self.conv1 = ConvBNReLU(C, C, k, rates[0], rng=rng)
        self.conv2 = ConvBNReLU(C, C, k, rates[1], rng=rng)
        self.conv3 = Conv(C, C, k, rates[2], rng=rng, bias=False)
        self.bn3 = tc.BatchNormState.create(C)

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.batch_norm(self.conv3(self.conv2(self.conv1(x))), self.bn3)
        return tc.relu(tc.add(y, x))


class ViewBranch(Module):
    def __init__(self, C: int, rates, n_blocks: int, k: int, rng):
        super().__init__()
        if len(rates) != 3:
            raise ValueError("residual blocks take exactly three dilation rates")
        self.stem = ConvBNReLU(1, C, k, rng=rng)
        self.blocks = Module()
        for b in range(n_blocks):
            setattr(self.blocks, f"block{b}", ResidualBlock(C, rates, k, rng))

    def __call__(self, slices: Tensor) -> Tensor:
        x = self.stem(slices)
        for block in self.blocks._children.values():
            x = block(x)
        return x


class AttentionMask(Module):
    """Dilated mask branch on the raw axial image; returns AM in (0, 1)."""

    def __init__(self, C: int, rates, k: int, rng):
        super().__init__()
        self.convs = Module()
        cin = 1
        for n, r in enumerate(rates):
            setattr(self.convs, f"conv{n}", ConvBNReLU(cin, C, k, r, rng=rng))
            cin = C
        self.proj = Conv(C, C, 1, rng=rng, init="xavier")

    def __call__(self, image: Tensor) -> Tensor:
        x = image
        for conv in self.convs._children.values():
            x = conv(x)
        return tc.sigmoid(self.proj(x))


class Head(Module):
    """Two conv+BN+ReLU layers, concatenated, then a 1-kernel conv + sigmoid."""

    def __init__(self, C: int, k: int, final_k: int, rng):
        super().__init__()
        self.conv1 = ConvBNReLU(C, C, k, rng=rng)
        self.conv2 = ConvBNReLU(C, C, k, rng=rng)
        self.final = Conv(2 * C, 1, final_k, rng=rng, init="xavier")

    def __call__(self, x: Tensor) -> Tensor:
        a = self.conv1(x)
        b = self.conv2(a)
        return tc.sigmoid(self.final(tc.concat_channels([a, b])))


# --------------------------------------------------------------------- model

class MvttNet(Module):
    def __init__(self, config: MvttConfig):
        super().__init__()
        object.__setattr__(self, "config", config)
        rng = np.random.default_rng(config.seed)
        C, k, rates = config.channels, config.kernel, config.hdc_rates
        self.theta_a = AxialBranch(C, config.slice_shape, k, rng)
        self.theta_s = ViewBranch(C, rates, config.residual_blocks_per_branch, k, rng)
        self.theta_c = ViewBranch(C, rates, config.residual_blocks_per_branch, k, rng)
        self.theta_am = AttentionMask(C, rates, k, rng)
        self.theta_l = Head(C, k, 3, rng)
        self.theta_as = Head(C, k, 1, rng)

    # individual stages, exposed for testing
    def axial_branch(self, image: Tensor) -> Tensor:
        return self.theta_a(image)

    def view_branch(self, slices: Tensor, which: str) -> Tensor:
        return getattr(self, f"theta_{which}")(slices)

    def attention_mask(self, image: Tensor) -> Tensor:
        return self.theta_am(image)

    def features(self, volume: np.ndarray) -> tuple[FusedFeatures, Tensor]:
        vol = np.asarray(volume, dtype=np.float64)
        if vol.ndim != 3 or min(vol.shape) < 1:
            raise ShapeError(f"expected a (Z, Y, X) volume with at least one voxel per axis, got {vol.shape}")
        if vol.shape[1:] != self.config.slice_shape:
            raise ShapeError(f"volume slice shape {vol.shape[1:]} does not match model slice_shape "
                             f"{self.config.slice_shape}")
        views = reslice(vol)
        image = Tensor(views.axial[:, None])
        F_a = self.theta_a(image)
        F_s = self.theta_s(Tensor(views.sagittal[:, None]))
        F_c = self.theta_c(Tensor(views.coronal[:, None]))
        return FusedFeatures(F_a, F_s, F_c, fuse(F_a, F_s, F_c)), image

    def forward(self, volume: np.ndarray) -> tuple[Tensor, Tensor]:
        """Return (m_l, m_as) probability tensors shaped (Z, Y, X)."""
        feats, image = self.features(volume)
        O = attention_apply(self.theta_am(image), feats.F_v)
        m_l = self.theta_l(feats.F_v)
        m_as = self.theta_as(O)
        shape = np.shape(volume)
        return tc.reshape(m_l, shape), tc.reshape(m_as, shape)

    __call__ = forward

    def quantize_(self) -> None:
        """Snap parameters and running statistics onto the float32 grid."""
        for p in self.parameters():
            p.data = p.data.astype(np.float32).astype(np.float64)
        for _, bn in self.named_buffers():
            bn.running_mean = bn.running_mean.astype(np.float32).astype(np.float64)
            bn.running_var = bn.running_var.astype(np.float32).astype(np.float64)


def fuse(F_a: Tensor, F_s: Tensor, F_c: Tensor) -> Tensor:
    """F_v = F_a + T(F_c) + T(F_s) in axial (Z, C, Y, X) layout."""
    T_c = tc.permute_axes(F_c, CORONAL_TO_AXIAL)
    T_s = tc.permute_axes(F_s, SAGITTAL_TO_AXIAL)
    if not (F_a.shape == T_c.shape == T_s.shape):
        raise ShapeError(f"fusion shapes disagree after reorientation: axial {F_a.shape}, "
                         f"coronal {T_c.shape}, sagittal {T_s.shape}")
    return tc.add(tc.add(F_a, T_c), T_s)


def attention_apply(am: Tensor, F_v: Tensor) -> Tensor:
    """O = (1 + AM) o F_v."""
    return tc.mul(tc.shift(am, 1.0), F_v)


# ---------------------------------------------------------------------- loss

DICE_EPS = 1e-6


def dice_loss(pred: Tensor, truth, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss 1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)."""
    g = np.asarray(truth, dtype=np.float64)
    if pred.shape != g.shape:
        raise ShapeError(f"dice_loss: prediction shape {pred.shape} vs truth shape {g.shape}")
    gt = Tensor(g)
    num = tc.shift(tc.scale(tc.sum(tc.mul(pred, gt)), 2.0), eps)
    den = tc.shift(tc.sum(tc.mul(pred, pred)), float((g * g).sum()) + eps)
    return tc.shift(tc.scale(tc.div(num, den), -1.0), 1.0)


def hybrid_loss(m_l: Tensor, g_l, m_as: Tensor, g_as) -> Tensor:
    return tc.add(dice_loss(m_l, g_l), dice_loss(m_as, g_as))


# ----------------------------------------------------------------- inference

def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where prob >= threshold (ties go to foreground)."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def infer(volume: Volume | np.ndarray, model: MvttNet) -> SegmentationPair:
    """Single forward pass of both tasks. Puts the model in eval mode."""
    values = volume.values if isinstance(volume, Volume) else volume
    model.eval()
    m_l, m_as = model.forward(values)
    thr = model.config.threshold
    return SegmentationPair(m_l=m_l.data, m_as=m_as.data,
                            anatomy_mask=binarize(m_l.data, thr), scar_mask=binarize(m_as.data, thr))

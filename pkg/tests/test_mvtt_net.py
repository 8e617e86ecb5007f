import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvtt import tensor_core as tc
from mvtt.gradcheck import check
from mvtt.layers import Conv
from mvtt.mvtt_net import (MvttConfig, MvttNet, ResidualBlock, attention_apply, binarize, dice_loss, fuse,
                           hybrid_loss, infer)
from mvtt.recurrent import ConvLstmState, convlstm_step
from mvtt.tensor_core import ShapeError, Tensor


def small_model(shape=(8, 8), seed=0, C="1/8"):
    return MvttNet(MvttConfig(slice_shape=shape, width_multiplier=C, seed=seed))


# ------------------------------------------------------------------ config

def test_config_channels_and_validation():
    assert MvttConfig(slice_shape=(4, 4)).channels == 16
    assert MvttConfig(slice_shape=(4, 4), width_multiplier="1/4").channels == 4
    with pytest.raises(ValueError, match="common factor"):
        MvttConfig(slice_shape=(4, 4), hdc_rates=(2, 4, 6))
    with pytest.raises(ValueError):
        MvttConfig(slice_shape=(4, 4), width_multiplier="1/32")
    with pytest.raises(ValueError):
        MvttConfig(slice_shape=(4, 4), threshold=1.0)
    cfg = MvttConfig(slice_shape=(4, 5), width_multiplier="1/2")
    assert MvttConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------ axial branch

def test_axial_branch_zero_input_gives_zero():
    m = small_model()
    F_a = m.axial_branch(Tensor(np.zeros((3, 1, 8, 8))))
    np.testing.assert_array_equal(F_a.data, 0.0)


def test_axial_branch_single_slice_is_one_step():
    m = small_model()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8, 8)))
    F_a = m.axial_branch(x)
    f_a = m.theta_a.enc2(m.theta_a.enc1(x))
    ref = convlstm_step(f_a, ConvLstmState.zeros(2, (8, 8)), m.theta_a.lstm).h
    np.testing.assert_array_equal(F_a.data, ref.data)


def test_axial_branch_shape():
    m = small_model(C="1/4")
    out = m.axial_branch(Tensor(np.random.default_rng(1).normal(size=(4, 1, 8, 8))))
    assert out.shape == (4, 4, 8, 8)  # (Z, C, Y, X)


# ------------------------------------------------------------- view branch

def test_residual_block_zero_weights_is_identity_on_nonnegative():
    block = ResidualBlock(3, (1, 2, 5), 3, np.random.default_rng(0))
    for _, p in block.named_parameters():
        if p.ndim == 4:
            p.data = np.zeros(p.shape)
    x = np.abs(np.random.default_rng(1).normal(size=(2, 3, 8, 8)))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def footprint(rates, k=3):
    """Offsets reachable by stacking k x k convs at the given dilations."""
    reach = {(0, 0)}
    r = k // 2
    for d in rates:
        taps = [(a * d, b * d) for a in range(-r, r + 1) for b in range(-r, r + 1)]
        reach = {(y + ty, x + tx) for (y, x) in reach for (ty, tx) in taps}
    return reach


def test_hdc_rates_cover_without_gridding():
    reach = footprint([1, 2, 5])
    assert all((y, x) in reach for y in range(-5, 6) for x in range(-5, 6))
    assert all((y, x) in reach for y in range(-8, 9) for x in range(-8, 9))
    gridded = footprint([2, 2, 2])
    assert (1, 0) not in gridded


def test_view_branch_preserves_resolution():
    m = small_model()
    out = m.view_branch(Tensor(np.random.default_rng(2).normal(size=(5, 1, 8, 8))), "s")
    assert out.shape == (5, 2, 8, 8)


# ------------------------------------------------------------------- fusion

def explicit_fuse(F_a, F_s, F_c):
    """Voxelwise reslice-and-sum in axial coordinates."""
    Z, C, Y, X = F_a.shape
    out = np.empty_like(F_a)
    for z, c, y, x in itertools.product(range(Z), range(C), range(Y), range(X)):
        out[z, c, y, x] = F_a[z, c, y, x] + F_c[y, c, x, z] + F_s[x, c, y, z]
    return out


def _views(rng, Z=3, C=2, Y=4, X=5):
    return (rng.normal(size=(Z, C, Y, X)), rng.normal(size=(X, C, Y, Z)), rng.normal(size=(Y, C, X, Z)))


def test_fuse_zero_branches_is_identity():
    F_a, F_s, F_c = _views(np.random.default_rng(3))
    out = fuse(Tensor(F_a), Tensor(np.zeros_like(F_s)), Tensor(np.zeros_like(F_c)))
    np.testing.assert_array_equal(out.data, F_a)


def test_fuse_additive():
    rng = np.random.default_rng(4)
    F_a, F_s, F_c = _views(rng)
    delta = rng.normal(size=F_a.shape)
    lhs = fuse(Tensor(F_a + delta), Tensor(F_s), Tensor(F_c)).data
    rhs = fuse(Tensor(F_a), Tensor(F_s), Tensor(F_c)).data + delta
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-14)


def test_fuse_matches_explicit_oracle():
    F_a, F_s, F_c = _views(np.random.default_rng(5))
    np.testing.assert_array_equal(fuse(Tensor(F_a), Tensor(F_s), Tensor(F_c)).data, explicit_fuse(F_a, F_s, F_c))


def test_fuse_rejects_mismatch():
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeError):
        fuse(Tensor(rng.normal(size=(3, 2, 4, 5))), Tensor(rng.normal(size=(5, 2, 4, 3))),
             Tensor(rng.normal(size=(4, 2, 5, 2))))


# ---------------------------------------------------------------- attention

def test_attention_saturated_off_is_skip():
    m = small_model()
    m.theta_am.proj.bias.data[:] = -1e4
    img = Tensor(np.random.default_rng(7).normal(size=(3, 1, 8, 8)))
    am = m.attention_mask(img)
    # the mask stays strictly positive but is far below float64 resolution next to 1
    assert np.all((am.data > 0) & (1.0 + am.data == 1.0))
    F_v = Tensor(np.random.default_rng(8).normal(size=am.shape))
    np.testing.assert_array_equal(attention_apply(am, F_v).data, F_v.data)


def test_attention_full_on_doubles():
    out = attention_apply(Tensor(np.ones((2, 2, 3, 3))), Tensor(np.full((2, 2, 3, 3), 2.0)))
    np.testing.assert_array_equal(out.data, 4.0)


def test_attention_oracle_and_bounds():
    rng = np.random.default_rng(9)
    am, F_v = rng.uniform(size=(2, 3, 4, 4)), np.abs(rng.normal(size=(2, 3, 4, 4)))
    out = attention_apply(Tensor(am), Tensor(F_v)).data
    np.testing.assert_array_equal(out, (1 + am) * F_v)
    assert np.all(F_v <= out) and np.all(out <= 2 * F_v)


def test_attention_mask_range():
    m = small_model()
    am = m.attention_mask(Tensor(np.random.default_rng(10).normal(size=(3, 1, 8, 8)))).data
    assert am.shape == (3, 2, 8, 8)
    assert np.all((am > 0) & (am < 1))


# -------------------------------------------------------------------- heads

@pytest.mark.parametrize("head", ["theta_l", "theta_as"])
def test_head_zero_final_layer(head):
    m = small_model()
    h = getattr(m, head)
    h.final.weight.data[:] = 0
    h.final.bias.data[:] = 0
    out = h(Tensor(np.random.default_rng(11).normal(size=(3, 2, 8, 8))))
    assert out.shape == (3, 1, 8, 8)
    np.testing.assert_array_equal(out.data, 0.5)


@pytest.mark.parametrize("head,k", [("theta_l", 3), ("theta_as", 1)])
def test_head_range_and_kernel(head, k):
    m = small_model()
    h = getattr(m, head)
    assert h.final.weight.shape == (1, 4, k, k)
    out = h(Tensor(np.random.default_rng(12).normal(size=(3, 2, 8, 8)))).data
    assert np.all((out > 0) & (out < 1))


# --------------------------------------------------------------------- loss

def test_dice_perfect_overlap():
    g = (np.random.default_rng(13).uniform(size=(10, 10, 10)) < 0.3).astype(float)
    assert dice_loss(Tensor(g), g).item() < 1e-6


def test_dice_disjoint():
    p = np.zeros(20)
    g = np.zeros(20)
    p[:5], g[10:13] = 1, 1
    val = dice_loss(Tensor(p), g).item()
    assert val == pytest.approx(1 - 1e-6 / (5 + 3 + 1e-6), abs=1e-15)


def test_dice_small_example():
    val = dice_loss(Tensor([1.0, 1.0, 0.0, 0.0]), [1, 0, 0, 0], eps=0.0).item()
    assert val == pytest.approx(1 / 3, abs=1e-15)


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros(4)), np.zeros(5))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_monotone_in_truth_region(seed):
    rng = np.random.default_rng(seed)
    g = (rng.uniform(size=30) < 0.4).astype(float)
    p = rng.uniform(size=30)
    bump = np.where(g == 1, rng.uniform(size=30) * (1 - p), 0.0)
    before = dice_loss(Tensor(p), g).item()
    after = dice_loss(Tensor(p + bump), g).item()
    assert 0 <= after <= before + 1e-15 and before <= 1


def test_hybrid_loss_cases():
    rng = np.random.default_rng(14)
    g_l = (rng.uniform(size=(4, 8, 8)) < 0.5).astype(float)
    g_as = np.zeros((4, 8, 8))
    g_as[0, :2, :2] = 1
    assert hybrid_loss(Tensor(g_l), g_l, Tensor(g_as), g_as).item() < 1e-5
    wrong = np.zeros_like(g_as)
    wrong[3, 5:, 5:] = 1
    assert abs(hybrid_loss(Tensor(g_l), g_l, Tensor(wrong), g_as).item() - 1) < 1e-5


def test_hybrid_loss_joint_gradcheck_subset():
    rng = np.random.default_rng(15)
    m = MvttNet(MvttConfig(slice_shape=(5, 5), width_multiplier="1/8", seed=1))
    vol = rng.normal(size=(3, 5, 5))
    g_l = (rng.uniform(size=vol.shape) < 0.5).astype(float)
    g_as = (rng.uniform(size=vol.shape) < 0.2).astype(float)
    named = dict(m.named_parameters())
    subset = [(n, named[n]) for n in ("theta_l.final.weight", "theta_as.final.weight", "theta_as.final.bias",
                                      "theta_am.proj.bias", "theta_s.stem.bn.gamma", "theta_c.stem.bn.beta",
                                      "theta_a.lstm.b_o", "theta_a.enc1.bn.gamma")]

    def loss():
        m_l, m_as = m.forward(vol)
        return hybrid_loss(m_l, g_l, m_as, g_as)

    assert check("hybrid", loss, subset).max_rel_error < 1e-4


@pytest.mark.parametrize("task", ["anatomy", "scar"])
def test_each_head_reaches_shared_parameters(task):
    rng = np.random.default_rng(16)
    m = small_model()
    vol = rng.normal(size=(3, 8, 8))
    g = (rng.uniform(size=vol.shape) < 0.3).astype(float)
    m_l, m_as = m.forward(vol)
    loss = dice_loss(m_l, g) if task == "anatomy" else dice_loss(m_as, g)
    loss.backward()
    for group in ("theta_a", "theta_s", "theta_c"):
        norm = sum(float(np.sum(p.grad ** 2)) for p in getattr(m, group).parameters())
        assert norm > 0, group
    am_norm = sum(float(np.sum(p.grad ** 2)) for p in m.theta_am.parameters())
    assert (am_norm > 0) == (task == "scar")


# ---------------------------------------------------------------- inference

def test_infer_tie_goes_to_foreground():
    m = small_model()
    for head in (m.theta_l, m.theta_as):
        head.final.weight.data[:] = 0
        head.final.bias.data[:] = 0
    pair = infer(np.random.default_rng(17).normal(size=(3, 8, 8)), m)
    np.testing.assert_array_equal(pair.m_l, 0.5)
    np.testing.assert_array_equal(pair.anatomy_mask, 1)
    np.testing.assert_array_equal(pair.scar_mask, 1)


def test_infer_shapes_and_determinism():
    vol = np.random.default_rng(18).normal(size=(4, 8, 8))
    a = infer(vol, small_model(seed=3))
    b = infer(vol, small_model(seed=3))
    for f in ("m_l", "m_as", "anatomy_mask", "scar_mask"):
        assert getattr(a, f).shape == vol.shape
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert set(np.unique(a.scar_mask)) <= {0, 1}
    assert np.all((a.m_l >= 0) & (a.m_l <= 1))


def test_infer_rejects_bad_volumes():
    m = small_model()
    with pytest.raises(ShapeError):
        infer(np.zeros((3, 8, 7)), m)
    with pytest.raises(ShapeError):
        infer(np.zeros((0, 8, 8)), m)


def test_binarize():
    np.testing.assert_array_equal(binarize(np.array([0.2, 0.5, 0.7])), [0, 1, 1])


def test_parameter_names_are_stable_and_grouped():
    names = [n for n, _ in small_model().named_parameters()]
    assert len(names) == len(set(names))
    assert {n.split(".")[0] for n in names} == {"theta_a", "theta_s", "theta_c", "theta_am", "theta_l", "theta_as"}
    assert "theta_s.blocks.block0.conv1.conv.weight" in names
    assert "theta_a.lstm.W_co" in names


def test_init_values_on_float32_grid():
    for _, p in small_model().named_parameters():
        np.testing.assert_array_equal(p.data, p.data.astype(np.float32))


def test_conv_init_ranges():
    rng = np.random.default_rng(0)
    he = Conv(4, 8, 3, rng=rng, init="he")
    assert np.abs(he.weight.data).max() <= np.sqrt(6 / 36)
    xa = Conv(4, 8, 3, rng=rng, init="xavier")
    assert np.abs(xa.weight.data).max() <= np.sqrt(6 / (36 + 72))
    np.testing.assert_array_equal(xa.bias.data, 0)

import numpy as np
import pytest

from cfmnet.autodiff import Tensor, high_precision, ops
from cfmnet.cfm import (
    RSCFM,
    ModulationKind,
    ResidualBlock,
    RSCFMConfig,
    first_shift_map,
    interior_spatial_std,
    rs_cfm_forward,
    shifting_map_is_spatially_variant,
)
from cfmnet.errors import ConfigError, ShapeError


def _block(c=4, ops_=2, kind="shift", residual=True, image=True, seed=0):
    return RSCFM(RSCFMConfig(c, ops_, kind, residual, image), np.random.default_rng(seed))


def _zero_convs(block):
    for name, p in block.named_parameters():
        if "conv." in name or name.endswith(("conv.weight", "conv.bias")):
            p.data[:] = 0.0


@pytest.mark.parametrize("training", [True, False])
def test_zero_weights_give_identity(rng, training):
    block = _block()
    _zero_convs(block)
    block.train(training)
    f = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    g = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    fo, go = rs_cfm_forward(f, g, block)
    np.testing.assert_array_equal(fo.data, f.data)
    np.testing.assert_array_equal(go.data, g.data)


def _unit(u, x):
    x = ops.conv2d(x, u.conv.weight, u.conv.bias)
    x = ops.batch_norm(x, u.bn.gamma, u.bn.beta, u.bn.running_mean, u.bn.running_var, training=False)
    return ops.relu(x)


def test_single_op_matches_hand_composition(rng):
    with high_precision():
        block = _block(c=3, ops_=1).astype(np.float64)
        block.eval()
        f = Tensor(rng.standard_normal((1, 3, 6, 6)))
        g = Tensor(rng.standard_normal((1, 3, 6, 6)))
        op = block.ops[0]
        t = ops.concat_channels(f, g)
        for u in op.fuse:
            t = _unit(u, t)
        s = ops.conv2d(t, op.map_conv.weight, op.map_conv.bias)
        ft = _unit(op.image[1], _unit(op.image[0], f))
        f_ref = f.data + (ft.data + s.data)
        g_ref = g.data + t.data
        fo, go = block(f, g)
    np.testing.assert_allclose(fo.data, f_ref, atol=1e-12)
    np.testing.assert_allclose(go.data, g_ref, atol=1e-12)


def test_affine_with_unit_gamma_zero_shift_equals_shift_with_zero_map(rng):
    shift = _block(kind="shift", seed=3)
    affine = _block(kind="affine", seed=3)
    # same image path and fusion weights; maps forced to s = 0 and gamma = 1
    for op_s, op_a in zip(shift.ops, affine.ops):
        for us, ua in zip(op_s.fuse + op_s.image, op_a.fuse + op_a.image):
            ua.load_state_dict(us.state_dict())
        op_s.map_conv.weight.data[:] = 0
        op_s.map_conv.bias.data[:] = 0
        op_a.map_conv.weight.data[:] = 0
        op_a.map_conv.bias.data[:4] = 1
        op_a.map_conv.bias.data[4:] = 0
    shift.eval(), affine.eval()
    f = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    g = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    fs, gs = shift(f, g)
    fa, ga = affine(f, g)
    np.testing.assert_array_equal(fs.data, fa.data)
    np.testing.assert_array_equal(gs.data, ga.data)


def test_gamma_initialised_to_one(rng):
    block = _block(kind="scale")
    op = block.ops[0]
    assert not op.map_conv.weight.data.any()
    np.testing.assert_array_equal(op.map_conv.bias.data, np.ones(4))
    block.eval()
    f = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    m = first_shift_map(block, f, Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32)))
    np.testing.assert_array_equal(m, np.ones_like(m))


def test_affine_map_has_doubled_channels():
    block = _block(kind="affine")
    assert block.ops[0].map_conv.weight.shape[0] == 8


def test_no_residual_returns_updates(rng):
    block = _block(residual=False, ops_=1)
    block.eval()
    f = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    g = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    fo, go = block(f, g)
    res = _block(residual=True, ops_=1)
    res.eval()
    fr, gr = res(f, g)
    np.testing.assert_allclose(fr.data - f.data, fo.data, atol=1e-5)
    np.testing.assert_allclose(gr.data - g.data, go.data, atol=1e-5)


def test_first_op_input_width():
    assert _block(image=True).ops[0].fuse[0].conv.weight.shape[1] == 8
    assert _block(image=False).ops[0].fuse[0].conv.weight.shape[1] == 4
    later = _block(ops_=3).ops[1]
    assert len(later.fuse) == 2 and later.fuse[0].conv.weight.shape[1] == 4


def test_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        _block()(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 4, 4, 4))))


@pytest.mark.parametrize("n", [0, 5])
def test_op_count_range(n):
    with pytest.raises(ConfigError):
        RSCFMConfig(4, n)


def test_constant_inputs_give_constant_interior_map():
    block = _block()
    block.eval()
    f = Tensor(np.full((1, 4, 16, 16), 0.3, dtype=np.float32))
    g = Tensor(np.full((1, 4, 16, 16), 0.7, dtype=np.float32))
    s = first_shift_map(block, f, g)
    assert interior_spatial_std(s, 4) < 1e-6
    assert not shifting_map_is_spatially_variant(f, g, block, threshold=1e-6)


def test_textured_image_makes_map_spatially_variant(rng):
    block = _block()
    block.eval()
    f = Tensor(rng.random((1, 4, 16, 16)).astype(np.float32))
    g = Tensor(np.full((1, 4, 16, 16), 0.2, dtype=np.float32))
    assert shifting_map_is_spatially_variant(f, g, block)


def test_without_image_features_map_ignores_f(rng):
    block = _block(image=False)
    block.eval()
    f = Tensor(rng.random((1, 4, 16, 16)).astype(np.float32))
    g = Tensor(np.full((1, 4, 16, 16), 0.2, dtype=np.float32))
    s = first_shift_map(block, f, g)
    assert interior_spatial_std(s, 4) < 1e-6


def test_residual_block_zero_is_identity(rng):
    block = ResidualBlock(4, 2, np.random.default_rng(0))
    for name, p in block.named_parameters():
        if "conv" in name:
            p.data[:] = 0
    f = Tensor(rng.standard_normal((1, 4, 6, 6)).astype(np.float32))
    np.testing.assert_array_equal(block(f).data, f.data)
    assert len(block.units) == 4

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradsuite import TOL, block_cases
from helpers import randn
from segmate.errors import RangeError, ShapeError
from segmate.nn import ASPP, CBAM, FiLM, SEGate, SliceFusion
from segmate.tensor import Tensor, check_gradients, ops


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0


def randomise(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape).astype(np.float32) * scale


# -- SliceFusion -------------------------------------------------------------


def test_slice_fusion_zero_params(rng):
    sf = SliceFusion()
    zero_params(sf)
    sf.bn1.weight.data[...] = 1
    sf.eval()
    out = sf(randn(rng, 2, 3, 8, 8))
    assert not out.data.any()


def test_slice_fusion_shape():
    sf = SliceFusion()
    assert sf(np.zeros((2, 3, 64, 64), np.float32)).shape == (2, 1, 64, 64)
    assert sf.conv1.weight.shape == (16, 3, 3, 3)
    assert sf.conv2.weight.shape == (1, 16, 1, 1)


def test_slice_fusion_rejects_wrong_channels(rng):
    with pytest.raises(ShapeError):
        SliceFusion()(randn(rng, 1, 2, 8, 8))


def test_slice_fusion_composition_oracle(rng):
    sf = SliceFusion()
    randomise(sf, rng)
    sf.eval()
    x = Tensor(randn(rng, 2, 3, 6, 6))
    h = ops.conv2d(x, sf.conv1.weight, sf.conv1.bias, padding=1)
    h = ops.batch_norm(h, sf.bn1.weight, sf.bn1.bias, sf.bn1.running_mean, sf.bn1.running_var, False)
    h = ops.conv2d(ops.silu(h), sf.conv2.weight, sf.conv2.bias)
    np.testing.assert_array_equal(sf(x).data, h.data)


# -- SE ----------------------------------------------------------------------


def test_se_zero_weights_halve_input(rng):
    se = SEGate(8)
    zero_params(se)
    x = randn(rng, 2, 8, 4, 4)
    np.testing.assert_array_equal(se(x).data, 0.5 * x)


def test_se_zero_input(rng):
    se = SEGate(8)
    randomise(se, rng)
    assert not se(np.zeros((1, 8, 3, 3), np.float32)).data.any()


def test_se_hidden_width_floor():
    assert SEGate(8, 16).reduce.weight.shape == (1, 8)
    assert SEGate(64, 16).reduce.weight.shape == (4, 64)


@given(seed=st.integers(0, 2**31))
def test_se_ratio_constant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    se = SEGate(6, 2)
    randomise(se, rng, 1.0)
    x = randn(rng, 2, 6, 4, 4) + 3.0  # keep away from zero for the ratio
    out = se(x).data
    ratio = out / x
    assert np.allclose(ratio, ratio[:, :, :1, :1], rtol=1e-5)
    assert np.all(np.abs(out) <= np.abs(x))


def test_se_force_identity_is_bit_exact(rng):
    se = SEGate(8)
    randomise(se, rng)
    se.force_identity()
    x = randn(rng, 2, 8, 5, 5)
    np.testing.assert_array_equal(se(x).data, x)


# -- CBAM --------------------------------------------------------------------


def test_cbam_zero_params_quarter(rng):
    cb = CBAM(8)
    zero_params(cb)
    x = randn(rng, 2, 8, 8, 8)
    np.testing.assert_array_equal(cb(x).data, 0.25 * x)


def test_cbam_zero_input(rng):
    cb = CBAM(8)
    randomise(cb, rng)
    assert not cb(np.zeros((1, 8, 8, 8), np.float32)).data.any()


def test_cbam_spatial_kernel_is_7x7():
    assert CBAM(16).spatial.weight.shape == (1, 2, 7, 7)


def test_cbam_composition_oracle(rng):
    cb = CBAM(8, 4)
    randomise(cb, rng)
    xd = randn(rng, 2, 8, 8, 8)

    def mlp(v):
        h = np.maximum(v @ cb.fc1.weight.data.T + cb.fc1.bias.data, 0)
        return h @ cb.fc2.weight.data.T + cb.fc2.bias.data

    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    mc = sig(mlp(xd.mean(axis=(2, 3))) + mlp(xd.max(axis=(2, 3))))
    x1 = xd * mc[:, :, None, None]
    pooled = np.concatenate([x1.mean(axis=1, keepdims=True), x1.max(axis=1, keepdims=True)], axis=1)
    ms = sig(ops.conv2d(Tensor(pooled), cb.spatial.weight, cb.spatial.bias, padding=3).data)
    np.testing.assert_allclose(cb(xd).data, x1 * ms, rtol=1e-5, atol=1e-6)


@given(seed=st.integers(0, 2**31))
def test_cbam_output_bounded_by_input(seed):
    rng = np.random.default_rng(seed)
    cb = CBAM(4, 2)
    randomise(cb, rng, 1.0)
    x = randn(rng, 1, 4, 7, 7, scale=3.0)
    assert np.all(np.abs(cb(x).data) <= np.abs(x))


def test_cbam_force_identity_is_bit_exact(rng):
    cb = CBAM(8)
    randomise(cb, rng)
    cb.force_identity()
    x = randn(rng, 2, 8, 6, 6)
    np.testing.assert_array_equal(cb(x).data, x)


# -- FiLM --------------------------------------------------------------------


def test_film_identity_when_forced(rng):
    f = FiLM(8, 16)
    randomise(f, rng)
    f.force_identity()
    x = randn(rng, 3, 8, 4, 4)
    np.testing.assert_array_equal(f(x, np.array([0.0, 0.5, 1.0], np.float32)).data, x)


def test_film_fresh_block_is_identity(rng):
    f = FiLM(8, 16)
    f.init_parameters(0)
    x = randn(rng, 2, 8, 4, 4)
    np.testing.assert_array_equal(f(x, np.array([0.1, 0.7], np.float32)).data, x)


def test_film_zero_gamma_gives_beta(rng):
    f = FiLM(4, 8)
    randomise(f, rng)
    # gamma = 1 + raw; drive raw to -1 through the output bias
    f.gamma_mlp.fc3.weight.data[...] = 0
    f.gamma_mlp.fc3.bias.data[...] = -1
    z = np.array([0.3], np.float32)
    a = f(randn(rng, 1, 4, 3, 3), z).data
    b = f(randn(rng, 1, 4, 3, 3), z).data
    np.testing.assert_array_equal(a, b)
    _, beta = f.coefficients(z)
    np.testing.assert_array_equal(a, np.broadcast_to(beta.data[:, :, None, None], a.shape))


def test_film_is_sensitive_to_position(rng):
    f = FiLM(4, 8)
    randomise(f, rng)
    x = randn(rng, 1, 4, 3, 3)
    assert not np.array_equal(f(x, np.array([0.25], np.float32)).data, f(x, np.array([0.75], np.float32)).data)


@pytest.mark.parametrize("z", [-0.01, 1.01, float("nan")])
def test_film_range_error(z):
    with pytest.raises(RangeError):
        FiLM(4, 8)(np.zeros((1, 4, 2, 2), np.float32), np.array([z], np.float32))


def test_film_commutes_with_spatial_permutation(rng):
    f = FiLM(3, 8)
    randomise(f, rng)
    x = randn(rng, 1, 3, 4, 4)
    perm = rng.permutation(16)
    z = np.array([0.4], np.float32)
    xp = x.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
    lhs = f(xp, z).data
    rhs = f(x, z).data.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
    np.testing.assert_array_equal(lhs, rhs)


# -- ASPP --------------------------------------------------------------------


def test_aspp_shape():
    a = ASPP(32, 64, (1, 2, 4))
    a.init_parameters(0)
    assert a(np.zeros((1, 32, 8, 8), np.float32)).shape == (1, 64, 8, 8)


def test_aspp_single_branch_is_plain_conv_path(rng):
    a = ASPP(3, 4, (1,), pointwise=False, pooling=False)
    randomise(a, rng)
    a.eval()
    x = Tensor(randn(rng, 1, 3, 6, 6))
    br = a.atrous1
    h = ops.silu(ops.batch_norm(ops.conv2d(x, br.conv.weight, None, padding=1), br.bn.weight, br.bn.bias,
                                br.bn.running_mean, br.bn.running_var, False))
    f = a.fuse
    h = ops.silu(ops.batch_norm(ops.conv2d(h, f.conv.weight, None), f.bn.weight, f.bn.bias,
                                f.bn.running_mean, f.bn.running_var, False))
    np.testing.assert_array_equal(a(x).data, h.data)


def test_aspp_image_pool_branch_on_constant_input(rng):
    a = ASPP(3, 4, (1, 2))
    randomise(a, rng)
    x = np.full((1, 3, 5, 5), 2.5, np.float32)
    out = a.pool_branch(Tensor(x)).data
    expected = a.image_pool.weight.data @ np.full(3, 2.5, np.float32) + a.image_pool.bias.data
    np.testing.assert_allclose(out, np.broadcast_to(expected[None, :, None, None], out.shape), rtol=1e-6)


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(block_cases()))
def test_block_gradients(name):
    fn, tensors = block_cases()[name]()
    errs = check_gradients(fn, tensors)
    assert max(errs) < TOL, errs

import math

import numpy as np
import pytest

from scalevec import ops
from scalevec.autograd import Tensor
from scalevec.errors import ConfigError
from scalevec.layers import (ScaleSpec, VectorField, VectorFilterBank, angle_of_index, build_pyramid, encode, scale_pool,
                             global_magnitude_pool, pyramid_sizes, round_half_away, se_conv_magnitude,
                             se_conv_scalar, se_conv_vector, vec_conv, vec_maxpool2x2)
from scalevec.verify import grad_check, per_scale_oracle

SPEC = ScaleSpec()


def field(rng, shape):
    return VectorField(Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape)))


def bank(rng, o, c, k):
    return VectorFilterBank(Tensor(rng.standard_normal((o, c, k, k)) * 0.3),
                            Tensor(rng.standard_normal((o, c, k, k)) * 0.3), Tensor(rng.standard_normal(o) * 0.1))


@pytest.mark.parametrize("kwargs", [
    dict(angle_range=181), dict(angle_range=0), dict(factor=1.0), dict(n_scales=7),
    dict(n_scales=1, n_up=0, n_down=0),
])
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        ScaleSpec(**kwargs)


def test_spec_from_scales():
    assert ScaleSpec.from_scales(8) == SPEC
    s = ScaleSpec.from_scales(5, 1.5, 90)
    assert (s.n_down, s.n_up) == (2, 2)


def test_angle_codec():
    assert angle_of_index(0, SPEC) == 0.0
    assert angle_of_index(7, SPEC) == pytest.approx(120.0, abs=1e-12)
    assert angle_of_index(3, SPEC) == pytest.approx(3 * 120 / 7, abs=1e-12)
    diffs = np.diff(SPEC.angles())
    np.testing.assert_allclose(diffs, diffs[0], rtol=0, atol=1e-12)
    with pytest.raises(ConfigError):
        angle_of_index(8, SPEC)


def test_codec_endpoints_dot_product():
    a0, a7 = np.radians(angle_of_index(0, SPEC)), np.radians(angle_of_index(7, SPEC))
    assert math.cos(a0) * math.cos(a7) + math.sin(a0) * math.sin(a7) == pytest.approx(-0.5, abs=1e-12)


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, 2.49)] == [1, 2, 3, -1, 2]


def test_pyramid_sizes_default():
    assert [h for h, _ in pyramid_sizes(28, 28, SPEC)] == [11, 14, 18, 22, 28, 35, 44, 55]
    expected = [round_half_away(28 * 1.25 ** k) for k in range(-4, 4)]
    assert [h for h, _ in pyramid_sizes(28, 28, SPEC)] == expected
    assert min(min(s) for s in pyramid_sizes(1, 2, SPEC)) >= 1


def test_pyramid_identity_and_constant(rng):
    x = rng.standard_normal((1, 28, 28))
    pyr = build_pyramid(x, SPEC)
    np.testing.assert_array_equal(pyr[SPEC.n_down].data, x)
    for level in build_pyramid(np.full((1, 10, 10), 0.25), SPEC):
        np.testing.assert_allclose(level.data, 0.25, rtol=0, atol=1e-15)


def test_se_conv_scalar_zero_input():
    y = se_conv_scalar(np.zeros((1, 12, 12)), np.ones((2, 1, 3, 3)), np.zeros(2), SPEC)
    np.testing.assert_array_equal(y.rho, 0)
    np.testing.assert_array_equal(y.index, 0)
    np.testing.assert_array_equal(y.u.data, 0)
    np.testing.assert_array_equal(y.v.data, 0)


def test_se_conv_scalar_matches_per_scale_oracle_exactly(rng):
    x = Tensor(rng.random((2, 16, 16)))
    w = rng.standard_normal((3, 2, 5, 5))
    b = rng.standard_normal(3) * 0.1
    y = se_conv_scalar(x, w, b, SPEC)
    rho, arg = per_scale_oracle(lambda k, xs: ops.conv2d(xs, w, b, 2), x, SPEC)
    np.testing.assert_array_equal(y.index, arg)
    np.testing.assert_array_equal(np.hypot(y.u.data, y.v.data), np.hypot(rho * np.cos(np.radians(SPEC.angles()))[arg],
                                                                         rho * np.sin(np.radians(SPEC.angles()))[arg]))
    mags, _ = se_conv_magnitude(x, w, b, SPEC)
    np.testing.assert_array_equal(mags.data, rho)
    np.testing.assert_allclose(y.theta, SPEC.angles()[arg], atol=1e-9)


def test_unique_positive_branch_sets_angle():
    # a negative filter on a non-negative image: no branch is positive anywhere
    x = np.zeros((1, 9, 9))
    x[0, 4, 4] = 1.0
    y = se_conv_scalar(x, -np.ones((1, 1, 1, 1)), np.zeros(1), SPEC)
    assert y.rho.max() == 0
    # exactly one positive branch at a pixel fixes its angle
    for winner in range(SPEC.n_scales):
        branches = [Tensor(np.full((1, 2, 2), -1.0)) for _ in range(SPEC.n_scales)]
        branches[winner] = Tensor(np.full((1, 2, 2), 0.5))
        rho, index = scale_pool([ops.relu(b) for b in branches])
        y = encode(rho, index, SPEC)
        assert y.theta[0, 1, 1] == pytest.approx(angle_of_index(winner, SPEC), abs=1e-9)
        assert y.rho[0, 1, 1] == pytest.approx(0.5)


def _rotate(planes, deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    half = planes.shape[-3] // 2
    u, v = planes.data[..., :half, :, :], planes.data[..., half:, :, :]
    return np.concatenate([c * u - s * v, s * u + c * v], axis=-3)


@pytest.mark.parametrize("shift", [True, False])
def test_se_conv_vector_matches_per_scale_oracle(rng, shift):
    y = field(rng, (3, 14, 14))
    bk = bank(rng, 2, 3, 3)
    out = se_conv_vector(y, bk, SPEC, shift_angles=shift)
    wcat = np.concatenate([bk.wu.data, bk.wv.data], axis=1)

    def branch(k, planes):
        # rotate the input vectors instead of the filters
        rotated = _rotate(planes, -k * SPEC.step) if shift else planes.data
        return ops.conv2d(rotated, wcat, bk.bias, 1)

    rho, arg = per_scale_oracle(branch, y.stacked(), SPEC)
    np.testing.assert_allclose(out.rho, rho, rtol=1e-12, atol=1e-12)
    assert np.mean(out.index == arg) > 0.999


def test_se_conv_vector_reduces_to_scalar(rng):
    y = field(rng, (2, 12, 12))
    wu = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3) * 0.1
    bk = VectorFilterBank(Tensor(wu), Tensor(np.zeros_like(wu)), Tensor(b))
    vec = se_conv_vector(y, bk, SPEC, shift_angles=False)
    ref = se_conv_scalar(y.u, wu, b, SPEC)
    np.testing.assert_allclose(vec.rho, ref.rho, rtol=1e-12, atol=1e-13)
    np.testing.assert_array_equal(vec.index, ref.index)


def test_se_conv_vector_zero_field():
    z = VectorField(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((2, 8, 8))))
    bk = VectorFilterBank(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 2, 3, 3))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(se_conv_vector(z, bk, SPEC).rho, 0)


def test_vec_conv_component_projector(rng):
    y = field(rng, (2, 6, 6))
    delta = np.zeros((2, 2, 3, 3))
    delta[0, 0, 1, 1] = delta[1, 1, 1, 1] = 1.0
    bk = VectorFilterBank(Tensor(delta), Tensor(np.zeros_like(delta)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(vec_conv(y, bk).data, y.u.data)


def test_vec_conv_dot_product_identity():
    for ia, ib in [(0, 7), (2, 5), (3, 3)]:
        ta, tb = np.radians(angle_of_index(ia, SPEC)), np.radians(angle_of_index(ib, SPEC))
        y = VectorField(Tensor(np.full((1, 1, 1), math.cos(ta))), Tensor(np.full((1, 1, 1), math.sin(ta))))
        bk = VectorFilterBank(Tensor(np.full((1, 1, 1, 1), math.cos(tb))),
                              Tensor(np.full((1, 1, 1, 1), math.sin(tb))), Tensor(np.zeros(1)))
        assert vec_conv(y, bk).data.item() == pytest.approx(math.cos(ta - tb), abs=1e-12)
    # the extreme scales interact negatively
    assert math.cos(math.radians(120)) == pytest.approx(-0.5, abs=1e-12)


def test_vec_conv_bilinearity(rng):
    y1, y2 = field(rng, (2, 7, 7)), field(rng, (2, 7, 7))
    bk = bank(rng, 3, 2, 3)
    a, b = 0.7, -1.3
    mix = VectorField(Tensor(a * y1.u.data + b * y2.u.data), Tensor(a * y1.v.data + b * y2.v.data))
    lhs = vec_conv(mix, bk).data
    rhs = a * vec_conv(y1, bk).data + b * vec_conv(y2, bk).data - (a + b - 1) * bk.bias.data[:, None, None]
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_vec_maxpool(rng):
    u = np.zeros((1, 2, 2))
    v = np.zeros((1, 2, 2))
    u[0, 1, 0], v[0, 1, 0] = 0.3, -0.4
    out = vec_maxpool2x2(VectorField(Tensor(u), Tensor(v)))
    assert (out.u.data.item(), out.v.data.item()) == (0.3, -0.4)
    # equal magnitudes: first in window wins
    u = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    v = np.array([[[0.0, 1.0], [0.0, 0.0]]])
    out = vec_maxpool2x2(VectorField(Tensor(u), Tensor(v)))
    assert out.u.data.item() == 1.0
    # random field against an exhaustive scan of rho
    y = field(rng, (3, 6, 5))
    out = vec_maxpool2x2(y)
    rho = y.rho
    for c in range(3):
        for oy in range(3):
            for ox in range(3):
                win = rho[c, 2 * oy:2 * oy + 2, 2 * ox:2 * ox + 2]
                assert np.hypot(out.u.data[c, oy, ox], out.v.data[c, oy, ox]) == win.max()


def test_global_magnitude_pool(rng):
    u = np.zeros((2, 3, 3))
    v = np.zeros((2, 3, 3))
    u[0, 2, 1], v[0, 2, 1] = 0.0, 2.0
    u[1, 0, 0] = -1.0
    mags, ang = global_magnitude_pool(VectorField(Tensor(u), Tensor(v)))
    np.testing.assert_allclose(mags.data, [2.0, 1.0])
    np.testing.assert_allclose(ang.data, [90.0, 180.0])
    # constant field: first location
    c = np.ones((1, 2, 2))
    mags, ang = global_magnitude_pool(VectorField(Tensor(c), Tensor(c)))
    assert ang.data[0] == pytest.approx(45.0)
    # random batched field: matches exhaustive scan
    y = field(rng, (2, 4, 5, 5))
    mags, _ = global_magnitude_pool(y)
    np.testing.assert_allclose(mags.data, y.rho.reshape(2, 4, -1).max(axis=2), rtol=1e-15)


def test_layer_gradients(rng):
    x = Tensor(rng.random((1, 1, 12, 12)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
    bk = VectorFilterBank(Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True),
                          Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True),
                          Tensor(rng.standard_normal(3) * 0.1, requires_grad=True))

    def loss():
        y = se_conv_scalar(x, w, b, SPEC)
        y = se_conv_vector(vec_maxpool2x2(y), bk, SPEC)
        mags, _ = global_magnitude_pool(y, SPEC)
        return ops.sum(ops.mul(mags, mags))

    res = grad_check(loss, [x, w, b, bk.wu, bk.wv, bk.bias], n_coords=80, seed=1)
    assert res.n_checked == 80
    assert res.max_rel_err < 1e-6

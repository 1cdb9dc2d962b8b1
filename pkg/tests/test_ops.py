import numpy as np
import pytest

from scalevec import ops
from scalevec.autograd import Tape, Tensor, backward
from scalevec.errors import ConfigError, InputError, NumericError, UsageError
from scalevec.verify import brute_conv_oracle, grad_check


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_backward_needs_scalar():
    a = param([1.0, 2.0])
    with Tape() as tape:
        b = ops.scale(a, 2.0)
    with pytest.raises(UsageError):
        tape.backward(b)


def test_backward_without_tape():
    with pytest.raises(UsageError):
        backward(Tensor(1.0))


def test_unused_param_gets_zero_grad():
    a, b = param([1.0, 2.0]), param([3.0])
    with Tape() as tape:
        loss = ops.sum(ops.mul(a, a))
    g = tape.backward(loss, [a, b])
    np.testing.assert_array_equal(g[a], [2.0, 4.0])
    np.testing.assert_array_equal(g[b], [0.0])


def test_shared_input_accumulates():
    a = param([3.0])
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(a, a), a))
    assert tape.backward(loss)[a][0] == pytest.approx(7.0)


def test_broadcast_gradients():
    a, b = param(np.ones((2, 3))), param([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = ops.sum(ops.mul(a, b))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[a], np.tile([1.0, 2.0, 3.0], (2, 1)))
    np.testing.assert_array_equal(g[b], [2.0, 2.0, 2.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NumericError):
        ops.mul(Tensor([np.inf]), Tensor([0.0]))


def test_conv_unit_weight_doubles_input(rng):
    x = rng.standard_normal((1, 5, 4))
    out = ops.conv2d(x, np.full((1, 1, 1, 1), 2.0)).data
    np.testing.assert_array_equal(out, 2 * x)


def test_conv_full_window_is_dot_product(rng):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((1, 2, 5, 5))
    out = ops.conv2d(x, w).data
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == pytest.approx(np.sum(x * w[0]), rel=1e-13)


def test_conv_batched_matches_oracle(rng, backend):
    x = rng.standard_normal((3, 2, 8, 7))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    out = ops.conv2d(x, w, b, pad=1).data
    for i in range(3):
        np.testing.assert_allclose(out[i], brute_conv_oracle(x[i], w, b, 1), rtol=1e-12, atol=1e-12)


def test_conv_chunking_matches_single_pass(rng, monkeypatch):
    x = rng.standard_normal((5, 2, 9, 9))
    w = rng.standard_normal((3, 2, 3, 3))
    full = ops.conv2d(x, w, None, 1).data
    monkeypatch.setattr(ops, "_COLS_BUDGET", 200)
    np.testing.assert_allclose(ops.conv2d(x, w, None, 1).data, full, rtol=1e-13)


@pytest.mark.parametrize("bad", [
    dict(w=(1, 1, 2, 2)),          # even kernel
    dict(w=(1, 3, 3, 3)),          # channel mismatch
    dict(w=(1, 1, 3, 3), pad=-1),
    dict(w=(1, 1, 7, 7)),          # does not fit
])
def test_conv_validation(bad):
    with pytest.raises(ConfigError):
        ops.conv2d(np.zeros((1, 4, 4)), np.zeros(bad["w"]), None, bad.get("pad", 0))


def test_resize_constant_and_identity(rng):
    c = np.full((2, 5, 6), 0.37)
    np.testing.assert_allclose(ops.bilinear_resize(c, 9, 3).data, 0.37, rtol=0, atol=1e-15)
    x = rng.standard_normal((2, 5, 6))
    np.testing.assert_array_equal(ops.bilinear_resize(x, 5, 6).data, x)
    with pytest.raises(ConfigError):
        ops.bilinear_resize(x, 0, 3)


def test_maxpool_odd_extent(rng):
    x = rng.standard_normal((1, 5, 3))
    vals, idx = ops.maxpool2x2(x)
    assert vals.shape == (1, 3, 2)
    assert vals.data[0, 2, 1] == x[0, 4, 2]


def test_cross_entropy_values():
    logits = np.array([[0.0, 0.0], [2.0, 0.0]])
    loss = ops.softmax_cross_entropy(logits, [0, 1]).item()
    expected = (np.log(2) + (np.log(np.exp(2) + 1) - 0.0)) / 2
    assert loss == pytest.approx(expected, rel=1e-14)
    # large logits stay finite
    assert np.isfinite(ops.softmax_cross_entropy(np.array([[1000.0, -1000.0]]), [1]).item())


@pytest.mark.parametrize("labels", [[0, 5], [0], [0.5, 1]])
def test_cross_entropy_bad_labels(labels):
    with pytest.raises(InputError):
        ops.softmax_cross_entropy(np.zeros((2, 3)), labels)


def test_small_chain_gradients(rng):
    """conv -> relu -> resize -> pool -> linear -> cross entropy, checked numerically."""
    x = param(rng.standard_normal((2, 1, 6, 6)))
    w = param(rng.standard_normal((3, 1, 3, 3)) * 0.5)
    b = param(rng.standard_normal(3) * 0.1)
    fw = param(rng.standard_normal((4, 3 * 4 * 4)) * 0.2)
    u, v = param(rng.standard_normal((2, 4))), param(rng.standard_normal((2, 4)))

    def loss():
        h = ops.relu(ops.conv2d(x, w, b, 1))
        h = ops.bilinear_resize(h, 8, 8)
        h, _ = ops.maxpool2x2(h)
        z = ops.linear(ops.flatten(h), fw)
        z = ops.add(z, ops.magnitude(u, v))
        return ops.add(ops.softmax_cross_entropy(z, [1, 3]), ops.mse(ops.mean(z), np.array(0.3)))

    res = grad_check(loss, [x, w, b, fw, u, v], n_coords=150, seed=3)
    assert res.n_checked == 150
    assert res.max_rel_err < 1e-6


def test_select_and_gather_gradients(rng):
    a, b = param(rng.standard_normal((2, 3))), param(rng.standard_normal((2, 3)))
    index = np.array([[0, 1, 1], [1, 0, 0]])
    with Tape() as tape:
        loss = ops.sum(ops.select_by_index([a, b], index))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[a], index == 0)
    np.testing.assert_array_equal(g[b], index == 1)

    x = param(rng.standard_normal((2, 3, 2, 2)))
    loc = np.array([[0, 3, 1], [2, 2, 0]])
    with Tape() as tape:
        loss = ops.sum(ops.spatial_gather(x, loc))
    gx = tape.backward(loss)[x].reshape(2, 3, 4)
    assert gx.sum() == 6
    assert gx[0, 1, 3] == 1 and gx[1, 0, 2] == 1


def test_concat_and_reshape(rng):
    a, b = param(rng.standard_normal((2, 3))), param(rng.standard_normal((2, 1)))
    with Tape() as tape:
        c = ops.concat([a, b], axis=1)
        loss = ops.sum(ops.mul(ops.reshape(c, (8,)), np.arange(8.0)))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[a], [[0, 1, 2], [4, 5, 6]])
    np.testing.assert_array_equal(g[b], [[3], [7]])

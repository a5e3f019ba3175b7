import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tera import autodiff as ad
from tera.autodiff import ContractViolation, NumericFault, Tensor, finite_difference, value_and_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def check_grad(build, *arrays, tol=1e-5, eps=1e-6):
    """Reverse mode against central differences for each input array (float64)."""
    leaves = [leaf(a) for a in arrays]
    _, grads = value_and_grad(build(*leaves), leaves)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(np.asarray(b, dtype=np.float64)) for b in arrays]
            args[i] = Tensor(x)
            return build(*args).data
        num = finite_difference(f, np.asarray(a, dtype=np.float64), eps)
        scale = max(np.abs(num).max(), np.abs(grads[i]).max(), 1e-8)
        assert np.abs(num - grads[i]).max() / scale < tol


def test_sum_grad_is_ones():
    x = leaf(np.arange(12.0).reshape(3, 4))
    _, (g,) = value_and_grad(x.sum(), [x])
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_half_square_norm_grad_is_identity():
    a = np.array([[1.5, -2.0], [0.25, 3.0]])
    x = leaf(a)
    _, (g,) = value_and_grad((x * x).sum() * 0.5, [x])
    np.testing.assert_allclose(g, a)


def test_finite_difference_oracles():
    x = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_allclose(finite_difference(lambda v: v.sum(), x, 1e-4), np.ones_like(x), atol=1e-8)
    d = finite_difference(lambda v: (v**2).sum(), np.array([3.0]), 1e-4)
    assert abs(d[0] - 6.0) < 1e-6
    with pytest.raises(ContractViolation):
        finite_difference(lambda v: v.sum(), x, 0.0)


def test_non_scalar_loss_rejected():
    x = leaf(np.ones(3))
    with pytest.raises(ContractViolation):
        value_and_grad(x * 2.0, [x])


def test_nan_names_node():
    x = leaf(np.array([-1.0, 2.0]))
    with pytest.raises(NumericFault) as info, np.errstate(invalid="ignore"):
        value_and_grad(ad.log(x).sum(), [x])
    assert info.value.node is not None
    assert "log" in str(info.value)


def test_unused_leaf_gets_zero_grad():
    x, y = leaf(np.ones(2)), leaf(np.ones(3))
    _, (gx, gy) = value_and_grad(x.sum(), [x, y])
    np.testing.assert_array_equal(gy, 0)


def test_reused_node_accumulates():
    x = leaf(np.array([2.0]))
    y = x * x
    _, (g,) = value_and_grad((y + y * 3.0).sum(), [x])
    assert g[0] == pytest.approx(16.0)


def test_layer_norm_examples():
    one, zero = np.ones(2), np.zeros(2)
    out = ad.layer_norm(Tensor(np.array([[5.0, 5.0]])), one, zero).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)
    out = ad.layer_norm(Tensor(np.array([[-1.0, 1.0]])), one, zero).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)
    x = np.random.default_rng(1).normal(size=(4, 8)) * 3 + 2
    y = ad.layer_norm(Tensor(x), np.ones(8), np.zeros(8)).data
    assert np.abs(y.mean(axis=1)).max() < 1e-6
    assert np.abs(y.var(axis=1) - 1).max() < 1e-4


def test_softmax_rows_examples():
    np.testing.assert_allclose(ad.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4])
    np.testing.assert_allclose(ad.softmax_rows(np.array([[1000.0, 0.0]])).data, [[1.0, 0.0]], atol=1e-6)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(row, c):
    x = np.array([row])
    p = ad.softmax_rows(x).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(ad.softmax_rows(x + c).data, p, atol=1e-6)


def test_masked_softmax_zero_prob_and_grad():
    x = leaf(np.array([[0.3, 1.2, -0.5]]))
    mask = np.array([[True, False, True]])
    p = ad.softmax(x, mask=mask)
    assert p.data[0, 1] == 0.0
    w = np.array([[1.0, 2.0, 3.0]])
    _, (g,) = value_and_grad((p * w).sum(), [x])
    assert g[0, 1] == 0.0


OPS = {
    "add_broadcast": (lambda a, b: (a + b).sum() * 1.0, [(3, 4), (4,)]),
    "mul_div": (lambda a, b: (a * b / (b * b + 1.0)).sum(), [(2, 3), (2, 3)]),
    "exp_log": (lambda a: ad.log(ad.exp(a) + 1.0).sum(), [(5,)]),
    "tanh": (lambda a: ad.tanh(a).sum(), [(4,)]),
    "gelu": (lambda a: (ad.gelu(a) * ad.gelu(a)).sum(), [(6,)]),
    "matmul_batched": (lambda a, b: ((a @ b) * (a @ b)).sum(), [(2, 3, 4), (4, 5)]),
    "matmul_3d3d": (lambda a, b: ad.tanh(a @ b).sum(), [(2, 3, 4), (2, 4, 3)]),
    "mean_axis": (lambda a: (a.mean(axis=0) * a.mean(axis=0)).sum(), [(3, 4)]),
    "reshape_transpose": (lambda a: (a.reshape(2, 6).transpose(1, 0) * np.arange(12.0).reshape(6, 2)).sum(), [(3, 4)]),
    "getitem_fancy": (lambda a: (a[np.array([0, 2, 2])] * a[np.array([1, 1, 0])]).sum(), [(3, 2)]),
    "stack_concat": (lambda a, b: (ad.stack([a, b]) * ad.stack([b, a])).sum() + ad.concat([a, b]).sum(), [(2, 3), (2, 3)]),
    "softmax": (lambda a: (ad.softmax(a, axis=-1) * np.arange(4.0)).sum(), [(3, 4)]),
    "log_softmax": (lambda a: (ad.log_softmax(a) * np.arange(4.0)).sum(), [(3, 4)]),
    "layer_norm": (lambda a, g, b: (ad.layer_norm(a, g, b, eps=1e-5) * np.arange(5.0)).sum(), [(3, 5), (5,), (5,)]),
    "l1_mean": (lambda a: ad.l1_mean(a, np.linspace(-1, 1, 9).reshape(3, 3), np.arange(9.0).reshape(3, 3) % 2), [(3, 3)]),
    "tabs": (lambda a: (ad.tabs(a) * np.arange(4.0)).sum(), [(4,)]),
    "relu": (lambda a: (ad.relu(a) * ad.relu(a)).sum(), [(6,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, shapes = OPS[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        check_grad(build, *[rng.normal(size=s) for s in shapes])


def test_dropout_mask_recorded_and_eval_identity():
    x = leaf(np.ones((200, 50)))
    gen = np.random.default_rng(0)
    y = ad.dropout(x, 0.1, gen, train=True)
    kept = y.data != 0
    assert abs(kept.mean() - 0.9) < 0.01
    np.testing.assert_allclose(y.data[kept], 1 / 0.9)
    _, (g,) = value_and_grad(y.sum(), [x])
    np.testing.assert_array_equal(g, y.data)
    assert ad.dropout(x, 0.1, gen, train=False) is x


def test_gradients_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))

    def run():
        x, w = leaf(a), leaf(b)
        return value_and_grad(ad.gelu(x @ w).sum(), [x, w])[1]

    for g1, g2 in zip(run(), run()):
        assert g1.tobytes() == g2.tobytes()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conceptloop import numerics as nx
from conceptloop.numerics import Tensor


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    assert np.array_equal((eye @ eye).data, np.eye(2))


def test_matmul_hand_product():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[1], [1]])
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradients_match_transposed_products(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(3, 2))
    ga, gb = nx.backward(nx.sum_all((a @ b) * Tensor(w)), [a, b])
    assert np.allclose(ga, w @ b.data.T, atol=1e-14)
    assert np.allclose(gb, a.data.T @ w, atol=1e-14)


@pytest.mark.parametrize("row,expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([math.log(2.0), 0.0], [2 / 3, 1 / 3]),
    ([1000.0, 0.0], [1.0, 0.0]),
])
def test_softmax_rows_examples(row, expected):
    out = nx.softmax_rows(Tensor([row])).data[0]
    assert np.all(np.isfinite(out))
    assert np.allclose(out, expected, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_is_a_distribution_and_shift_invariant(a, c):
    p = nx.softmax_rows(Tensor(a)).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    q = nx.softmax_rows(Tensor(a + c)).data
    assert np.allclose(p, q, atol=1e-12)


def test_backward_linear_sum():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    (g,) = nx.backward(nx.sum_all(x), [x])
    assert np.array_equal(g, [[1.0, 1.0, 1.0]])


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = nx.backward(nx.sum_all(x * x), [x])
    assert np.array_equal(g, [[2.0, 4.0]])


def test_backward_fan_out_accumulates():
    x = Tensor([[3.0]], requires_grad=True)
    y = x * 2.0 + x * 5.0 + x
    (g,) = nx.backward(y, [x])
    assert g[0, 0] == 8.0


def test_detached_and_unreachable_parameters_get_zero_gradient():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    other = Tensor([[4.0]], requires_grad=True)
    loss = nx.sum_all(x.detach() * x.detach())
    gx, go = nx.backward(loss, [x, other])
    assert np.array_equal(gx, [[0.0, 0.0]])
    assert np.array_equal(go, [[0.0]])


def test_backward_rejects_non_scalar_loss():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(nx.ContractError):
        nx.backward(x * 2.0, [x])


def test_graph_is_topological_and_visits_each_node_once(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    h = nx.tanh(x @ x)
    loss = nx.sum_all(h * h + h)
    g = nx.Graph(loss)
    ids = [id(n) for n in g.nodes]
    assert len(ids) == len(set(ids))
    pos = {i: k for k, i in enumerate(ids)}
    for n in g.nodes:
        for p in n.parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3) and t.data.size == 6
    with pytest.raises(ValueError):
        t.data[0, 0] = 1.0          # immutable after construction
    with pytest.raises(nx.DimensionError):
        Tensor(np.zeros((0, 3)))
    with pytest.raises(nx.DimensionError):
        Tensor(np.zeros((2, 2, 2)))


def test_grad_check_exact_for_linear(rng):
    assert nx.grad_check(nx.sum_all, rng.normal(size=(3, 4))) <= 1e-10


def test_grad_check_validates_eps_and_finiteness():
    with pytest.raises(nx.ContractError):
        nx.grad_check(nx.sum_all, np.ones((2, 2)), eps=1e-2)
    with pytest.raises(nx.EvaluationError), np.errstate(invalid="ignore"):
        nx.grad_check(lambda x: nx.sum_all(nx.log(x)), -np.ones((2, 2)))


def test_grad_check_dice_loss_on_soft_mask(rng):
    from conceptloop import concept as cc
    gt = (rng.random((4, 4)) > 0.5).astype(float)

    def f(x):
        return cc.seg_loss(nx.sigmoid(x), gt)

    assert nx.grad_check(f, rng.normal(size=(16, 1)), eps=1e-5) < 1e-4


def test_grad_check_ctm_output_sum(rng):
    from conceptloop import concept as cc
    params = cc.init_core_params(cc.CoreConfig(C=4, L2=2), seed=3)
    ctm = cc.CTMParams.from_leaves(cc.leaves(params, ("ctm.",), requires_grad=False))
    err = nx.grad_check(lambda H: nx.sum_all(cc.translate(H, ctm)), rng.normal(size=(8, 4)))
    assert err < 1e-4


UNARY = {
    "exp": nx.exp,
    "log": lambda x: nx.log(nx.exp(x) + 1.0),
    "square": nx.square,
    "sigmoid": nx.sigmoid,
    "log_sigmoid": nx.log_sigmoid,
    "tanh": nx.tanh,
    "relu": lambda x: nx.relu(x + 0.0),
    "softmax_rows": nx.softmax_rows,
    "log_softmax_rows": nx.log_softmax_rows,
    "mean_rows": nx.mean_rows,
    "mean_all": nx.mean_all,
    "transpose": lambda x: x.T @ x,
    "take_rows": lambda x: nx.take_rows(x, [2, 0, 2]),
    "take": lambda x: nx.take(x, 1, 2) * x,
    "reshape": lambda x: nx.reshape(x, (4, 3)) @ nx.reshape(x, (3, 4)),
    "concat_rows": lambda x: nx.concat_rows([x, x * x]),
    "clip": lambda x: nx.clip(x, -0.5, 0.5),
    "div": lambda x: x / 3.0,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_grad_check(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    if name in ("relu", "clip"):
        # keep clear of the kinks, where central differences are not defined
        x = np.where(np.abs(x) < 0.05, 0.3, x)
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.3, x)
    w = Tensor(rng.normal(size=UNARY[name](Tensor(x)).shape))
    assert nx.grad_check(lambda t: nx.sum_all(UNARY[name](t) * w), x, eps=1e-5) < 1e-4


def test_binary_ops_with_row_bias_pass_grad_check(rng):
    b = rng.normal(size=(1, 4))
    m = rng.normal(size=(3, 4))
    f_add = lambda t: nx.sum_all(nx.square(Tensor(m) + t))
    f_sub = lambda t: nx.sum_all(nx.square(Tensor(m) - t))
    f_mul = lambda t: nx.sum_all(nx.square(Tensor(m) * t))
    for f in (f_add, f_sub, f_mul):
        assert nx.grad_check(f, b) < 1e-4


def test_mul_counter_counts_matmul_multiplies(rng):
    a, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(5, 2)))
    with nx.MulCounter() as mc:
        a @ b
    assert mc.count == 3 * 5 * 2


def test_forward_is_bitwise_deterministic(rng):
    x = rng.normal(size=(6, 5))

    def run():
        t = Tensor(x)
        return nx.softmax_rows(nx.tanh(t @ t.T)).data.copy()

    assert np.array_equal(run(), run())


def test_float32_training_mode_and_scope_restores():
    with nx.dtype_scope(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        nx.set_default_dtype(np.int32)

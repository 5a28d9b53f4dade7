import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtmd import numkernel as nk
from mtmd.errors import ConfigurationError, DataError
from mtmd.numkernel import Adam, BatchNormState, ParamStore, Rng, Var

from conftest import rng_array

# splitmix64 reference stream for seed 0
SPLITMIX_SEED0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F, 0xF88BB8A8724C81EC]
# Box-Muller over the seed-42 stream, evaluated with the math module
NORMALS_SEED42 = [0.41471975043153003, 0.652681222151943, -0.8918862136277573, 1.3268335628141055]


def v(x):
    return Var(np.atleast_2d(np.asarray(x, dtype=float)), needs_grad=True)


# --- rng -------------------------------------------------------------------


def test_splitmix_reference_vector():
    r = Rng(0)
    assert [nk.rng_next(r) for _ in range(4)] == SPLITMIX_SEED0


def test_array_draws_match_scalar_draws():
    a, b = Rng(99), Rng(99)
    arr = a.u64_array(7)
    assert [int(x) for x in arr] == [b.next_u64() for _ in range(7)]
    assert a.next_u64() == b.next_u64()


def test_box_muller_values():
    assert np.allclose(Rng(42).normal(4), NORMALS_SEED42, rtol=0, atol=1e-15)


def test_same_seed_same_normals_bitwise():
    a = Rng(2024).normal(1000)
    b = Rng(2024).normal(1000)
    assert a.tobytes() == b.tobytes()
    r = Rng(2024)
    scalars = [nk.rng_normal(r) for _ in range(3)]
    assert scalars[0] == a[0]


def test_normal_sample_mean():
    z = Rng(11).normal(100_000)
    assert -0.02 <= z.mean() <= 0.02
    assert abs(z.std() - 1.0) < 0.02


def test_permutation_is_a_permutation():
    p = Rng(3).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


# --- elementwise ops ---------------------------------------------------------


def test_linear_examples():
    W1 = Var(np.eye(2))
    assert nk.linear(v([1, 2]), W1, v([0, 0])).data.tolist() == [[1, 2]]
    assert nk.linear(v([5, -7]), Var(np.zeros((2, 2))), v([3, 3])).data.tolist() == [[3, 3]]
    W = Var(np.array([[1.0, 1.0], [0.0, 2.0]]))
    assert nk.linear(v([1, 2]), W, v([1, 0])).data.tolist() == [[4, 4]]


def test_linear_shape_mismatch():
    with pytest.raises(ConfigurationError):
        nk.linear(v([1, 2, 3]), Var(np.eye(2)))


def test_leaky_relu_examples():
    out = nk.leaky_relu(v([3.0, -1.0, 0.0]), 0.2).data[0]
    assert out.tolist() == [3.0, -0.2, 0.0]


def test_sigmoid_examples():
    assert nk.sigmoid_scalar(0.0) == 0.5
    assert math.isclose(nk.sigmoid_scalar(math.log(3.0)), 0.75, rel_tol=1e-15)
    for s in (-30.0, -2.5, 0.7, 40.0):
        assert math.isclose(nk.sigmoid_scalar(s) + nk.sigmoid_scalar(-s), 1.0, rel_tol=1e-15)


def test_sigmoid_is_stable_at_extremes():
    out = nk.sigmoid(v([-800.0, 800.0])).data[0]
    assert out[0] == 0.0 and out[1] == 1.0
    ls = nk.log_sigmoid(v([-800.0, 800.0])).data[0]
    assert ls[0] == -800.0 and ls[1] == 0.0


def test_softmax_examples():
    assert np.allclose(nk.softmax(v([0, 0, 0])).data, 1 / 3, rtol=0, atol=1e-15)
    assert np.allclose(nk.softmax(v([math.log(2), 0])).data, [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=2, max_size=6),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance_and_simplex(z, c):
    a = nk.softmax(v(z)).data
    b = nk.softmax(v(np.array(z) + c)).data
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    assert abs(a.sum() - 1.0) <= 1e-12
    assert (a >= 0).all()


# --- normalization -----------------------------------------------------------


def layer_norm_oracle(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def test_layer_norm_examples():
    one, zero = Var(np.ones((1, 3))), Var(np.zeros((1, 3)))
    assert np.abs(nk.layer_norm(v([4.0, 4.0, 4.0]), one, zero).data).max() == 0.0
    y = nk.layer_norm(v([1.0, -1.0]), Var(np.ones((1, 2))), Var(np.zeros((1, 2))), eps=1e-12).data
    assert np.allclose(y, [[1.0, -1.0]], rtol=0, atol=1e-10)
    y = nk.layer_norm(v([1.0, -1.0]), Var(np.full((1, 2), 2.0)), Var(np.ones((1, 2))), eps=1e-12).data
    assert np.allclose(y, [[3.0, -1.0]], rtol=0, atol=1e-10)


def test_layer_norm_matches_formula():
    x = rng_array(0, 7, 5) * 3
    g, b = rng_array(1, 1, 5), rng_array(2, 1, 5)
    got = nk.layer_norm(Var(x), Var(g), Var(b), 1e-5).data
    assert np.allclose(got, layer_norm_oracle(x, g, b, 1e-5), rtol=1e-12, atol=1e-12)


def bn_state(c, mean=0.0, var=1.0):
    s = ParamStore()
    st_ = BatchNormState(s.declare("m", (1, c), trainable=False), s.declare("v", (1, c), "ones", trainable=False))
    st_.mean.value[...] = mean
    st_.var.value[...] = var
    return st_


def test_batch_norm_examples():
    out = nk.batch_norm(v([[5.0], [5.0], [5.0], [5.0]]), bn_state(1), "train").data
    assert np.abs(out).max() < 1e-9
    out = nk.batch_norm(v([[0.0], [2.0]]), bn_state(1), "train", eps=1e-14).data
    assert np.allclose(out.ravel(), [-1.0, 1.0], rtol=0, atol=1e-9)
    out = nk.batch_norm(v([[7.0]]), bn_state(1), "infer").data
    assert abs(out[0, 0] - 7.0) < 1e-4


def test_batch_norm_running_stats():
    s = bn_state(1, mean=0.0, var=1.0)
    nk.batch_norm(v([[0.0], [2.0]]), s, "train", momentum=0.1)
    # batch mean 1, population variance 1
    assert math.isclose(s.mean.value[0, 0], 0.1, rel_tol=1e-15)
    assert math.isclose(s.var.value[0, 0], 1.0, rel_tol=1e-15)


def test_batch_norm_needs_two_rows_in_train_mode():
    with pytest.raises(DataError):
        nk.batch_norm(v([[1.0]]), bn_state(1), "train")


# --- embedding, rowdot -------------------------------------------------------


def test_embedding_range_check():
    table = Var(np.zeros((3, 2)))
    with pytest.raises(DataError):
        nk.embedding(table, np.array([0, 3]))


def test_rowdot():
    a, b = v([[1, 2], [3, 4]]), v([[5, 6], [7, 8]])
    assert nk.rowdot(a, b).data.ravel().tolist() == [17, 53]


# --- autograd ---------------------------------------------------------------


def test_grad_accumulates_across_uses():
    x = v([2.0, 3.0])
    y = nk.total(nk.add(nk.mul(x, x), x))
    y.backward()
    assert x.grad.tolist() == [[5.0, 7.0]]


OPS = {
    "leaky_relu": lambda x: nk.leaky_relu(x, 0.2),
    "relu": nk.relu,
    "sigmoid": nk.sigmoid,
    "log_sigmoid": nk.log_sigmoid,
    "softmax": nk.softmax,
    "log1mexp": lambda x: nk.log1mexp(nk.scale(nk.log_sigmoid(x), 1.0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_elementwise_grads(name, seed):
    x = rng_array(seed, 4, 5) * 2
    res = nk.grad_check(lambda a: nk.projected_sum(OPS[name](a), seed), [], [x])
    assert res.max_rel_error <= 1e-6, res.worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_grad(seed):
    s = ParamStore()
    W = s.declare("W", (3, 4), "he")
    b = s.declare("b", (1, 3), "normal:1.0")
    s.initialize(Rng(seed))
    x = rng_array(seed, 6, 4)
    res = nk.grad_check(lambda a: nk.projected_sum(nk.linear(a, nk.param(W), nk.param(b)), seed), [W, b], [x])
    assert res.max_rel_error <= 1e-6, res.worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_norm_grad(seed):
    s = ParamStore()
    g = s.declare("g", (1, 5), "normal:1.0")
    b = s.declare("b", (1, 5), "normal:1.0")
    s.initialize(Rng(seed))
    x = rng_array(seed, 4, 5)
    res = nk.grad_check(lambda a: nk.projected_sum(nk.layer_norm(a, nk.param(g), nk.param(b)), seed), [g, b], [x])
    assert res.max_rel_error <= 1e-6, res.worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_batch_norm_grad(seed):
    x = rng_array(seed, 6, 3) * 2 + 1
    res = nk.grad_check(lambda a: nk.projected_sum(nk.batch_norm(a, bn_state(3), "train"), seed), [], [x])
    assert res.max_rel_error <= 1e-6, res.worst


def test_structural_op_grads():
    x = rng_array(5, 4, 6)
    y = rng_array(6, 4, 2)

    def fn(a, b):
        cat = nk.concat([a, b])
        cols = nk.take_cols(cat, np.array([7, 0, 3, 3]))
        rows = nk.take_rows(cat, np.array([2, 0]))
        rest = nk.take_rows(cat, np.array([1, 3]))
        back = nk.assemble_rows([rows, rest], [np.array([2, 0]), np.array([1, 3])], 4)
        return nk.add(nk.projected_sum(cols, 1), nk.total(nk.mul(back, back)))

    assert nk.grad_check(fn, [], [x, y]).max_rel_error <= 1e-6


def test_embedding_grad():
    s = ParamStore()
    t = s.declare("t", (5, 3), "normal:1.0")
    s.initialize(Rng(1))
    ids = np.array([0, 4, 4, 2])
    res = nk.grad_check(lambda: nk.projected_sum(nk.embedding(nk.param(t), ids), 3), [t])
    assert res.max_rel_error <= 1e-6


def test_corrupted_backward_is_detected():
    def bad_square(x: Var) -> Var:
        return Var(x.data**2, (x,), lambda g: (2.0 * (2.0 * x.data * g),))

    x = rng_array(0, 3, 3)
    res = nk.grad_check(lambda a: nk.projected_sum(bad_square(a)), [], [x])
    assert res.max_rel_error > 1e-2
    res = nk.directional_grad_check(lambda a: nk.projected_sum(bad_square(a)), [], [x])
    assert res.max_rel_error > 1e-2


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_directional_check_agrees_on_linear(seed):
    s = ParamStore()
    W = s.declare("W", (3, 4), "he")
    b = s.declare("b", (1, 3), "normal:1.0")
    s.initialize(Rng(seed))
    before = W.value.copy()
    x = rng_array(seed, 4, 6).T  # Fortran-ordered input must be perturbed too
    fn = lambda a: nk.projected_sum(nk.sigmoid(nk.linear(a, nk.param(W), nk.param(b))), seed)  # noqa: E731
    res = nk.directional_grad_check(fn, [W, b], [x], n_dirs=4, seed=seed)
    assert res.checked == 4 and res.max_rel_error <= 1e-8, res.worst
    assert np.array_equal(W.value, before)


# --- Adam -------------------------------------------------------------------


def test_adam_three_steps_match_scalar_oracle():
    s = ParamStore()
    p = s.declare("p", (1, 1))
    p.value[...] = 0.5
    opt = Adam(lr=0.01)
    expected = [0.4900000001, 0.4936610353472075, 0.4950279419673822]
    for g, want in zip([1.0, -2.0, 0.5], expected):
        p.grad[...] = g
        p.touched = True
        opt.step(s)
        assert math.isclose(p.value[0, 0], want, rel_tol=1e-14)
        assert p.grad[0, 0] == 0.0


def test_adam_first_step_moves_by_lr():
    s = ParamStore()
    p = s.declare("p", (1, 1))
    p.grad[...] = 1.0
    p.touched = True
    nk.adam_step(s, Adam(lr=1e-3))
    assert math.isclose(p.value[0, 0], -1e-3, rel_tol=1e-4)


def test_adam_zero_gradient_leaves_params():
    s = ParamStore()
    p = s.declare("p", (2, 2), "normal:1.0")
    s.initialize(Rng(0))
    before = p.value.copy()
    p.touched = True
    Adam(lr=0.1).step(s)
    assert np.array_equal(p.value, before)


def test_adam_skips_untouched_slots():
    s = ParamStore()
    a = s.declare("a", (1, 2), "normal:1.0")
    b = s.declare("b", (1, 2), "normal:1.0")
    s.initialize(Rng(4))
    before = b.value.copy()
    a.grad[...] = 1.0
    a.touched = True
    Adam(lr=0.1).step(s)
    assert np.array_equal(b.value, before)
    assert not np.array_equal(a.value, s.snapshot()["b"])


# --- parameter store ---------------------------------------------------------


def test_store_init_is_deterministic_and_order_free():
    def build(order):
        s = ParamStore()
        for pid in order:
            s.declare(pid, (3, 4), "he")
        s.initialize(Rng(9))
        return s.snapshot()

    a = build(["x", "y", "z"])
    b = build(["z", "x", "y"])
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_duplicate_param_id_rejected():
    s = ParamStore()
    s.declare("w", (1, 1))
    with pytest.raises(ConfigurationError):
        s.declare("w", (1, 1))


def test_scaled_init_std():
    s = ParamStore()
    w = s.declare("w", (400, 100), "scaled:0.5")
    s.initialize(Rng(1))
    assert abs(w.value.std() - 0.05) < 0.002

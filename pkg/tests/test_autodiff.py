import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ltom.autodiff import (
    OPS,
    ContractError,
    DimensionError,
    ParamStore,
    Tape,
    Tensor,
    adam_step,
    finite_diff_check,
    load_params,
    no_grad,
    read_arrays,
    save_params,
    write_arrays,
)
from ltom.autodiff import tensor as T
from ltom.autodiff.gradcheck import OP_PROBES, check_op, numerical_gradient, relative_error

finite = st.floats(-5, 5, allow_nan=False, width=64)


def test_every_registered_op_has_a_probe():
    assert set(OPS) == set(OP_PROBES)


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_central_differences(name):
    assert check_op(name, n_points=10, seed=3) <= 1e-4


def test_hand_derived_gradients():
    # d/dx sum(x * x) = 2x ; d/dx sum(exp(x)) = exp(x) [DERIVED: calculus]
    x = np.array([[0.5, -1.0, 2.0]])
    assert np.allclose(T.gradient(lambda t: T.reduce("sum", t * t), x), 2 * x, atol=0, rtol=1e-15)
    assert np.allclose(T.gradient(lambda t: T.reduce("sum", T.exp(t)), x), np.exp(x), rtol=1e-15)
    # sigmoid'(0) = 1/4
    assert T.gradient(lambda t: T.reduce("sum", T.sigmoid(t)), np.zeros((1, 1)))[0, 0] == 0.25


def test_matmul_gradient_is_outer_product_form():
    rng = np.random.default_rng(0)
    a, b, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
    ga = T.gradient(lambda t: T.reduce("sum", T.matmul(t, b) * w), a)
    gb = T.gradient(lambda t: T.reduce("sum", T.matmul(a, t) * w), b)
    np.testing.assert_allclose(ga, w @ b.T, rtol=1e-14)
    np.testing.assert_allclose(gb, a.T @ w, rtol=1e-14)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one_and_gradient_of_total_vanishes(x):
    p = T.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    g = T.gradient(lambda t: T.reduce("sum", T.softmax_rows(t)), x)
    assert np.max(np.abs(g)) < 1e-12


@given(arrays(np.float64, (2, 6), elements=finite))
def test_layernorm_rows_are_standardised(x):
    # rows with negligible spread are dominated by eps, so require some spread
    if np.min(np.std(x, axis=1)) < 0.5:
        return
    y = T.layernorm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, rtol=1e-4)


@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (1, 3), elements=finite))
def test_broadcast_add_gradient_sums_over_rows(a, b):
    gb = T.gradient(lambda t: T.reduce("sum", T.add(a, t)), b)
    np.testing.assert_array_equal(gb, np.full((1, 3), 4.0))


def test_gradients_accumulate_over_reuse():
    # f(x) = x*x + x*x uses x four times -> 4x
    x = np.array([[1.5, -2.0]])
    g = T.gradient(lambda t: T.reduce("sum", t * t + t * t), x)
    np.testing.assert_array_equal(g, 4 * x)


def test_detach_blocks_gradient():
    x = np.array([[1.0, 2.0]])
    g = T.gradient(lambda t: T.reduce("sum", T.detach(t) * t), x)
    np.testing.assert_array_equal(g, x)


def test_no_grad_records_nothing():
    leaf = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            T.relu(leaf)
        assert len(tape) == 0
        T.relu(leaf)
        assert len(tape) == 1


def test_backward_requires_scalar():
    leaf = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = leaf * 2.0
    with pytest.raises(ContractError):
        tape.backward(out)


def test_shape_mismatch_is_reported():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((4, 5)))


def test_tape_stack_is_thread_local():
    seen = []

    def worker():
        seen.append(T.active_tape())

    with Tape():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen == [None]


def test_corrupted_backward_rule_is_caught(monkeypatch):
    # negative control: a rule off by a constant factor must fail the oracle
    op = OPS["mul"]
    orig = type(op).backward
    monkeypatch.setattr(type(op), "backward", lambda self, ctx, g: tuple(1.5 * x for x in orig(self, ctx, g)))
    assert check_op("mul", n_points=2) > 0.1


def test_relative_error_oracle():
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-9])) == pytest.approx(1e-9, rel=1e-6)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0
    # the floor keeps vanishing gradients from dividing by zero
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-3)


def test_numerical_gradient_of_quadratic():
    x = np.array([[1.0, -3.0]])
    np.testing.assert_allclose(numerical_gradient(lambda t: T.reduce("sq_l2", t), x), 2 * x, rtol=1e-9)
    assert finite_diff_check(lambda t: T.reduce("l2", t), x) < 1e-8


# -- parameters, Adam, checkpoints -------------------------------------------


def _store(rng):
    s = ParamStore()
    s.add("a.W", rng.standard_normal((3, 2)))
    s.add("a.b", rng.standard_normal((1, 2)))
    return s


def test_adam_first_step_moves_each_coordinate_by_lr(rng):
    # bias-corrected Adam's first step is lr * sign(g) (up to eps)
    s = _store(rng)
    before = s.state_dict()
    s.grads = {n: rng.standard_normal(p.shape) for n, p in s.params.items()}
    adam_step(s, lr=0.01, eps=0.0)
    for n in s.params:
        np.testing.assert_allclose(before[n] - s[n].data, 0.01 * np.sign(s.grads[n]), rtol=1e-12)


def test_adam_only_touches_named_params(rng):
    s = _store(rng)
    before = s.state_dict()
    s.grads = {"a.W": np.ones((3, 2))}
    adam_step(s, names=["a.W"])
    np.testing.assert_array_equal(s["a.b"].data, before["a.b"])
    with pytest.raises(KeyError, match="a.b"):
        adam_step(s, names=["a.b"])


def test_adam_minimises_a_quadratic():
    s = ParamStore()
    s.add("x", np.array([[3.0, -2.0]]))
    for _ in range(2000):
        with Tape() as tape:
            loss = T.reduce("sq_l2", s["x"])
        s.zero_grad()
        tape.backward(loss, s)
        adam_step(s, lr=0.01)
    assert np.max(np.abs(s["x"].data)) < 1e-3


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    s = _store(rng)
    save_params(s, tmp_path / "p.ltom")
    back = load_params(tmp_path / "p.ltom")
    assert set(back.params) == set(s.params)
    for n in s.params:
        assert back[n].data.tobytes() == s[n].data.tobytes()
    # loading into a store with a different layout names the mismatch
    other = ParamStore()
    other.add("zzz", np.zeros(1))
    with pytest.raises(KeyError, match="zzz"):
        load_params(tmp_path / "p.ltom", other)


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="LTOM1"):
        read_arrays(tmp_path / "x.bin")


@given(st.dictionaries(st.text("abc.xyz", min_size=1, max_size=8),
                       arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 3)),
                              elements=st.floats(allow_nan=True, allow_infinity=True)),
                       max_size=4))
def test_array_file_round_trip(tmp_path_factory, arrays_in):
    path = tmp_path_factory.mktemp("ck") / "a.ltom"
    write_arrays(path, arrays_in)
    back = read_arrays(path)
    assert set(back) == set(arrays_in)
    for k, a in arrays_in.items():
        assert back[k].shape == a.shape and back[k].tobytes() == a.astype("<f8").tobytes()

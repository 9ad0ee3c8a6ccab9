import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ltom.autodiff import DimensionError, ParamStore, finite_diff_check
from ltom.autodiff import tensor as T
from ltom.nets import (
    ConfidenceHead,
    DenoiserNet,
    MlpEncoder,
    NetDims,
    TomPredictor,
    confidence,
    encode,
    init_params,
    init_value,
    timestep_embedding,
    tom_predict,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)


def _zero(store: ParamStore):
    for p in store.params.values():
        p.data = np.zeros_like(p.data)


def test_encoder_shapes_follow_widths():
    enc = MlpEncoder("agent0.enc_ego", 10, 32, (64, 64))
    assert enc.param_shapes() == {
        "agent0.enc_ego.l0.W": (10, 64), "agent0.enc_ego.l0.b": (1, 64),
        "agent0.enc_ego.l1.W": (64, 64), "agent0.enc_ego.l1.b": (1, 64),
        "agent0.enc_ego.l2.W": (64, 32), "agent0.enc_ego.l2.b": (1, 32),
    }


def test_zero_encoder_gives_zero_embedding(rng):
    enc = MlpEncoder("e", 10, 32)
    store = init_params([enc], 0)
    _zero(store)
    assert np.all(encode(enc, store, rng.standard_normal((3, 10))).data == 0.0)


def test_encoder_is_deterministic_and_checks_dims(rng):
    enc = MlpEncoder("e", 10, 32)
    store = init_params([enc], 0)
    x = rng.standard_normal((4, 10))
    assert enc(store, x).data.tobytes() == enc(store, x).data.tobytes()
    with pytest.raises(DimensionError):
        enc(store, rng.standard_normal((4, 9)))


def test_encoder_gradient(rng):
    enc = MlpEncoder("e", 6, 4, (8, 8))
    store = init_params([enc], 1)
    w = rng.standard_normal((2, 4))
    assert finite_diff_check(lambda t: T.reduce("sum", enc(store, t) * w), rng.standard_normal((2, 6))) < 1e-4


def test_xavier_bounds_and_zero_biases():
    store = init_params([MlpEncoder("e", 10, 32)], seed=5)
    for name, p in store.params.items():
        if name.endswith(".W"):
            a = math.sqrt(6.0 / sum(p.shape))
            assert np.all(np.abs(p.data) <= a)
            assert np.abs(p.data).max() > 0.8 * a  # actually spans the interval
        else:
            assert np.all(p.data == 0.0)


def test_init_is_keyed_by_path_not_order():
    a, b = MlpEncoder("a", 4, 3), MlpEncoder("b", 4, 3)
    s1, s2 = init_params([a, b], 7), init_params([b, a], 7)
    for n in s1.params:
        assert s1[n].data.tobytes() == s2[n].data.tobytes()
    assert not np.array_equal(init_params([a], 8)["a.l0.W"].data, s1["a.l0.W"].data)
    np.testing.assert_array_equal(init_value("x.W", (3, 4), 7), init_value("x.W", (3, 4), 7))


# -- ToM predictor -------------------------------------------------------------


def test_tom_directions_share_no_parameters():
    p01, p10 = TomPredictor("tom.0to1"), TomPredictor("tom.1to0")
    assert not set(p01.param_shapes()) & set(p10.param_shapes())


@given(arrays(np.float64, (3, 32), elements=finite), arrays(np.float64, (3, 32), elements=finite))
def test_single_token_attention_weight_is_exactly_one(q, kv):
    psi = TomPredictor("tom.0to1")
    store = init_params([psi], 0)
    _, weights = psi.attend(store, q, kv)
    assert len(weights) == psi.n_heads
    for w in weights:
        assert np.all(w.data == 1.0)


def test_zero_value_path_outputs_the_output_bias(rng):
    psi = TomPredictor("tom.0to1")
    store = init_params([psi], 0)
    store.set("tom.0to1.v.W", np.zeros((32, 32)))
    store.set("tom.0to1.v.b", np.zeros((1, 32)))
    bias = rng.standard_normal((1, 32))
    store.set("tom.0to1.o.b", bias)
    out = tom_predict(psi, store, rng.standard_normal((5, 32)), rng.standard_normal((5, 32))).data
    np.testing.assert_array_equal(out, np.repeat(bias, 5, axis=0))


def test_single_token_attention_reduces_to_value_projection(rng):
    # weight 1 means output = o(v(h_ego)), independent of the query [DERIVED: hand composition]
    psi = TomPredictor("t", d_con=4, d_ego=3, d_model=4, n_heads=2)
    store = init_params([psi], 2)
    h_con, h_ego = rng.standard_normal((2, 4)), rng.standard_normal((2, 3))
    v = h_ego @ store["t.v.W"].data + store["t.v.b"].data
    want = v @ store["t.o.W"].data + store["t.o.b"].data
    np.testing.assert_allclose(psi(store, h_con, h_ego).data, want, rtol=1e-14)
    np.testing.assert_allclose(psi(store, 100 * h_con, h_ego).data, want, rtol=1e-14)


def test_tom_rejects_bad_dims(rng):
    psi = TomPredictor("t")
    store = init_params([psi], 0)
    with pytest.raises(DimensionError):
        psi(store, rng.standard_normal((2, 31)), rng.standard_normal((2, 32)))
    with pytest.raises(ValueError):
        TomPredictor("t", d_model=33, n_heads=2)


# -- confidence head -------------------------------------------------------------


def test_confidence_layout_and_zero_head():
    head = ConfidenceHead()
    shapes = head.param_shapes()
    assert shapes["conf.trunk.l0.W"] == (32, 64)
    assert shapes["conf.trunk.l1.W"] == (64, 32)
    assert shapes["conf.head0.W"] == (32, 1) and shapes["conf.head1.W"] == (32, 1)
    store = init_params([head], 0)
    store.set("conf.head1.W", np.zeros((32, 1)))
    c = confidence(head, store, 1, np.random.default_rng(0).standard_normal((4, 32)))
    assert np.all(c.data == 0.5)


def test_confidence_heads_differ_on_same_input(rng):
    head = ConfidenceHead()
    store = init_params([head], 0)
    h = rng.standard_normal((4, 32))
    assert not np.allclose(head(store, 0, h).data, head(store, 1, h).data)
    with pytest.raises(KeyError):
        head(store, 2, h)


@given(arrays(np.float64, (2, 32), elements=st.floats(-1e3, 1e3, allow_nan=False, width=64)))
def test_confidence_strictly_inside_unit_interval(h):
    head = ConfidenceHead()
    store = init_params([head], 3)
    store.set("conf.head0.W", 50.0 * store["conf.head0.W"].data)
    c = head(store, 0, h).data
    assert np.all((c > 0.0) & (c < 1.0))


def test_confidence_gradient(rng):
    head = ConfidenceHead((0, 1), 5, 6, 4)
    store = init_params([head], 0)
    assert finite_diff_check(lambda t: T.reduce("sum", head(store, 0, t)), rng.standard_normal((3, 5))) < 1e-4


# -- denoiser ------------------------------------------------------------------


def test_timestep_embedding_formula():
    emb = timestep_embedding([0, 3], dim=4)
    # frequencies 1 and 1e-2 for dim 4
    np.testing.assert_allclose(emb[1], [math.sin(3), math.sin(0.03), math.cos(3), math.cos(0.03)], rtol=1e-15)
    np.testing.assert_array_equal(emb[0], [0, 0, 1, 1])


def test_denoiser_output_is_chunk_dim(rng):
    den = DenoiserNet("d", 16, 64)
    store = init_params([den], 0)
    assert len(den.param_shapes()) == 6  # three linear layers
    out = den(store, rng.standard_normal((5, 16)), 7, rng.standard_normal((5, 64)))
    assert out.shape == (5, 16)
    with pytest.raises(DimensionError):
        den(store, rng.standard_normal((5, 16)), 7, rng.standard_normal((5, 63)))


def test_netdims_defaults():
    d = NetDims()
    assert (d.ego_in, d.con_in, d.d_ego, d.d_con) == (10, 16, 32, 32)

import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from disalign import disentangle as dis
from disalign.training import grad_check


def reps_from(sp_c, sh_c, sp_l, sh_l):
    return dis.DisentangledReps(*(np.asarray(x, dtype=np.float64) for x in (sp_c, sh_c, sp_l, sh_l)))


# ---------------------------------------------------------------- encoders


def test_encoders_are_seeded():
    a = dis.init_encoders(6, 10, 4, 4, seed=2)
    b = dis.init_encoders(6, 10, 4, 4, seed=2)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])


def test_xavier_bounds():
    enc = dis.init_encoders(6, 10, 4, 4, seed=0, d_h=7)
    for name, net in enc.nets.items():
        for key in ("W1", "W2"):
            fan_in, fan_out = net[key].shape
            assert np.abs(net[key]).max() <= np.sqrt(6.0 / (fan_in + fan_out))


def test_zero_input_gives_bias_image(rng):
    net = dis.init_mlp(3, 5, 2, rng)
    net["b1"] = rng.standard_normal(5)
    net["b2"] = rng.standard_normal(2)
    y, _ = dis.mlp_forward(net, np.zeros((1, 3)))
    np.testing.assert_allclose(y[0], np.tanh(net["b1"]) @ net["W2"] + net["b2"])


def test_identity_linear_net_is_identity(rng):
    net = {"W1": np.eye(4), "b1": np.zeros(4), "W2": np.eye(4), "b2": np.zeros(4), "activation": "linear"}
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(dis.mlp_forward(net, x)[0], x)


def test_forward_matches_row_loop(rng):
    net = dis.init_mlp(5, 6, 3, rng)
    net["b1"] = rng.standard_normal(6)
    x = rng.standard_normal((9, 5))
    y, _ = dis.mlp_forward(net, x)
    for r in range(9):
        h = [np.tanh(sum(x[r, a] * net["W1"][a, j] for a in range(5)) + net["b1"][j]) for j in range(6)]
        out = [sum(h[j] * net["W2"][j, c] for j in range(6)) + net["b2"][c] for c in range(3)]
        np.testing.assert_allclose(y[r], out, atol=1e-6)
        np.testing.assert_allclose(dis.mlp_forward(net, x[r:r + 1])[0][0], y[r], atol=1e-6)


def test_dim_mismatch_is_rejected(rng):
    net = dis.init_mlp(5, 6, 3, rng)
    with pytest.raises(ValueError, match="input dim"):
        dis.mlp_forward(net, np.zeros((2, 4)))


def test_specific_and_shared_widths_must_match():
    with pytest.raises(ValueError):
        dis.init_encoders(4, 4, 3, 5)


def test_encoder_backward_matches_finite_differences(rng):
    enc = dis.init_encoders(4, 6, 3, 3, seed=1)
    e_c, e_l = rng.standard_normal((7, 4)), rng.standard_normal((7, 6))
    weights = {k: rng.standard_normal((7, 3)) for k in dis.ENCODER_NAMES}

    def f():
        reps = dis.encode(enc, e_c, e_l)
        return sum(float((getattr(reps, "e_" + k) * w).sum()) for k, w in weights.items())

    reps = dis.encode(enc, e_c, e_l)
    grads, d_e_c = dis.encoders_backward(enc, reps, weights)
    params = {**enc.params(), "e_c": e_c}
    grads = {**grads, "e_c": d_e_c}
    assert grad_check(f, params, grads) < 1e-6


# ---------------------------------------------------------------- orthogonality


def test_orthogonal_rows_score_zero():
    sp = [[1.0, 0.0], [0.0, 2.0]]
    sh = [[0.0, 3.0], [-1.0, 0.0]]
    value, _ = dis.orthogonality_loss(reps_from(sp, sh, sp, sh))
    assert value == 0.0


def test_orthogonality_hand_case():
    # one side at 45 degrees (cos^2 = 1/2), the other side orthogonal
    value, _ = dis.orthogonality_loss(reps_from([[1, 1]], [[1, 0]], [[0, 1]], [[1, 0]]))
    assert value == pytest.approx(0.5, abs=1e-12)


def test_orthogonality_zero_row_has_zero_gradient():
    value, grads = dis.orthogonality_loss(reps_from([[0, 0]], [[1, 0]], [[0, 1]], [[1, 0]]))
    assert value == 0.0
    assert np.all(grads["sp_c"] == 0) and np.all(grads["sh_c"] == 0)


def test_orthogonality_gradient(rng):
    arrs = {k: rng.standard_normal((6, 4)) for k in dis.ENCODER_NAMES}

    def f():
        return dis.orthogonality_loss(reps_from(*(arrs[k] for k in dis.ENCODER_NAMES)))[0]

    _, grads = dis.orthogonality_loss(reps_from(*(arrs[k] for k in dis.ENCODER_NAMES)))
    assert grad_check(f, arrs, grads) < 1e-4


@given(st.integers(0, 2**31))
def test_orthogonality_ignores_row_scale(seed):
    r = np.random.default_rng(seed)
    arrs = [r.standard_normal((5, 3)) for _ in range(4)]
    scaled = [a * r.uniform(0.01, 100.0, size=(5, 1)) for a in arrs]
    a = dis.orthogonality_loss(reps_from(*arrs))[0]
    b = dis.orthogonality_loss(reps_from(*scaled))[0]
    assert abs(a - b) <= 1e-6


# ---------------------------------------------------------------- normalization


def test_normalize_examples(caplog):
    np.testing.assert_allclose(dis.normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
    unit = np.array([[0.0, 1.0]])
    np.testing.assert_array_equal(dis.normalize_rows(unit), unit)
    with caplog.at_level(logging.WARNING):
        out = dis.normalize_rows(np.zeros((1, 3)))
    np.testing.assert_array_equal(out, np.zeros((1, 3)))
    assert "all-zero" in caplog.text


# ---------------------------------------------------------------- uniformity


def test_uniformity_collapsed_points_score_zero():
    sp = np.array([[1.0, 2.0], [1.0, 2.0]])
    value, _ = dis.uniformity_loss(reps_from(sp, sp, sp, sp), [0, 1])
    assert abs(value) <= 1e-9


def test_uniformity_antipodal_points_score_minus_sixteen():
    sp = np.array([[1.0, 0.0], [-3.0, 0.0]])
    value, _ = dis.uniformity_loss(reps_from(sp, sp, sp, sp), [0, 1])
    assert value == pytest.approx(-16.0, abs=1e-9)


def test_uniformity_gradient(rng):
    arrs = {k: rng.standard_normal((10, 3)) for k in dis.ENCODER_NAMES}
    idx = np.array([0, 1, 2, 4, 5, 6, 8, 9])

    def f():
        return dis.uniformity_loss(reps_from(*(arrs[k] for k in dis.ENCODER_NAMES)), idx)[0]

    _, grads = dis.uniformity_loss(reps_from(*(arrs[k] for k in dis.ENCODER_NAMES)), idx)
    full = {k: grads.get(k, np.zeros_like(arrs[k])) for k in arrs}
    assert grad_check(f, arrs, full) < 1e-4
    assert np.all(full["sp_c"][[3, 7]] == 0)


@given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)).filter(lambda a: np.all(np.abs(a).sum(axis=1) > 1e-3)))
def test_uniformity_range(sp):
    value, _ = dis.uniformity_loss(reps_from(sp, sp, sp, sp), np.arange(6))
    assert -16.0 - 1e-9 <= value <= 1e-9


def test_uniformity_rejects_bad_samples():
    sp = np.ones((3, 2))
    with pytest.raises(ValueError):
        dis.uniformity_loss(reps_from(sp, sp, sp, sp), [1])
    with pytest.raises(ValueError, match="distinct"):
        dis.uniformity_loss(reps_from(sp, sp, sp, sp), [1, 1])

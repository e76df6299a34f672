import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvgf.errors import ConfigError, EmptyClass, LayoutMismatch
from pvgf.vib import (PARAM_ORDER, TrainConfig, VibParameters, encode, evaluate,
                      kl_to_standard_normal, loss, loss_and_grad, metrics_from_predictions,
                      model_from_json, model_to_json, predict, reparameterize, softmax, train)


def random_params(seed=0, scale=0.5, n_input=50):
    rng = np.random.default_rng(seed)
    p = VibParameters.glorot(rng, n_input=n_input)
    return p.with_flat(p.flat() + scale * rng.normal(size=p.flat().size))


# ------------------------------------------------------------------ oracles


def encode_oracle(p, x):
    """Scalar-loop transcription of the encoder arithmetic."""
    n_in, n_h = p.W1.shape
    h = []
    for j in range(n_h):
        s = p.b1[j] + sum(x[i] * p.W1[i, j] for i in range(n_in))
        h.append(max(s, 0.0))
    mu = [p.bmu[k] + sum(h[j] * p.Wmu[j, k] for j in range(n_h)) for k in range(2)]
    lv = [p.blv[k] + sum(h[j] * p.Wlv[j, k] for j in range(n_h)) for k in range(2)]
    return mu, lv


def loss_oracle(p, X, y, beta, eps):
    total = ce_sum = kl_sum = 0.0
    for x, label, e in zip(X, y, eps):
        mu, lv = encode_oracle(p, x)
        z = [mu[k] + math.exp(lv[k] / 2) * e[k] for k in range(2)]
        logits = [p.bd[c] + sum(z[k] * p.Wd[k, c] for k in range(2)) for c in range(3)]
        ce = -(logits[label] - math.log(sum(math.exp(v) for v in logits)))
        kl = 0.5 * sum(math.exp(lv[k]) + mu[k] ** 2 - 1 - lv[k] for k in range(2))
        ce_sum += ce
        kl_sum += kl
        total += ce + beta * kl
    n = len(X)
    return total / n, ce_sum / n, kl_sum / n


# ------------------------------------------------------------------ encoder


def test_zero_network():
    p = VibParameters.zeros()
    mu, lv = encode(p, np.ones(50))
    np.testing.assert_array_equal(mu, [0, 0])
    np.testing.assert_array_equal(lv, [0, 0])
    np.testing.assert_array_equal(np.exp(lv / 2), [1, 1])


def test_encoder_matches_oracle():
    p = random_params(1)
    x = np.random.default_rng(2).normal(size=50)
    mu, lv = encode(p, x)
    o_mu, o_lv = encode_oracle(p, x)
    np.testing.assert_allclose(mu, o_mu, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(lv, o_lv, rtol=1e-12, atol=1e-12)
    assert np.array([mu, lv]).shape == (2, 2)


def test_reparameterize_examples():
    mu = np.array([0.3, -1.2])
    np.testing.assert_array_equal(reparameterize(mu, [0.7, -0.1], [0, 0]), mu)
    np.testing.assert_allclose(reparameterize(mu, [0, 0], [1, -1]), mu + [1, -1])
    np.testing.assert_allclose(reparameterize([0.5, -0.5], [math.log(4), 0], [1, 2]), [2.5, 1.5],
                               rtol=1e-15)


def test_kl_examples():
    assert kl_to_standard_normal([0, 0], [0, 0]) == 0.0
    assert kl_to_standard_normal([1, 0], [0, 0]) == 0.5
    mu, lv = (0.3, -0.7), (0.2, -0.4)
    want = 0.5 * sum(math.exp(l) + m * m - 1 - l for m, l in zip(mu, lv))
    assert kl_to_standard_normal(mu, lv) == pytest.approx(want, rel=1e-15)


@given(arrays(np.float64, 2, elements=st.floats(-10, 10)),
       arrays(np.float64, 2, elements=st.floats(-10, 10)))
def test_kl_nonnegative(mu, lv):
    assert kl_to_standard_normal(mu, lv) >= 0.0


# --------------------------------------------------------------------- loss


def test_uniform_loss_for_zero_network():
    X = np.random.default_rng(0).normal(size=(9, 50))
    y = np.array([0, 1, 2] * 3)
    total, ce, kl = loss(VibParameters.zeros(), X, y, 0.01, np.zeros((9, 2)))
    assert ce == pytest.approx(math.log(3), rel=1e-15)
    assert kl == 0.0
    assert total == ce


def test_beta_zero_gives_pure_cross_entropy():
    p = random_params(3)
    rng = np.random.default_rng(4)
    X, y, eps = rng.normal(size=(7, 50)), rng.integers(0, 3, 7), rng.normal(size=(7, 2))
    total, ce, kl = loss(p, X, y, 0.0, eps)
    assert total == ce and kl > 0


def test_loss_matches_oracle():
    p = random_params(5)
    rng = np.random.default_rng(6)
    X, y, eps = rng.normal(size=(6, 50)), rng.integers(0, 3, 6), rng.normal(size=(6, 2))
    got = loss(p, X, y, 0.01, eps)
    want = loss_oracle(p, X, y, 0.01, eps)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_gradient_check():
    p = random_params(7, scale=0.3)
    rng = np.random.default_rng(8)
    X, y, eps = rng.normal(size=(16, 50)), rng.integers(0, 3, 16), rng.normal(size=(16, 2))
    beta = 0.5  # large enough that the KL path is exercised
    _, _, _, grads = loss_and_grad(p, X, y, beta, eps)
    g = np.concatenate([grads[k].ravel() for k in PARAM_ORDER])
    flat = p.flat()
    h = 1e-5
    coords = rng.choice(flat.size, 40, replace=False)
    checked = 0
    for i in coords:
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fd = (loss(p.with_flat(up), X, y, beta, eps)[0]
              - loss(p.with_flat(dn), X, y, beta, eps)[0]) / (2 * h)
        if abs(fd) < 1e-7 and abs(g[i]) < 1e-7:
            continue  # inactive ReLU unit
        assert abs(fd - g[i]) / max(abs(fd), abs(g[i])) < 1e-4
        checked += 1
    assert checked >= 20


# --------------------------------------------------------------- inference


@given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    p = softmax(logits)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(logits + shift), p, atol=1e-12)


def test_zero_network_predicts_uniform():
    _, probs, _ = predict(VibParameters.zeros(), np.ones((2, 50)))
    np.testing.assert_allclose(probs, 1 / 3, rtol=1e-15)


def test_decoder_bias_shift_keeps_prediction():
    p = random_params(9)
    X = np.random.default_rng(10).normal(size=(20, 50))
    labels, probs, _ = predict(p, X)
    q = p.with_flat(p.flat())
    q.bd = q.bd + 7.0
    labels2, probs2, _ = predict(q, X)
    np.testing.assert_array_equal(labels, labels2)
    np.testing.assert_allclose(probs, probs2, atol=1e-12)


def test_prediction_is_pure():
    p = random_params(11)
    x = np.random.default_rng(12).normal(size=(1, 50))
    a = predict(p, np.vstack([x, x]))
    assert np.array_equal(a[1][0], a[1][1]) and np.array_equal(a[2][0], a[2][1])
    b = predict(p, x)
    np.testing.assert_array_equal(a[1][:1], b[1])


def test_layout_mismatch():
    with pytest.raises(LayoutMismatch):
        predict(random_params(0), np.zeros((3, 25)))


# -------------------------------------------------------------- evaluation


def test_evaluate_examples():
    y = np.array([0] * 4 + [1] * 2 + [2] * 2)
    perfect = metrics_from_predictions(y, y)
    assert perfect.accuracy == 1.0 and perfect.recall == [1.0, 1.0, 1.0]
    zeros = metrics_from_predictions(y, np.zeros_like(y))
    assert zeros.accuracy == 0.5 and zeros.recall == [1.0, 0.0, 0.0]
    assert zeros.confusion.tolist() == [[4, 0, 0], [2, 0, 0], [2, 0, 0]]


def test_evaluate_requires_every_class():
    with pytest.raises(EmptyClass):
        evaluate(VibParameters.zeros(), np.zeros((4, 50)), [0, 0, 1, 1])


# ---------------------------------------------------------------- training


def blobs(n, seed):
    rng = np.random.default_rng(seed)
    centres = rng.normal(scale=4.0, size=(3, 50))
    y = np.repeat([0, 1, 2], n)
    return centres[y] + rng.normal(size=(3 * n, 50)), y


def test_separable_blobs():
    X, y = blobs(200, 1)
    Xt, yt = blobs(100, 1)
    params, m = train(X, y, TrainConfig(epochs=500, batch=100, seed=3))
    assert evaluate(params, Xt, yt).accuracy >= 0.99
    assert len(m.ce_curve) == len(m.kl_curve) == 500
    assert m.ce_curve[-1] < m.ce_curve[0]


def test_training_is_seeded():
    X, y = blobs(30, 2)
    a, _ = train(X, y, TrainConfig(epochs=20, batch=16, seed=5))
    b, _ = train(X, y, TrainConfig(epochs=20, batch=16, seed=5))
    c, _ = train(X, y, TrainConfig(epochs=20, batch=16, seed=6))
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


@pytest.mark.parametrize("kw", [dict(lr=0), dict(batch=0), dict(epochs=0),
                                dict(weight_decay=-1)])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_bad_labels_rejected():
    with pytest.raises(ValueError):
        train(np.zeros((3, 50)), [0, 1, 3], TrainConfig(epochs=1))


def test_model_json_round_trip():
    X, y = blobs(20, 4)
    params, _ = train(X, y, TrainConfig(epochs=5, batch=20, seed=1))
    text = model_to_json(params, TrainConfig(epochs=5, batch=20, seed=1), layout="abc")
    back, meta = model_from_json(text)
    assert meta["layout_digest"] == "abc"
    assert meta["train_config"]["epochs"] == 5
    np.testing.assert_allclose(back.flat(), params.flat(), rtol=1e-8)
    np.testing.assert_allclose(back.mean, params.mean, rtol=1e-8)
    assert model_to_json(back, TrainConfig(epochs=5, batch=20, seed=1), layout="abc") == text
    with pytest.raises(ConfigError):
        model_from_json(text.replace('"schema_version": 1', '"schema_version": 9'))

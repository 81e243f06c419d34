from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpflcert.errors import FormatError, ShapeError, UsageError
from dpflcert.models import (LogisticModel, MLPModel, ModelParams, build_model, load_checkpoint,
                             save_checkpoint, sgd_step)

MODELS = [LogisticModel(4, 3), MLPModel(4, 5, 3)]


def _random_params(model, seed):
    rng = np.random.default_rng(seed)
    return model.zeros().with_flat(rng.standard_normal(model.n_params))


def _finite_difference(model, params, x, y, h=1e-6):
    out = np.zeros(model.n_params)
    for j in range(model.n_params):
        e = np.zeros(model.n_params)
        e[j] = h
        up = model.losses(params.with_flat(params.flat + e), x, y).mean()
        down = model.losses(params.with_flat(params.flat - e), x, y).mean()
        out[j] = (up - down) / (2 * h)
    return out


@pytest.mark.parametrize("model", MODELS, ids=["logistic", "mlp"])
def test_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(0)
    params = _random_params(model, 1)
    X = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    rec = model.grad(params, X, y)
    assert np.allclose(rec.batch_mean, _finite_difference(model, params, X, y), atol=1e-6)
    assert np.allclose(rec.per_example.mean(axis=0), rec.batch_mean, atol=1e-12)
    for i in range(6):
        single = model.grad(params, X[i:i + 1], y[i:i + 1], per_example=False).batch_mean
        assert np.allclose(rec.per_example[i], single, atol=1e-12)


@pytest.mark.parametrize("model", MODELS, ids=["logistic", "mlp"])
def test_confidences_are_distributions(model):
    params = _random_params(model, 2)
    conf = model.predict_confidence(params, np.random.default_rng(3).standard_normal((10, 4)))
    assert conf.shape == (10, 3)
    assert np.allclose(conf.sum(axis=1), 1.0)
    assert (conf >= 0).all()


def test_single_vector_confidence():
    model = LogisticModel(4, 3)
    params = _random_params(model, 0)
    x = np.ones(4)
    assert np.allclose(model.predict_confidence(params, x), model.predict_confidence(params, x[None])[0])


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50))
def test_softmax_shift_invariance(shift):
    model = LogisticModel(3, 4)
    params = _random_params(model, 7)
    bias = params.layer("bias")
    shifted = params.with_flat(np.concatenate([params.layer("weight").ravel(), bias + shift]))
    x = np.array([0.3, -1.0, 2.0])
    assert np.allclose(model.predict_confidence(params, x), model.predict_confidence(shifted, x), atol=1e-12)


def test_loss_floor():
    model = LogisticModel(1, 2)
    params = model.zeros().with_flat(np.array([1000.0, -1000.0, 0.0, 0.0]))
    assert model.loss(params, (np.array([1.0]), 1)) == pytest.approx(-np.log(1e-12))


def test_shape_errors():
    model = LogisticModel(4, 2)
    params = model.zeros()
    with pytest.raises(ShapeError):
        model.predict_confidence(params, np.ones(3))
    with pytest.raises(ShapeError):
        model.predict_confidence(MLPModel(4).init(0), np.ones(4))
    with pytest.raises(UsageError):
        model.grad(params, np.zeros((0, 4)), np.zeros(0, dtype=int))


def test_layers_are_contiguous_and_named():
    model = MLPModel(3, 4, 2)
    params = model.init(0)
    assert [s.name for s in params.layers] == ["hidden.weight", "hidden.bias", "out.weight", "out.bias"]
    assert params.layer("hidden.weight").shape == (4, 3)
    assert sum(s.length for s in params.layers) == len(params)
    with pytest.raises(ShapeError):
        ModelParams(np.zeros(3), params.layers)


def test_params_immutable():
    params = LogisticModel(2, 2).zeros()
    with pytest.raises(ValueError):
        params.flat[0] = 1.0


def test_mlp_init_seeded():
    m = MLPModel(3, 4, 2)
    assert np.array_equal(m.init(5).flat, m.init(5).flat)
    assert not np.array_equal(m.init(5).flat, m.init(6).flat)


def test_plain_sgd_step():
    params = LogisticModel(1, 2).zeros()
    g = np.array([1.0, -2.0, 0.5, 0.0])
    new, _ = sgd_step(params, g, 0.1)
    assert np.allclose(new.flat, -0.1 * g)
    assert np.array_equal(params.flat, np.zeros(4))


def test_momentum_matches_unrolled_recurrence():
    rng = np.random.default_rng(0)
    params = LogisticModel(2, 2).zeros()
    grads = rng.standard_normal((5, params.flat.size))
    lr, mu, wd = 0.05, 0.9, 0.01
    w, buf = params, None
    for g in grads:
        w, buf = sgd_step(w, g, lr, mu, wd, buf)
    # hand-unrolled torch.optim.SGD recurrence
    ref_w, ref_b = np.zeros(params.flat.size), None
    for g in grads:
        d = g + wd * ref_w
        ref_b = d if ref_b is None else mu * ref_b + d
        ref_w = ref_w - lr * ref_b
    assert np.allclose(w.flat, ref_w, atol=1e-15)


def test_checkpoint_round_trip(tmp_path):
    model = MLPModel(3, 4, 2)
    params = model.init(3)
    save_checkpoint(tmp_path / "m.ckpt", params, model)
    back, cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(back.flat, params.flat)
    assert back.layers == params.layers
    assert build_model(cfg).config() == model.config()


def test_checkpoint_corruption(tmp_path):
    model = LogisticModel(3, 2)
    save_checkpoint(tmp_path / "m.ckpt", model.zeros(), model)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError) as info:
        load_checkpoint(tmp_path / "t.ckpt")
    assert info.value.field == "payload"
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_build_model_unknown():
    with pytest.raises(UsageError):
        build_model({"arch": "cnn", "n_features": 2})

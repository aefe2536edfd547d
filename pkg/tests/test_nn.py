import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import grad_check, numeric_grad, rel_err
from qhefl import nn
from qhefl.data import Dataset
from qhefl.errors import ConfigError, ContractViolation, InputError, ParseError


def layer_check(layer, x, seed=0):
    """Worst relative error over the input gradient and every parameter gradient."""
    r = np.random.default_rng(seed)
    up = r.normal(size=layer.forward(x).shape)
    layer.zero_grad()
    dx = layer.backward(up)

    def f():
        return float(np.sum(layer.forward(x) * up))

    pairs = [(dx, numeric_grad(f, x))]
    pairs += [(layer.grads[k], numeric_grad(f, p)) for k, p in layer.params.items()]
    return grad_check(pairs)


def test_dense_identity():
    d = nn.Dense(3, 3)
    d.params["W"][...] = np.eye(3)
    d.params["b"][...] = 0
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(d.forward(x), x)
    with pytest.raises(ContractViolation):
        d.forward(np.zeros((2, 4)))


def test_conv_hand_sum_and_shape_errors():
    out = nn.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.tolist() == [[[[9.0]]]]
    with pytest.raises(ContractViolation):
        nn.conv2d_forward(np.ones((1, 2, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ContractViolation):
        nn.conv2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    K = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = nn.conv2d_forward(x, K, b)
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(x[n, :, i : i + 3, j : j + 3] * K[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_maxpool_values(rng):
    x = rng.normal(size=(1, 2, 5, 4))
    out, _ = nn.maxpool_forward(x, 2)
    assert out.shape == (1, 2, 2, 2)
    assert out[0, 1, 1, 0] == x[0, 1, 2:4, 0:2].max()


LAYERS = {
    "dense": lambda r: (nn.Dense(4, 3, r, "tanh"), r.normal(size=(5, 4))),
    "dense_relu": lambda r: (nn.Dense(3, 2, r, "relu"), r.normal(size=(4, 3))),
    "conv": lambda r: (nn.Conv2d(2, 3, 3, r, "tanh"), r.normal(size=(2, 2, 6, 5))),
    "pool": lambda r: (nn.MaxPool2d(2), r.normal(size=(2, 2, 6, 5))),
    "mha": lambda r: (nn.MultiHeadAttention(4, 2, r), r.normal(size=(3, 2, 4))),
    "quantum": lambda r: (nn.QuantumLayer(3, 2, r, init_scale=1.0), r.normal(size=(4, 3))),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_gradients_fifty_cases(name):
    worst = 0.0
    for seed in range(50):
        layer, x = LAYERS[name](np.random.default_rng(seed))
        if name == "mha":
            for p in layer.params.values():
                p += np.random.default_rng(seed + 99).normal(size=p.shape) * 0.3
        worst = max(worst, layer_check(layer, x, seed))
    assert worst <= 1e-5, worst


def test_mha_examples():
    d = 4
    p = {k: np.eye(d) if k.startswith("W") else np.zeros(d) for k in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}
    # orthogonal keys; the query equals key 1 scaled so the logit gap is >= 10
    keys = np.eye(d)[None]
    q = 20.0 * keys[:, 1:2]
    v = np.random.default_rng(0).normal(size=(1, d, d))
    out, cache = nn.mha_forward(q, keys, v, p, heads=1)
    assert cache["A"][0, 0, 0, 1] > 0.99
    np.testing.assert_allclose(out[0, 0], v[0, 1], atol=1e-3)
    same = np.ones((1, 3, d))
    out, cache = nn.mha_forward(np.random.default_rng(1).normal(size=(1, 2, d)), same, v[:, :3], p, heads=2)
    np.testing.assert_allclose(cache["A"], 1 / 3, atol=1e-15)
    np.testing.assert_allclose(out[0, 0], v[0, :3].mean(axis=0), atol=1e-12)
    with pytest.raises(ConfigError):
        nn.mha_forward(q, keys, v, p, heads=3)
    with pytest.raises(ConfigError):
        nn.MultiHeadAttention(6, 4)


def test_mha_cross_attention_gradients(rng):
    p = {}
    for nm in "qkvo":
        p["W" + nm] = rng.normal(size=(4, 4))
        p["b" + nm] = rng.normal(size=4)
    q, k, v = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
    out, cache = nn.mha_forward(q, k, v, p, 2)
    up = rng.normal(size=out.shape)
    dq, dk, dv, g = nn.mha_backward(up, cache, p)

    def f():
        return float(np.sum(nn.mha_forward(q, k, v, p, 2)[0] * up))

    pairs = [(ana, numeric_grad(f, arr)) for arr, ana in ((q, dq), (k, dk), (v, dv))]
    pairs += [(g[name], numeric_grad(f, p[name])) for name in p]
    assert grad_check(pairs) <= 1e-5


def test_softmax_and_cross_entropy():
    np.testing.assert_allclose(nn.softmax(np.full(5, 3.3)), 0.2, atol=1e-15)
    np.testing.assert_allclose(nn.softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-12)
    assert abs(nn.cross_entropy(np.full(4, 0.25), 2) - math.log(4)) < 1e-15


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_softmax_simplex(logits):
    p = nn.softmax(logits)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9


def test_softmax_xent_gradient(rng):
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, 6)
    _, g, _ = nn.softmax_xent(z, y)
    assert rel_err(g, numeric_grad(lambda: nn.softmax_xent(z, y)[0], z)) <= 1e-6


def test_optimizer_steps():
    w = np.array([1.0, -2.0])
    assert np.array_equal(nn.sgd_step(w, np.zeros(2), 0.1), w)
    assert nn.sgd_step(np.array([1.0]), np.array([0.5]), 0.1)[0] == pytest.approx(0.95, abs=1e-15)
    st_ = nn.AdamState(t=1)
    assert np.array_equal(nn.adam_step(w, np.zeros(2), 1e-3, st_), w)
    st_ = nn.AdamState(t=1)
    moved = nn.adam_step(np.array([1.0]), np.array([1.0]), 1e-3, st_)
    assert moved[0] - 1.0 == pytest.approx(-1e-3, rel=1e-6)
    with pytest.raises(ContractViolation):
        nn.sgd_step(w, np.zeros(3), 0.1)
    with pytest.raises(ContractViolation):
        nn.adam_step(w, np.zeros(3), 0.1, nn.AdamState(t=1))
    with pytest.raises(ContractViolation):
        nn.adam_step(w, w, 0.1, nn.AdamState())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        nn.TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        nn.TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        nn.TrainConfig(optimizer="rmsprop")


def toy_classifier(seed=0, quantum=False):
    r = np.random.default_rng(seed)
    layers = [nn.Dense(2, 3, r, "tanh")]
    layers += [nn.QuantumLayer(3, 1, r)] if quantum else []
    layers += [nn.Dense(3, 2, r)]
    return nn.Classifier(layers)


def separable(n=40, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x[:, 0] += np.where(y == 1, 0.5, -0.5)
    return Dataset({"x": x}, {"x": y})


def test_train_single_sample_decreases_loss():
    ds = separable().subset([0])
    model = toy_classifier(quantum=True)
    before, _ = model.evaluate(ds.features, ds.labels)
    nn.train_local(model, ds, nn.TrainConfig(lr=1e-3, epochs=1, batch_size=1))
    after, _ = model.evaluate(ds.features, ds.labels)
    assert after < before


def test_train_is_deterministic():
    ds = separable()
    cfg = nn.TrainConfig(epochs=3, batch_size=8, seed=5)
    a, ha = nn.train_local(toy_classifier(), ds, cfg)
    b, hb = nn.train_local(toy_classifier(), ds, cfg)
    assert np.array_equal(a.values, b.values) and ha == hb


def test_train_separable_reaches_full_accuracy():
    ds = separable()
    _, hist = nn.train_local(toy_classifier(), ds, nn.TrainConfig(lr=3e-2, epochs=25, batch_size=8))
    assert hist[-1]["accuracy"] == 1.0


def test_train_empty_dataset():
    with pytest.raises(InputError):
        nn.train_local(toy_classifier(), separable().subset([]), nn.TrainConfig())


def test_plateau_bumps_learning_rate():
    ds = separable()
    # a frozen model never improves its validation loss
    cfg = nn.TrainConfig(lr=1e-12, epochs=6, batch_size=40)
    _, hist = nn.train_local(toy_classifier(), ds, cfg, val=ds)
    assert [h["lr"] for h in hist][:4] == [1e-12] * 4
    assert hist[-1]["lr"] == cfg.plateau_lr


def test_flatten_load_roundtrip_and_manifest():
    a = toy_classifier(0, quantum=True)
    fw = nn.flatten_weights(a)
    assert len(fw) == sum(p.size for _, p, _ in a.named_parameters())
    b = toy_classifier(1, quantum=True)
    nn.load_weights(b, fw)
    assert np.array_equal(nn.flatten_weights(b).values, fw.values)
    other = nn.Classifier([nn.Dense(2, 4), nn.Dense(4, 2)])
    with pytest.raises(ContractViolation):
        nn.load_weights(other, fw)
    with pytest.raises(ContractViolation):
        nn.FlatWeights(np.zeros(3), fw.manifest)


def test_checkpoint_roundtrip(tmp_path):
    fw = nn.flatten_weights(toy_classifier(quantum=True))
    nn.save_checkpoint(tmp_path / "w.qwt", fw, seed=7, round_=3)
    back, meta = nn.load_checkpoint(tmp_path / "w.qwt")
    assert back.values.tobytes() == fw.values.tobytes()
    assert back.manifest == fw.manifest and meta == {"seed": 7, "round": 3}
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ParseError):
        nn.load_checkpoint(tmp_path / "bad")


def test_build_layers():
    r = np.random.default_rng(0)
    spec = [
        {"type": "conv2d", "channels": 2, "kernel": 3},
        {"type": "maxpool", "k": 2},
        {"type": "flatten"},
        {"type": "dense", "in": 8, "out": 3, "activation": "tanh"},
        {"type": "quantum", "d": 3, "L": 2},
    ]
    out = nn.Sequential(nn.build_layers(spec, r)).forward(r.normal(size=(2, 1, 6, 6)))
    assert out.shape == (2, 3) and np.all(np.abs(out) <= 1)
    with pytest.raises(ConfigError):
        nn.build_layers([{"type": "lstm"}], r)
    with pytest.raises(ConfigError):
        nn.build_layers([{"type": "mha", "d_model": 4, "heads": 2, "d_k": 3}], r)

import numpy as np
import pytest

from pqadv import nnet
from pqadv.errors import IoFailure, ManifestMismatch, ShapeMismatch
from pqadv.nnet import BN, FLATTEN, RELU, Adam, AdamConfig, NetworkModel, conv, dense, pool

L = 12
LAYER_NETS = {
    "conv1d": [conv(3, 3), FLATTEN, dense(4)],
    "conv1d_stride2": [conv(3, 3, 2), FLATTEN, dense(4)],
    "batchnorm": [conv(3, 3), BN, FLATTEN, dense(4)],
    "relu": [conv(3, 3), RELU, FLATTEN, dense(4)],
    "maxpool1d": [conv(3, 3), pool(2), FLATTEN, dense(4)],
    "flatten_dense": [FLATTEN, dense(5), RELU, dense(4)],
    "full_stack": [conv(4, 3), BN, RELU, pool(2), conv(3, 3), BN, RELU, pool(2), FLATTEN,
                   dense(6), RELU, dense(4)],
}


def rel_err(a, b):
    # the floor keeps exactly-zero gradients (e.g. a conv bias feeding batch norm) comparable
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-5)
    return np.linalg.norm(a - b) / denom


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def make_instance(specs, seed, train):
    rng = np.random.default_rng(seed)
    model = NetworkModel(specs, L, seed=seed, dtype=np.float64)
    for st in model.state:
        if "mean" in st:
            st["mean"] = rng.normal(0, 0.3, st["mean"].shape)
            st["var"] = rng.uniform(0.5, 2.0, st["var"].shape)
    for p in model.params:
        if "gamma" in p:
            p["gamma"] = rng.uniform(0.5, 1.5, p["gamma"].shape)
            p["beta"] = rng.normal(0, 0.2, p["beta"].shape)
    X = rng.normal(0, 1, (4, L))
    y = rng.integers(1, 5, 4)
    return model, X, y


@pytest.mark.parametrize("train", [True, False], ids=["train_mode", "eval_mode"])
@pytest.mark.parametrize("name", sorted(LAYER_NETS))
def test_finite_difference_gradients(name, train):
    for seed in range(20):
        model, X, y = make_instance(LAYER_NETS[name], seed, train)

        def loss():
            return model.loss_and_gradients(X, y, train=train)[0]

        _, grads, _ = model.loss_and_gradients(X, y, train=train)
        for p, g in zip(model.params, grads):
            for k in p:
                assert rel_err(g[k], numeric_grad(loss, p[k])) < 1e-4, (name, seed, k)

        # input gradient of the per-signal loss, summed over the batch
        dx = model.loss_input_gradient(X, y) if not train else None
        if dx is not None:
            num = numeric_grad(lambda: model.loss_and_gradients(X, y, train=False)[0] * len(X), X)
            assert rel_err(dx, num) < 1e-4, (name, seed)


def test_logit_jacobian_matches_single_gradients():
    model, X, _ = make_instance(LAYER_NETS["full_stack"], 3, False)
    logits, J = model.logit_jacobian(X)
    np.testing.assert_allclose(logits, model.logits(X))
    for i in range(len(X)):
        for k in range(1, 5):
            np.testing.assert_allclose(J[i, k - 1], model.input_gradient(X[i], k), atol=1e-12)
        xi = X[i:i + 1].copy()
        num = numeric_grad(lambda: model.logits(xi)[0, 2], xi)
        assert rel_err(J[i, 2], num[0]) < 1e-4


@pytest.mark.parametrize("scale", [1.0, 50.0, 1000.0])
def test_softmax_normalization(scale):
    z = np.random.default_rng(0).normal(0, scale, (100, 17))
    p = nnet.softmax(z)
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-9


def test_cross_entropy_hand_values():
    loss, d = nnet.cross_entropy(np.zeros((2, 4)), np.array([1, 3]))
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(d, (np.full((2, 4), 0.25) - np.eye(4)[[0, 2]]) / 2)
    with pytest.raises(ValueError):
        nnet.cross_entropy(np.zeros((1, 4)), np.array([5]))


def test_adam_first_step_is_lr_times_sign():
    model = NetworkModel([FLATTEN, dense(3)], 4, seed=0, dtype=np.float64)
    before = model.params[1]["W"].copy()
    g = {"W": np.array([[2.0, -3.0, 0.5, -0.1]] * 3), "b": np.array([1.0, -1.0, 0.2])}
    Adam(model, AdamConfig(lr=0.01)).step(model, [{}, g])
    # bias-corrected m/sqrt(v) equals sign(g) on the first step
    np.testing.assert_allclose(before - model.params[1]["W"], 0.01 * np.sign(g["W"]), rtol=1e-6)


def test_adam_hand_two_steps():
    model = NetworkModel([FLATTEN, dense(1)], 1, seed=0, dtype=np.float64)
    w0 = model.params[1]["W"][0, 0]
    opt = Adam(model, AdamConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8))
    opt.step(model, [{}, {"W": np.array([[1.0]]), "b": np.array([0.0])}])
    opt.step(model, [{}, {"W": np.array([[3.0]]), "b": np.array([0.0])}])
    m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    step2 = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    step1 = 0.1 * 1.0 / (1.0 + 1e-8)
    assert model.params[1]["W"][0, 0] == pytest.approx(w0 - step1 - step2, rel=1e-12)


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
    with pytest.raises(ValueError):
        AdamConfig(lr=0)


def test_batchnorm_running_stats_update():
    model = NetworkModel([conv(2, 1), BN, FLATTEN, dense(2)], 6, seed=0, dtype=np.float64)
    X = np.random.default_rng(1).normal(2.0, 3.0, (5, 6))
    h, _ = model._forward(X, stop=0)
    model.loss_and_gradients(X, np.ones(5, dtype=int), train=True, update_stats=True)
    flat = h.reshape(-1, 2)
    np.testing.assert_allclose(model.state[1]["mean"], 0.1 * flat.mean(axis=0))
    np.testing.assert_allclose(model.state[1]["var"], 0.9 + 0.1 * flat.var(axis=0, ddof=1))


def test_default_architecture_shapes():
    model = NetworkModel()
    assert model.n_classes == 17
    flat = [s for s, spec in zip(model.shapes, model.specs) if spec.kind == "dense"][0]
    assert flat == (1280,)
    assert model.features(np.zeros((2, 640))).shape == (2, 128)
    pred = model.predict(np.random.default_rng(0).normal(size=(3, 640)))
    assert pred.min() >= 1 and pred.max() <= 17


def test_wrong_length_input():
    with pytest.raises(ShapeMismatch):
        NetworkModel().predict(np.zeros(639))


def test_training_reduces_loss_on_separable_data():
    rng = np.random.default_rng(0)
    y = np.repeat([1, 2, 3], 30)
    X = rng.normal(0, 0.3, (90, 16)) + np.eye(3)[y - 1].repeat(16 // 3 + 1, axis=1)[:, :16] * 2
    model = NetworkModel([conv(4, 3), BN, RELU, pool(2), FLATTEN, dense(3)], 16, seed=0)
    model, trace = nnet.train(model, X, y, AdamConfig(lr=1e-2, batch_size=16, epochs=8),
                              seed=0, X_test=X, y_test=y)
    assert trace[-1]["loss"] < trace[0]["loss"]
    assert trace[-1]["test_acc"] > 0.9


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(40, 16)), rng.integers(1, 4, 40)
    specs = [conv(2, 3), BN, RELU, FLATTEN, dense(3)]
    a = nnet.train(NetworkModel(specs, 16, seed=1), X, y, AdamConfig(batch_size=8, epochs=2))[0]
    b = nnet.train(NetworkModel(specs, 16, seed=1), X, y, AdamConfig(batch_size=8, epochs=2))[0]
    assert a.digest() == b.digest()


def test_save_load_round_trip(tmp_path):
    model = NetworkModel(seed=3)
    X = np.random.default_rng(0).normal(size=(4, 640))
    model.training_config = {"note": "x"}
    nnet.save_model(model, tmp_path / "m.pqm")
    back = nnet.load_model(tmp_path / "m.pqm")
    assert back.digest() == model.digest()
    np.testing.assert_array_equal(back.logits(X), model.logits(X))
    raw = (tmp_path / "m.pqm").read_bytes()
    assert raw[:4] == b"PQM1"


def test_load_truncated_and_corrupt(tmp_path):
    model = NetworkModel([FLATTEN, dense(3)], 8)
    path = tmp_path / "m.pqm"
    nnet.save_model(model, path)
    raw = path.read_bytes()
    (tmp_path / "t.pqm").write_bytes(raw[:-5])
    with pytest.raises(ManifestMismatch):
        nnet.load_model(tmp_path / "t.pqm")
    (tmp_path / "h.pqm").write_bytes(raw[:20])
    with pytest.raises(ManifestMismatch):
        nnet.load_model(tmp_path / "h.pqm")
    (tmp_path / "b.pqm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ManifestMismatch):
        nnet.load_model(tmp_path / "b.pqm")
    with pytest.raises(IoFailure):
        nnet.load_model(tmp_path / "missing.pqm")


def test_load_shape_mismatch(tmp_path):
    import json
    import struct
    model = NetworkModel([FLATTEN, dense(3)], 8)
    path = tmp_path / "m.pqm"
    nnet.save_model(model, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[4:12])
    manifest = json.loads(raw[12:12 + hlen])
    manifest["specs"][1]["size"] = 4
    header = json.dumps(manifest).encode()
    path.write_bytes(raw[:4] + struct.pack("<Q", len(header)) + header + raw[12 + hlen:])
    with pytest.raises(ManifestMismatch):
        nnet.load_model(path)

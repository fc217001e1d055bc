import numpy as np
import pytest

from flowmend import nn
from flowmend.classifier import (
    CNNConfig, accuracy, build_classifier, load_classifier, logits_batch, predict, predict_batch,
    train_classifier,
)
from flowmend.flow_core import FlowField
from flowmend.reconstructor import ConfigError
from oracles import check_grads


def tiny_cfg(**kw):
    base = dict(input_size=16, channels=(4, 4, 4), hidden=16, epochs=10, batch=8, lr=1e-2)
    return CNNConfig(**{**base, **kw})


def separable(n_per_class, seed, size=16, noise=0.3):
    """Six classes of uniform motion, 60 degrees apart, plus white noise."""
    rng = np.random.default_rng(seed)
    out = []
    for c in range(6):
        ang = np.pi / 3 * c
        for _ in range(n_per_class):
            f = np.empty((2, size, size))
            f[0], f[1] = 2 * np.cos(ang), 2 * np.sin(ang)
            out.append((f + rng.normal(0, noise, f.shape), c))
    return out


def test_separable_classes_learned():
    model, hist = train_classifier(tiny_cfg(epochs=50), separable(10, 0), separable(2, 1))
    assert max(hist.val_accuracy) >= 0.95
    assert accuracy(model, separable(2, 1)) == max(hist.val_accuracy)


def test_single_sample_overfits():
    sample = separable(1, 0)[3:4]
    model, _ = train_classifier(tiny_cfg(epochs=30), sample)
    assert accuracy(model, sample) == 1.0


def test_deterministic_history():
    data = separable(2, 0)
    _, h1 = train_classifier(tiny_cfg(epochs=3), data, data[:4])
    _, h2 = train_classifier(tiny_cfg(epochs=3), data, data[:4])
    assert h1.rows() == h2.rows()


def test_best_snapshot_selection():
    train, val = separable(3, 0), separable(1, 5, noise=3.0)
    model, hist = train_classifier(tiny_cfg(epochs=8), train, val)
    best = max(hist.val_accuracy)
    ties = [i for i, a in enumerate(hist.val_accuracy) if a == best]
    pick = min(ties, key=lambda i: hist.val_loss[i])
    assert hist.best_epoch == pick + 1
    assert accuracy(model, val) == best


def test_train_errors():
    with pytest.raises(ValueError):
        train_classifier(tiny_cfg(), [])
    with pytest.raises(ValueError):
        train_classifier(tiny_cfg(), [(np.zeros((2, 16, 16)), 6)])
    with pytest.raises(ValueError):
        train_classifier(tiny_cfg(), [(np.zeros((2, 8, 8)), 0)])


def test_predict_is_distribution():
    model = build_classifier(tiny_cfg())
    for seed in range(5):
        f = np.random.default_rng(seed).normal(size=(2, 16, 16))
        cls, probs = predict(model, f)
        assert probs.shape == (6,) and abs(probs.sum() - 1) < 1e-12 and np.all(probs >= 0)
        assert cls == int(np.argmax(probs))
        assert predict(model, FlowField.from_array(f))[0] == cls
    with pytest.raises(ValueError):
        predict(model, np.zeros((2, 8, 8)))


def test_argmax_invariant_under_logit_shift():
    model = build_classifier(tiny_cfg())
    x = np.random.default_rng(0).normal(size=(7, 2, 16, 16))
    logits = logits_batch(model, x)
    for c in (-50.0, 0.5, 1e3):
        assert np.array_equal((logits + c).argmax(1), logits.argmax(1))
        np.testing.assert_allclose(nn.softmax(logits + c), nn.softmax(logits), rtol=1e-9, atol=1e-15)
    assert np.array_equal(predict_batch(model, x), logits.argmax(1))


def test_accuracy_hand_count_and_duplication():
    model = build_classifier(tiny_cfg())
    flows = [np.random.default_rng(s).normal(size=(2, 16, 16)) for s in range(5)]
    pred = predict_batch(model, np.stack(flows))
    labels = [int(pred[0]), int(pred[1]), (int(pred[2]) + 1) % 6, int(pred[3]), (int(pred[4]) + 2) % 6]
    test = list(zip(flows, labels))
    assert accuracy(model, test) == 3 / 5
    assert accuracy(model, test + test) == accuracy(model, test)
    assert accuracy(model, [(f, int(p)) for f, p in zip(flows, pred)]) == 1.0
    with pytest.raises(ValueError):
        accuracy(model, [])


def test_end_to_end_gradient():
    model = build_classifier(CNNConfig(input_size=8, channels=(2, 2, 2), hidden=3, seed=4))
    x = np.random.default_rng(2).normal(size=(2, 2, 8, 8))
    assert check_grads(lambda t: nn.softmax_cross_entropy(model(t), [1, 4]), [x]) < 1e-4
    w = model.layers["conv1"].weight
    orig = w.data.copy()

    def with_weight(wt):
        model.layers["conv1"].weight = wt
        try:
            return nn.softmax_cross_entropy(model(x), [1, 4])
        finally:
            model.layers["conv1"].weight = w

    assert check_grads(with_weight, [orig]) < 1e-4


@pytest.mark.parametrize("bad", [dict(channels=(1, 2)), dict(n_classes=7), dict(input_size=20),
                                 dict(hidden=0), dict(dtype="int8"), dict(flow_scale=-1)])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        CNNConfig(**bad)
    with pytest.raises(ConfigError):
        CNNConfig.from_dict({"depth": 4})


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_checkpoint_roundtrip(tmp_path, dtype):
    model, _ = train_classifier(tiny_cfg(epochs=1, dtype=dtype), separable(1, 0))
    model.save(tmp_path / "cnn.ckpt")
    back = load_classifier(tmp_path / "cnn.ckpt")
    assert back.cfg == model.cfg and back.dtype == np.dtype(dtype)
    x = np.random.default_rng(0).normal(size=(3, 2, 16, 16))
    assert np.array_equal(logits_batch(back, x.astype(dtype)), logits_batch(model, x.astype(dtype)))
    nn.save_checkpoint(tmp_path / "ae.ckpt", {}, {"kind": "autoencoder", "config": {}})
    with pytest.raises(nn.CheckpointError):
        load_classifier(tmp_path / "ae.ckpt")

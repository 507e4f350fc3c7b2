import numpy as np
import pytest

from latent_augment.datasets import ENCODED, FeatureDataset, MixtureSpec, generate_mixture, longtail_counts
from latent_augment.encoder import (EncoderNet, Stage1Config, classify, encode_dataset, encoder_bytes, load_encoder,
                                    save_encoder, train_stage1)
from latent_augment.errors import ConfigError, FormatError, ShapeError
from latent_augment.nn import Layer, Mlp, finite_difference, relative_error, softmax_cross_entropy
from latent_augment.rng import Rng


def _separable(seed=0):
    spec = MixtureSpec(np.array([[4.0, 0.0, 0.0], [-4.0, 0.0, 0.0]]), 0.3)
    return spec, generate_mixture(spec, [60, 40], np.random.default_rng(seed))


def _identity_net(d, k):
    trunk = Mlp([Layer(np.eye(d), np.zeros(d), "identity")])
    head = Mlp([Layer(np.zeros((d, k)), np.zeros(k))])
    return EncoderNet(trunk, head)


def test_separable_fixture_reaches_full_accuracy():
    _, raw = _separable()
    # margin oracle: the plane x0 = 0 separates the two classes with room to spare
    side = np.where(raw.labels == 0, 1.0, -1.0)
    assert np.min(side * raw.features[:, 0]) > 1.0
    net, report = train_stage1(raw, Stage1Config(hidden=[8], latent_dim=4, epochs=30, batch_size=16), Rng(0))
    assert report.final_accuracy == 1.0
    assert len(report.losses) == 30
    pred, _ = classify(net, np.array([[4.0, 0, 0], [-4.0, 0, 0]]))
    assert pred.tolist() == [0, 1]


def test_zero_epochs_is_initialization():
    _, raw = _separable()
    cfg = Stage1Config(hidden=[8], latent_dim=4, epochs=0)
    net, report = train_stage1(raw, cfg, Rng(7))
    init = EncoderNet.init(3, [8], 4, 2, Rng(7).generator("init"))
    assert report.losses == []
    assert encoder_bytes(net) == encoder_bytes(init)


@pytest.mark.parametrize("seed", range(5))
def test_loss_decreases_on_default_data(seed):
    gen = np.random.default_rng(seed)
    spec = MixtureSpec.on_sphere(10, 16, 1.0, 3.0, gen)
    raw = generate_mixture(spec, longtail_counts(10, 500, 100), gen)
    _, report = train_stage1(raw, Stage1Config(epochs=10), Rng(seed))
    assert report.losses[-1] < report.losses[0]


def test_empty_class_rejected():
    raw = FeatureDataset(np.zeros((3, 2)), [0, 0, 2], [0, 0, 0], 3)
    with pytest.raises(ConfigError):
        train_stage1(raw, Stage1Config(), Rng(0))


def test_same_seed_same_parameters():
    _, raw = _separable()
    cfg = Stage1Config(hidden=[8], latent_dim=4, epochs=3, batch_size=16, dropout=0.2)
    a, _ = train_stage1(raw, cfg, Rng(11))
    b, _ = train_stage1(raw, cfg, Rng(11))
    assert encoder_bytes(a) == encoder_bytes(b)


def test_classifier_gradients():
    # CE through head and trunk, checked against central differences
    gen = np.random.default_rng(4)
    net = EncoderNet.init(5, [7], 3, 4, gen)
    x = gen.normal(size=(6, 5))
    y = gen.integers(0, 4, 6)

    def loss():
        return softmax_cross_entropy(net.logits(x), y)[0]

    z, tc = net.trunk.forward_cached(x)
    logits, hc = net.head.forward_cached(z)
    _, dlogits = softmax_cross_entropy(logits, y)
    hg, dz = net.head.backward(hc, dlogits)
    tg, _ = net.trunk.backward(tc, dz)
    for p, g in zip(net.trunk.params() + net.head.params(), tg + hg):
        assert relative_error(g, finite_difference(loss, p)) < 1e-4


class TestEncode:
    def test_identity_trunk(self):
        raw = generate_mixture(MixtureSpec(np.eye(3), 1.0), [2, 3, 1], np.random.default_rng(0))
        enc = encode_dataset(_identity_net(3, 3), raw)
        assert np.array_equal(enc.features, raw.features)
        assert np.array_equal(enc.labels, raw.labels)
        assert np.all(enc.provenance == ENCODED)

    def test_counts_and_determinism(self):
        _, raw = _separable()
        net = EncoderNet.init(3, [8], 4, 2, np.random.default_rng(1))
        a, b = encode_dataset(net, raw), encode_dataset(net, raw)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.class_counts().tolist() == raw.class_counts().tolist()

    def test_dim_mismatch(self):
        net = EncoderNet.init(3, [8], 4, 2, np.random.default_rng(1))
        with pytest.raises(ShapeError):
            encode_dataset(net, FeatureDataset.empty(5, 2))
        with pytest.raises(ShapeError):
            classify(net, np.zeros((2, 5)))


class TestClassify:
    def test_scores_sum_to_one(self):
        net = EncoderNet.init(3, [8], 4, 5, np.random.default_rng(2))
        _, scores = classify(net, np.random.default_rng(3).normal(size=(20, 3)) * 10)
        assert np.all(np.abs(scores.sum(axis=1) - 1) < 1e-12)

    def test_shift_and_temperature_invariance(self):
        net = EncoderNet.init(3, [8], 4, 5, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(20, 3))
        pred, _ = classify(net, x)
        shifted = net.copy()
        shifted.head.layers[-1].bias += 7.5
        assert np.array_equal(classify(shifted, x)[0], pred)
        scaled = net.copy()
        scaled.head.layers[-1].weight *= 0.1
        scaled.head.layers[-1].bias *= 0.1
        assert np.array_equal(classify(scaled, x)[0], pred)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        net = EncoderNet.init(3, [8, 6], 4, 2, np.random.default_rng(1))
        net.fingerprint = "f" * 64
        save_encoder(net, tmp_path / "e.ldmn")
        back = load_encoder(tmp_path / "e.ldmn")
        assert encoder_bytes(back) == (tmp_path / "e.ldmn").read_bytes()
        assert len(back.trunk.layers) == 3 and len(back.head.layers) == 1
        assert back.fingerprint == net.fingerprint

    def test_wrong_kind(self, tmp_path):
        from latent_augment import modelio
        modelio.save(tmp_path / "x.ldmn", [Layer(np.eye(2), np.zeros(2))], {b"KIND": b"predictor"})
        with pytest.raises(FormatError):
            load_encoder(tmp_path / "x.ldmn")

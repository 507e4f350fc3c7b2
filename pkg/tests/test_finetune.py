import math

import numpy as np
import pytest

from latent_augment.datasets import ENCODED, GENERATED, FeatureDataset
from latent_augment.encoder import EncoderNet, encoder_bytes
from latent_augment.errors import ConfigError, ShapeError
from latent_augment.finetune import FinetuneConfig, finetune_head, loss_ft
from latent_augment.rng import Rng

# (1 + 0.05) * ln 4, mpmath at 50 digits
UNIFORM_K4 = 1.4556090791758851498


def _ce_oracle(logits, labels):
    total = 0.0
    for row, y in zip(logits.tolist(), labels):
        m = max(row)
        total += math.log(math.fsum(math.exp(v - m) for v in row)) - (row[y] - m)
    return total / len(labels)


def _mixed(n_enc=90, n_gen=25, k=4, c=5, seed=0):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n_enc + n_gen, c))
    y = gen.integers(0, k, n_enc + n_gen)
    prov = np.array([ENCODED] * n_enc + [GENERATED] * n_gen)
    return FeatureDataset(x, y, prov, k)


def _net(seed=1):
    return EncoderNet.init(3, [6], 5, 4, np.random.default_rng(seed))


def _dist(a, b):
    return max(float(np.max(np.abs(p - q))) for p, q in zip(a.head.params(), b.head.params()))


class TestLoss:
    def test_uniform(self):
        z = np.zeros((3, 4))
        assert loss_ft(z, [0, 1, 2], z[:2], [3, 3], 0.05) == pytest.approx(UNIFORM_K4, rel=1e-14)

    def test_empty_generated(self):
        gen = np.random.default_rng(0)
        logits, labels = gen.normal(size=(6, 4)), gen.integers(0, 4, 6)
        assert loss_ft(logits, labels, np.zeros((0, 4)), [], 0.3) == pytest.approx(_ce_oracle(logits, labels),
                                                                                   rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        gen = np.random.default_rng(seed)
        le, ye = gen.normal(size=(7, 5)) * 3, gen.integers(0, 5, 7)
        lg, yg = gen.normal(size=(4, 5)) * 3, gen.integers(0, 5, 4)
        want = _ce_oracle(le, ye) + 0.05 * _ce_oracle(lg, yg)
        assert abs(loss_ft(le, ye, lg, yg, 0.05) - want) <= 1e-12 * want

    def test_linear_in_gamma(self):
        gen = np.random.default_rng(1)
        args = (gen.normal(size=(5, 3)), [0, 1, 2, 0, 1], gen.normal(size=(4, 3)), [2, 2, 1, 0])
        l0, l1, l2 = (loss_ft(*args, g) for g in (0.0, 1.0, 2.0))
        assert abs((l2 - l1) - (l1 - l0)) < 1e-12

    def test_errors(self):
        with pytest.raises(ConfigError):
            loss_ft(np.zeros((1, 2)), [0], np.zeros((1, 2)), [0], -1)
        with pytest.raises(ValueError):
            loss_ft(np.zeros((1, 2)), [2], np.zeros((0, 2)), [], 0.1)


class TestFinetune:
    cfg = FinetuneConfig(gamma=0.05, lr=5e-3, epochs=15, batch_size=16)

    def test_trunk_frozen_and_head_moves(self):
        net = _net()
        out, report = finetune_head(net, _mixed(), self.cfg, Rng(0))
        assert encoder_bytes(EncoderNet(out.trunk, net.head)) == encoder_bytes(net)
        assert _dist(out, net) > 0
        assert len(report.losses) == 15
        # the input network is left alone
        assert encoder_bytes(net) == encoder_bytes(_net())

    def test_gamma_zero_matches_no_generated(self):
        mixed = _mixed()
        enc_only = mixed.with_provenance(ENCODED)
        cfg0 = FinetuneConfig(gamma=0.0, lr=5e-3, epochs=15, batch_size=16)
        a, _ = finetune_head(_net(), mixed, cfg0, Rng(2))
        b, _ = finetune_head(_net(), enc_only, cfg0, Rng(2))
        assert _dist(a, b) <= 1e-12

    def test_no_generated_is_plain_ce(self):
        # generated-free data: the gamma value cannot matter
        enc_only = _mixed(n_gen=0)
        a, _ = finetune_head(_net(), enc_only, self.cfg, Rng(3))
        b, _ = finetune_head(_net(), enc_only, FinetuneConfig(0.9, 5e-3, 15, 16), Rng(3))
        assert encoder_bytes(a) == encoder_bytes(b)

    def test_gamma_changes_result(self):
        a, _ = finetune_head(_net(), _mixed(), self.cfg, Rng(3))
        b, _ = finetune_head(_net(), _mixed(), FinetuneConfig(1.0, 5e-3, 15, 16), Rng(3))
        assert _dist(a, b) > 1e-6

    def test_reproducible(self):
        a, _ = finetune_head(_net(), _mixed(), self.cfg, Rng(4))
        b, _ = finetune_head(_net(), _mixed(), self.cfg, Rng(4))
        assert encoder_bytes(a) == encoder_bytes(b)

    def test_loss_decreases(self):
        _, report = finetune_head(_net(), _mixed(), FinetuneConfig(0.05, 1e-2, 40, 16), Rng(0))
        assert report.losses[-1] < report.losses[0]

    def test_errors(self):
        with pytest.raises(ShapeError):
            finetune_head(_net(), _mixed(c=4), self.cfg, Rng(0))
        with pytest.raises(ConfigError):
            FinetuneConfig(gamma=-0.1)

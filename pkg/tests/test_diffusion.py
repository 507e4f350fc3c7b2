import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_augment.datasets import ENCODED, GENERATED, FeatureDataset, MixtureSpec, generate_mixture
from latent_augment.diffusion import (DiffusionConfig, NoisePredictor, SamplerSpec, ddim_sigma, ddim_step,
                                      ddpm_posterior_std, denoising_mse, forward_perturb, load_predictor,
                                      make_schedule, predictor_bytes, sample_features, save_predictor,
                                      timestep_embedding, train_ldm)
from latent_augment.errors import ArtifactError, ConfigError, ShapeError
from latent_augment.nn import finite_difference, relative_error
from latent_augment.rng import Rng

# prod_{s=1}^{1000} (1 - beta_s), mpmath at 50 digits
ALPHA_BAR_T = 4.0358297653756833148e-5


def _encoded(ds):
    return FeatureDataset(ds.features, ds.labels, np.full(len(ds), ENCODED), ds.num_classes)


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.5, 0.5)
        assert s.alpha_bar.tolist() == [1.0, 0.5]

    def test_default_terminal(self):
        s = make_schedule(1000)
        assert s.alpha_bar[1000] == pytest.approx(ALPHA_BAR_T, rel=1e-10)
        assert s.alpha_bar[1000] < 0.01
        assert s.beta[0] == 1e-4 and s.beta[-1] == 0.02

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 400), st.floats(1e-5, 0.5), st.floats(0, 0.49))
    def test_monotone(self, T, lo, extra):
        s = make_schedule(T, lo, min(lo + extra, 0.999))
        assert s.alpha_bar[0] == 1.0
        assert np.all(np.diff(s.alpha_bar) < 0)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            make_schedule(*args)

    def test_kind(self):
        with pytest.raises(ConfigError):
            make_schedule(10, kind="cosine")

    def test_read_only(self):
        with pytest.raises(ValueError):
            make_schedule(10).alpha_bar[1] = 0.0


class TestForward:
    def test_small_beta_limit(self):
        s = make_schedule(10, 1e-12, 1e-12)
        z0 = np.array([1.0, -2.0])
        np.testing.assert_allclose(forward_perturb(s, z0, 1, np.zeros(2)), z0, rtol=1e-11)

    def test_step_range(self):
        s = make_schedule(10)
        for t in (0, 11):
            with pytest.raises(ValueError):
                forward_perturb(s, np.zeros(2), t, np.zeros(2))
        with pytest.raises(ShapeError):
            forward_perturb(s, np.zeros(2), 1, np.zeros(3))

    def test_per_row_steps(self):
        s = make_schedule(100)
        z0 = np.ones((3, 2))
        eps = np.zeros((3, 2))
        out = forward_perturb(s, z0, np.array([1, 50, 100]), eps)
        np.testing.assert_allclose(out[:, 0], np.sqrt(s.alpha_bar[[1, 50, 100]]))

    def test_superposition(self):
        s = make_schedule(1000)
        gen = np.random.default_rng(0)
        a, b, e1, e2 = (gen.normal(size=(5, 3)) for _ in range(4))
        lhs = forward_perturb(s, 2 * a + 3 * b, 400, 2 * e1 + 3 * e2)
        rhs = 2 * forward_perturb(s, a, 400, e1) + 3 * forward_perturb(s, b, 400, e2)
        assert relative_error(lhs, rhs, floor=1e-300) < 1e-12


class TestDdim:
    sched = make_schedule(1000)

    def test_perfect_predictor_lands_on_forward(self):
        gen = np.random.default_rng(1)
        z0 = gen.normal(size=(4, 6))
        eps = gen.normal(size=(4, 6))
        for t, t_prev in [(1000, 998), (500, 250), (10, 0), (2, 1)]:
            zt = forward_perturb(self.sched, z0, t, eps)
            got = ddim_step(self.sched, lambda *_: eps, zt, t, t_prev, 0, eta=0.0)
            want = forward_perturb(self.sched, z0, t_prev, eps) if t_prev else z0
            assert relative_error(got, want, floor=1e-300) < 1e-10

    def test_eta_one_matches_ddpm(self):
        for t in range(2, 1001):
            assert abs(ddim_sigma(self.sched, t, t - 1, 1.0) - ddpm_posterior_std(self.sched, t)) < 1e-12

    def test_deterministic(self):
        pred = NoisePredictor.init(3, 2, [8], 4, 2, np.random.default_rng(0))
        z = np.random.default_rng(1).normal(size=(5, 3))
        a = ddim_step(self.sched, pred, z, 700, 600, 1)
        b = ddim_step(self.sched, pred, z, 700, 600, 1)
        assert a.tobytes() == b.tobytes()

    def test_noise_term(self):
        z = np.zeros((2, 3))
        noise = np.ones((2, 3))
        sigma = ddim_sigma(self.sched, 700, 600, 0.5)
        zero_eps = ddim_step(self.sched, lambda *_: np.zeros((2, 3)), z, 700, 600, 0, 0.5, noise)
        np.testing.assert_allclose(zero_eps, sigma * noise, rtol=1e-14)
        with pytest.raises(ValueError):
            ddim_step(self.sched, lambda *_: np.zeros((2, 3)), z, 700, 600, 0, 0.5)

    def test_order(self):
        with pytest.raises(ValueError):
            ddim_step(self.sched, lambda *_: 0, np.zeros(2), 5, 5, 0)
        with pytest.raises(ValueError):
            ddim_step(self.sched, lambda *_: 0, np.zeros(2), 1001, 5, 0)
        with pytest.raises(ValueError):
            ddim_step(self.sched, lambda *_: 0, np.zeros(2), 5, 1, 0, eta=-1)


class TestSamplerSpec:
    def test_uniform(self):
        spec = SamplerSpec.uniform(1000, 500)
        assert len(spec.steps) == 500 and spec.steps[0] == 2 and spec.steps[-1] == 1000
        assert SamplerSpec.uniform(10, 50).steps == tuple(range(1, 11))

    def test_validate(self):
        s = make_schedule(10)
        with pytest.raises(ConfigError):
            SamplerSpec((3, 2, 10)).validate(s)
        with pytest.raises(ConfigError):
            SamplerSpec((3, 9)).validate(s)


class TestPredictor:
    def test_layout(self):
        pred = NoisePredictor.init(5, 3, [8, 8], 6, 4, np.random.default_rng(0))
        assert pred.core.dims[0] == 5 + 6 + 4 and pred.core.dims[-1] == 5
        assert pred(np.zeros((2, 5)), [1, 2], [0, 2]).shape == (2, 5)
        with pytest.raises(ValueError):
            pred(np.zeros((1, 5)), 1, 3)

    def test_time_embedding(self):
        emb = timestep_embedding([0, 5], 6)
        assert emb.shape == (2, 6)
        np.testing.assert_array_equal(emb[0], [0, 0, 0, 1, 1, 1])
        assert timestep_embedding([3], 5).shape == (1, 5)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        gen = np.random.default_rng(seed)
        pred = NoisePredictor.init(3, 4, [6], 4, 2, gen)
        z = gen.normal(size=(5, 3))
        t = gen.integers(1, 100, 5)
        y = np.array([0, 1, 1, 3, 0])
        eps = gen.normal(size=(5, 3))
        _, grads = pred.loss_and_grads(z, t, y, eps)
        for p, g in zip(pred.params(), grads):
            num = finite_difference(lambda: pred.loss_and_grads(z, t, y, eps)[0], p)
            assert relative_error(g, num) < 1e-4
        assert not grads[-1][2].any()  # class 2 unused


class TestTraining:
    sched = make_schedule(1000)

    def _data(self, seed, k=10):
        gen = np.random.default_rng(seed)
        spec = MixtureSpec.on_sphere(k, 16, 1.0, 3.0, gen)
        return _encoded(generate_mixture(spec, [60] * k, gen)), _encoded(generate_mixture(spec, [20] * k, gen))

    def test_zero_epochs_is_initialization(self):
        train, _ = self._data(0, 3)
        cfg = DiffusionConfig(hidden=[8], epochs=0)
        pred, report = train_ldm(train, self.sched, cfg, Rng(5))
        init = NoisePredictor.init(16, 3, [8], 32, 16, Rng(5).generator("init"))
        assert report.losses == []
        for a, b in zip(pred.params(), init.params()):
            assert np.array_equal(a, b)

    def test_one_class_dataset(self):
        ds = FeatureDataset(np.random.default_rng(0).normal(size=(20, 3)), [1] * 20, [ENCODED] * 20, 4)
        pred, report = train_ldm(ds, self.sched, DiffusionConfig(hidden=[8], epochs=2), Rng(0))
        assert pred.class_table.shape[0] == 4 and len(report.losses) == 2

    def test_rejects_bad_input(self):
        with pytest.raises(ConfigError):
            train_ldm(FeatureDataset.empty(3, 2), self.sched, DiffusionConfig(), Rng(0))
        raw = FeatureDataset(np.zeros((2, 3)), [0, 1], [0, 0], 2)
        with pytest.raises(ConfigError):
            train_ldm(raw, self.sched, DiffusionConfig(), Rng(0))

    @pytest.mark.parametrize("seed", range(5))
    def test_heldout_mse_halves(self, seed):
        train, held = self._data(seed)
        cfg = DiffusionConfig(epochs=60)
        init, _ = train_ldm(train, self.sched, DiffusionConfig(epochs=0), Rng(seed))
        pred, report = train_ldm(train, self.sched, cfg, Rng(seed))
        before = denoising_mse(init, self.sched, held, np.random.default_rng(99))
        after = denoising_mse(pred, self.sched, held, np.random.default_rng(99))
        assert after < 0.5 * before
        assert report.losses[-1] < report.losses[0]


class TestSampling:
    sched = make_schedule(1000)

    def test_contract_and_determinism(self):
        pred = NoisePredictor.init(3, 2, [8], 4, 2, np.random.default_rng(0))
        spec = SamplerSpec.uniform(1000, 20, 0.0, seed=4)
        a = sample_features(self.sched, pred, spec, [0, 1, 1])
        b = sample_features(self.sched, pred, spec, [0, 1, 1])
        assert len(a) == 3 and a.dim == 3 and np.all(a.provenance == GENERATED)
        assert a.same_records(b)
        assert len(sample_features(self.sched, pred, spec, [])) == 0

    @pytest.mark.parametrize("eta", [0.0, 1.0])
    def test_chunking_does_not_matter(self, eta):
        pred = NoisePredictor.init(3, 2, [8], 4, 2, np.random.default_rng(0))
        spec = SamplerSpec.uniform(1000, 15, eta, seed=2)
        labels = [0, 1, 0, 1, 1, 0, 0]
        whole = sample_features(self.sched, pred, spec, labels)
        chunked = sample_features(self.sched, pred, spec, labels, chunk=3)
        head = sample_features(self.sched, pred, spec, labels[:4])
        # noise streams are per sample; only BLAS blocking may move the last ulp
        assert relative_error(chunked.features, whole.features, floor=1e-300) < 1e-12
        assert relative_error(head.features, whole.features[:4], floor=1e-300) < 1e-12
        assert np.array_equal(chunked.labels, whole.labels)

    def test_schedule_mismatch(self):
        pred = NoisePredictor.init(3, 2, [8], 4, 2, np.random.default_rng(0))
        pred.schedule_hash = make_schedule(500).hash
        with pytest.raises(ArtifactError):
            sample_features(self.sched, pred, SamplerSpec.uniform(1000, 5), [0])

    def test_single_gaussian_mean(self):
        gen = np.random.default_rng(3)
        mean = np.array([2.0, -1.0, 0.5, 3.0])
        ds = FeatureDataset(mean + 0.5 * gen.normal(size=(500, 4)), [0] * 500, [ENCODED] * 500, 1)
        pred, _ = train_ldm(ds, self.sched, DiffusionConfig(hidden=[64, 64], epochs=150), Rng(3))
        out = sample_features(self.sched, pred, SamplerSpec.uniform(1000, 50, 1.0, seed=1), [0] * 400)
        se = out.features.std(axis=0) / np.sqrt(400)
        # 5 standard errors: 3 for Monte Carlo plus room for model error
        assert np.all(np.abs(out.features.mean(axis=0) - ds.features.mean(axis=0)) < 5 * se)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        sched = make_schedule(100)
        pred = NoisePredictor.init(3, 5, [8], 4, 2, np.random.default_rng(0), mean=[1, 2, 3], std=[1, 2, 4])
        pred.schedule_hash = sched.hash
        pred.fingerprint = "c" * 64
        save_predictor(pred, tmp_path / "p.ldmn")
        back = load_predictor(tmp_path / "p.ldmn", sched)
        assert predictor_bytes(back) == (tmp_path / "p.ldmn").read_bytes()
        z = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(back(z, 7, [0, 1, 4, 2]), pred(z, 7, [0, 1, 4, 2]))
        assert back.fingerprint == pred.fingerprint

    def test_schedule_hash_checked(self, tmp_path):
        pred = NoisePredictor.init(3, 5, [8], 4, 2, np.random.default_rng(0))
        pred.schedule_hash = make_schedule(100).hash
        save_predictor(pred, tmp_path / "p.ldmn")
        with pytest.raises(ArtifactError):
            load_predictor(tmp_path / "p.ldmn", make_schedule(100, 1e-4, 0.03))

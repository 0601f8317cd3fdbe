import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semimvae.distributions import LOG_VAR_MAX, LOG_VAR_MIN, SeededRng, diag_gaussian_log_pdf
from semimvae.errors import ConfigError, PersistenceError, ShapeError
from semimvae.model import (
    MAGIC,
    MixturePosterior,
    ModelConfig,
    SemiMvaeModel,
    block_of,
    init_model,
    load_model,
    save_model,
)


def small_config(view_dims=(3, 2), K=3, d=2, **kw):
    return ModelConfig(
        view_dims=list(view_dims),
        num_classes=K,
        latent_dim=d,
        encoder_hidden=kw.pop("encoder_hidden", [4]),
        decoder_hidden=kw.pop("decoder_hidden", [4]),
        classifier_hidden=kw.pop("classifier_hidden", [5]),
        **kw,
    )


def zero_out(net):
    for _, p, _ in net.parameters():
        p[...] = 0.0


def sample_views(cfg, n=None, seed=0):
    r = np.random.default_rng(seed)
    if n is None:
        return [r.normal(size=D) for D in cfg.view_dims]
    return [r.normal(size=(n, D)) for D in cfg.view_dims]


class TestConfig:
    def test_uniform_prior_default(self):
        assert small_config(K=4).class_prior == [0.25] * 4

    def test_default_widths(self):
        cfg = ModelConfig(view_dims=[10], num_classes=2)
        assert (cfg.encoder_hidden, cfg.decoder_hidden, cfg.latent_dim) == ([100, 50], [50, 100], 30)

    @pytest.mark.parametrize(
        "kw",
        [
            {"view_dims": []},
            {"view_dims": [3, 0]},
            {"d": 0},
            {"K": 0},
            {"class_prior": [0.5, 0.6, -0.1]},
            {"class_prior": [0.5, 0.5]},
            {"encoder_hidden": [0]},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            small_config(**kw)


class TestInit:
    @pytest.mark.parametrize("V,expected", [(1, [1.0]), (2, [0.5, 0.5]), (3, [1 / 3] * 3)])
    def test_equal_view_weights(self, V, expected):
        model = init_model(small_config(view_dims=[2] * V), 0)
        np.testing.assert_array_equal(model.rho, np.zeros(V))
        np.testing.assert_allclose(model.view_weights(), expected, rtol=1e-15)

    def test_same_seed_bitwise(self):
        a = init_model(small_config(), 5)
        b = init_model(small_config(), 5)
        np.testing.assert_array_equal(a.get_flat(), b.get_flat())
        c = init_model(small_config(), 6)
        assert not np.array_equal(a.get_flat(), c.get_flat())

    def test_accepts_seeded_rng(self):
        a = init_model(small_config(), SeededRng(5))
        np.testing.assert_array_equal(a.get_flat(), init_model(small_config(), 5).get_flat())

    def test_shapes(self):
        cfg = small_config(view_dims=[3, 2], K=3, d=2)
        model = init_model(cfg, 0)
        assert model.encoders[0].in_dim == 3 + 3 and model.encoders[0].out_dim == 4
        assert model.decoders[1].in_dim == 2 + 3 and model.decoders[1].out_dim == 4
        assert model.classifier.in_dim == 5 and model.classifier.out_dim == 3

    def test_xavier_bounds(self):
        model = init_model(small_config(), 1)
        w = model.encoders[0].layers[0].weight
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        assert np.all(np.abs(w) <= limit)
        assert np.all(model.encoders[0].layers[0].bias == 0)

    def test_rejects_mismatched_networks(self):
        a = init_model(small_config(), 0)
        with pytest.raises(ConfigError):
            SemiMvaeModel(a.config, a.encoders[:1], a.decoders, a.classifier, a.rho)


class TestEncodeDecode:
    def test_zero_encoder(self):
        model = init_model(small_config(), 0)
        zero_out(model.encoders[0])
        g = model.encode_view(0, np.array([5.0, -3.0, 1.0]), 2)
        np.testing.assert_array_equal(g.mean, np.zeros(2))
        np.testing.assert_array_equal(g.log_var, np.zeros(2))

    def test_label_changes_output(self):
        model = init_model(small_config(), 0)
        x = np.array([0.1, 0.2, 0.3])
        a = model.encode_view(0, x, 0)
        b = model.encode_view(0, x, 1)
        assert not np.array_equal(a.mean, b.mean)

    def test_log_var_clamped(self):
        model = init_model(small_config(), 0)
        x = np.array([1e4, -1e4, 1e4])
        for y in range(3):
            g = model.encode_view(0, x, y)
            assert np.all((g.log_var >= LOG_VAR_MIN) & (g.log_var <= LOG_VAR_MAX))
        model.decoders[0].layers[-1].bias[:] = 1e3
        g = model.decode_view(0, np.zeros(2), 0)
        np.testing.assert_array_equal(g.log_var, np.full(3, LOG_VAR_MAX))

    def test_batch_matches_rows(self):
        model = init_model(small_config(), 0)
        xs = sample_views(model.config, n=4)[0]
        batch = model.encode_view(0, xs, 1)
        for i in range(4):
            one = model.encode_view(0, xs[i], 1)
            np.testing.assert_allclose(batch.mean[i], one.mean, rtol=1e-14)

    def test_zero_decoder(self):
        model = init_model(small_config(), 0)
        zero_out(model.decoders[1])
        g = model.decode_view(1, np.array([3.0, 4.0]), 0)
        np.testing.assert_array_equal(g.mean, np.zeros(2))
        np.testing.assert_array_equal(g.var, np.ones(2))

    def test_decoder_pure(self):
        model = init_model(small_config(), 0)
        z = np.array([0.4, -0.7])
        a, b = model.decode_view(1, z, 2), model.decode_view(1, z, 2)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.log_var, b.log_var)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-1e6, 1e6))
    def test_decoder_log_likelihood_finite(self, seed, scale):
        model = init_model(small_config(), seed % 100)
        x = np.random.default_rng(seed).normal(size=3) * scale
        g = model.decode_view(0, np.random.default_rng(seed + 1).normal(size=2), seed % 3)
        assert np.isfinite(diag_gaussian_log_pdf(g, x))

    @pytest.mark.parametrize("v", [-1, 2])
    def test_bad_view_index(self, v):
        model = init_model(small_config(), 0)
        with pytest.raises(ValueError):
            model.encode_view(v, np.zeros(3), 0)
        with pytest.raises(ValueError):
            model.decode_view(v, np.zeros(2), 0)

    def test_bad_label(self):
        model = init_model(small_config(), 0)
        with pytest.raises(ValueError):
            model.encode_view(0, np.zeros(3), 3)

    def test_bad_dims(self):
        model = init_model(small_config(), 0)
        with pytest.raises(ShapeError):
            model.encode_view(0, np.zeros(2), 0)
        with pytest.raises(ShapeError):
            model.decode_view(0, np.zeros(3), 0)


class TestPosterior:
    def test_single_view(self):
        model = init_model(small_config(view_dims=[3]), 0)
        post = model.posterior([np.zeros(3)], 1)
        assert len(post.components) == 1
        np.testing.assert_array_equal(post.weights, [1.0])

    def test_equal_weights(self):
        model = init_model(small_config(), 0)
        np.testing.assert_array_equal(model.posterior(sample_views(model.config), 0).weights, [0.5, 0.5])

    def test_missing_view(self):
        model = init_model(small_config(), 0)
        with pytest.raises(ValueError):
            model.posterior([np.zeros(3), None], 0)
        with pytest.raises(ValueError):
            model.posterior([np.zeros(3)], 0)

    def test_permutation_equivariance(self):
        cfg = small_config(view_dims=[3, 2, 4])
        model = init_model(cfg, 2)
        model.rho[:] = [0.3, -1.0, 0.8]
        perm = [2, 0, 1]
        pcfg = small_config(view_dims=[cfg.view_dims[p] for p in perm])
        permuted = SemiMvaeModel(
            pcfg,
            [model.encoders[p] for p in perm],
            [model.decoders[p] for p in perm],
            init_model(pcfg, 0).classifier,
            model.rho[perm],
        )
        X = sample_views(cfg, seed=3)
        a = model.posterior(X, 1)
        b = permuted.posterior([X[p] for p in perm], 1)
        np.testing.assert_allclose(b.weights, a.weights[perm], rtol=1e-15)
        for i, p in enumerate(perm):
            np.testing.assert_array_equal(b.components[i].mean, a.components[p].mean)
            np.testing.assert_array_equal(b.components[i].log_var, a.components[p].log_var)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=6))
    def test_weights_on_simplex(self, rho):
        model = init_model(small_config(view_dims=[2] * len(rho)), 0)
        model.rho[:] = rho
        lam = model.view_weights()
        assert np.all(lam > 0)
        assert abs(lam.sum() - 1.0) <= 1e-12

    def test_mixture_validation(self):
        model = init_model(small_config(), 0)
        post = model.posterior(sample_views(model.config), 0)
        with pytest.raises(ShapeError):
            MixturePosterior(post.components, [1.0])
        with pytest.raises(ValueError):
            MixturePosterior(post.components, [0.7, 0.7])

    def test_mixture_sample_moments(self):
        model = init_model(small_config(), 0)
        model.rho[:] = [0.5, -0.5]
        post = model.posterior(sample_views(model.config), 2)
        z = post.sample(SeededRng(0), 200_000)
        mean = sum(w * c.mean for w, c in zip(post.weights, post.components))
        np.testing.assert_allclose(z.mean(axis=0), mean, atol=0.02)


class TestClassify:
    def test_zero_classifier_uniform(self):
        model = init_model(small_config(K=4), 0)
        zero_out(model.classifier)
        np.testing.assert_allclose(model.classify(sample_views(model.config)), [0.25] * 4, rtol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_sums_to_one(self, seed):
        model = init_model(small_config(), seed % 50)
        p = model.classify(sample_views(model.config, n=5, seed=seed))
        assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)

    def test_duplicate_rows(self):
        model = init_model(small_config(), 0)
        X = sample_views(model.config, n=1)
        p = model.classify([np.vstack([x, x]) for x in X])
        np.testing.assert_array_equal(p[0], p[1])

    def test_missing_view(self):
        model = init_model(small_config(), 0)
        with pytest.raises(ValueError):
            model.classify([np.zeros(3), None])


class TestParameters:
    def test_flat_roundtrip(self):
        model = init_model(small_config(), 0)
        flat = np.arange(model.num_parameters(), dtype=float)
        model.set_flat(flat)
        np.testing.assert_array_equal(model.get_flat(), flat)
        names = [n for n, _, _ in model.parameters()]
        assert names[-1] == "rho"
        assert names[0] == "encoder0.layer0.weight"

    def test_copy_is_independent(self):
        model = init_model(small_config(), 0)
        clone = model.copy()
        clone.rho[0] = 9.0
        assert model.rho[0] == 0.0

    @pytest.mark.parametrize(
        "name,block",
        [("encoder1.layer0.bias", "phi1"), ("decoder0.layer2.weight", "theta0"),
         ("classifier.layer0.weight", "classifier"), ("rho", "rho")],
    )
    def test_block_of(self, name, block):
        assert block_of(name) == block


class TestPersistence:
    def test_roundtrip_bitwise(self, tmp_path):
        model = init_model(small_config(class_prior=[0.2, 0.3, 0.5]), 4)
        model.rho[:] = [0.1, -0.2]
        model.extras["note"] = {"a": 1}
        path = tmp_path / "m.mvae"
        save_model(model, path)
        back = load_model(path)
        np.testing.assert_array_equal(back.get_flat(), model.get_flat())
        assert back.config == model.config
        assert back.extras == model.extras
        assert path.read_bytes()[:4] == MAGIC
        save_model(back, tmp_path / "again.mvae")
        assert (tmp_path / "again.mvae").read_bytes() == path.read_bytes()

    @pytest.mark.parametrize("keep", [3, 8, 20, -1])
    def test_truncated(self, tmp_path, keep):
        path = tmp_path / "m.mvae"
        save_model(init_model(small_config(), 0), path)
        data = path.read_bytes()
        path.write_bytes(data[:keep] if keep > 0 else data[:-5])
        with pytest.raises(PersistenceError):
            load_model(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "m.mvae"
        save_model(init_model(small_config(), 0), path)
        path.write_bytes(b"XVAE" + path.read_bytes()[4:])
        with pytest.raises(PersistenceError):
            load_model(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "m.mvae"
        save_model(init_model(small_config(), 0), path)
        data = bytearray(path.read_bytes())
        data[4] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(PersistenceError):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(PersistenceError):
            load_model(tmp_path / "nope.mvae")

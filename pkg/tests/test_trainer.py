import csv
import json
import math

import numpy as np
import pytest

from semimvae.data import TEST, TRAIN, VALIDATION, MultiViewDataset, SynthConfig, make_synthetic, mask_labels
from semimvae.errors import ConfigError, TrainingError
from semimvae.model import SemiMvaeModel, init_model
from semimvae.numerics import LinearLayer, Mlp
from semimvae.trainer import (
    RESULT_COLUMNS,
    TrainConfig,
    default_model_config,
    empirical_class_prior,
    evaluate,
    fit,
    run_experiment,
    train,
)


@pytest.fixture(scope="module")
def small_data():
    return make_synthetic(SynthConfig(num_samples=300, view_dims=[6, 4], seed=1))


def quick_cfg(**kw):
    base = dict(epochs=4, n_labeled=8, n_unlabeled=32, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [{"epochs": 0}, {"lr": 0.0}, {"beta": -0.1}, {"T": 0}, {"mode": "online"},
         {"n_labeled": 0, "n_unlabeled": 0}, {"early_stop_patience": 0}, {"clip_norm": -1.0}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.T, cfg.beta, cfg.early_stop_patience) == (3e-4, 1, 0.1, 30)

    def test_from_dict_unknown(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochs": 2, "momentum": 0.9})


class TestDefaultModelConfig:
    def test_caps_by_data(self):
        cfg = default_model_config([6, 4], 3)
        assert cfg.latent_dim == 6
        assert cfg.encoder_hidden == [6, 6] and cfg.classifier_hidden == [10, 10]

    def test_paper_shapes_when_room(self):
        cfg = default_model_config([310, 33], 3)
        assert cfg.encoder_hidden == [100, 50] and cfg.decoder_hidden == [50, 100] and cfg.latent_dim == 30

    def test_empirical_prior(self, small_data):
        ds = mask_labels(small_data, 0.2, 0)
        prior = empirical_class_prior(ds)
        counts = ds.class_counts(ds.labeled_pool())
        np.testing.assert_allclose(prior, counts / counts.sum(), rtol=1e-15)


class TestTrain:
    def test_history_shape(self, small_data):
        model, history, metrics = fit(small_data, 0.1, quick_cfg())
        assert len(history.records) <= 4
        for r in history.records:
            lam = np.array(r.view_weights)
            assert np.all(lam > 0) and abs(lam.sum() - 1) <= 1e-12
            assert math.isfinite(r.objective)
        assert 0.0 <= metrics["accuracy"] <= 1.0

    def test_deterministic(self, small_data):
        a = fit(small_data, 0.1, quick_cfg(seed=3))
        b = fit(small_data, 0.1, quick_cfg(seed=3))
        assert a[1].to_dict() == b[1].to_dict()
        np.testing.assert_array_equal(a[0].get_flat(), b[0].get_flat())
        assert a[2] == b[2]

    def test_best_not_worse_than_final(self, small_data):
        ds = mask_labels(small_data, 0.1, 0)
        model = init_model(default_model_config(ds.view_dims, 3), 0)
        best, history = train(model, ds, quick_cfg(epochs=8))
        assert evaluate(best, ds, VALIDATION)["accuracy"] >= evaluate(model, ds, VALIDATION)["accuracy"]
        assert evaluate(best, ds, VALIDATION)["accuracy"] == history.best_val_accuracy

    def test_early_stopping(self, small_data):
        _, history, _ = fit(small_data, 0.1, quick_cfg(epochs=50, early_stop_patience=2))
        assert history.stopped_early
        assert len(history.records) == history.best_epoch + 3

    def test_transductive_uses_test_rows(self, small_data):
        _, ind, _ = fit(small_data, 1.0, quick_cfg(epochs=1))
        _, tra, _ = fit(small_data, 1.0, quick_cfg(epochs=1, mode="transductive"))
        assert math.isnan(ind.records[0].unlabeled_elbo)
        assert math.isfinite(tra.records[0].unlabeled_elbo)

    def test_non_finite_objective(self, small_data):
        ds = mask_labels(small_data, 0.1, 0)
        ds.views = [x * 1e200 for x in ds.views]
        model = init_model(default_model_config(ds.view_dims, 3), 0)
        with pytest.raises(TrainingError, match="epoch 0"):
            with np.errstate(all="ignore"):
                train(model, ds, quick_cfg())

    def test_needs_validation_rows(self, small_data):
        ds = mask_labels(small_data, 0.1, 0)
        ds.splits = np.where(ds.splits == VALIDATION, TEST, ds.splits)
        with pytest.raises(ValueError):
            train(init_model(default_model_config(ds.view_dims, 3), 0), ds, quick_cfg())

    def test_separable_baseline(self):
        hits = 0
        for seed in range(10):
            ds = make_synthetic(SynthConfig(num_samples=500, num_classes=2, class_separation=3.0, seed=seed))
            _, history, _ = fit(ds, 0.2, TrainConfig(epochs=200, seed=seed))
            hits += history.best_val_accuracy >= 0.95
        assert hits >= 9


def oracle_dataset(labels, K):
    n = len(labels)
    x = np.eye(K)[labels] * 5.0
    return MultiViewDataset([x], labels, np.full(n, TEST), np.ones(n, bool), K)


def identity_classifier_model(K):
    model = init_model(default_model_config([K], K), 0)
    net = Mlp([LinearLayer(np.eye(K), np.zeros(K))], ["identity"])
    return SemiMvaeModel(model.config, model.encoders, model.decoders, net, model.rho)


class TestEvaluate:
    def test_perfect_oracle(self):
        labels = np.array([0, 1, 2, 2, 1, 0, 0])
        m = evaluate(identity_classifier_model(3), oracle_dataset(labels, 3), TEST)
        assert m["accuracy"] == 1.0
        conf = np.array(m["confusion"])
        np.testing.assert_array_equal(conf, np.diag([3, 2, 2]))

    def test_uniform_ties_pick_class_zero(self):
        labels = np.array([0, 1, 2, 2, 1, 0, 0, 1, 2])
        model = identity_classifier_model(3)
        model.classifier.layers[0].weight[:] = 0.0
        m = evaluate(model, oracle_dataset(labels, 3), TEST)
        assert m["accuracy"] == pytest.approx(3 / 9)
        assert np.array(m["confusion"])[:, 1:].sum() == 0

    def test_confusion_rows_match_support(self, small_data):
        ds = mask_labels(small_data, 0.1, 0)
        model = init_model(default_model_config(ds.view_dims, 3), 0)
        m = evaluate(model, ds, TEST)
        conf = np.array(m["confusion"])
        np.testing.assert_array_equal(conf.sum(axis=1), m["support"])
        np.testing.assert_array_equal(m["support"], ds.class_counts(ds.rows(TEST)))

    def test_empty_split(self):
        labels = np.array([0, 1])
        with pytest.raises(ValueError):
            evaluate(identity_classifier_model(2), oracle_dataset(labels, 2), TRAIN)


class TestRunExperiment:
    spec = {"fractions": [0.1, 0.2], "seeds": [0, 1], "train": {"epochs": 2, "n_labeled": 8, "n_unlabeled": 32}}

    def test_outputs(self, small_data, tmp_path):
        res = run_experiment(self.spec, tmp_path, dataset=small_data)
        with open(tmp_path / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0].keys()) == RESULT_COLUMNS
        assert len(rows) == 4
        assert (tmp_path / "history_f0.1_s1.json").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        accs = [float(r["test_accuracy"]) for r in rows if r["fraction"] == "0.1"]
        assert summary["summary"]["0.1"]["mean"] == pytest.approx(np.mean(accs))
        assert summary["summary"]["0.1"]["std"] == pytest.approx(np.std(accs, ddof=1))
        assert res["failed_runs"] == 0

    def test_single_run(self, small_data, tmp_path):
        res = run_experiment({**self.spec, "fractions": [0.1], "seeds": [4]}, tmp_path, dataset=small_data)
        assert res["summary"]["0.1"] == {**res["summary"]["0.1"], "std": 0.0, "single_run": True}

    def test_seed_order_independent(self, small_data, tmp_path):
        a = run_experiment(self.spec, tmp_path / "a", dataset=small_data)
        b = run_experiment({**self.spec, "seeds": [1, 0]}, tmp_path / "b", dataset=small_data)
        assert a["summary"] == b["summary"]
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    def test_failures_recorded(self, small_data, tmp_path):
        res = run_experiment({**self.spec, "fractions": [0.001, 0.1], "seeds": [0]}, tmp_path, dataset=small_data)
        assert res["failed_runs"] == 1
        assert "0.1" in res["summary"] and "0.001" not in res["summary"]

    def test_unknown_key(self, small_data, tmp_path):
        with pytest.raises(ConfigError):
            run_experiment({**self.spec, "colour": 1}, tmp_path, dataset=small_data)

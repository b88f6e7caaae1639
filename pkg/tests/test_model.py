"""Model construction, gradients per variant, training loop, checkpoints."""

import numpy as np
import pytest

from promolab.datagen import generate_rct
from promolab.errors import ValidationError
from promolab.losses import LossWeights
from promolab.model import (
    ModelConfig,
    VARIANTS,
    build_model,
    default_embedding_dim,
    load_model,
    model_gradient_check,
    predict,
    predict_matrix,
    save_model,
    train_model,
)
from promolab.nncore import make_rng

NARROW = dict(hidden_dims=(16, 16, 8, 4), dropout_rate=0.1)


def tiny_batch(n=64, n_arms=3, seed=5):
    rng = make_rng(seed)
    features = np.abs(rng.normal(2.0, 1.5, size=(n, 5))) + 0.1
    arms = rng.integers(0, n_arms, size=n)
    s = rng.integers(0, 2, size=n).astype(np.float64)
    y = np.where(rng.random(n) < 0.4, 0.0, rng.gamma(2.0, 2.0, size=n))
    y = np.where(s == 1, y + 0.5, y)
    return features, arms, s, y


def narrow_model(variant, n_arms=3, seed=0):
    config = ModelConfig(variant=variant, **NARROW)
    f, _, _, _ = tiny_batch(n_arms=n_arms)
    mean = f.mean(axis=0)
    sd = f.std(axis=0)
    return build_model(config, n_arms, mean, sd, make_rng(seed)), config


class TestConfig:
    def test_defaults_round_trip_through_dict(self):
        config = ModelConfig()
        again = ModelConfig.from_dict(config.to_dict())
        assert again == config

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValidationError):
            ModelConfig(variant="boosted")

    def test_head_depths_must_be_ordered(self):
        with pytest.raises(ValidationError):
            ModelConfig(direct_head_depth=3, enduring_head_depth=2)

    def test_head_depth_within_trunk(self):
        with pytest.raises(ValidationError):
            ModelConfig(hidden_dims=(8, 8), direct_head_depth=2, enduring_head_depth=3)

    def test_rho_domain(self):
        with pytest.raises(ValidationError):
            ModelConfig(rho=2.0)

    @pytest.mark.parametrize("n_arms,expected", [(7, 2), (16, 3), (81, 4)])
    def test_default_embedding_dim(self, n_arms, expected):
        assert default_embedding_dim(n_arms) == expected


class TestBuild:
    def test_full_variant_shapes(self):
        model, config = narrow_model("full")
        in_dim = 5 + model.embedding.shape[1]
        assert model.embedding.shape == (3, default_embedding_dim(3))
        assert model.trunk_a.layers[0].weight.shape == (in_dim, 16)
        assert model.direct_head.layers[0].weight.shape == (16, 1)
        assert model.enduring_head.layers[0].weight.shape == (8, 1)
        assert model.amount_head.layers[0].weight.shape == (4, 1)
        assert model.amount_trunk is None

    def test_direct_only_has_no_amount_parts(self):
        model, _ = narrow_model("direct_only")
        assert model.trunk_b is None
        assert model.enduring_head is None
        assert model.amount_head is None

    def test_two_model_has_disjoint_towers(self):
        model, _ = narrow_model("two_model")
        assert model.amount_trunk is not None
        assert model.amount_embedding is not None
        assert model.trunk_b is None
        # both towers run the full hidden stack independently
        assert len(model.trunk_a.layers) == len(NARROW["hidden_dims"])
        assert len(model.amount_trunk.layers) == len(NARROW["hidden_dims"])

    def test_build_deterministic(self):
        a, _ = narrow_model("full", seed=3)
        b, _ = narrow_model("full", seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_seed_changes_weights(self):
        a, _ = narrow_model("full", seed=3)
        b, _ = narrow_model("full", seed=4)
        assert not np.array_equal(a.trunk_a.layers[0].weight, b.trunk_a.layers[0].weight)


class TestGradients:
    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_analytic_matches_finite_differences(self, variant):
        model, _ = narrow_model(variant)
        features, arms, s, y = tiny_batch()
        err = model_gradient_check(model, features, arms, s, y, rng=make_rng(9))
        assert err < 1e-6, f"{variant}: {err:.3e}"


class TestPredict:
    def test_probabilities_in_unit_interval(self):
        model, _ = narrow_model("full")
        features, arms, _, _ = tiny_batch(n=256)
        pm = predict(model, features, arms)
        assert np.all((pm.direct > 0) & (pm.direct < 1))
        assert np.all((pm.enduring_propensity > 0) & (pm.enduring_propensity < 1))
        assert np.all(pm.amount > 0)

    def test_matrix_matches_columnwise_predict(self):
        model, _ = narrow_model("full")
        features, _, _, _ = tiny_batch(n=50)
        matrix = predict_matrix(model, features)
        for j in range(3):
            pm = predict(model, features, np.full(50, j))
            np.testing.assert_allclose(matrix.amount[:, j], pm.amount, atol=1e-12)
            np.testing.assert_allclose(matrix.direct[:, j], pm.direct, atol=1e-12)

    def test_direct_only_reports_direct_as_amount(self):
        model, _ = narrow_model("direct_only")
        features, arms, _, _ = tiny_batch()
        pm = predict(model, features, arms)
        np.testing.assert_array_equal(pm.amount, pm.direct)
        np.testing.assert_array_equal(pm.enduring_propensity, pm.direct)

    def test_l2_amount_clamped_positive(self):
        model, _ = narrow_model("l2_amount")
        features, arms, _, _ = tiny_batch(n=512)
        pm = predict(model, features, arms)
        assert np.all(pm.amount >= 1e-6)

    def test_chunking_invariant(self):
        model, _ = narrow_model("full")
        features, arms, _, _ = tiny_batch(n=300)
        full = predict(model, features, arms)
        parts = [predict(model, features[i : i + 77], arms[i : i + 77]) for i in range(0, 300, 77)]
        np.testing.assert_allclose(full.amount, np.concatenate([p.amount for p in parts]), atol=0)


@pytest.fixture(scope="module")
def trained(small_world, fast_model_config):
    cfg, dataset, _ = small_world
    return train_model(
        dataset.features,
        dataset.arm,
        dataset.s,
        dataset.y,
        cfg.n_arms,
        config=fast_model_config,
        seed=7,
    )


class TestTraining:
    def test_validation_loss_improves(self, trained):
        losses = [h.val_loss for h in trained.history]
        assert min(losses) < losses[0]
        assert trained.best_val_loss == pytest.approx(min(losses))

    def test_history_records_epochs(self, trained):
        epochs = [h.epoch for h in trained.history]
        assert epochs == list(range(1, len(epochs) + 1))
        assert all(np.isfinite(h.train_loss) and np.isfinite(h.val_loss) for h in trained.history)

    def test_best_epoch_consistent(self, trained):
        assert trained.history[trained.best_epoch - 1].val_loss == trained.best_val_loss

    def test_deterministic_given_seed(self, small_world, fast_model_config):
        cfg, dataset, _ = small_world
        sub = dataset.subset(np.arange(600))
        kwargs = dict(config=fast_model_config, seed=11)
        a = train_model(sub.features, sub.arm, sub.s, sub.y, cfg.n_arms, **kwargs)
        b = train_model(sub.features, sub.arm, sub.s, sub.y, cfg.n_arms, **kwargs)
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_predictions_beat_constant_baseline(self, small_world, trained):
        cfg, dataset, _ = small_world
        pm = predict(trained.model, dataset.features, dataset.arm)
        base_rate = dataset.s.mean()
        from promolab.metrics import auc

        assert auc(pm.direct, dataset.s) > 0.6
        # amount predictions correlate with outcomes better than chance
        from promolab.metrics import spearman

        assert spearman(pm.amount, dataset.y) > 0.1
        assert abs(pm.direct.mean() - base_rate) < 0.1

    def test_early_stopping_bounds_epochs(self, small_world):
        cfg, dataset, _ = small_world
        sub = dataset.subset(np.arange(800))
        config = ModelConfig(
            hidden_dims=(8, 8, 8, 4),
            batch_size=256,
            learning_rate=5e-3,
            max_epochs=60,
            patience_epochs=3,
            plateau_epochs=2,
        )
        result = train_model(sub.features, sub.arm, sub.s, sub.y, cfg.n_arms, config=config, seed=3)
        assert result.stopped_epoch <= 60
        if result.stopped_epoch < 60:
            assert result.stopped_epoch - result.best_epoch >= 3

    def test_nan_targets_rejected(self, small_world, fast_model_config):
        cfg, dataset, _ = small_world
        y = dataset.y.copy()
        y[0] = np.nan
        with pytest.raises(ValidationError):
            train_model(dataset.features, dataset.arm, dataset.s, y, cfg.n_arms, config=fast_model_config)

    def test_weight_override_changes_result(self, small_world):
        cfg, dataset, _ = small_world
        sub = dataset.subset(np.arange(600))
        base = ModelConfig(hidden_dims=(8, 8, 8, 4), batch_size=256, max_epochs=3)
        heavy = ModelConfig(
            hidden_dims=(8, 8, 8, 4),
            batch_size=256,
            max_epochs=3,
            weights=LossWeights(w_amount=1.0, w_enduring=1.0, w_direct=20.0),
        )
        a = train_model(sub.features, sub.arm, sub.s, sub.y, cfg.n_arms, config=base, seed=2)
        b = train_model(sub.features, sub.arm, sub.s, sub.y, cfg.n_arms, config=heavy, seed=2)
        assert not np.array_equal(a.model.trunk_a.layers[0].weight, b.model.trunk_a.layers[0].weight)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_round_trip_bit_exact(self, variant, tmp_path):
        model, _ = narrow_model(variant, seed=13)
        path = tmp_path / "model.npz"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.config == model.config
        assert loaded.n_arms == model.n_arms
        for pa, pb in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(pa, pb)
        features, arms, _, _ = tiny_batch()
        before = predict(model, features, arms)
        after = predict(loaded, features, arms)
        np.testing.assert_array_equal(before.amount, after.amount)
        np.testing.assert_array_equal(before.direct, after.direct)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(ValidationError):
            load_model(path)

    def test_file_is_pickle_free(self, tmp_path):
        model, _ = narrow_model("full")
        path = tmp_path / "model.npz"
        save_model(model, path)
        with np.load(path, allow_pickle=False) as payload:
            assert "__header__" in payload.files

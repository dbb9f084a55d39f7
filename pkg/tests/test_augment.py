import numpy as np
import pytest

from derivwatch.augment import (
    VaeConfig,
    VaeModel,
    augment,
    encode,
    generate,
    kl_term,
    load_vae,
    loss,
    loss_and_gradients,
    reparameterize,
    save_vae,
    train_vae,
)
from derivwatch.errors import DataError, ModelError
from derivwatch.prep import standardize

QUICK = VaeConfig(hidden_width=8, latent_dim=2, epochs=3, batch_size=16)


@pytest.fixture
def vae(dataset):
    return train_vae(dataset, QUICK, seed=0)


class TestVaeTerms:
    """Tests for the closed-form pieces of the VAE objective."""

    def test_kl_of_unit_shift(self):
        """Test KL(N(1, 1) || N(0, 1)) = 0.5."""
        assert kl_term(np.array([1.0]), np.array([1.0])) == pytest.approx(0.5)

    def test_kl_of_standard_normal(self):
        """Test that the prior has zero divergence from itself."""
        assert kl_term(np.zeros((3, 2)), np.ones((3, 2))) == pytest.approx(0.0)

    def test_reparameterize(self):
        """Test z = mu + sigma * eps."""
        z = reparameterize(
            np.array([1.0, 2.0]), np.array([1.0, 1.0]), np.array([0.5, -0.5])
        )

        np.testing.assert_allclose(z, [1.5, 1.5])

    def test_reparameterize_shape_mismatch(self):
        """Test that mismatched shapes are rejected."""
        with pytest.raises(ValueError, match="shape mismatch"):
            reparameterize(np.zeros(2), np.ones(3), np.zeros(2))

    def test_encode_single_sample(self):
        """Test that a single row encodes to latent vectors."""
        model = VaeModel.initialize(5, QUICK, np.random.default_rng(0))
        mu, sigma = encode(model, np.zeros(5))

        assert mu.shape == (2,)
        assert np.all(sigma > 0)

    def test_encode_wrong_width(self):
        """Test that rows of the wrong width are rejected."""
        model = VaeModel.initialize(5, QUICK, np.random.default_rng(0))

        with pytest.raises(ModelError, match="width"):
            encode(model, np.zeros((2, 4)))

    def test_loss_terms_add_up(self):
        """Test that the total is reconstruction plus beta times KL."""
        config = QUICK.model_copy(update={"beta": 0.5})
        rng = np.random.default_rng(1)
        model = VaeModel.initialize(4, config, rng)
        terms = loss(model, rng.normal(size=(6, 4)), rng.normal(size=(6, 2)))

        assert terms.total == pytest.approx(terms.reconstruction + 0.5 * terms.kl)
        assert terms.reconstruction >= 0
        assert terms.kl >= 0

    def test_reconstruction_is_per_sample_sum(self):
        """Test that reconstruction sums over columns and averages over rows."""
        rng = np.random.default_rng(5)
        model = VaeModel.initialize(4, QUICK, rng)
        batch = rng.normal(size=(6, 4))
        draws = rng.normal(size=(6, 2))
        mu, sigma = encode(model, batch)
        decoded = model.decoder(reparameterize(mu, sigma, draws))
        per_cell = np.mean((decoded - batch) ** 2)

        terms = loss(model, batch, draws)

        assert terms.reconstruction == pytest.approx(4 * per_cell)
        doubled = loss(model, np.vstack([batch, batch]), np.vstack([draws, draws]))
        assert doubled.reconstruction == pytest.approx(terms.reconstruction)

    def test_gradients_match_finite_differences(self):
        """Test backpropagated gradients against central differences."""
        rng = np.random.default_rng(2)
        config = QUICK.model_copy(update={"decoder_activation": "linear"})
        model = VaeModel.initialize(3, config, rng)
        batch = rng.normal(size=(5, 3))
        draws = rng.normal(size=(5, 2))
        _, grads = loss_and_gradients(model, batch, draws)

        eps = 1e-6
        for stack, (gw, gb) in zip(model.stacks(), grads):
            for params, analytic in ((stack.weights, gw), (stack.biases, gb)):
                for p, g in zip(params, analytic):
                    numeric = np.zeros_like(p)
                    for i in np.ndindex(p.shape):
                        saved = p[i]
                        p[i] = saved + eps
                        up = loss(model, batch, draws).total
                        p[i] = saved - eps
                        down = loss(model, batch, draws).total
                        p[i] = saved
                        numeric[i] = (up - down) / (2 * eps)
                    np.testing.assert_allclose(g, numeric, rtol=1e-4, atol=1e-6)


class TestTraining:
    """Tests for VAE training and sample generation."""

    def test_train_records_history(self, vae, dataset):
        """Test that training keeps one loss per epoch and the column layout."""
        assert vae.trained
        assert len(vae.loss_history) == 3
        assert vae.columns == ("rpm", "power") + dataset.channels

    def test_loss_decreases(self, dataset):
        """Test that a longer run lowers the loss."""
        config = QUICK.model_copy(update={"epochs": 30, "learning_rate": 5e-3})
        model = train_vae(dataset, config, seed=0)

        assert model.loss_history[-1] < model.loss_history[0]

    def test_memorizes_repeated_sample(self, dataset):
        """Test that one row repeated throughout is reconstructed almost exactly."""
        repeated = dataset.rows(np.zeros(32, dtype=int))
        config = QUICK.model_copy(
            update={"epochs": 400, "learning_rate": 0.05, "batch_size": 8}
        )
        model = train_vae(repeated, config, seed=0)
        batch = standardize(repeated.matrix, model.scaler)
        draws = np.random.default_rng(1).standard_normal((32, 2))

        assert loss(model, batch, draws).reconstruction < 1e-3
        assert model.loss_history[-1] < model.loss_history[0]

    def test_deterministic_in_seed(self, dataset):
        """Test that the same seed trains the same VAE."""
        a = train_vae(dataset, QUICK, seed=4)
        b = train_vae(dataset, QUICK, seed=4)

        assert a.loss_history == b.loss_history

    def test_needs_two_samples(self, dataset):
        """Test that a single row cannot train the VAE."""
        with pytest.raises(DataError, match="at least 2"):
            train_vae(dataset.rows(np.array([0])), QUICK)

    def test_generate_marks_synthetic(self, vae, dataset):
        """Test that generated rows are flagged and shaped like the data."""
        synthetic = generate(vae, 25, seed=1, start_index=1000)

        assert len(synthetic) == 25
        assert synthetic.channels == dataset.channels
        assert synthetic.synthetic.all()
        assert synthetic.index[0] == 1000

    def test_generate_zero(self, vae):
        """Test that zero samples is allowed."""
        assert len(generate(vae, 0)) == 0

    def test_generate_untrained(self):
        """Test that an untrained VAE cannot generate."""
        model = VaeModel.initialize(3, QUICK, np.random.default_rng(0))

        with pytest.raises(ModelError, match="not been trained"):
            generate(model, 5)

    def test_augment_appends_after_real_rows(self, vae, dataset):
        """Test that augmentation keeps real rows first and refits scalers."""
        combined = augment(dataset, vae, count=40, seed=2)

        assert len(combined) == len(dataset) + 40
        assert not combined.synthetic[: len(dataset)].any()
        assert combined.synthetic[len(dataset) :].all()
        assert combined.index[len(dataset)] == dataset.index.max() + 1
        np.testing.assert_allclose(combined.target_scaler.mean, combined.Y.mean(axis=0))

    def test_augment_default_doubles(self, vae, dataset):
        """Test that the default count equals the real sample count."""
        assert len(augment(dataset, vae)) == 2 * len(dataset)

    def test_augment_channel_mismatch(self, vae, dataset):
        """Test that a VAE only augments the channels it was trained on."""
        with pytest.raises(DataError):
            augment(dataset.select(["flow"]), vae)

    def test_file_preserves_generation(self, vae, tmp_path):
        """Test that a reloaded VAE generates the same samples."""
        path = save_vae(vae, tmp_path / "vae.json")
        loaded = load_vae(path)

        np.testing.assert_allclose(
            generate(loaded, 5, seed=3).Y, generate(vae, 5, seed=3).Y
        )

    def test_load_missing(self, tmp_path):
        """Test that a missing VAE file is reported."""
        with pytest.raises(ModelError, match="not found"):
            load_vae(tmp_path / "vae.json")

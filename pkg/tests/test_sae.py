from dataclasses import replace

import numpy as np
import pytest

from sampledom.data import Dataset, SynthSpec, Trial, generate
from sampledom.numerics import AdamWState, ShapeError, make_rng
from sampledom.sae import (
    SaeModel,
    TrainingDivergedError,
    encode,
    encode_dataset,
    layer_sizes,
    load_checkpoint,
    loss_and_grads,
    reconstruct,
    reconstruction_loss,
    save_checkpoint,
    train_sae,
)


def central_difference(f, params, eps=1e-6):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = f()
            p[idx] = old - eps
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def reference_loss(model, signals):
    """Mean of squared reconstruction errors, accumulated entry by entry."""
    total, count = 0.0, 0
    for trial in signals:
        y = reconstruct(model, trial)
        for c in range(trial.shape[0]):
            for t in range(trial.shape[1]):
                total += (y[c, t] - trial[c, t]) ** 2
                count += 1
    return total / count


@pytest.fixture
def tiny():
    rng = make_rng(0)
    model = SaeModel.initialize(8, rng)
    for b in model.biases:
        b[:] = rng.normal(0, 0.1, size=b.shape)
    return model


class TestShapes:
    def test_layer_sizes(self):
        assert layer_sizes(256) == [256, 128, 64, 128, 256]
        assert layer_sizes(8) == [8, 4, 2, 4, 8]
        assert layer_sizes(10)[2] == 2

    def test_encode_shape(self, tiny):
        assert encode(tiny, Trial(np.ones((3, 8)), 0)).shape == (3, 2)
        assert encode(tiny, Trial(np.ones((1, 8)), 0)).shape == (1, 2)

    def test_width_mismatch(self, tiny):
        with pytest.raises(ShapeError):
            encode(tiny, Trial(np.ones((2, 9)), 0))
        with pytest.raises(ShapeError):
            reconstruct(tiny, np.ones((2, 6)))

    def test_checkpoint_round_trip(self, tiny, tmp_path):
        save_checkpoint(tiny, tmp_path / "m.saew")
        back = load_checkpoint(tmp_path / "m.saew")
        for a, b in zip(back.parameters(), tiny.parameters()):
            assert a.tobytes() == b.tobytes()
        assert (tmp_path / "m.saew").read_bytes()[:4] == b"SAEW"


class TestEncode:
    def test_zero_model(self):
        model = SaeModel.zeros(8)
        x = make_rng(1).normal(size=(3, 8))
        assert not encode(model, x).any()
        assert not reconstruct(model, x).any()
        assert reconstruction_loss(model, x[None]) == pytest.approx(np.mean(x**2), abs=1e-15)

    def test_channel_permutation(self, tiny):
        x = make_rng(2).normal(size=(4, 8))
        perm = [2, 0, 3, 1]
        np.testing.assert_array_equal(encode(tiny, x[perm]), encode(tiny, x)[perm])

    def test_channel_independence(self, tiny):
        x = make_rng(3).normal(size=(4, 8))
        y = x.copy()
        y[1] += 5.0
        diff = np.abs(encode(tiny, x) - encode(tiny, y)).sum(axis=1)
        assert diff[0] == diff[2] == diff[3] == 0

    def test_encode_dataset_matches_per_trial(self, tiny):
        ds = Dataset(make_rng(4).normal(size=(5, 3, 8)), [0, 1, 0, 1, 1], 2)
        enc = encode_dataset(tiny, ds)
        for i in range(len(ds)):
            np.testing.assert_array_equal(enc[i], encode(tiny, ds[i]))

    def test_loss_matches_entrywise_sum(self, tiny):
        sig = make_rng(5).normal(size=(3, 4, 8))
        assert reconstruction_loss(tiny, sig) == pytest.approx(reference_loss(tiny, sig), abs=1e-12)


class TestGradients:
    def test_matches_finite_differences(self, tiny):
        rows = make_rng(6).normal(size=(6, 8))
        loss, grads = loss_and_grads(tiny, rows)
        assert loss == pytest.approx(reconstruction_loss(tiny, rows), abs=1e-15)
        numeric = central_difference(lambda: reconstruction_loss(tiny, rows), tiny.parameters())
        for i, (g, n) in enumerate(zip(grads, numeric)):
            err = np.linalg.norm(g - n) / max(np.linalg.norm(g) + np.linalg.norm(n), 1e-12)
            assert err < 1e-4, f"parameter block {i}: relative error {err}"


class TestTraining:
    def test_zero_epochs_returns_initial(self):
        ds = Dataset(make_rng(0).normal(size=(2, 2, 8)), [0, 1], 2)
        model = train_sae(ds, epochs=0, rng=11)
        init = SaeModel.initialize(8, make_rng(11))
        for a, b in zip(model.parameters(), init.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_overfits_constant_trial(self):
        ds = Dataset(np.full((1, 1, 8), 0.5), [0], 1)
        model = train_sae(ds, epochs=3000, optimizer=AdamWState(lr=0.01, weight_decay=0.0), rng=0)
        assert reconstruction_loss(model, ds.signals) < 1e-3

    def test_loss_history_finite_and_decreasing(self):
        ds = generate(SynthSpec(channels=3, active_channels=2, time_points=32, trials_per_class=6, snr=10.0))
        model = train_sae(ds, epochs=100, rng=0)
        assert len(model.history) == 100 and np.all(np.isfinite(model.history))
        assert model.history[-1] < model.history[0]
        assert all(np.all(np.isfinite(p)) for p in model.parameters())

    def test_minibatch_path(self):
        ds = generate(SynthSpec(channels=3, active_channels=2, time_points=16, trials_per_class=4))
        full = train_sae(ds, epochs=5, rng=0)
        mini = train_sae(ds, epochs=5, rng=0, batch_size=4)
        assert mini.history[-1] != full.history[-1]
        assert np.isfinite(mini.history).all()

    def test_deterministic(self):
        ds = generate(SynthSpec(channels=3, active_channels=2, time_points=16, trials_per_class=4))
        a, b = train_sae(ds, epochs=20, rng=3), train_sae(ds, epochs=20, rng=3)
        for x, y in zip(a.parameters(), b.parameters()):
            assert x.tobytes() == y.tobytes()

    def test_divergence_reported(self):
        ds = Dataset(np.full((1, 1, 8), 1e200), [0], 1)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingDivergedError) as err:
            train_sae(ds, epochs=3, rng=0)
        assert err.value.epoch == 1

    @pytest.mark.slow
    def test_reconstruction_improves_tenfold(self):
        # outliers and background noise are incompressible; with snr 100 the noise floor is ~1% of the initial MSE
        spec = replace(SynthSpec(), snr=100.0, outlier_fraction=0.0, label_noise_fraction=0.0)
        model = train_sae(generate(spec), epochs=500, rng=0)
        assert model.history[-1] < 0.1 * model.history[0]

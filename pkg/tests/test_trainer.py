import json
import math
from dataclasses import replace

import numpy as np
import pytest

from sampledom.data import Dataset, SynthSpec, Trial, generate
from sampledom.dominance import CurriculumSchedule, DominanceRecord
from sampledom.numerics import ShapeError, make_rng
from sampledom.trainer import (
    ClassifierModel,
    EvalReport,
    TrainConfig,
    batch_loss,
    evaluate,
    forward,
    loss_and_grads,
    predict,
    predict_proba,
    load_classifier,
    save_classifier,
    train_classifier,
    training_examples,
    weighted_ce_loss,
)

TINY_SPEC = SynthSpec(channels=2, active_channels=1, time_points=16, trials_per_class=8, snr=2.0, seed=1)


def records_for(ds, scores):
    return [DominanceRecord(i, int(ds.labels[i]), s, s, s) for i, s in enumerate(scores)]


def fd_grads(model, x, labels, gammas, eps=1e-6):
    out = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = batch_loss(forward(model, x)[1], labels, gammas)
            p[idx] = old - eps
            down = batch_loss(forward(model, x)[1], labels, gammas)
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


class TestLoss:
    def test_standard_ce(self):
        assert weighted_ce_loss([0.5, 0.5], 0, 1.0) == pytest.approx(math.log(2), abs=1e-15)
        assert weighted_ce_loss([0.5, 0.5], 0, 1.0) == pytest.approx(0.693147, abs=1e-6)

    def test_zero_weight(self):
        assert weighted_ce_loss([0.01, 0.99], 0, 0.0) == 0.0

    def test_half_weight(self):
        assert weighted_ce_loss([0.5, 0.5], 1, 0.5) == pytest.approx(0.346573, abs=1e-6)

    def test_log_floor(self):
        assert weighted_ce_loss([1.0, 0.0], 1, 1.0) == pytest.approx(-math.log(1e-12))
        assert np.isfinite(batch_loss(np.array([[1.0, 0.0]]), np.array([1]), np.ones(1)))

    def test_batch_loss_is_mean_of_terms(self):
        probs = np.array([[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]])
        labels, gammas = np.array([1, 1, 0]), np.array([0.3, 1.0, 0.7])
        want = np.mean([weighted_ce_loss(p, y, g) for p, y, g in zip(probs, labels, gammas)])
        assert batch_loss(probs, labels, gammas) == pytest.approx(want, abs=1e-15)


class TestGradients:
    @pytest.fixture
    def setup(self):
        rng = make_rng(0)
        model = ClassifierModel.initialize(2, 3, 4, 3, rng)
        model.b1[:] = rng.normal(0, 0.1, size=4)
        x = rng.normal(size=(3, 6))
        return model, x, np.array([0, 2, 1]), np.array([0.2, 1.0, 0.55])

    def test_parameters_match_finite_differences(self, setup):
        model, x, labels, gammas = setup
        _, grads = loss_and_grads(model, x, labels, gammas)
        for i, (g, n) in enumerate(zip(grads, fd_grads(model, x, labels, gammas))):
            err = np.linalg.norm(g - n) / max(np.linalg.norm(g) + np.linalg.norm(n), 1e-12)
            assert err < 1e-4, f"block {i}: {err}"

    def test_logit_gradient_is_gamma_times_residual(self, setup):
        model, x, labels, gammas = setup
        # with w2 = I-like readout we can read logit gradients off the b2 gradient per sample
        for j in range(3):
            _, grads = loss_and_grads(model, x[j : j + 1], labels[j : j + 1], gammas[j : j + 1])
            probs = forward(model, x[j : j + 1])[1][0]
            onehot = np.eye(3)[labels[j]]
            np.testing.assert_allclose(grads[3], gammas[j] * (probs - onehot), atol=1e-15)

    def test_larger_gamma_larger_gradient(self, setup):
        model, x, labels, _ = setup
        norms = [np.linalg.norm(loss_and_grads(model, x[:1], labels[:1], np.array([g]))[1][0]) for g in (0.1, 0.5, 1.0)]
        assert norms[0] <= norms[1] <= norms[2]


class TestPredict:
    def test_probabilities_on_simplex(self):
        model = ClassifierModel.initialize(2, 8, 5, 3, make_rng(1))
        probs = predict_proba(model, make_rng(2).normal(size=(4, 2, 8)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((probs > 0) & (probs < 1))

    def test_crop_average(self):
        model = ClassifierModel.initialize(1, 4, 3, 2, make_rng(3), window=4, stride=4)
        # force per-crop outputs [0.9, 0.1] and [0.5, 0.5] via the first input value
        model.w1[:] = 0.0
        model.w1[0, 0] = 1.0
        model.b1[:] = 0.0
        model.w2[:] = 0.0
        model.w2[0, 0] = 1.0
        model.b2[:] = 0.0
        a = math.log(9.0)
        signal = np.array([[a, 0, 0, 0, 0, 0, 0, 0]])
        label, probs = predict(model, Trial(signal, 0))
        np.testing.assert_allclose(probs, [0.7, 0.3], atol=1e-12)
        assert label == 0

    def test_crop_full_window_equals_plain(self):
        rng = make_rng(4)
        plain = ClassifierModel.initialize(2, 8, 5, 2, rng)
        cropped = ClassifierModel(plain.w1, plain.b1, plain.w2, plain.b2, 2, window=8, stride=3)
        sig = np.full((2, 8), 0.7)
        np.testing.assert_array_equal(predict(plain, sig)[1], predict(cropped, sig)[1])

    def test_tie_goes_to_lowest_class(self):
        model = ClassifierModel(np.zeros((4, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros(3), 1)
        assert predict(model, np.ones((1, 4)))[0] == 0

    def test_checkpoint_round_trip(self, tmp_path):
        model = ClassifierModel.initialize(2, 6, 5, 3, make_rng(6), input_scale=2.5, window=6, stride=2)
        save_classifier(model, tmp_path / "c.npz")
        back = load_classifier(tmp_path / "c.npz")
        for a, b in zip(back.parameters(), model.parameters()):
            assert a.tobytes() == b.tobytes()
        assert (back.channels, back.input_scale, back.window, back.stride) == (2, 2.5, 6, 2)
        sig = make_rng(7).normal(size=(2, 8))
        np.testing.assert_array_equal(predict(back, sig)[1], predict(model, sig)[1])

    def test_shape_mismatch(self):
        model = ClassifierModel.initialize(2, 8, 5, 2, make_rng(5))
        with pytest.raises(ShapeError):
            predict(model, np.ones((3, 8)))
        with pytest.raises(ShapeError):
            predict(model, np.ones((2, 9)))


@pytest.fixture(scope="module")
def data():
    ds = generate(TINY_SPEC)
    return ds.subset(range(0, 16, 2)), ds


class TestTraining:
    def cfg(self, **kw):
        return TrainConfig(**{"epochs": 30, "early_stopping": False, "schedule": CurriculumSchedule(5, 15), **kw})

    def test_none_equals_all_ones(self, data):
        _, ds = data
        a = train_classifier(ds, None, None, self.cfg())
        b = train_classifier(ds, None, records_for(ds, [1.0] * len(ds)), self.cfg())
        for x, y in zip(a.parameters(), b.parameters()):
            assert x.tobytes() == y.tobytes()

    def test_weights_change_training(self, data):
        _, ds = data
        a = train_classifier(ds, None, None, self.cfg())
        b = train_classifier(ds, None, records_for(ds, np.linspace(0.1, 1, len(ds))), self.cfg())
        assert not np.array_equal(a.w1, b.w1)

    def test_after_end_loss_is_plain_ce(self, data):
        _, ds = data
        sched = CurriculumSchedule(5, 15)
        records = records_for(ds, np.linspace(0.1, 1, len(ds)))
        from sampledom.dominance import curriculum_weights

        gammas = curriculum_weights([r.clamped_score for r in records], 16, sched)
        probs = make_rng(0).dirichlet([1, 1], size=len(ds))
        assert batch_loss(probs, ds.labels, gammas) == pytest.approx(batch_loss(probs, ds.labels, np.ones(len(ds))), abs=1e-12)

    def test_misaligned_records(self, data):
        _, ds = data
        with pytest.raises(ValueError):
            train_classifier(ds, None, records_for(ds, [1.0] * 3), self.cfg())

    def test_early_stopping_picks_best_late_epoch(self, data):
        val, ds = data
        cfg = self.cfg(early_stopping=True, early_stop_after=20)
        model = train_classifier(ds, val, None, cfg)
        h = model.history
        assert h["best_epoch"] > 20
        assert h["val_loss"][h["best_epoch"] - 1] == min(h["val_loss"][20:])

    def test_crops_inherit_weights(self, data):
        _, ds = data
        cfg = self.cfg(use_crops=True, crop_window=12, crop_stride=2)
        model = train_classifier(ds, None, records_for(ds, np.linspace(0.1, 1, len(ds))), cfg)
        assert model.window == 12 and model.stride == 2
        x, labels, parent = training_examples(model, ds)
        assert x.shape[0] == 3 * len(ds)
        weights = np.linspace(0.1, 1, len(ds))[parent]
        for i in range(len(ds)):
            assert np.all(weights[parent == i] == np.linspace(0.1, 1, len(ds))[i])
            assert np.all(labels[parent == i] == ds.labels[i])
        np.testing.assert_array_equal(x[parent == 1][1], ds.signals[1][:, 2:14].ravel() / model.input_scale)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=150)
        TrainConfig(epochs=150, early_stopping=False)


@pytest.fixture(scope="module")
def result():
    ds = generate(replace(TINY_SPEC, trials_per_class=12))
    cfg = TrainConfig(epochs=12, early_stop_after=10, schedule=CurriculumSchedule(2, 8), crop_window=12, crop_stride=2)
    return evaluate(ds, train_cfg=cfg, num_folds=3, seeds=[0, 1], sae_epochs=5), ds


class TestEvaluate:
    def test_grid(self, result):
        ev, ds = result
        assert set(ev.reports) == {"baseline/no_crop", "weighted/no_crop", "baseline/crop", "weighted/crop"}
        for r in ev.reports.values():
            assert len(r.per_fold) == 6
            assert all(0 <= a <= 100 for a in r.per_fold)
            assert r.std == pytest.approx(np.std(r.per_fold, ddof=1))
            # every trial is tested once per seed
            np.testing.assert_array_equal(np.sum(r.confusion, axis=1), 2 * ds.class_counts())

    def test_json_and_table(self, result):
        ev, _ = result
        doc = json.loads(ev.to_json())
        assert set(doc["deltas"]) == {"no_crop", "crop"}
        assert doc["deltas"]["crop"] == pytest.approx(ev.reports["weighted/crop"].mean - ev.reports["baseline/crop"].mean)
        rows = ev.table().splitlines()[2:]
        assert len(rows) == 4 and all("(" in r for r in rows)

    def test_no_crop_only(self):
        ds = generate(replace(TINY_SPEC, trials_per_class=6))
        cfg = TrainConfig(epochs=3, early_stopping=False)
        ev = evaluate(ds, train_cfg=cfg, num_folds=2, seeds=[0], sae_epochs=2, crop_modes=("no_crop",))
        assert len(ev.table().splitlines()[2:]) == 2

    def test_deterministic(self):
        ds = generate(replace(TINY_SPEC, trials_per_class=6))
        cfg = TrainConfig(epochs=3, early_stopping=False, crop_window=12, crop_stride=4)
        a = evaluate(ds, train_cfg=cfg, num_folds=2, seeds=[3], sae_epochs=2)
        b = evaluate(ds, train_cfg=cfg, num_folds=2, seeds=[3], sae_epochs=2)
        assert a.to_json() == b.to_json()

    def test_report_std_single_fold(self):
        assert EvalReport("x", [50.0], [[1]]).std == 0.0


@pytest.mark.slow
def test_clean_data_control():
    # nothing to down-weight on clean data, so weighting should stay within noise of the baseline
    ds = generate(SynthSpec(outlier_fraction=0.0, label_noise_fraction=0.0))
    ev = evaluate(ds, num_folds=4, seeds=range(5), sae_epochs=200, crop_modes=("no_crop",))
    assert abs(ev.delta("no_crop")) <= 3.0

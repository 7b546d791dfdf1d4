import math

import numpy as np
import pytest
from conftest import finite_difference, rel_err

from alsa.anchors import AnchorSet, InfluenceKind, influence_total
from alsa.config import load_config, save_config
from alsa.data import LabeledLogits, predict_and_score
from alsa.train import (
    TrainConfig,
    bce_loss,
    fit_estimator,
    gradients,
    init_anchors,
    train,
)

G, E = InfluenceKind.GAUSSIAN, InfluenceKind.EXPONENTIAL


def bce_oracle(val, anchors, kind):
    """Explicit per-sample loop over the scalar influence path."""
    _, correct, _ = predict_and_score(val)
    total = 0.0
    for z, d in zip(val.values, correct):
        p = 1 / (1 + math.exp(-influence_total(z, anchors, kind)))
        total -= d * math.log(p) + (1 - d) * math.log(1 - p)
    return total


def random_problem(rng, n, c, k):
    val = LabeledLogits(rng.normal(size=(n, c)) * 2, rng.integers(0, c, n))
    anchors = AnchorSet(rng.normal(size=(k, c)), rng.normal(scale=2, size=k),
                        rng.uniform(0.3, 3, size=k))
    return val, anchors


class TestInit:
    def test_all_correct_gives_positive_peaks(self, rng):
        z = rng.normal(size=(30, 3))
        val = LabeledLogits(z, np.argmax(z, axis=1))
        anchors = init_anchors(val, TrainConfig(k=10))
        assert np.all(anchors.peaks == 3.0)

    def test_sampled_rows_and_signs(self, rng):
        val, _ = random_problem(rng, 40, 4, 1)
        anchors = init_anchors(val, TrainConfig(k=25, seed=3))
        _, correct, _ = predict_and_score(val)
        for pos, peak in zip(anchors.positions, anchors.peaks):
            row = np.flatnonzero((val.values == pos).all(axis=1))
            assert row.size == 1
            assert peak == (3.0 if correct[row[0]] else -3.0)
        assert np.unique(anchors.positions, axis=0).shape[0] == 25
        assert np.all(anchors.variances > 0)

    def test_with_replacement_when_k_exceeds_n(self, rng):
        val, _ = random_problem(rng, 5, 3, 1)
        assert init_anchors(val, TrainConfig(k=12)).k == 12

    @pytest.mark.parametrize("init", ["sampled", "random_normal"])
    def test_deterministic(self, rng, init):
        val, _ = random_problem(rng, 30, 3, 1)
        cfg = TrainConfig(k=3, seed=11, init=init)
        a, b = init_anchors(val, cfg), init_anchors(val, cfg)
        for name in ("positions", "peaks", "variances"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_truncated_variances_stay_positive(self, rng):
        val, _ = random_problem(rng, 20, 3, 1)
        anchors = init_anchors(val, TrainConfig(k=500, init_variance_mean=0.1, init_variance_std=1.0))
        assert np.all(anchors.variances > 0)


class TestLoss:
    def test_single_sample_at_half(self):
        val = LabeledLogits([[2.0, 1.0]], [0])
        anchors = AnchorSet([[1.0, 1.0]], [0.0], [1.0])
        assert bce_loss(val, anchors) == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("kind", [G, E])
    def test_matches_loop_oracle_and_is_additive(self, rng, kind):
        val, anchors = random_problem(rng, 12, 4, 5)
        assert bce_loss(val, anchors, kind) == pytest.approx(bce_oracle(val, anchors, kind), abs=1e-10)
        a, b = val.subset([0]), val.subset([1])
        both = val.subset([0, 1])
        assert bce_loss(both, anchors, kind) == pytest.approx(
            bce_loss(a, anchors, kind) + bce_loss(b, anchors, kind), abs=1e-12)

    def test_confident_and_right_is_near_zero(self):
        val = LabeledLogits([[3.0, 0.0]], [0])
        anchors = AnchorSet([[1.0, 0.0]], [40.0], [1.0])
        assert 0 <= bce_loss(val, anchors) < 1e-15

    def test_saturated_wrong_sample_stays_finite(self):
        val = LabeledLogits([[3.0, 0.0]], [1])
        anchors = AnchorSet([[1.0, 0.0]], [800.0], [1.0])
        assert bce_loss(val, anchors) == pytest.approx(800.0)


class TestGradients:
    @pytest.mark.parametrize("kind", [G, E])
    @pytest.mark.parametrize("c, k", [(2, 1), (3, 4), (10, 16)])
    def test_finite_differences(self, rng, kind, c, k):
        val, anchors = random_problem(rng, 15, c, k)
        g = gradients(val, anchors, kind)
        for name in ("positions", "peaks", "variances"):
            arr = getattr(anchors, name)
            numeric = finite_difference(lambda: bce_loss(val, anchors, kind), arr)
            assert rel_err(getattr(g, name), numeric) <= 1e-4, name

    def test_coincident_anchor_peak_gradient(self):
        z = np.array([[2.0, -1.0, 0.5]])
        val = LabeledLogits(z, [0])
        anchors = AnchorSet(z.copy(), [1.5], [2.0])
        g = gradients(val, anchors, G)
        sigma = 1 / (1 + math.exp(-1.5))
        assert g.peaks[0] == pytest.approx(sigma - 1.0, abs=1e-15)
        numeric = finite_difference(lambda: bce_loss(val, anchors, G), anchors.peaks)
        assert g.peaks[0] == pytest.approx(numeric[0], rel=1e-6)

    @pytest.mark.parametrize("kind", [G, E])
    def test_position_gradient_is_orthogonal_to_position(self, rng, kind):
        val, anchors = random_problem(rng, 20, 5, 6)
        g = gradients(val, anchors, kind)
        dots = np.einsum("ij,ij->i", g.positions, anchors.positions)
        scale = np.linalg.norm(g.positions, axis=1) * np.linalg.norm(anchors.positions, axis=1)
        assert np.all(np.abs(dots) <= 1e-10 * np.maximum(scale, 1))

    def test_frozen_groups_get_zero(self, rng):
        val, anchors = random_problem(rng, 10, 3, 4)
        g = gradients(val, anchors, G, freeze_peaks=True, freeze_variances=True)
        assert not g.peaks.any() and not g.variances.any()
        assert g.positions.any()

    def test_empty_batch(self, rng):
        _, anchors = random_problem(rng, 3, 3, 2)
        with pytest.raises(ValueError):
            gradients(LabeledLogits(np.zeros((0, 3)) + 1, []), anchors)


class TestTrain:
    def test_stops_at_first_epoch_when_already_within_tolerance(self):
        # correctness 50%; one zero-peak anchor already predicts 0.5 everywhere
        val = LabeledLogits([[2.0, 0.0], [2.0, 0.0]], [0, 1])
        cfg = TrainConfig(k=1, freeze_peaks=True)
        _, rep = train(val, cfg, anchors=AnchorSet([[1.0, 0.0]], [0.0], [1.0]))
        assert rep.epochs_run == 1 and rep.stopped_by == "tolerance"
        assert rep.final_train_estimate == 0.5

    def test_max_epochs_bounds(self, two_cluster_val):
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=0)
        _, rep = train(two_cluster_val, TrainConfig(k=8, max_epochs=1, epsilon=1e-12))
        assert rep.epochs_run == 1 and len(rep.loss_history) == 1

    def test_two_cluster_reaches_tolerance(self, two_cluster_val):
        cfg = TrainConfig(k=64, max_epochs=3000)
        anchors, rep = train(two_cluster_val, cfg)
        _, _, acc = predict_and_score(two_cluster_val)
        assert rep.stopped_by == "tolerance"
        est = float(np.mean(1 / (1 + np.exp(-np.array(
            [influence_total(z, anchors) for z in two_cluster_val.values])))))
        assert abs(est - acc) < cfg.epsilon
        assert rep.final_loss <= rep.initial_loss

    @pytest.mark.parametrize("flags", [
        {"freeze_positions": True}, {"freeze_peaks": True}, {"freeze_variances": True},
        {"freeze_peaks": True, "freeze_variances": True},
    ])
    def test_frozen_groups_are_bitwise_unchanged(self, two_cluster_val, flags):
        cfg = TrainConfig(k=16, max_epochs=20, epsilon=1e-12, batch_size=100, **flags)
        start = init_anchors(two_cluster_val, cfg)
        end, _ = train(two_cluster_val, cfg, anchors=start)
        names = {"freeze_positions": "positions", "freeze_peaks": "peaks",
                 "freeze_variances": "variances"}
        for flag, name in names.items():
            same = getattr(start, name).tobytes() == getattr(end, name).tobytes()
            assert same == bool(flags.get(flag))

    def test_peaks_clamped_and_variances_floored(self, two_cluster_val):
        cfg = TrainConfig(k=8, max_epochs=30, learning_rate=5.0, optimizer="sgd", epsilon=1e-12)
        anchors, _ = train(two_cluster_val, cfg)
        assert np.all(np.abs(anchors.peaks) <= cfg.peak_cap)
        assert np.all(anchors.variances >= 1e-6)

    @pytest.mark.parametrize("batch", [0, 64])
    def test_deterministic(self, two_cluster_val, batch):
        cfg = TrainConfig(k=12, max_epochs=15, batch_size=batch, seed=4)
        a, ra = train(two_cluster_val, cfg)
        b, rb = train(two_cluster_val, cfg)
        assert ra.to_dict() == rb.to_dict()
        assert a.positions.tobytes() == b.positions.tobytes()

    def test_fit_estimator_wraps(self, two_cluster_val):
        est, rep = fit_estimator(two_cluster_val, TrainConfig(k=4, max_epochs=2, kind="exponential"), 0.8)
        assert est.kind is E and est.alpha == 0.8 and est.num_classes == 2
        assert rep.epochs_run <= 2


class TestConfig:
    @pytest.mark.parametrize("bad", [{"k": 0}, {"epsilon": 0.0}, {"epsilon": 2.0},
                                     {"learning_rate": -1.0}, {"optimizer": "lbfgs"},
                                     {"init": "zeros"}, {"min_epochs": 5, "max_epochs": 2}])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(k=7, kind="exponential", freeze_peaks=True, learning_rate=3e-3)
        save_config(tmp_path / "t.cfg", cfg.to_dict())
        assert TrainConfig.from_dict(load_config(tmp_path / "t.cfg")) == cfg

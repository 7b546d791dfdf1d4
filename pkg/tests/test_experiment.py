import json
import math

import numpy as np
import pytest
from scipy import stats

import alsa.experiment as ex
from alsa.anchors import AnchorSet, Estimator
from alsa.config import load_config, save_config
from alsa.data import LabeledLogits, predict_and_score
from alsa.experiment import (
    ExperimentConfig,
    Report,
    diagnose,
    mae,
    pearson,
    r2_identity,
    summarize,
    timing_probe,
)


def small(**changes) -> ExperimentConfig:
    base = ExperimentConfig(
        num_classes=3, dim=4, separation=1.0, train_size=1500, val_size=600, test_size=1500,
        shift_count=4, shift_size=400, seeds=[0],
    ).replace(k=8, max_epochs=40)
    return base.replace(**changes)


@pytest.fixture(scope="module")
def small_report():
    return ex.run_experiment(small())


class TestMetrics:
    def test_mae(self):
        assert mae([0.5, 0.7], [0.4, 0.9]) == pytest.approx(0.15, abs=1e-15)

    def test_r2_perfect_and_identity_line(self):
        truth = np.array([0.2, 0.5, 0.7, 0.9])
        assert r2_identity(truth, truth) == 1.0
        # a constant offset fits a line perfectly but not y = x
        shifted = truth + 0.1
        ss_tot = np.sum((truth - truth.mean()) ** 2)
        assert r2_identity(shifted, truth) == pytest.approx(1 - 4 * 0.01 / ss_tot, abs=1e-12)
        assert r2_identity(truth[::-1], truth) < 0

    def test_pearson_matches_scipy(self, rng):
        a, b = rng.random(30), rng.random(30)
        assert pearson(a, b) == pytest.approx(stats.pearsonr(a, b)[0], abs=1e-12)
        assert math.isnan(pearson([0.5, 0.5], [0.1, 0.2]))
        assert pearson(a, -a) == -1.0


class TestConfig:
    def test_flat_round_trip_through_file(self, tmp_path):
        cfg = small(shift_kinds=["logit_scale", "logit_noise"], kinds=["exponential"])
        save_config(tmp_path / "e.cfg", cfg.to_flat())
        assert ExperimentConfig.from_flat(load_config(tmp_path / "e.cfg")) == cfg

    def test_shorthand_keys(self):
        cfg = ExperimentConfig.from_flat({"seed": 4, "kind": "exponential", "k": 12,
                                          "shift_kinds": "logit_scale"})
        assert cfg.seeds == [4] and cfg.kinds == ["exponential"]
        assert cfg.train.k == 12 and cfg.shift_kinds == ["logit_scale"]

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            ExperimentConfig.from_flat({"bogus": 1})

    def test_replace_routes_training_fields(self):
        cfg = ExperimentConfig().replace(k=5, alpha=0.8)
        assert cfg.train.k == 5 and cfg.alpha == 0.8
        assert cfg.train.init_variance_mean == ex.HARNESS_VARIANCE_MEAN


class TestRunExperiment:
    def test_rows_and_aggregates(self, small_report):
        rep = small_report
        assert len(rep.rows) == 4
        assert set(rep.summary) == {"AC", "DoC", "IM", "ATC", "ALSA-G"}
        for row in rep.rows:
            assert 0 <= row["true_accuracy"] <= 1 and "doc_printed" in row
            assert row["n"] == 400

    def test_summary_recomputes_from_rows(self, small_report, tmp_path):
        small_report.write(tmp_path)
        back = Report.read(tmp_path)
        assert back.rows == json.loads(json.dumps(small_report.rows))
        for source in (small_report, back):
            again = source.recompute_summary()
            for name, block in source.summary.items():
                for key in ("mae", "r2", "pearson"):
                    assert again[name][key] == pytest.approx(block[key], abs=1e-12)

    def test_mae_is_mean_absolute_error(self, small_report):
        errs = [abs(r["estimates"]["AC"] - r["true_accuracy"]) for r in small_report.rows]
        assert small_report.mae("AC") == pytest.approx(sum(errs) / len(errs), abs=1e-15)

    def test_twenty_shifts_three_seeds(self):
        cfg = small(shift_count=20, seeds=[0, 1, 2], max_epochs=5, shift_size=200)
        rep = ex.run_experiment(cfg)
        assert len(rep.rows) == 60
        assert all(block["count"] == 60 for block in rep.summary.values())
        assert "by_shift" in rep.extra and len(rep.extra["train_reports"]) == 3

    def test_identity_shift(self):
        cfg = small(shift_kinds=["identity"], max_epochs=400)
        rep = ex.run_experiment(cfg)
        _, test = ex.load_task(cfg, 0)
        (row,) = rep.rows
        assert row["true_accuracy"] == predict_and_score(test)[2]
        for name, value in row["estimates"].items():
            assert abs(value - row["true_accuracy"]) <= 0.05, name

    def test_deterministic(self):
        cfg = small(max_epochs=10)
        assert ex.run_experiment(cfg).rows == ex.run_experiment(cfg).rows

    def test_partial_report_on_failure(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        real = ex.apply_shift

        def flaky(data, spec):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("shift exploded")
            return real(data, spec)

        monkeypatch.setattr(ex, "apply_shift", flaky)
        with pytest.raises(RuntimeError):
            ex.run_experiment(small(max_epochs=5), out_dir=tmp_path)
        partial = Report.read(tmp_path)
        assert len(partial.rows) == 2
        assert partial.extra["partial"] is True and "shift exploded" in partial.extra["error"]

    def test_labels_required_for_file_tasks(self, tmp_path):
        from alsa.data import LogitMatrix, save_logits

        save_logits(tmp_path / "v.bin", LogitMatrix(np.eye(3) + 1))
        with pytest.raises(ValueError, match="labels"):
            ex.run_experiment(small(val_path=str(tmp_path / "v.bin")))

    def test_table_has_per_shift_blocks(self):
        rep = ex.run_experiment(small(shift_kinds=["label_shift_dirichlet", "logit_scale"],
                                      max_epochs=5, baselines=False))
        text = rep.table()
        assert "[all]" in text and "[logit_scale]" in text and "ALSA-G" in text


class TestStudies:
    def test_alpha_sweep_reuses_the_trained_anchors(self, small_report):
        rep = ex.sweep_alpha(small(), [0.5, 0.9, 0.99])
        assert set(rep.summary) == {"alpha=0.5", "alpha=0.9", "alpha=0.99"}
        for a, b in zip(rep.rows, small_report.rows):
            assert a["estimates"]["alpha=0.9"] == b["estimates"]["ALSA-G"]

    def test_anchor_count_sweep(self):
        rep = ex.sweep_anchor_count(small(max_epochs=5), [2, 6])
        assert set(rep.summary) == {"k=2", "k=6"} and len(rep.rows) == 4

    @pytest.mark.parametrize("study", [ex.sweep_alpha, ex.sweep_anchor_count])
    def test_empty_sweeps(self, study):
        with pytest.raises(ValueError):
            study(small(), [])

    def test_ablation_modes_and_frozen_groups(self):
        rep = ex.ablation_suite(small(max_epochs=10))
        assert list(rep.summary) == ["Lrn", "Fix-a", "Fix-p", "Fix-v", "Fix-p&v"]
        assert rep.extra["frozen_unchanged"] == {m: True for m in ex.ABLATION_MODES}

    def test_init_robustness_records(self):
        out = ex.init_robustness(small(num_classes=2, max_epochs=10), grid_shape=(6, 5))
        (rec,) = out
        assert rec["seed"] == 0 and rec["grid_points"] <= 30
        assert 0 <= rec["mean_abs_diff"] <= rec["max_abs_diff"] <= 1


class TestDiagnose:
    def test_orthogonal_logits(self):
        text, surface = diagnose(np.array([[1.0, -1.0, 0.0], [0.0, 2.0, -2.0], [-3.0, 0.0, 3.0]]), m=8)
        assert "width 0\n" in text and "within bound: yes" in text
        assert surface is None

    def test_bound_line(self, rng):
        text, _ = diagnose(rng.normal(size=(50, 10)), m=128, z=3.291)
        assert "(m=128, c=10, z=3.291): 1.121" in text

    def test_prediction_counts_and_accuracy(self):
        data = LabeledLogits([[2.0, 0.0], [0.0, 1.0], [3.0, 1.0]], [0, 0, 0])
        text, _ = diagnose(data, m=4)
        assert "0:2 1:1" in text and "accuracy: 0.666667" in text

    def test_surface_export_size(self, rng, tmp_path):
        z = rng.normal(size=(200, 3)) * 2
        est = Estimator(AnchorSet(rng.normal(size=(4, 3)), rng.normal(size=4), np.ones(4)))
        _, surface = diagnose(z, m=8, estimator=est, grid_shape=(7, 9))
        assert surface.shape == (7, 9)
        assert surface.write_csv(tmp_path / "s.csv") == 63
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert len(lines) == 64 and lines[0] == "u,v,logit_0,logit_1,logit_2,p_true"

    def test_no_surface_for_many_classes(self, rng):
        est = Estimator(AnchorSet(rng.normal(size=(2, 5)), [1.0, -1.0], [1.0, 1.0]))
        assert diagnose(rng.normal(size=(20, 5)), 8, estimator=est)[1] is None


class TestTiming:
    def test_rows_per_size(self, rng):
        est = Estimator(AnchorSet(rng.normal(size=(8, 4)), rng.normal(size=8), np.ones(8)))
        table = timing_probe(est, [100, 200, 400], repeats=1)
        assert [r["n"] for r in table] == [100, 200, 400]
        assert table[0]["ratio"] is None and all(r["k"] == 8 for r in table)
        assert table[1]["ratio"] == pytest.approx(table[1]["seconds"] / table[0]["seconds"])

    def test_sizes_must_ascend(self, rng):
        est = Estimator(AnchorSet(rng.normal(size=(2, 3)), [1.0, 1.0], [1.0, 1.0]))
        with pytest.raises(ValueError):
            timing_probe(est, [200, 100])


def test_summarize_skips_unlabeled_rows():
    rows = [{"true_accuracy": 0.5, "estimates": {"A": 0.6}},
            {"true_accuracy": None, "estimates": {"A": 0.9}}]
    assert summarize(rows)["A"]["count"] == 1
    assert summarize(rows)["A"]["mae"] == pytest.approx(0.1)

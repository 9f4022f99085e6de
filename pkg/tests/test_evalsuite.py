"""Discriminative/predictive score calibration and the exact t-SNE embedding."""

import math

import numpy as np
import pytest

from stagediff.errors import ConfigError, NumericsError
from stagediff.evalsuite import (
    MetricConfig,
    MetricsReport,
    discriminative_score,
    predictive_score,
    run_report,
    tsne_embed,
)
from stagediff.evalsuite.tsne import joint_affinities

from synthdata import sine_windows

FAST = MetricConfig(repetitions=2, epochs=3, seed=0)


class TestMetricConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            MetricConfig(train_split=1.0).validate()
        with pytest.raises(ConfigError):
            MetricConfig(repetitions=0).validate()
        with pytest.raises(ConfigError):
            MetricConfig(tsne_sample_cap=40, tsne_perplexity=30).validate()

    def test_default_hidden_scales_with_features(self):
        assert MetricConfig().hidden_for(1) == 8
        assert MetricConfig().hidden_for(6) == 24


class TestDiscriminativeScore:
    def test_real_vs_real_calibration(self):
        # Two halves of the same distribution should be near-inseparable.
        windows = sine_windows(192, L=24, D=2, seed=1)
        score = discriminative_score(windows[:96], windows[96:], FAST)
        assert 0.0 <= score.mean <= 0.5
        assert score.mean <= 0.10

    def test_separable_sets_score_high(self):
        real = sine_windows(96, L=24, D=2, seed=2)
        rng = np.random.default_rng(3)
        fake = np.clip(rng.uniform(size=(96, 24, 2)), 0, 1)
        score = discriminative_score(real, fake, FAST)
        assert score.mean > 0.25

    def test_bounds_always_hold(self):
        windows = sine_windows(40, L=16, D=1, seed=4)
        score = discriminative_score(windows[:20], windows[20:], MetricConfig(repetitions=1, epochs=1))
        for run in score.runs:
            assert 0.0 <= run <= 0.5

    def test_deterministic_under_seed(self):
        windows = sine_windows(60, L=16, D=2, seed=5)
        a = discriminative_score(windows[:30], windows[30:], FAST)
        b = discriminative_score(windows[:30], windows[30:], FAST)
        assert a.runs == b.runs

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            discriminative_score(np.zeros((4, 8, 2)), np.zeros((4, 8, 3)), FAST)

    def test_degenerate_split(self):
        with pytest.raises(ValueError, match="split"):
            discriminative_score(np.zeros((1, 8, 1)), np.zeros((1, 8, 1)), FAST)

    def test_unbalanced_sets_subsampled(self):
        windows = sine_windows(90, L=16, D=1, seed=6)
        score = discriminative_score(windows[:60], windows[60:], MetricConfig(repetitions=1, epochs=1))
        assert 0.0 <= score.mean <= 0.5


class TestPredictiveScore:
    def test_train_on_real_equals_trtr_baseline(self):
        windows = sine_windows(64, L=24, D=2, seed=7)
        tstr = predictive_score(windows, windows, FAST)
        trtr = predictive_score(windows, windows, FAST)
        assert tstr.runs == trtr.runs

    def test_constant_synth_closed_form(self):
        # AR(0) oracle: real = c + eps with eps ~ N(0, sigma^2); a predictor
        # trained on constant-c windows should score ~ E|eps| = sigma sqrt(2/pi).
        rng = np.random.default_rng(8)
        c, sigma = 0.5, 0.05
        synth = np.full((64, 24, 1), c)
        real = np.clip(c + rng.normal(scale=sigma, size=(64, 24, 1)), 0, 1)
        cfg = MetricConfig(repetitions=2, epochs=10, seed=1)
        score = predictive_score(real, synth, cfg)
        expected = sigma * math.sqrt(2 / math.pi)
        assert score.mean == pytest.approx(expected, rel=0.35)

    def test_nonnegative(self):
        windows = sine_windows(40, L=16, D=2, seed=9)
        score = predictive_score(windows[:20], windows[20:], MetricConfig(repetitions=1, epochs=1))
        assert score.mean >= 0.0

    def test_deterministic_under_seed(self):
        windows = sine_windows(48, L=16, D=2, seed=10)
        a = predictive_score(windows[:24], windows[24:], FAST)
        b = predictive_score(windows[:24], windows[24:], FAST)
        assert a.runs == b.runs

    def test_length_one_rejected(self):
        with pytest.raises(ValueError, match="length"):
            predictive_score(np.zeros((4, 1, 2)), np.zeros((4, 1, 2)), FAST)


def cluster_windows(n, level, L=16, D=2, seed=0):
    rng = np.random.default_rng(seed)
    return np.clip(level + rng.normal(scale=0.02, size=(n, L, D)), 0, 1)


TSNE_CFG = MetricConfig(
    seed=3, tsne_perplexity=10, tsne_iterations=300, tsne_sample_cap=200
)


class TestTsne:
    def test_affinity_matrix_properties(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(50, 8))
        P = joint_affinities(x, perplexity=10)
        assert np.allclose(P, P.T)
        assert (P >= 0).all()
        assert P.sum() == pytest.approx(1.0, abs=1e-9)
        # Each row of the symmetrized joint sums to ~1/n.
        assert np.allclose(P.sum(axis=1), 1.0 / 50, atol=1e-3)

    def test_recovers_planted_clusters(self):
        from sklearn.metrics import silhouette_score

        real = cluster_windows(60, 0.25, seed=12)
        synth = cluster_windows(60, 0.75, seed=13)
        result = tsne_embed(real, synth, TSNE_CFG)
        assert result.kl_final < result.kl_initial
        assert np.isfinite(result.coords).all()
        assert silhouette_score(result.coords, result.labels) > 0.5

    def test_deterministic(self):
        real = cluster_windows(50, 0.4, seed=14)
        synth = cluster_windows(50, 0.6, seed=15)
        a = tsne_embed(real, synth, TSNE_CFG)
        b = tsne_embed(real, synth, TSNE_CFG)
        assert np.array_equal(a.coords, b.coords)

    def test_identical_points_jittered(self):
        real = np.full((40, 8, 1), 0.5)
        synth = np.full((40, 8, 1), 0.5)
        result = tsne_embed(real, synth, TSNE_CFG)
        assert np.isfinite(result.coords).all()

    def test_subsampling_respects_cap(self):
        cfg = MetricConfig(seed=0, tsne_perplexity=5, tsne_iterations=60, tsne_sample_cap=25)
        result = tsne_embed(
            cluster_windows(100, 0.3, seed=16), cluster_windows(90, 0.7, seed=17), cfg
        )
        assert result.coords.shape == (50, 2)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="perplexity"):
            tsne_embed(cluster_windows(10, 0.3), cluster_windows(10, 0.7), TSNE_CFG)

    def test_outputs_written(self, tmp_path):
        real = cluster_windows(50, 0.35, seed=18)
        synth = cluster_windows(50, 0.65, seed=19)
        csv_path = tmp_path / "emb" / "coords.csv"
        plot_path = tmp_path / "emb" / "scatter.png"
        result = tsne_embed(real, synth, TSNE_CFG, csv_path=csv_path, plot_path=plot_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "x,y,label"
        assert len(lines) == 1 + len(result.labels)
        assert plot_path.stat().st_size > 0


class TestRunReport:
    def test_single_model_single_row(self):
        windows = sine_windows(48, L=16, D=2, seed=20)
        report = run_report(windows[:24], {"model": windows[24:]}, MetricConfig(repetitions=1, epochs=1))
        assert len(report.rows) == 1
        assert report.rows[0].name == "model"

    def test_four_variant_rows(self):
        windows = sine_windows(60, L=16, D=1, seed=21)
        sets = {name: windows[i * 12 : (i + 1) * 12] for i, name in enumerate(["none", "no_ci", "no_cd", "no_stage"])}
        report = run_report(windows[48:], sets, MetricConfig(repetitions=1, epochs=1))
        assert [r.name for r in report.rows] == ["none", "no_ci", "no_cd", "no_stage"]
        table = report.to_table()
        assert "no_stage" in table and "disc" in table

    def test_identical_inputs_identical_scores(self):
        windows = sine_windows(40, L=16, D=1, seed=22)
        cfg = MetricConfig(repetitions=1, epochs=1)
        report = run_report(windows[:20], {"a": windows[20:], "b": windows[20:]}, cfg)
        assert report.rows[0].discriminative_mean == report.rows[1].discriminative_mean
        assert report.rows[0].predictive_mean == report.rows[1].predictive_mean

    def test_report_files_written(self, tmp_path):
        windows = sine_windows(40, L=16, D=1, seed=23)
        run_report(
            windows[:20],
            {"m": windows[20:]},
            MetricConfig(repetitions=1, epochs=1),
            out_dir=tmp_path,
        )
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "report.txt").exists()
        import json

        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["rows"][0]["name"] == "m"

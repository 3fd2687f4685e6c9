"""Metrics, significance tests, trajectory dumps, ablation harness."""

import copy
import json
import math

import numpy as np
import pytest
from scipy import integrate

from mmfusion.cohort import SyntheticConfig, generate_cohort
from mmfusion.errors import CheckpointError, ConfigurationError, TrainingDiverged
from mmfusion.evalkit import (
    ablation_rows,
    aggregate_metrics,
    classification_metrics,
    davies_bouldin,
    export_trajectory,
    load_trajectory,
    paired_t_test,
    pca_projection,
    run_ablation,
)
from mmfusion.trainer import TrainConfig, train_model, warmup_guidance

GRID = (4, 8, 8)
DIMS = (4, 4, 6)


def _cohort(n=24, seed=2, noise=0.0, signal=3.0):
    cfg = SyntheticConfig(n_patients=n, grid_shape=GRID, vector_dims=DIMS,
                          noise_level=noise, signal_strength=signal,
                          prevalence=0.5, seed=seed)
    return generate_cohort(cfg)


def _tiny_config(**kw):
    base = dict(variant="full", latent_dim=8, heads=4, epochs=4, warmup_epochs=2,
                restart_epoch=4, lr=2e-3, min_lr=2e-3, batch_size=12,
                sample_chains=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestClassificationMetrics:
    def test_four_sample_confusion_matrix(self):
        report = classification_metrics([1, 1, 0, 0], [1, 0, 0, 0])
        assert report["accuracy"] == 75.0
        assert report["precision"] == 50.0
        assert report["recall"] == 100.0
        assert report["f1"] == pytest.approx(66.6667, abs=1e-3)

    def test_perfect_prediction(self):
        report = classification_metrics([0, 1, 1, 0, 1], [0, 1, 1, 0, 1])
        assert all(report[m] == 100.0 for m in report)

    def test_matches_bruteforce_counter(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 2, 200)
        true = rng.integers(0, 2, 200)
        tp = tn = fp = fn = 0
        for p, t in zip(pred, true):
            if p == 1 and t == 1:
                tp += 1
            elif p == 0 and t == 0:
                tn += 1
            elif p == 1 and t == 0:
                fp += 1
            else:
                fn += 1
        got = classification_metrics(pred, true)
        assert got["accuracy"] == pytest.approx(100 * (tp + tn) / 200, abs=1e-10)
        assert got["precision"] == pytest.approx(100 * tp / (tp + fp), abs=1e-10)
        assert got["recall"] == pytest.approx(100 * tp / (tp + fn), abs=1e-10)
        pr, rc = tp / (tp + fp), tp / (tp + fn)
        assert got["f1"] == pytest.approx(100 * 2 * pr * rc / (pr + rc), abs=1e-10)

    def test_zero_denominator_conventions(self):
        never_positive = classification_metrics([0, 0, 0], [1, 1, 0])
        assert never_positive["precision"] == 0.0
        assert never_positive["recall"] == 0.0
        assert never_positive["f1"] == 0.0
        all_negative = classification_metrics([0, 0], [0, 0])
        assert all_negative["accuracy"] == 100.0
        assert all_negative["recall"] == 0.0

    def test_input_validation(self):
        with pytest.raises(ConfigurationError):
            classification_metrics([1, 0], [1])
        with pytest.raises(ConfigurationError):
            classification_metrics([], [])
        with pytest.raises(ConfigurationError):
            classification_metrics([1, 2], [1, 0])

    def test_aggregate_mean_and_sample_std(self):
        folds = [classification_metrics([1, 1, 0, 0, 1], [1, 0, 0, 0, 1]),
                 classification_metrics([1, 0, 0, 0, 1], [1, 0, 0, 0, 1])]
        agg = aggregate_metrics(folds)
        assert agg["accuracy"]["mean"] == pytest.approx((80.0 + 100.0) / 2)
        assert agg["accuracy"]["std"] == pytest.approx(np.std([80, 100], ddof=1))
        assert agg["accuracy"]["per_fold"] == [80.0, 100.0]
        single = aggregate_metrics(folds[:1])
        assert single["f1"]["std"] == 0.0


class TestPairedTTest:
    def test_identical_lists(self):
        assert paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0

    def test_constant_nonzero_difference(self):
        assert paired_t_test([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]) == 0.0

    def test_matches_density_integration(self):
        a = [2.0, 2.5, 1.8]
        b = [1.0, 1.2, 0.9]
        d = np.array(a) - np.array(b)
        t = d.mean() / (d.std(ddof=1) / math.sqrt(3))
        nu = 2
        norm = math.gamma((nu + 1) / 2) / (math.sqrt(nu * math.pi) * math.gamma(nu / 2))
        pdf = lambda x: norm * (1 + x * x / nu) ** (-(nu + 1) / 2)
        tail, _ = integrate.quad(pdf, abs(t), np.inf)
        assert paired_t_test(a, b) == pytest.approx(2 * tail, abs=1e-6)

    def test_symmetric_in_sign(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        assert paired_t_test(a, b) == pytest.approx(paired_t_test(b, a), abs=1e-14)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            paired_t_test([1.0], [2.0])
        with pytest.raises(ConfigurationError):
            paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])


class TestDaviesBouldin:
    def test_zero_scatter_clusters(self):
        pts = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
        assert davies_bouldin(pts, [0, 0, 1, 1]) == 0.0

    def test_hand_derived_example(self):
        pts = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [12.0, 0.0]])
        assert davies_bouldin(pts, [0, 0, 1, 1]) == pytest.approx(0.2, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((40, 3)) + rng.integers(0, 3, 40)[:, None] * 4
        labels = rng.integers(0, 3, 40)
        if np.unique(labels).size < 2:
            labels[0] = (labels[0] + 1) % 3
        classes = sorted(set(labels.tolist()))
        cents, scats = [], []
        for c in classes:
            members = [pts[i] for i in range(40) if labels[i] == c]
            cent = [sum(p[d] for p in members) / len(members) for d in range(3)]
            scat = sum(math.dist(p, cent) for p in members) / len(members)
            cents.append(cent)
            scats.append(scat)
        expected = 0.0
        for i in range(len(classes)):
            best = 0.0
            for j in range(len(classes)):
                if i != j:
                    best = max(best, (scats[i] + scats[j]) / math.dist(cents[i], cents[j]))
            expected += best
        expected /= len(classes)
        assert davies_bouldin(pts, labels) == pytest.approx(expected, abs=1e-10)

    def test_shrinking_scatter_decreases_score(self):
        rng = np.random.default_rng(1)
        offsets = rng.standard_normal((20, 2))
        offsets -= offsets.mean(axis=0)
        labels = [0] * 20 + [1] * 20
        scores = []
        for scale in (1.0, 0.5, 0.25):
            pts = np.concatenate([offsets * scale, offsets * scale + [8.0, 0.0]])
            scores.append(davies_bouldin(pts, labels))
        assert scores[0] > scores[1] > scores[2]

    def test_rigid_motion_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((30, 2)) + np.repeat([[0, 0], [6, 1], [0, 7]],
                                                       10, axis=0)
        labels = np.repeat([0, 1, 2], 10)
        base = davies_bouldin(pts, labels)
        theta = 0.7
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        moved = pts @ rot.T + np.array([13.0, -4.0])
        assert davies_bouldin(moved, labels) == pytest.approx(base, abs=1e-10)
        assert davies_bouldin(pts * 37.5, labels) == pytest.approx(base, abs=1e-10)

    def test_single_cluster_rejected(self):
        with pytest.raises(ConfigurationError):
            davies_bouldin(np.zeros((4, 2)), [1, 1, 1, 1])


class TestPca:
    def test_recovers_planted_axis(self):
        rng = np.random.default_rng(0)
        axis = np.array([3.0, 4.0]) / 5.0
        pts = rng.standard_normal((200, 1)) * 10 * axis + rng.standard_normal((200, 2)) * 0.1
        coords, comps = pca_projection(pts)
        assert abs(float(comps[0] @ axis)) > 0.999
        assert comps.shape == (2, 2)
        assert np.allclose(comps @ comps.T, np.eye(2), atol=1e-10)
        assert coords[:, 0].var() > coords[:, 1].var()

    def test_full_rank_projection_reconstructs(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((50, 4))
        coords, comps = pca_projection(pts, n_components=4)
        centered = pts - pts.mean(axis=0)
        assert np.allclose(coords @ comps, centered, atol=1e-10)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((30, 3))
        a_coords, a_comps = pca_projection(pts)
        b_coords, b_comps = pca_projection(pts.copy())
        assert np.array_equal(a_coords, b_coords)
        assert np.array_equal(a_comps, b_comps)

    def test_component_bounds(self):
        with pytest.raises(ConfigurationError):
            pca_projection(np.zeros((5, 2)), n_components=3)
        with pytest.raises(ConfigurationError):
            pca_projection(np.zeros((5, 2)), n_components=0)


@pytest.fixture(scope="module")
def trained():
    cohort = _cohort(n=24)
    ck = train_model(cohort[:16], cohort[16:20], _tiny_config())
    return ck, cohort[20:]


class TestTrajectory:
    def test_snapshot_count_and_shapes(self, trained):
        ck, test = trained
        dump = export_trajectory(ck, test, chains=8, rng=np.random.default_rng(0))
        assert len(dump) == ck.model.spec.timesteps + 1 == 11
        assert dump.timesteps == list(range(10, -1, -1))
        for emb, coords in zip(dump.embeddings, dump.pca_coords):
            assert emb.shape == (len(test), 2)
            assert emb.dtype == np.float32
            assert coords.shape == (len(test), 2)
        assert all(s >= 0 and np.isfinite(s) for s in dump.db_scores)
        assert dump.chains == 8
        assert not np.array_equal(dump.embeddings[0], dump.embeddings[-1])

    def test_deterministic_given_rng(self, trained):
        ck, test = trained
        a = export_trajectory(ck, test, chains=4, rng=np.random.default_rng(7))
        b = export_trajectory(ck, test, chains=4, rng=np.random.default_rng(7))
        assert a.db_scores == b.db_scores
        for x, y in zip(a.embeddings, b.embeddings):
            assert np.array_equal(x, y)

    def test_start_centered_on_guidance(self, trained):
        # chain mean at t=T estimates f with standard error 1/sqrt(K)
        from mmfusion.model import collate
        import torch
        ck, test = trained
        dump = export_trajectory(ck, test, chains=512, rng=np.random.default_rng(3))
        with torch.no_grad():
            f = ck.model.guidance_forward(collate(test), mode="infer").probs.numpy()
        assert np.abs(dump.embeddings[0] - f).max() < 5 / math.sqrt(512)

    def test_dump_round_trip(self, trained, tmp_path):
        ck, test = trained
        out = tmp_path / "traj" / "dump.json"
        dump = export_trajectory(ck, test, chains=4,
                                 rng=np.random.default_rng(1), out_path=out)
        manifest = json.loads(out.read_text())
        assert manifest["format"] == "mmfusion-trajectory-v1"
        assert len(manifest["blobs"]) == 11
        back = load_trajectory(out)
        assert back.timesteps == dump.timesteps
        assert back.db_scores == pytest.approx(dump.db_scores)
        assert back.record_ids == dump.record_ids
        for x, y in zip(back.embeddings, dump.embeddings):
            assert np.array_equal(x, y)
        for x, y in zip(back.pca_coords, dump.pca_coords):
            assert np.allclose(x, y, atol=1e-6)

    def test_rejections(self, trained, tmp_path):
        ck, test = trained
        with pytest.raises(CheckpointError):
            export_trajectory(tmp_path / "missing.ckpt", test)
        cohort = _cohort(n=12, seed=5)
        idle = warmup_guidance(cohort, _tiny_config(warmup_epochs=0, epochs=2))
        with pytest.raises(ConfigurationError, match="history"):
            export_trajectory(idle, test)
        shallow = train_model(cohort, cohort, _tiny_config(variant="base3",
                                                           epochs=2, warmup_epochs=1))
        with pytest.raises(ConfigurationError, match="variant"):
            export_trajectory(shallow, test)
        with pytest.raises(ConfigurationError):
            export_trajectory(ck, [])
        single_class = [r for r in test if r.label == test[0].label]
        with pytest.raises(ConfigurationError, match="single class"):
            export_trajectory(ck, single_class)


class TestAblation:
    def test_row_definitions(self):
        rows = ablation_rows("ablation")
        assert [name for name, _ in rows] == ["base1", "base2", "base3", "full"]
        grid = ablation_rows("table3")
        assert len(grid) == 8
        assert len({name for name, _ in grid}) == 8
        for _, overrides in grid:
            TrainConfig.from_dict({**TrainConfig().to_dict(), **overrides})
        with pytest.raises(ConfigurationError):
            ablation_rows("table9")

    def test_ablation_run_structure(self):
        cohort = _cohort(n=36, seed=4)
        cfg = _tiny_config(epochs=2, warmup_epochs=1, restart_epoch=2)
        results = run_ablation(cohort, cfg, grid="ablation", folds=3, seeds=(0,))
        assert [r["name"] for r in results["rows"]] == ["base1", "base2", "base3", "full"]
        for row in results["rows"]:
            for m in ("accuracy", "precision", "recall", "f1"):
                cell = row["metrics"][m]
                assert 0.0 <= cell["mean"] <= 100.0
                assert len(cell["per_fold"]) == 3
        assert results["reference"] == "full"
        assert set(results["p_values"]) == {"base1", "base2", "base3"}
        for pvals in results["p_values"].values():
            assert all(0.0 <= p <= 1.0 for p in pvals.values())
        assert "low statistical power" in results["note"]
        assert json.dumps(results)  # report must be JSON-serializable

    def test_table3_run_structure(self):
        cohort = _cohort(n=36, seed=4)
        cfg = _tiny_config(epochs=1, warmup_epochs=1, restart_epoch=1)
        results = run_ablation(cohort, cfg, grid="table3", folds=3, seeds=(0,))
        assert len(results["rows"]) == 8
        assert results["reference"] == "resnet_small+gat+mask"
        assert len(results["p_values"]) == 7

    def test_training_failure_names_variant(self):
        cohort = _cohort(n=36, seed=4)
        for rec in cohort:
            rec.tumor_volume[0, 0, 0] = np.nan
        cfg = _tiny_config(epochs=2, warmup_epochs=1, restart_epoch=2)
        with pytest.raises(TrainingDiverged, match=r"\[base1\]"):
            run_ablation(cohort, cfg, grid="ablation", folds=3, seeds=(0,))

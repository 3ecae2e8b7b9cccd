import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ccgan import core, harness, nn, synth, text
from ccgan.core import TrainConfig
from ccgan.errors import ConfigError, ContractError, DataError

SMALL = harness.SyntheticTaskSpec(k=2, shifts=(0.5, 3.0), d=4, n=64, seed=0)


def small_run(arm, out_dir=None, task=SMALL, steps=30, seed=0):
    config = harness.ExperimentConfig(task, train=TrainConfig(batch_size=32, total_steps=steps, eval_every=10,
                                                               seed=seed), arm=arm, out_dir=out_dir)
    return harness.run_experiment(config)


class TestAccuracy:
    def test_examples(self):
        assert harness.accuracy([1, 0, 1], [1, 0, 1]) == 1.0
        assert harness.accuracy([0, 1, 1], [0, 0, 1]) == 2 / 3

    def test_empty(self):
        with pytest.raises(DataError):
            harness.accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            harness.accuracy([0, 1], [0])

    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        p, l = zip(*pairs)
        sp, sl = zip(*shuffled)
        assert harness.accuracy(p, l) == harness.accuracy(sp, sl)


class TestTaskLoading:
    def test_missing_target(self):
        data = text.EncodedDataset(np.zeros((4, 2)), [0, 1, 0, 1], ["a", "a", "b", "b"])
        with pytest.raises(ConfigError, match="'c'"):
            harness.load_task(data, "c")

    def test_split_pools_other_domains(self, tmp_path):
        data = text.EncodedDataset(np.arange(12.0).reshape(6, 2), [0, 1, 0, 1, 1, 0],
                                   ["books", "dvd", "books", "kitchen", "kitchen", "dvd"])
        path = tmp_path / "e.txt"
        text.save_embeddings(path, data)
        task = harness.load_task(str(path), "dvd")
        assert task.source_tags == ["books", "kitchen"]
        assert task.target.labels is None
        assert_array_equal(task.evaluation_labels(), [1, 0])

    def test_unlabelled_source_rejected(self):
        data = text.EncodedDataset(np.zeros((3, 2)), [0, -1, 1], ["a", "a", "t"])
        with pytest.raises(DataError):
            harness.load_task(data, "t")

    def test_unknown_arm(self):
        with pytest.raises(ConfigError):
            harness.ExperimentConfig(SMALL, arm="dann")


class TestRunExperiment:
    def test_outputs(self, tmp_path):
        result = small_run("ccgan_model_free", tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["metrics.jsonl", "model.ckpt", "summary.json", "timing.jsonl"]
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [10, 20, 30]
        first = json.loads(lines[0])
        assert list(first) == list(harness.METRIC_FIELDS)
        assert 0 <= first["target_accuracy"] <= 1
        assert sorted(first["source_weights"]) == ["source0", "source1"]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["final_target_accuracy"] == result.records[-1].target_accuracy
        bd = summary["loss_breakdown"]
        assert abs(sum(bd["contributions"].values()) - bd["total"]) < 1e-9
        ckpt = nn.load_checkpoint(tmp_path / "model.ckpt")
        assert sorted(ckpt.networks) == ["D_s", "D_t", "G_st", "G_ts", "f_t"]

    def test_source_only_has_no_generators(self, tmp_path):
        small_run("source_only_combined", tmp_path)
        ckpt = nn.load_checkpoint(tmp_path / "model.ckpt")
        assert sorted(ckpt.networks) == ["f_t"]

    def test_model_based_saves_selection_networks(self, tmp_path):
        small_run("ccgan_model_based", tmp_path, steps=10)
        assert {"h_s", "h_t"} <= set(nn.load_checkpoint(tmp_path / "model.ckpt").networks)

    def test_identical_config_identical_outputs(self, tmp_path):
        small_run("ccgan_model_free", tmp_path / "a")
        small_run("ccgan_model_free", tmp_path / "b")
        for name in ("metrics.jsonl", "summary.json", "model.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_target_labels_never_reach_training(self, tmp_path):
        clean = SMALL.build()
        flipped = synth.MultiSourceTask(clean.sources, clean.target, 1 - clean.evaluation_labels(), clean.oracle)
        a = small_run("ccgan_model_based", tmp_path / "a", task=clean, steps=20)
        b = small_run("ccgan_model_based", tmp_path / "b", task=flipped, steps=20)
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
        for ra, rb in zip(a.records, b.records):
            assert ra.total == rb.total
            assert ra.target_accuracy + rb.target_accuracy == pytest.approx(1.0)

    def test_batch_too_large(self):
        with pytest.raises(DataError):
            small_run("ccgan_model_free", task=harness.SyntheticTaskSpec(k=2, shifts=(0, 0), d=4, n=8))


@pytest.fixture(scope="module")
def trained():
    return small_run("ccgan_model_free", steps=20)


class TestWeightAudit:
    def test_batches_sum_to_one(self, trained):
        audit = harness.weight_audit(trained.model, trained.task, 10, "model_free", 32)
        assert_allclose(audit.batch_sums, 1.0, atol=1e-9)
        assert sorted(audit.mean_weight) == ["source0", "source1"]

    def test_single_source(self, trained):
        one = trained.task.sources[0]
        audit = harness.weight_audit(trained.model, one, 5, "model_free", 16)
        assert audit.mean_weight == {"source0": pytest.approx(1 / 16)}

    def test_mode_none(self, trained):
        with pytest.raises(ContractError):
            harness.weight_audit(trained.model, trained.task, 5, "none")

    def test_model_based_needs_h(self, trained):
        with pytest.raises(ContractError):
            harness.weight_audit(trained.model, trained.task, 5, "model_based")


class TestPca:
    def test_collinear(self):
        t = np.linspace(-1, 1, 50)
        data = text.EncodedDataset(np.column_stack([t, 2 * t]), None, ["a"] * 50)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            proj = harness.pca_project(data)
        assert any("rank" in str(w.message) for w in caught)
        assert abs(proj.explained_variance_ratio[0] - 1.0) < 1e-12
        assert proj.explained_variance_ratio[1] == 0.0
        assert not proj.coords[:, 1].any()
        assert_allclose(proj.components[0], [1 / np.sqrt(5), 2 / np.sqrt(5)], rtol=1e-9)

    def test_isotropic_gaussian(self):
        x = np.random.default_rng(0).standard_normal((10_000, 4))
        proj = harness.pca_project(text.EncodedDataset(x))
        assert abs(proj.explained_variance_ratio[0] - 0.25) < 0.025

    def test_matches_eigendecomposition(self, rng):
        x = rng.standard_normal((300, 5)) @ np.diag([5.0, 3.0, 1.0, 0.5, 0.1])
        proj = harness.pca_project(text.EncodedDataset(x))
        xc = x - x.mean(axis=0)
        vals, vecs = np.linalg.eigh(xc.T @ xc / len(x))
        for k in range(2):
            v = vecs[:, -1 - k]
            assert_allclose(np.abs(proj.components[k] @ v), 1.0, atol=1e-8)
            assert proj.components[k][np.flatnonzero(np.abs(proj.components[k]) > 1e-12)[0]] > 0

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_row_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((60, 3)) @ np.diag([3.0, 1.5, 0.5])
        perm = rng.permutation(60)
        a = harness.pca_project(text.EncodedDataset(x))
        b = harness.pca_project(text.EncodedDataset(x[perm]))
        assert_allclose(a.coords[perm], b.coords, atol=1e-6)

    def test_too_few_rows(self):
        with pytest.raises(DataError):
            harness.pca_project(text.EncodedDataset(np.zeros((1, 3))))

    def test_dump(self, tmp_path):
        data = [text.EncodedDataset(np.eye(3), None, ["s"] * 3), text.EncodedDataset(-np.eye(3), None, ["t"] * 3)]
        proj = harness.pca_project(data)
        path = tmp_path / "p.tsv"
        harness.write_pca_dump(path, proj)
        lines = path.read_text().splitlines()
        assert lines[0] == "x\ty\tdomain"
        assert len(lines) == 7
        x, y, tag = lines[1].split("\t")
        assert float(x) == proj.coords[0, 0] and tag == "s"

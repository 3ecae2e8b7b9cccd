import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ccgan import synth
from ccgan.errors import ContractError, DataError, SpecError

MEANS = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def spec(**kw):
    base = dict(class_means=MEANS, sigma=1.0, offset=[0.5, -2.0, 1.0], samples_per_class=50, seed=3)
    base.update(kw)
    return synth.SyntheticDomainSpec(**base)


class TestGenerateDomain:
    def test_tiny_noise(self):
        data = synth.generate_domain(spec(sigma=1e-9))
        centres = MEANS[data.labels] + np.array([0.5, -2.0, 1.0])
        assert np.abs(data.representations - centres).max() < 1e-6

    def test_law_of_large_numbers(self):
        data = synth.generate_domain(spec(samples_per_class=(10_000, 0)))
        mean = data.representations.mean(axis=0)
        assert np.all(np.abs(mean - (MEANS[0] + [0.5, -2.0, 1.0])) < 3 / math.sqrt(10_000))

    def test_seeded(self):
        a, b = synth.generate_domain(spec()), synth.generate_domain(spec())
        assert_array_equal(a.representations, b.representations)
        assert not np.array_equal(a.representations, synth.generate_domain(spec(seed=4)).representations)

    def test_zero_samples(self):
        with pytest.raises(DataError):
            synth.generate_domain(spec(samples_per_class=0))

    @pytest.mark.parametrize("kw", [
        {"sigma": 0.0},
        {"class_means": [[0.0, 0.0]], "offset": None},
        {"class_means": [[0.0], [1.0]], "offset": None},
        {"offset": [1.0, 2.0]},
        {"samples_per_class": (5, -1)},
    ])
    def test_invalid(self, kw):
        with pytest.raises(SpecError):
            spec(**kw)


class TestBayes:
    @pytest.mark.parametrize("distance, expected", [(0.0, 0.5), (2.0, 0.8413447460685429), (80.0, 1.0)])
    def test_closed_form(self, distance, expected):
        assert abs(synth.two_class_bayes_accuracy(distance, 1.0) - expected) < 1e-15

    def test_task_oracle_and_monte_carlo(self):
        task = synth.make_multisource_task(2, [0.5, 3.0], seed=0)
        closed = synth.bayes_accuracy(task)
        assert abs(closed - 0.8413447460685429) < 1e-15
        p, se = synth.bayes_accuracy_mc(task, n_samples=200_000)
        assert abs(p - closed) < 4 * se

    def test_unknown_parameters(self):
        task = synth.make_multisource_task(2, [0.5, 3.0], seed=0)
        plain = synth.MultiSourceTask(task.sources, task.target, None)
        with pytest.raises(ContractError):
            synth.bayes_accuracy(plain)

    @given(st.floats(0, 20), st.floats(0, 20), st.floats(0.1, 5))
    def test_monotone(self, a, b, sigma):
        lo, hi = sorted((a, b))
        assert synth.two_class_bayes_accuracy(lo, sigma) <= synth.two_class_bayes_accuracy(hi, sigma)


class TestMultiSourceTask:
    def test_distances_recorded(self):
        task = synth.make_multisource_task(2, [0.5, 3.0], d=16, seed=1)
        assert task.oracle.source_distances == (0.5, 3.0)
        norms = [np.linalg.norm(o) for o in task.oracle.source_offsets]
        assert_allclose(norms, [0.5, 3.0], rtol=1e-12)
        assert task.source_tags == ["source0", "source1"]

    def test_reproducible(self):
        a = synth.make_multisource_task(3, [0.5, 1.0, 2.0], seed=7)
        b = synth.make_multisource_task(3, [0.5, 1.0, 2.0], seed=7)
        for x, y in zip(a.sources + [a.target], b.sources + [b.target]):
            assert_array_equal(x.representations, y.representations)

    def test_zero_shift_sources_match_target_distribution(self):
        task = synth.make_multisource_task(2, [0.0, 0.0], d=4, n=5000, seed=2)
        for s in task.sources:
            assert np.abs(s.representations.mean(axis=0) - task.target.representations.mean(axis=0)).max() < 0.1

    def test_target_labels_unreachable_from_training_accessors(self):
        task = synth.make_multisource_task(2, [0.5, 3.0], n=20, seed=0)
        assert task.target.labels is None
        assert task.target.without_labels().labels is None
        pooled = task.pooled_sources()
        assert len(pooled) == 80 and "target" not in pooled.domain_tags
        assert len(task.evaluation_labels()) == 40

    def test_shape(self):
        task = synth.make_multisource_task(3, [0.5, 1.0, 2.0], d=16, n=1000, seed=0)
        assert task.dim == 16 and task.num_classes == 2
        assert [len(s) for s in task.sources] == [2000] * 3 and len(task.target) == 2000

    @pytest.mark.parametrize("k, shifts", [(1, [0.5]), (2, [0.5]), (2, [0.5, -1.0]), (2, [0.5, float("nan")])])
    def test_invalid(self, k, shifts):
        with pytest.raises(SpecError):
            synth.make_multisource_task(k, shifts)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 4), st.integers(0, 1000))
    def test_every_source_labelled(self, k, seed):
        task = synth.make_multisource_task(k, [1.0] * k, d=3, n=5, seed=seed)
        assert all(s.labels is not None and set(s.labels) == {0, 1} for s in task.sources)

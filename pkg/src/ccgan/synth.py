"""Synthetic multi-source tasks: isotropic Gaussian classes, translated domains."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import ContractError, DataError, SpecError
from .text import EncodedDataset


@dataclass
class SyntheticDomainSpec:
    class_means: np.ndarray  # (C, d)
    sigma: float
    offset: np.ndarray  # (d,)
    samples_per_class: tuple
    seed: int = 0
    tag: str = None

    def __post_init__(self):
        self.class_means = np.atleast_2d(np.asarray(self.class_means, dtype=np.float64))
        c, d = self.class_means.shape
        self.offset = np.zeros(d) if self.offset is None else np.asarray(self.offset, dtype=np.float64)
        if isinstance(self.samples_per_class, int):
            self.samples_per_class = (self.samples_per_class,) * c
        self.samples_per_class = tuple(int(n) for n in self.samples_per_class)
        if c < 2:
            raise SpecError("need at least two classes")
        if d < 2:
            raise SpecError("need at least two dimensions")
        if not self.sigma > 0:
            raise SpecError("sigma must be positive")
        if self.offset.shape != (d,):
            raise SpecError(f"offset must have shape ({d},)")
        if len(self.samples_per_class) != c or any(n < 0 for n in self.samples_per_class):
            raise SpecError("samples_per_class needs one nonnegative count per class")


def generate_domain(spec):
    """Rows ~ N(mean_c + offset, sigma^2 I), class blocks in label order."""
    if sum(spec.samples_per_class) == 0:
        raise DataError("domain spec requests zero samples")
    rng = np.random.default_rng(spec.seed)
    d = spec.class_means.shape[1]
    xs, ys = [], []
    for c, n in enumerate(spec.samples_per_class):
        xs.append(spec.class_means[c] + spec.offset + spec.sigma * rng.standard_normal((n, d)))
        ys.append(np.full(n, c))
    x = np.vstack(xs)
    tags = None if spec.tag is None else [spec.tag] * len(x)
    return EncodedDataset(x, np.concatenate(ys), tags)


@dataclass(frozen=True)
class GaussianOracle:
    """Known generating parameters of a task's target domain."""

    class_means: np.ndarray
    sigma: float
    target_offset: np.ndarray
    class_priors: np.ndarray
    source_offsets: tuple
    source_distances: tuple


class MultiSourceTask:
    """Labelled sources plus an unlabelled target.

    ``target`` never carries labels.  The held-out labels are reachable only
    through :meth:`evaluation_labels`, which training code never calls.
    """

    TARGET_TAG = "target"

    def __init__(self, sources, target, target_labels, oracle=None):
        self.sources = list(sources)
        if any(s.labels is None for s in self.sources):
            raise DataError("every source domain needs labels")
        dims = {s.dim for s in self.sources} | {target.dim}
        if len(dims) != 1:
            raise DataError(f"domains disagree on dimension: {sorted(dims)}")
        self.target = target.without_labels()
        self._target_labels = None if target_labels is None else np.asarray(target_labels).copy()
        self.oracle = oracle

    @property
    def dim(self):
        return self.target.dim

    @property
    def num_classes(self):
        labels = [s.labels for s in self.sources]
        if self._target_labels is not None:
            labels.append(self._target_labels[self._target_labels >= 0])
        return int(max(l.max() for l in labels if len(l))) + 1

    def pooled_sources(self):
        return EncodedDataset.concat(self.sources)

    def evaluation_labels(self):
        return self._target_labels

    @property
    def source_tags(self):
        return [s.domain_tags[0] if s.domain_tags else f"source{i}" for i, s in enumerate(self.sources)]


def make_multisource_task(k, shift_magnitudes, d=16, sigma=1.0, n=1000, seed=0, class_distance=2.0):
    """Two equiprobable classes at ``+-class_distance/2`` along the first axis.

    The target sits at offset 0; source ``i`` is translated by a uniformly
    random unit direction scaled by ``shift_magnitudes[i]``.
    """
    shifts = [float(m) for m in shift_magnitudes]
    if k < 2:
        raise SpecError("a multi-source task needs k >= 2 sources")
    if len(shifts) != k:
        raise SpecError(f"need {k} shift magnitudes, got {len(shifts)}")
    if any(m < 0 or not math.isfinite(m) for m in shifts):
        raise SpecError("shift magnitudes must be nonnegative reals")
    ss = np.random.SeedSequence(seed)
    dir_seed, *domain_seeds = (int(s) for s in ss.generate_state(k + 2))
    means = np.zeros((2, d))
    means[0, 0], means[1, 0] = -class_distance / 2.0, class_distance / 2.0
    rng = np.random.default_rng(dir_seed)
    offsets = []
    for m in shifts:
        u = rng.standard_normal(d)
        offsets.append(m * u / np.linalg.norm(u))
    sources = [
        generate_domain(SyntheticDomainSpec(means, sigma, off, n, domain_seeds[i], f"source{i}"))
        for i, off in enumerate(offsets)
    ]
    target = generate_domain(SyntheticDomainSpec(means, sigma, None, n, domain_seeds[k], MultiSourceTask.TARGET_TAG))
    oracle = GaussianOracle(means, sigma, np.zeros(d), np.array([0.5, 0.5]), tuple(offsets), tuple(shifts))
    return MultiSourceTask(sources, target, target.labels, oracle)


def two_class_bayes_accuracy(distance, sigma):
    """``Phi(distance / (2 sigma))`` for two equiprobable isotropic classes."""
    return float(norm.cdf(distance / (2.0 * sigma)))


def bayes_accuracy(task):
    """Accuracy of the optimal rule on the target domain.

    Two equiprobable classes: closed form ``Phi(distance / (2 sigma))``.
    Otherwise a Monte-Carlo estimate; see :func:`bayes_accuracy_mc`.
    """
    oracle = _oracle_of(task)
    means, sigma, priors = oracle.class_means, oracle.sigma, oracle.class_priors
    if len(means) == 2 and priors[0] == priors[1]:
        return two_class_bayes_accuracy(np.linalg.norm(means[1] - means[0]), sigma)
    return bayes_accuracy_mc(task)[0]


def bayes_accuracy_mc(task, n_samples=1_000_000, seed=0, chunk=100_000):
    """Monte-Carlo accuracy of the optimal rule with its standard error."""
    oracle = _oracle_of(task)
    means = oracle.class_means + oracle.target_offset
    sigma, priors = oracle.sigma, oracle.class_priors
    rng = np.random.default_rng(seed)
    log_prior = np.log(priors)
    correct = 0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        y = rng.choice(len(means), size=m, p=priors)
        x = means[y] + sigma * rng.standard_normal((m, means.shape[1]))
        sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        pred = np.argmax(log_prior - sq / (2 * sigma**2), axis=1)
        correct += int((pred == y).sum())
        done += m
    p = correct / n_samples
    return p, math.sqrt(p * (1 - p) / n_samples)


def _oracle_of(task):
    oracle = task.oracle if isinstance(task, MultiSourceTask) else task
    if not isinstance(oracle, GaussianOracle):
        raise ContractError("task has no known Gaussian generating parameters")
    return oracle

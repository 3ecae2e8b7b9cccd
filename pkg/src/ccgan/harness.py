"""Experiment orchestration: ablation arms, evaluation, weight audits, PCA."""

import json
import os
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core, nn, synth
from .core import TrainConfig
from .errors import ConfigError, ContractError, DataError
from .text import EncodedDataset, load_external_embeddings

# arm -> (curriculum mode, cycle enabled); None marks the non-adversarial baseline
ARMS = {
    "source_only_combined": None,
    "cyclegan_plain": ("none", True),
    "ccgan_model_based": ("model_based", True),
    "ccgan_model_free": ("model_free", True),
    "ccgan_no_cycle": ("model_free", False),
}

METRIC_FIELDS = (
    "step", "disc_t", "disc_s", "cgan_st", "cgan_ts", "cyc", "uni_t", "uni_s", "task", "total",
    "target_accuracy", "source_weights",
)


@dataclass
class MetricsRecord:
    step: int
    disc_t: float = 0.0
    disc_s: float = 0.0
    cgan_st: float = 0.0
    cgan_ts: float = 0.0
    cyc: float = 0.0
    uni_t: float = 0.0
    uni_s: float = 0.0
    task: float = 0.0
    total: float = 0.0
    target_accuracy: float = None
    source_weights: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_json(self):
        """One metrics-stream line.  Wall-clock time is left out so that
        reruns produce byte-identical files; it goes to ``timing.jsonl``."""
        d = {k: getattr(self, k) for k in METRIC_FIELDS}
        return json.dumps(d, sort_keys=False, allow_nan=False)


@dataclass
class SyntheticTaskSpec:
    k: int = 3
    shifts: tuple = (0.5, 1.0, 2.0)
    d: int = 16
    sigma: float = 1.0
    n: int = 1000
    seed: int = 0
    class_distance: float = 2.0

    def build(self):
        return synth.make_multisource_task(self.k, self.shifts, self.d, self.sigma, self.n,
                                           self.seed, self.class_distance)


@dataclass
class ExperimentConfig:
    task: object  # path to an embedding file, a SyntheticTaskSpec, or a MultiSourceTask
    target: str = "target"
    train: TrainConfig = field(default_factory=TrainConfig)
    arm: str = "ccgan_model_free"
    out_dir: str = None

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; choose from {sorted(ARMS)}")
        if not self.target:
            raise ConfigError("target domain name is required")

    def effective_train_config(self):
        mode = ARMS[self.arm]
        if mode is None:
            return self.train
        curriculum, cycle = mode
        kw = asdict(self.train)
        kw["loss_weights"] = core.LossWeights(**kw["loss_weights"])
        kw.update(curriculum=curriculum, cycle_enabled=cycle)
        return TrainConfig(**kw)


def accuracy(predictions, labels):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if predictions.size == 0:
        raise DataError("accuracy of an empty prediction set")
    return float(np.mean(predictions == labels))


def split_domains(data, target):
    """Leave-one-domain-out: rows tagged ``target`` become the unlabelled
    target, every other tag a labelled source."""
    if data.domain_tags is None:
        raise DataError("dataset has no domain tags to split on")
    tags = np.asarray(data.domain_tags, dtype=object)
    if target not in set(data.domain_tags):
        raise ConfigError(f"target domain {target!r} not present; domains are {sorted(set(data.domain_tags))}")
    names = []
    for t in data.domain_tags:
        if t != target and t not in names:
            names.append(t)
    if not names:
        raise DataError("no source domains besides the target")
    sources = []
    for name in sorted(names):
        part = data.subset(np.flatnonzero(tags == name))
        if part.labels is None or (part.labels < 0).any():
            raise DataError(f"source domain {name!r} has unlabelled rows")
        sources.append(part)
    tgt = data.subset(np.flatnonzero(tags == target))
    labels = tgt.labels
    if labels is not None and (labels < 0).any():
        labels = labels if (labels >= 0).all() else None
    return synth.MultiSourceTask(sources, tgt.without_labels(), labels)


def load_task(source, target="target"):
    if isinstance(source, synth.MultiSourceTask):
        return source
    if isinstance(source, SyntheticTaskSpec):
        task = source.build()
        if target != synth.MultiSourceTask.TARGET_TAG:
            raise ConfigError(f"synthetic tasks name their target {synth.MultiSourceTask.TARGET_TAG!r}, not {target!r}")
        return task
    if isinstance(source, EncodedDataset):
        return split_domains(source, target)
    if isinstance(source, (str, os.PathLike)):
        return split_domains(load_external_embeddings(source), target)
    raise ConfigError(f"unsupported task source {type(source).__name__}")


@dataclass
class ExperimentResult:
    records: list
    summary: dict
    model: core.AdaptationModel
    optimizers: dict
    task: synth.MultiSourceTask


def _evaluate(model, task):
    labels = task.evaluation_labels()
    if labels is None:
        return None
    pred, _ = core.predict_target(model, task.target.representations)
    return accuracy(pred, labels)


def _train_arrays(task):
    pooled = task.pooled_sources()
    tags = pooled.domain_tags or [f"source{i}" for i, s in enumerate(task.sources) for _ in range(len(s))]
    return pooled.representations, pooled.labels, np.asarray(tags, dtype=object), task.target.representations


def run_experiment(config, on_record=None):
    """Train one arm; evaluate every ``eval_every`` steps and at the end.

    Writes ``metrics.jsonl``, ``timing.jsonl``, ``summary.json`` and
    ``model.ckpt`` into ``config.out_dir`` when it is set.
    """
    task = load_task(config.task, config.target)
    tc = config.effective_train_config()
    xs, ys, tags, xt = _train_arrays(task)
    if len(xs) < tc.batch_size or len(xt) < tc.batch_size:
        raise DataError(f"need at least batch_size={tc.batch_size} rows in pooled sources and target")

    seeds = np.random.SeedSequence(tc.seed).generate_state(3)
    adversarial = ARMS[config.arm] is not None
    model = core.build_model(task.dim, task.num_classes, tc.curriculum, int(seeds[0]))
    if not adversarial:
        model = core.AdaptationModel(None, None, None, None, model.f_t)
    optimizers = {n: nn.AdamState.for_params(p, **tc.adam_hyper()) for n, p in model.networks().items()}
    src_stream = core.BatchStream(len(xs), tc.batch_size, np.random.default_rng(int(seeds[1])))
    tgt_stream = core.BatchStream(len(xt), tc.batch_size, np.random.default_rng(int(seeds[2])))

    records = []
    wsum, wcount = {}, {}
    start = time.perf_counter()
    last = {}
    for step in range(1, tc.total_steps + 1):
        si, ti = src_stream.next(), tgt_stream.next()
        if adversarial:
            last = core.train_step(model, optimizers, xs[si], ys[si], xt[ti], tc)
            w = last.pop("weights_st")
            for tag in np.unique(tags[si]):
                mask = tags[si] == tag
                wsum[tag] = wsum.get(tag, 0.0) + float(w[mask].sum())
                wcount[tag] = wcount.get(tag, 0) + int(mask.sum())
        else:
            loss = core.classifier_step(model.f_t, optimizers["f_t"], xs[si], ys[si])
            last = {"task": loss, "total": tc.loss_weights.task * loss}
        if step % tc.eval_every == 0 or step == tc.total_steps:
            rec = MetricsRecord(step=step, target_accuracy=_evaluate(model, task),
                                wall_clock_s=time.perf_counter() - start)
            for k, v in last.items():
                setattr(rec, k, float(v))
            rec.source_weights = {t: wsum[t] / wcount[t] for t in sorted(wsum)}
            wsum, wcount = {}, {}
            records.append(rec)
            if on_record is not None:
                on_record(rec)

    summary = _summary(config, tc, task, records, model)
    if config.out_dir:
        write_outputs(config.out_dir, records, summary, model, optimizers, config, tc)
    return ExperimentResult(records, summary, model, optimizers, task)


def _summary(config, tc, task, records, model):
    final = records[-1]
    terms = {t: getattr(final, t) for t in core.TERMS}
    lambdas = {t: tc.loss_weights.for_term(t) for t in core.TERMS}
    summary = {
        "arm": config.arm,
        "target": config.target,
        "seed": tc.seed,
        "total_steps": tc.total_steps,
        "curriculum": tc.curriculum if ARMS[config.arm] else None,
        "cycle_enabled": tc.cycle_enabled if ARMS[config.arm] else None,
        "final_target_accuracy": final.target_accuracy,
        "loss_breakdown": {
            "terms": terms,
            "lambdas": lambdas,
            "contributions": {t: lambdas[t] * terms[t] for t in core.TERMS},
            "total": final.total,
        },
        "final_disc": {"disc_t": final.disc_t, "disc_s": final.disc_s},
        "networks": sorted(model.networks()),
    }
    if task.oracle is not None:
        summary["bayes_accuracy"] = synth.bayes_accuracy(task)
    return summary


def write_outputs(out_dir, records, summary, model, optimizers, config, tc):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    with open(os.path.join(out_dir, "timing.jsonl"), "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({"step": rec.step, "wall_clock_s": rec.wall_clock_s}) + "\n")
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    meta = {"arm": config.arm, "curriculum": tc.curriculum, "cycle_enabled": tc.cycle_enabled,
            "target": config.target, "seed": tc.seed}
    nn.save_checkpoint(os.path.join(out_dir, "model.ckpt"),
                       nn.Checkpoint(model.networks(), optimizers, meta))


def model_from_checkpoint(ckpt):
    nets = ckpt.networks
    if "f_t" not in nets:
        raise DataError("checkpoint has no classifier f_t")
    return core.AdaptationModel(**{n: nets.get(n) for n in core.NETWORK_NAMES})


# weight audit ------------------------------------------------------------------


@dataclass
class WeightAudit:
    mean_weight: dict  # source tag -> mean per-sample weight
    counts: dict
    batch_sums: list

    def nearest_first(self):
        return sorted(self.mean_weight, key=self.mean_weight.get, reverse=True)


def weight_audit(model, task, n_batches=50, mode="model_free", batch_size=64, seed=0):
    """Mean curriculum weight of each true source domain over random batches
    of the pooled sources.  Domain tags are used for reporting only."""
    if mode == "none":
        raise ContractError("weight audit needs a curriculum mode (model_based or model_free)")
    if mode not in core.CURRICULUM_MODES:
        raise ConfigError(f"unknown curriculum mode {mode!r}")
    if mode == "model_based" and model.h_t is None:
        raise ContractError("model_based audit needs the selection network h_t")
    if model.G_st is None:
        raise ContractError("weight audit needs a trained generator")
    pooled = task.pooled_sources() if isinstance(task, synth.MultiSourceTask) else task
    tags = np.asarray(pooled.domain_tags, dtype=object)
    x = pooled.representations
    stream = core.BatchStream(len(x), batch_size, np.random.default_rng(seed))
    wsum, wcount, sums = {}, {}, []
    for _ in range(n_batches):
        idx = stream.next()
        fake = nn.apply(model.G_st, x[idx])
        w = core.curriculum_weights(model, mode, fake, "t").values
        sums.append(float(w.sum()))
        for tag in np.unique(tags[idx]):
            mask = tags[idx] == tag
            wsum[tag] = wsum.get(tag, 0.0) + float(w[mask].sum())
            wcount[tag] = wcount.get(tag, 0) + int(mask.sum())
    return WeightAudit({t: wsum[t] / wcount[t] for t in sorted(wsum)},
                       {t: wcount[t] for t in sorted(wcount)}, sums)


# PCA -----------------------------------------------------------------------------


@dataclass
class PcaProjection:
    coords: np.ndarray
    domain_tags: list
    components: np.ndarray  # (out_dims, d)
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def _power_iteration(cov, tol, max_iter, start):
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        done = np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol
        v = w
        lam = float(v @ cov @ v)
        if done:
            break
    return v, lam


def pca_project(datasets, out_dims=2, tol=1e-9, max_iter=1000):
    """Project pooled rows onto their top principal axes.

    Components come from power iteration with deflation on the
    mean-centred covariance; each is signed so its first nonzero loading is
    positive.  Missing rank is reported with a warning and zero-filled.
    """
    if isinstance(datasets, EncodedDataset):
        datasets = [datasets]
    datasets = list(datasets)
    x = np.vstack([d.representations for d in datasets])
    tags = []
    for i, d in enumerate(datasets):
        tags.extend(d.domain_tags if d.domain_tags is not None else [f"set{i}"] * len(d))
    n, dim = x.shape
    if n < out_dims:
        raise DataError(f"{n} rows cannot give {out_dims} components")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    total = float(np.trace(cov))
    scale = max(total, np.finfo(float).tiny)
    deflated = cov.copy()
    comps = np.zeros((out_dims, dim))
    variances = np.zeros(out_dims)
    start = np.random.default_rng(0).standard_normal(dim)
    for k in range(out_dims):
        if k >= dim:
            break
        v, lam = _power_iteration(deflated, tol, max_iter, start)
        if lam <= 1e-12 * scale:
            warnings.warn(f"data rank is below {out_dims}; components {k + 1}.. are zero-filled",
                          RuntimeWarning, stacklevel=2)
            break
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        comps[k], variances[k] = v, lam
        deflated -= lam * np.outer(v, v)
    ratio = variances / total if total > 0 else np.zeros(out_dims)
    return PcaProjection(xc @ comps.T, tags, comps, ratio, mean)


def write_pca_dump(path, projection):
    with open(path, "w", encoding="utf-8") as f:
        f.write("x\ty\tdomain\n")
        coords = projection.coords
        for i, tag in enumerate(projection.domain_tags):
            y = coords[i, 1] if coords.shape[1] > 1 else 0.0
            f.write(f"{float(coords[i, 0])!r}\t{float(y)!r}\t{tag}\n")


def format_records(records):
    return "\n".join(r.to_json() for r in records)


def median(values):
    return float(np.median(np.asarray(values, dtype=np.float64)))

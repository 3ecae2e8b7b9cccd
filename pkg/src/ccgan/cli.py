"""Command-line entry point: encode, pretrain, synth, train, eval, audit, pca."""

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import core, harness, nn, synth, text
from .errors import CCGanError, ConfigError, DataError

# key -> (type, validity check, message, default)
_POS_INT = (int, lambda v: v > 0, "a positive integer")
_NONNEG_INT = (int, lambda v: v >= 0, "a nonnegative integer")
_POS_FLOAT = (float, lambda v: v > 0, "a positive number")
_NONNEG_FLOAT = (float, lambda v: v >= 0, "a nonnegative number")
_UNIT_OPEN = (float, lambda v: 0 < v < 1, "a number in (0, 1)")
_UNIT_HALF = (float, lambda v: 0 <= v < 1, "a number in [0, 1)")
_TEXT = (str, lambda v: v != "", "a nonempty string")

CONFIG_KEYS = {
    "task": (_TEXT, None),
    "target": (_TEXT, None),
    "arm": ((str, lambda v: v in harness.ARMS, f"one of {', '.join(harness.ARMS)}"), "ccgan_model_free"),
    "out_dir": (_TEXT, None),
    "seed": (_NONNEG_INT, 0),
    "batch_size": (_POS_INT, 64),
    "total_steps": (_POS_INT, 2000),
    "disc_steps_per_gen_step": (_POS_INT, 1),
    "eval_every": (_POS_INT, 100),
    "lr": (_POS_FLOAT, 1e-4),
    "decay_factor": ((float, lambda v: 0 < v <= 1, "a number in (0, 1]"), 0.5),
    "decay_every": (_POS_INT, 100),
    "beta1": (_UNIT_HALF, 0.5),
    "beta2": (_UNIT_OPEN, 0.999),
    "adam_eps": (_POS_FLOAT, 1e-8),
    "weight_decay": (_NONNEG_FLOAT, 1e-4),
    "lambda_cgan": (_NONNEG_FLOAT, 0.1),
    "lambda_cyc": (_NONNEG_FLOAT, 1.0),
    "lambda_uni": (_NONNEG_FLOAT, 1.0),
    "lambda_task": (_NONNEG_FLOAT, 1.0),
}
_LAMBDAS = ("cgan", "cyc", "uni", "task")


def _convert(key, raw):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    (kind, ok, desc), _ = CONFIG_KEYS[key]
    if isinstance(raw, str) and kind is not str:
        try:
            value = kind(raw.strip())
        except ValueError:
            raise ConfigError(f"{key} must be {desc}, got {raw!r}") from None
    else:
        value = raw
    if kind is float and not np.isfinite(value):
        raise ConfigError(f"{key} must be {desc}, got {raw!r}")
    if not ok(value):
        raise ConfigError(f"{key} must be {desc}, got {raw!r}")
    return value


def parse_config_text(content, origin="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(content.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw.strip())
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return values


def load_config(path):
    try:
        with open(path, encoding="utf-8") as f:
            return parse_config_text(f.read(), path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def resolve(cls, file_values, overrides):
        """Defaults, then the file, then command-line flags."""
        values = {k: default for k, (_, default) in CONFIG_KEYS.items()}
        values.update(file_values)
        for k, v in overrides.items():
            if v is not None:
                values[k] = _convert(k, v)
        return cls(values)

    def require(self, *keys):
        for k in keys:
            if self.values.get(k) is None:
                raise ConfigError(f"missing --{k.replace('_', '-')} (or '{k}' in the config file)")

    def train_config(self):
        v = self.values
        weights = core.LossWeights(**{name: v[f"lambda_{name}"] for name in _LAMBDAS})
        return core.TrainConfig(
            batch_size=v["batch_size"], total_steps=v["total_steps"],
            disc_steps_per_gen_step=v["disc_steps_per_gen_step"], seed=v["seed"],
            eval_every=v["eval_every"], lr=v["lr"], decay_factor=v["decay_factor"],
            decay_every=v["decay_every"], beta1=v["beta1"], beta2=v["beta2"],
            adam_eps=v["adam_eps"], weight_decay=v["weight_decay"], loss_weights=weights,
        )

    def experiment(self):
        self.require("task", "target")
        v = self.values
        return harness.ExperimentConfig(v["task"], v["target"], self.train_config(), v["arm"], v["out_dir"])

    def dump(self):
        lines = ["# effective configuration"]
        for k in CONFIG_KEYS:
            v = self.values.get(k)
            if v is not None:
                lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
        return "\n".join(lines) + "\n"


def format_loss_breakdown(summary):
    """Per-term losses and their lambda-weighted contributions as text."""
    bd = summary["loss_breakdown"]
    rows = [f"{'term':<10}{'loss':>16}{'lambda':>10}{'contribution':>16}"]
    total = 0.0
    for term in core.TERMS:
        c = bd["contributions"][term]
        total += c
        rows.append(f"{term:<10}{bd['terms'][term]:>16.9f}{bd['lambdas'][term]:>10.4g}{c:>16.9f}")
    rows.append(f"{'total':<10}{'':>16}{'':>10}{bd['total']:>16.9f}")
    if abs(total - bd["total"]) > 1e-9 * max(1.0, abs(bd["total"])):
        rows.append(f"warning: contributions sum to {total!r}, reported total {bd['total']!r}")
    return "\n".join(rows)


def print_loss_breakdown(summary, stream=None):
    print(format_loss_breakdown(summary), file=stream or sys.stdout)


# subcommands -----------------------------------------------------------------


def _cmd_encode(args):
    docs = text.read_corpus(args.corpus)
    if not docs:
        raise DataError(f"corpus {args.corpus} has no documents")
    model = text.fit_tfidf(docs, args.max_features)
    data = text.tfidf_encode(model, docs)
    labels = [text.MISSING_LABEL if d.label is None else d.label for d in docs]
    if all(d.label is None for d in docs):
        labels = None
    tags = [d.domain_tag for d in docs] if any(d.domain_tag for d in docs) else None
    text.save_embeddings(args.out, data, labels, tags)
    print(f"encoded {len(docs)} documents into {model.dim} features -> {args.out}")


def _cmd_pretrain(args):
    data = text.load_external_embeddings(args.data)
    result = text.pretrain_autoencoder(data.without_labels(), args.latent_dim, args.epochs, args.seed,
                                       base_lr=args.lr, decay_every=args.decay_every)
    encoded = text.encode(result.encoder, data)
    text.save_embeddings(args.out, encoded)
    if args.encoder:
        nn.save_checkpoint(args.encoder, nn.Checkpoint({"encoder": result.encoder}, {}, {"epochs": args.epochs}))
    for i, loss in enumerate(result.epoch_losses, 1):
        print(f"epoch {i} reconstruction_mse {loss:.6g}")


def _cmd_synth(args):
    shifts = _floats(args.shifts, "--shifts")
    task = synth.make_multisource_task(args.k, shifts, args.d, args.sigma, args.n, args.seed, args.class_distance)
    parts = list(task.sources) + [text.EncodedDataset(task.target.representations, task.evaluation_labels(),
                                                      task.target.domain_tags)]
    text.save_embeddings(args.out, text.EncodedDataset.concat(parts))
    print(f"wrote {sum(len(p) for p in parts)} rows ({args.k} sources + target) -> {args.out}")
    print(f"bayes_accuracy {synth.bayes_accuracy(task):.6f}")


def _cmd_train(args):
    file_values = load_config(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in CONFIG_KEYS}
    cfg = RunConfig.resolve(file_values, overrides)
    exp = cfg.experiment()
    if exp.out_dir:
        os.makedirs(exp.out_dir, exist_ok=True)
        with open(os.path.join(exp.out_dir, "config.cfg"), "w", encoding="utf-8") as f:
            f.write(cfg.dump())

    def report(rec):
        if not args.quiet:
            acc = "n/a" if rec.target_accuracy is None else f"{rec.target_accuracy:.4f}"
            print(f"step {rec.step} total {rec.total:.6g} target_accuracy {acc}", flush=True)

    result = harness.run_experiment(exp, on_record=report)
    print_loss_breakdown(result.summary)
    acc = result.summary["final_target_accuracy"]
    if acc is not None:
        print(f"final_target_accuracy {acc:.6f}")


def _target_rows(data, target):
    if target is None:
        return data
    if data.domain_tags is None:
        raise DataError("data has no domain tags to select the target from")
    idx = [i for i, t in enumerate(data.domain_tags) if t == target]
    if not idx:
        raise ConfigError(f"target domain {target!r} not present in the data")
    return data.subset(idx)


def _cmd_eval(args):
    model = harness.model_from_checkpoint(nn.load_checkpoint(args.checkpoint))
    data = _target_rows(text.load_external_embeddings(args.data), args.target)
    if data.labels is None or (data.labels < 0).any():
        raise DataError("evaluation rows need labels")
    pred, _ = core.predict_target(model, data.representations)
    acc = harness.accuracy(pred, data.labels)
    print(json.dumps({"accuracy": acc, "n": len(data)}))


def _cmd_audit(args):
    ckpt = nn.load_checkpoint(args.checkpoint)
    model = harness.model_from_checkpoint(ckpt)
    data = text.load_external_embeddings(args.data)
    if args.target is not None:
        if data.domain_tags is None:
            raise DataError("data has no domain tags to exclude the target with")
        data = data.subset([i for i, t in enumerate(data.domain_tags) if t != args.target])
    if data.domain_tags is None:
        raise DataError("audit needs domain tags to report per-source weights")
    mode = args.mode or ckpt.meta.get("curriculum", "model_free")
    audit = harness.weight_audit(model, data, args.batches, mode, args.batch_size, args.seed)
    print(f"{'source':<16}{'mean_weight':>14}{'samples':>10}")
    for tag in audit.nearest_first():
        print(f"{tag:<16}{audit.mean_weight[tag]:>14.6g}{audit.counts[tag]:>10}")


def _cmd_pca(args):
    datasets = []
    for path in args.data:
        d = text.load_external_embeddings(path)
        if d.domain_tags is None:
            d = text.EncodedDataset(d.representations, d.labels, [os.path.basename(path)] * len(d))
        datasets.append(d)
    proj = harness.pca_project(datasets, args.dims)
    harness.write_pca_dump(args.out, proj)
    ratios = " ".join(f"{r:.4f}" for r in proj.explained_variance_ratio)
    print(f"explained_variance_ratio {ratios} -> {args.out}")


def _floats(raw, flag):
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {raw!r}") from None


# parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="ccgan", description=__doc__,
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("encode", help="TF-IDF encode a corpus file", formatter_class=fmt)
    s.add_argument("--corpus", required=True, help="tab-separated label, domain, text file")
    s.add_argument("--out", required=True, help="embedding file to write")
    s.add_argument("--max-features", type=int, default=5000, help="vocabulary cap")

    s = sub.add_parser("pretrain", help="dense autoencoder over an embedding file", formatter_class=fmt)
    s.add_argument("--data", required=True, help="embedding file (labels are ignored)")
    s.add_argument("--out", required=True, help="embedding file of encoded rows")
    s.add_argument("--encoder", default=None, help="optional checkpoint for the encoder")
    s.add_argument("--latent-dim", type=int, default=256)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--decay-every", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write a synthetic multi-source task", formatter_class=fmt)
    s.add_argument("--out", required=True, help="embedding file to write")
    s.add_argument("--k", type=int, default=3, help="number of source domains")
    s.add_argument("--shifts", default="0.5,1.0,2.0", help="comma-separated source shift magnitudes")
    s.add_argument("--d", type=int, default=16, help="dimension")
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--n", type=int, default=1000, help="samples per class per domain")
    s.add_argument("--class-distance", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="run one experiment arm", formatter_class=fmt)
    s.add_argument("--config", default=None, help="key = value file; flags override it")
    s.add_argument("--quiet", action="store_true", help="suppress per-evaluation progress lines")
    for key, ((kind, _, desc), default) in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        extra = {"choices": list(harness.ARMS)} if key == "arm" else {}
        s.add_argument(flag, dest=key, type=str, default=None,
                       help=f"{desc} (default: {default})", **extra)

    s = sub.add_parser("eval", help="target accuracy of a checkpoint", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="labelled embedding file")
    s.add_argument("--target", default=None, help="evaluate only rows with this domain tag")

    s = sub.add_parser("audit", help="per-source mean curriculum weight", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="embedding file with domain tags")
    s.add_argument("--target", default=None, help="domain tag to exclude from the sources")
    s.add_argument("--mode", choices=list(core.CURRICULUM_MODES), default=None,
                   help="curriculum mode (default: the one recorded in the checkpoint)")
    s.add_argument("--batches", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("pca", help="project embedding files onto principal axes", formatter_class=fmt)
    s.add_argument("--data", required=True, nargs="+", help="one or more embedding files")
    s.add_argument("--out", required=True, help="tab-separated x, y, domain dump")
    s.add_argument("--dims", type=int, default=2)
    return p


COMMANDS = {
    "encode": _cmd_encode, "pretrain": _cmd_pretrain, "synth": _cmd_synth, "train": _cmd_train,
    "eval": _cmd_eval, "audit": _cmd_audit, "pca": _cmd_pca,
}


def parse_and_dispatch(argv=None):
    """Run one subcommand and return its exit status."""
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except CCGanError as exc:
        print(f"ccgan: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ccgan: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


def main():
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()

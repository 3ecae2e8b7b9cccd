"""Curriculum CycleGAN: generators, discriminators, curriculum weights and the
alternating min-max update.

Conventions used throughout:

* ``D_t`` outputs the probability that a row is a real *target* row; it is
  trained on real target (label 1) against ``G_st(source)`` (label 0).
  ``D_s`` is the mirror image on the source side.
* Generators use the non-saturating loss ``-log D(G(z))``.
* Curriculum weights are recomputed for every batch and never carry
  gradient.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError

CURRICULUM_MODES = ("none", "model_based", "model_free")
NETWORK_NAMES = ("G_st", "G_ts", "D_s", "D_t", "f_t", "h_s", "h_t")
HEAD_HIDDEN = (256, 128, 64)


@dataclass
class LossWeights:
    cgan: float = 0.1
    cyc: float = 1.0
    uni: float = 1.0
    task: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"loss weight {f.name} must be a nonnegative real, got {value}")

    def for_term(self, term):
        return getattr(self, term.split("_")[0])


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 2000
    disc_steps_per_gen_step: int = 1
    curriculum: str = "model_free"
    cycle_enabled: bool = True
    seed: int = 0
    eval_every: int = 100
    lr: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 100
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("batch_size", "total_steps", "disc_steps_per_gen_step", "eval_every", "decay_every"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.curriculum not in CURRICULUM_MODES:
            raise ConfigError(f"curriculum must be one of {CURRICULUM_MODES}, got {self.curriculum!r}")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not (self.adam_eps > 0 and self.weight_decay >= 0):
            raise ConfigError("adam_eps must be positive and weight_decay nonnegative")

    def adam_hyper(self):
        return dict(base_lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps,
                    weight_decay=self.weight_decay, decay_factor=self.decay_factor,
                    decay_every=self.decay_every)


@dataclass
class AdaptationModel:
    G_st: nn.MlpParams
    G_ts: nn.MlpParams
    D_s: nn.MlpParams
    D_t: nn.MlpParams
    f_t: nn.MlpParams
    h_s: nn.MlpParams = None
    h_t: nn.MlpParams = None

    def networks(self):
        return {n: getattr(self, n) for n in NETWORK_NAMES if getattr(self, n) is not None}

    @property
    def dim(self):
        return self.G_st.spec.layer_dims[0]

    @property
    def num_classes(self):
        return self.f_t.spec.layer_dims[-1]

    def copy(self):
        return AdaptationModel(**{n: (p.copy() if p is not None else None)
                                  for n, p in ((n, getattr(self, n)) for n in NETWORK_NAMES)})

    def bind(self, tape, trainable=()):
        """Networks named in ``trainable`` become tape variables, the rest constants."""
        return BoundModel({n: p.bind(tape, n in trainable) for n, p in self.networks().items()})


class BoundModel:
    """The same attribute names as :class:`AdaptationModel`, holding tape nodes."""

    def __init__(self, nets):
        self.nets = nets
        for name in NETWORK_NAMES:
            setattr(self, name, nets.get(name))


def build_model(dim, num_classes, curriculum="model_free", seed=0, head_hidden=HEAD_HIDDEN):
    """Fresh networks with the fixed 4-layer shapes.

    Generators ``d -> d -> d -> d -> d`` (relu, linear output); discriminators
    and selection networks ``d -> 256 -> 128 -> 64 -> 1`` (sigmoid);
    classifier ``d -> 256 -> 128 -> 64 -> C`` (softmax).
    """
    if curriculum not in CURRICULUM_MODES:
        raise ConfigError(f"unknown curriculum mode {curriculum!r}")
    seeds = np.random.SeedSequence(seed).generate_state(len(NETWORK_NAMES))
    s = dict(zip(NETWORK_NAMES, (int(x) for x in seeds)))
    gen = nn.MlpSpec((dim,) * 5, "relu", "linear")
    disc = nn.MlpSpec((dim, *head_hidden, 1), "relu", "sigmoid")
    cls = nn.MlpSpec((dim, *head_hidden, num_classes), "relu", "softmax")
    model = AdaptationModel(
        G_st=nn.init_params(gen, s["G_st"]),
        G_ts=nn.init_params(gen, s["G_ts"]),
        D_s=nn.init_params(disc, s["D_s"]),
        D_t=nn.init_params(disc, s["D_t"]),
        f_t=nn.init_params(cls, s["f_t"]),
    )
    if curriculum == "model_based":
        model.h_s = nn.init_params(disc, s["h_s"])
        model.h_t = nn.init_params(disc, s["h_t"])
    return model


# batch weights -------------------------------------------------------------


class BatchWeights:
    """Per-sample weights over one batch; a point of the probability simplex."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            raise DimensionError("batch weights over an empty batch")
        if (values < 0).any() or abs(values.sum() - 1.0) > 1e-9:
            raise ContractError("batch weights must be nonnegative and sum to 1")
        self.values = values

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @classmethod
    def uniform(cls, n):
        if n <= 0:
            raise DimensionError("batch weights over an empty batch")
        return cls(np.full(n, 1.0 / n))


def _tape_of(*items):
    for item in items:
        if isinstance(item, ad.Node):
            return item.tape
    return ad.Tape()


def _node(x, tape):
    return x if isinstance(x, ad.Node) else tape.constant(x)


def _nonempty(node, what):
    if node.shape[0] == 0:
        raise DimensionError(f"{what} is an empty batch")


def _batch_softmax(scores):
    """Softmax over the rows of an (n, 1) score node, gradient cut."""
    return BatchWeights(ad.row_softmax(ad.transpose(ad.stop_gradient(scores))).values)


def model_based_weights(h, generated):
    """Softmax over the batch of the selection network's pre-sigmoid logits."""
    tape = _tape_of(generated)
    generated = _node(generated, tape)
    _nonempty(generated, "generated batch")
    return _batch_softmax(nn.forward(h, ad.stop_gradient(generated), logits=True))


def model_free_weights(D, generated):
    """D(generated) normalised by its sum over the batch."""
    tape = _tape_of(generated)
    generated = _node(generated, tape)
    _nonempty(generated, "generated batch")
    return _weights_from_probs(nn.forward(D, ad.stop_gradient(generated)))


def _weights_from_probs(prob):
    # D / sum D directly: softmax of the clamped log would distort outputs below the clamp
    p = np.asarray(prob.values if isinstance(prob, ad.Node) else prob, dtype=np.float64).ravel()
    total = p.sum()
    if not total > 0.0:
        return BatchWeights.uniform(p.size)
    return BatchWeights(p / total)


# adversarial losses --------------------------------------------------------


def _weighted_sum(per_sample, w):
    if len(w) != per_sample.shape[0]:
        raise ContractError(f"{len(w)} weights for a batch of {per_sample.shape[0]}")
    col = per_sample.tape.constant(np.asarray(w).reshape(-1, 1))
    return ad.reduce(per_sample * col, "sum")


def _neg_log(x):
    return -ad.unary(x, "log")


def _check_pair(real, fake):
    _nonempty(real, "real batch")
    _nonempty(fake, "fake batch")
    if real.shape[1] != fake.shape[1]:
        raise DimensionError(f"real batch {real.shape} and fake batch {fake.shape} differ in width")


def _disc_from_probs(p_real, p_fake, w):
    real_term = ad.reduce(_neg_log(p_real), "mean")
    fake_per = _neg_log(1.0 - p_fake)
    fake_term = ad.reduce(fake_per, "mean") if w is None else _weighted_sum(fake_per, w)
    return real_term + fake_term


def _gen_from_probs(p_fake, w):
    per = _neg_log(p_fake)
    return ad.reduce(per, "mean") if w is None else _weighted_sum(per, w)


def disc_loss(D, real, fake, w=None):
    """``-mean log D(real) - sum_i w_i log(1 - D(fake_i))``; ``fake`` is detached.

    ``w=None`` is the plain (uniform mean) loss.
    """
    tape = _tape_of(real, fake)
    real, fake = _node(real, tape), _node(fake, tape)
    _check_pair(real, fake)
    return _disc_from_probs(nn.forward(D, real), nn.forward(D, ad.stop_gradient(fake)), w)


def gen_loss(D, fake, w=None):
    """Non-saturating generator loss ``-sum_i w_i log D(fake_i)``."""
    tape = _tape_of(fake)
    fake = _node(fake, tape)
    _nonempty(fake, "fake batch")
    return _gen_from_probs(nn.forward(D, fake), w)


def gan_losses(D, real, fake):
    return disc_loss(D, real, fake), gen_loss(D, fake)


def curriculum_gan_losses(D, real, generated, w):
    n = generated.shape[0] if isinstance(generated, ad.Node) else len(generated)
    if len(w) != n:
        raise ContractError(f"{len(w)} weights for a generated batch of {n}")
    return disc_loss(D, real, generated, w), gen_loss(D, generated, w)


# reconstruction, selection and task losses -----------------------------------


def cycle_loss(G_st, G_ts, source, target):
    """Mean per-row L1 reconstruction error through both round trips."""
    tape = _tape_of(source, target)
    source, target = _node(source, tape), _node(target, tape)
    _nonempty(source, "source batch")
    _nonempty(target, "target batch")
    return _cycle_from(G_st, G_ts, source, target, nn.forward(G_st, source), nn.forward(G_ts, target))


def _cycle_from(G_st, G_ts, source, target, fake_t, fake_s):
    terms = []
    for batch, moved, back in ((source, fake_t, G_ts), (target, fake_s, G_st)):
        diff = nn.forward(back, moved) - batch
        terms.append(ad.reduce(diff, "l1_norm") * (1.0 / batch.shape[0]))
    return terms[0] + terms[1]


def uniform_kl_loss(h, real):
    """KL(softmax over the batch of h's logits || uniform)."""
    tape = _tape_of(real)
    real = _node(real, tape)
    _nonempty(real, "batch")
    n = real.shape[0]
    p = ad.row_softmax(ad.transpose(nn.forward(h, real, logits=True)))
    return ad.reduce(p * (ad.unary(p, "log") + math.log(n)), "sum")


def _one_hot(labels, n, num_classes):
    if labels is None:
        raise DataError("task loss needs a label for every source row")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if (labels < 0).any() or (labels >= num_classes).any():
        raise DataError("missing or out-of-range source label")
    out = np.zeros((n, num_classes))
    out[np.arange(n), labels] = 1.0
    return out


def task_loss(f_t, G_st, source, labels):
    """Mean cross-entropy of ``f_t(G_st(source))``; ``G_st=None`` skips the generator."""
    tape = _tape_of(source)
    source = _node(source, tape)
    _nonempty(source, "source batch")
    return _task_from(f_t, source if G_st is None else nn.forward(G_st, source), labels)


def _task_from(f_t, z, labels):
    probs = nn.forward(f_t, z)
    onehot = z.tape.constant(_one_hot(labels, z.shape[0], probs.shape[1]))
    return ad.reduce(onehot * ad.unary(probs, "log"), "sum") * (-1.0 / z.shape[0])


# joint objective -------------------------------------------------------------


TERMS = ("cgan_st", "cgan_ts", "cyc", "uni_t", "uni_s", "task")


@dataclass
class ObjectiveBreakdown:
    terms: dict
    lambdas: dict
    total: ad.Node
    weights_st: BatchWeights
    weights_ts: BatchWeights = None

    def values(self):
        return {name: node.item() for name, node in self.terms.items()}

    def contributions(self):
        return {name: self.lambdas[name] * node.item() for name, node in self.terms.items()}


def _check_mode(model, mode):
    if mode not in CURRICULUM_MODES:
        raise ConfigError(f"unknown curriculum mode {mode!r}")
    if mode == "model_based" and (model.h_s is None or model.h_t is None):
        raise ConfigError("model_based curriculum needs selection networks h_s and h_t")


def curriculum_weights(model, mode, generated, side, disc_probs=None):
    """Weights over a generated batch for ``side`` 't' (forward) or 's' (reverse).

    ``disc_probs`` may carry an already computed ``D_side(generated)`` so the
    model-free rule does not run the discriminator twice.
    """
    if mode == "none":
        n = generated.shape[0] if isinstance(generated, ad.Node) else len(generated)
        return BatchWeights.uniform(n)
    if mode == "model_based":
        return model_based_weights(getattr(model, f"h_{side}"), generated)
    if disc_probs is not None:
        return _weights_from_probs(disc_probs)
    return model_free_weights(getattr(model, f"D_{side}"), generated)


def _term(name, fn):
    try:
        node = fn()
    except NumericError as exc:
        raise NumericError(f"loss term {name!r}: {exc}") from None
    if not math.isfinite(node.item()):
        raise NumericError(f"loss term {name!r} is not finite")
    return node


def total_objective(model, source, labels, target, mode, weights=None, cycle_enabled=True):
    """Generator-side objective and its per-term breakdown.

    ``model`` is an :class:`AdaptationModel` or a :class:`BoundModel`.  With
    ``cycle_enabled`` false the reverse path is inactive: ``cgan_ts``,
    ``cyc`` and ``uni_s`` are exactly zero.
    """
    _check_mode(model, mode)
    weights = weights or LossWeights()
    tape = _tape_of(source, target)
    source, target = _node(source, tape), _node(target, tape)
    if source.shape[1] != target.shape[1]:
        raise DimensionError(f"source {source.shape} and target {target.shape} differ in width")
    zero = tape.constant(0.0)
    terms = dict.fromkeys(TERMS, zero)

    plain = mode == "none"
    fake_t = nn.forward(model.G_st, source)
    p_t = nn.forward(model.D_t, fake_t)
    w_st = curriculum_weights(model, mode, fake_t, "t", p_t)
    terms["cgan_st"] = _term("cgan_st", lambda: _gen_from_probs(p_t, None if plain else w_st))
    w_ts = None
    if cycle_enabled:
        fake_s = nn.forward(model.G_ts, target)
        p_s = nn.forward(model.D_s, fake_s)
        w_ts = curriculum_weights(model, mode, fake_s, "s", p_s)
        terms["cgan_ts"] = _term("cgan_ts", lambda: _gen_from_probs(p_s, None if plain else w_ts))
        terms["cyc"] = _term("cyc", lambda: _cycle_from(model.G_st, model.G_ts, source, target, fake_t, fake_s))
    if mode == "model_based":
        terms["uni_t"] = _term("uni_t", lambda: uniform_kl_loss(model.h_t, target))
        if cycle_enabled:
            terms["uni_s"] = _term("uni_s", lambda: uniform_kl_loss(model.h_s, source))
    if labels is not None:
        _nonempty(source, "source batch")
        terms["task"] = _term("task", lambda: _task_from(model.f_t, fake_t, labels))

    lambdas = {name: weights.for_term(name) for name in TERMS}
    total = zero
    for name in TERMS:
        if lambdas[name] != 0.0 and terms[name] is not zero:
            total = total + terms[name] * lambdas[name]
    return ObjectiveBreakdown(terms, lambdas, total, w_st, w_ts)


# optimisation ----------------------------------------------------------------


def make_optimizers(model, config):
    return {name: nn.AdamState.for_params(p, **config.adam_hyper()) for name, p in model.networks().items()}


def _update(model, bound, names, optimizers):
    flat = {}
    for name in names:
        g = nn.flatten_grads(getattr(model, name), bound.nets[name].grads())
        nn.validate_gradient(g, f"gradient for network {name}")
        flat[name] = g
    for name in names:
        nn.adam_step(getattr(model, name), flat[name], optimizers[name])


def discriminator_phase(model, optimizers, source, target, config):
    """One update of D_t (and D_s when the reverse path is active)."""
    mode = config.curriculum
    _check_mode(model, mode)
    trainable = ("D_t", "D_s") if config.cycle_enabled else ("D_t",)
    tape = ad.Tape(config.seed)
    bound = model.bind(tape, trainable)
    src, tgt = tape.constant(source), tape.constant(target)
    out = {"disc_t": 0.0, "disc_s": 0.0}
    total = None
    sides = (("t", bound.G_st, bound.D_t, src, tgt), ("s", bound.G_ts, bound.D_s, tgt, src))
    for side, G, D, inp, real in sides[: 2 if config.cycle_enabled else 1]:
        fake = nn.forward(G, inp)
        p_fake = nn.forward(D, fake)
        w = None if mode == "none" else curriculum_weights(bound, mode, fake, side, p_fake)
        loss = _term(f"disc_{side}", lambda: _disc_from_probs(nn.forward(D, real), p_fake, w))
        out[f"disc_{side}"] = loss.item()
        total = loss if total is None else total + loss
    ad.backward(total)
    _update(model, bound, trainable, optimizers)
    return out


def generator_trainables(config, model):
    names = ["G_st", "f_t"]
    if config.cycle_enabled:
        names.append("G_ts")
    if config.curriculum == "model_based":
        names.append("h_t")
        if config.cycle_enabled:
            names.append("h_s")
    return tuple(n for n in names if getattr(model, n) is not None)


def generator_phase(model, optimizers, source, labels, target, config):
    """One update of generators, classifier and selection networks."""
    trainable = generator_trainables(config, model)
    tape = ad.Tape(config.seed)
    bound = model.bind(tape, trainable)
    br = total_objective(bound, tape.constant(source), labels, tape.constant(target),
                         config.curriculum, config.loss_weights, config.cycle_enabled)
    ad.backward(br.total)
    _update(model, bound, trainable, optimizers)
    return br


def train_step(model, optimizers, source, labels, target, config):
    """Discriminator phase(s) then one generator phase.

    On a non-finite loss every network and optimizer state is restored to
    its value before the call and the :class:`NumericError` propagates.
    """
    # only the discriminators can already have moved when a later phase fails;
    # _update validates every gradient before touching any network
    saved = {n: (getattr(model, n).copy(), optimizers[n].copy()) for n in ("D_t", "D_s")}
    try:
        disc = {}
        for _ in range(config.disc_steps_per_gen_step):
            disc = discriminator_phase(model, optimizers, source, target, config)
        br = generator_phase(model, optimizers, source, labels, target, config)
    except NumericError:
        for name, (params, opt) in saved.items():
            getattr(model, name).assign(params)
            optimizers[name] = opt
        raise
    out = dict(disc)
    out.update(br.values())
    out["total"] = br.total.item()
    out["weights_st"] = br.weights_st.values
    return out


def classifier_step(f_t, optimizer, source, labels):
    """Source-only baseline update: cross-entropy of ``f_t`` on raw rows."""
    tape = ad.Tape()
    bound = f_t.bind(tape)
    loss = _term("task", lambda: task_loss(bound, None, tape.constant(source), labels))
    ad.backward(loss)
    nn.adam_step(f_t, bound.grads(), optimizer)
    return loss.item()


def predict_target(model, rows):
    """Class indices and probabilities of ``f_t`` applied to raw target rows."""
    f_t = model.f_t if isinstance(model, AdaptationModel) else model
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != f_t.spec.layer_dims[0]:
        raise DimensionError(f"classifier expects {f_t.spec.layer_dims[0]} columns, got shape {rows.shape}")
    probs = nn.apply(f_t, rows)
    return np.argmax(probs, axis=1), probs


class BatchStream:
    """Shuffled, replacement-free minibatch indices; partial batches dropped."""

    def __init__(self, n, batch_size, rng):
        if n < batch_size:
            raise DataError(f"{n} rows cannot fill a batch of {batch_size}")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order, self._pos = None, n

    def next(self):
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx

"""Dense multilayer perceptrons, Adam with step decay, and binary checkpoints."""

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, FormatError, NumericError, SpecError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise SpecError(f"layer_dims needs at least 2 entries, got {dims}")
        if any(d <= 0 for d in dims):
            raise SpecError(f"layer_dims entries must be positive, got {dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise SpecError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise SpecError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1


class MlpParams:
    """Weights ``(in, out)`` and biases ``(1, out)`` per layer.

    All arrays are views into one contiguous buffer, ``flat``, laid out as
    W0, b0, W1, b1, ... in row-major order.
    """

    def __init__(self, spec, weights, biases):
        self.spec = spec
        shapes = _param_shapes(spec)
        arrays = [a for pair in zip(weights, biases) for a in pair]
        if [np.shape(a) for a in arrays] != shapes:
            raise DimensionError(f"parameter shapes do not match layer dims {spec.layer_dims}")
        self.flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])
        self._views(shapes)

    def _views(self, shapes):
        views, pos = [], 0
        for shape in shapes:
            size = shape[0] * shape[1]
            views.append(self.flat[pos:pos + size].reshape(shape))
            pos += size
        self.weights, self.biases = views[0::2], views[1::2]

    def arrays(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        clone = MlpParams.__new__(MlpParams)
        clone.spec = self.spec
        clone.flat = self.flat.copy()
        clone._views(_param_shapes(self.spec))
        return clone

    def assign(self, other):
        """Overwrite values in place from a same-spec network."""
        self.flat[...] = other.flat

    def __repr__(self):
        return f"MlpParams(layer_dims={self.spec.layer_dims})"

    def bind(self, tape, trainable=True):
        """Place the parameters on ``tape`` as variables (or constants)."""
        # parameters are finite by construction (adam_step rejects bad gradients)
        if trainable:
            nodes = [tape.variable(a, copy=False, check=False) for a in self.arrays()]
        else:
            nodes = [tape.constant(a, check=False) for a in self.arrays()]
        return BoundMlp(self, nodes)

    def equals(self, other):
        return self.spec == other.spec and np.array_equal(self.flat, other.flat)


@dataclass
class BoundMlp:
    params: MlpParams
    nodes: list

    @property
    def spec(self):
        return self.params.spec

    def grads(self):
        return [n.grad if n.grad is not None else np.zeros_like(n.values) for n in self.nodes]


def mlp_spec(in_dim, hidden, out_dim, hidden_activation="relu", output_activation="linear"):
    return MlpSpec((in_dim, *hidden, out_dim), hidden_activation, output_activation)


def init_params(spec, seed):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        # kept 2-D (1 x out) so bias rows broadcast over the batch
        biases.append(np.zeros((1, fan_out)))
    return MlpParams(spec, weights, biases)


def forward(net, x, logits=False):
    """Apply an MLP to a batch node.

    ``net`` may be a :class:`BoundMlp` or plain :class:`MlpParams`; the
    latter is bound to ``x``'s tape as constants.  With ``logits=True`` the
    output activation is skipped.
    """
    if isinstance(net, MlpParams):
        net = net.bind(x.tape, trainable=False)
    spec = net.spec
    if x.shape[1] != spec.layer_dims[0]:
        raise DimensionError(
            f"network expects {spec.layer_dims[0]} input columns, got shape {x.shape}"
        )
    h = x
    n = spec.n_layers
    for i in range(n):
        w, b = net.nodes[2 * i], net.nodes[2 * i + 1]
        h = ad.matmul(h, w) + b
        if i < n - 1:
            h = ad.unary(h, spec.hidden_activation)
    if logits or spec.output_activation == "linear":
        return h
    if spec.output_activation == "sigmoid":
        return ad.unary(h, "sigmoid")
    return ad.row_softmax(h)


def apply(params, x, logits=False):
    """Numpy-in, numpy-out forward pass (no gradients)."""
    tape = ad.Tape()
    return forward(params, tape.constant(x), logits=logits).values


@dataclass
class AdamState:
    """Per-network Adam moments and step-decay learning-rate schedule.

    ``m`` and ``v`` are flat, aligned with :attr:`MlpParams.flat`.
    """

    m: np.ndarray
    v: np.ndarray
    base_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 100
    t: int = 0

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(np.zeros_like(params.flat), np.zeros_like(params.flat), **hyper)
        if state.decay_every <= 0:
            raise SpecError("decay_every must be a positive integer")
        return state

    def lr_at(self, t):
        return self.base_lr * self.decay_factor ** (t // self.decay_every)

    def copy(self):
        clone = AdamState(self.m.copy(), self.v.copy())
        for name in ("base_lr", "beta1", "beta2", "eps", "weight_decay", "decay_factor", "decay_every", "t"):
            setattr(clone, name, getattr(self, name))
        return clone

    def hyper(self):
        return {
            "base_lr": self.base_lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "decay_factor": self.decay_factor,
            "decay_every": self.decay_every,
        }


def adam_step(params, grads, state):
    """Decoupled weight decay followed by a bias-corrected Adam update, in place.

    The learning rate for this update is ``lr_at(t)`` with ``t`` the number of
    updates already taken, so the first ``decay_every`` updates use ``base_lr``.
    """
    g = flatten_grads(params, grads)
    validate_gradient(g)
    lr = state.lr_at(state.t)
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    b1, b2 = state.beta1, state.beta2
    theta, m, v = params.flat, state.m, state.v
    if state.weight_decay:
        theta *= 1.0 - lr * state.weight_decay
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    denom = np.sqrt(v / c2)
    denom += state.eps
    theta -= (lr / c1) * m / denom
    return lr


# squares above this overflow float64 in the second-moment update
_MAX_GRAD = 1e150


def validate_gradient(g, name="gradient"):
    """Reject a flat gradient Adam could not absorb without overflowing."""
    if not np.isfinite(g).all():
        raise NumericError(f"non-finite {name}; parameters left untouched")
    if g.size and np.abs(g).max() > _MAX_GRAD:
        raise NumericError(f"{name} magnitude exceeds {_MAX_GRAD:g}; parameters left untouched")


def flatten_grads(params, grads):
    """Concatenate per-array gradients into the layout of ``params.flat``."""
    if isinstance(grads, np.ndarray) and grads.ndim == 1:
        if grads.shape != params.flat.shape:
            raise DimensionError(f"flat gradient of size {grads.size} for {params.flat.size} parameters")
        return grads
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise DimensionError(f"expected {len(arrays)} gradient arrays, got {len(grads)}")
    for a, gr in zip(arrays, grads):
        if a.shape != np.shape(gr):
            raise DimensionError(f"gradient shape {np.shape(gr)} does not match parameter {a.shape}")
    return np.concatenate([np.asarray(gr, dtype=np.float64).ravel() for gr in grads])


# checkpoint file ----------------------------------------------------------

MAGIC = b"CCGAN1"
_ACT_CODES = {name: i for i, name in enumerate(HIDDEN_ACTIVATIONS + OUTPUT_ACTIVATIONS)}
_ACT_NAMES = {i: name for name, i in _ACT_CODES.items()}


def _write_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(buf, n):
    raw = buf.read(n)
    if len(raw) != n:
        raise FormatError("truncated checkpoint")
    return raw


def _read_str(buf):
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return _read_exact(buf, n).decode("utf-8")


def _write_arrays(buf, arrays):
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_arrays(buf, shapes):
    out = []
    for shape in shapes:
        count = int(np.prod(shape))
        out.append(np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").reshape(shape).copy())
    return out


def _param_shapes(spec):
    shapes = []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        shapes.extend(((fan_in, fan_out), (1, fan_out)))
    return shapes


@dataclass
class Checkpoint:
    networks: dict
    optimizers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def dump_checkpoint(ckpt):
    """Serialise to bytes.

    Layout: magic ``CCGAN1``; JSON metadata string; u32 network count; per
    network its name, u32 dim count, u32 dims, activation codes, a flag for
    an attached Adam state, then the row-major little-endian float64 payload
    (W0, b0, W1, b1, ...; with Adam: step, hyperparameters, m, v).
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_str(buf, json.dumps(ckpt.meta, sort_keys=True))
    buf.write(struct.pack("<I", len(ckpt.networks)))
    for name in sorted(ckpt.networks):
        params = ckpt.networks[name]
        spec = params.spec
        _write_str(buf, name)
        buf.write(struct.pack("<I", len(spec.layer_dims)))
        buf.write(struct.pack(f"<{len(spec.layer_dims)}I", *spec.layer_dims))
        buf.write(struct.pack("<BB", _ACT_CODES[spec.hidden_activation], _ACT_CODES[spec.output_activation]))
        opt = ckpt.optimizers.get(name)
        buf.write(struct.pack("<B", opt is not None))
        _write_arrays(buf, params.arrays())
        if opt is not None:
            buf.write(struct.pack("<q", opt.t))
            _write_str(buf, json.dumps(opt.hyper(), sort_keys=True))
            _write_arrays(buf, [opt.m, opt.v])
    return buf.getvalue()


def load_checkpoint_bytes(raw):
    """Parse :func:`dump_checkpoint` output; any corruption is a format error."""
    try:
        return _parse_checkpoint(raw)
    except (ValueError, KeyError, TypeError, SpecError, DimensionError) as exc:
        # json and utf-8 decode errors are ValueErrors
        raise FormatError(f"corrupt checkpoint: {exc}") from None


def _parse_checkpoint(raw):
    buf = io.BytesIO(raw)
    if buf.read(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    meta = json.loads(_read_str(buf))
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    networks, optimizers = {}, {}
    for _ in range(count):
        name = _read_str(buf)
        (ndims,) = struct.unpack("<I", _read_exact(buf, 4))
        dims = struct.unpack(f"<{ndims}I", _read_exact(buf, 4 * ndims))
        hid, out = struct.unpack("<BB", _read_exact(buf, 2))
        (has_opt,) = struct.unpack("<B", _read_exact(buf, 1))
        spec = MlpSpec(dims, _ACT_NAMES[hid], _ACT_NAMES[out])
        shapes = _param_shapes(spec)
        arrays = _read_arrays(buf, shapes)
        networks[name] = MlpParams(spec, arrays[0::2], arrays[1::2])
        if has_opt:
            (t,) = struct.unpack("<q", _read_exact(buf, 8))
            hyper = json.loads(_read_str(buf))
            size = networks[name].flat.size
            m, v = _read_arrays(buf, [(size,), (size,)])
            optimizers[name] = AdamState(m, v, t=t, **hyper)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(networks, optimizers, meta)


def save_checkpoint(path, ckpt):
    with open(path, "wb") as f:
        f.write(dump_checkpoint(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read())

"""Documents to representation vectors: tokenizer, TF-IDF, dense autoencoder,
and the corpus / embedding file formats."""

import math
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import DataError, FormatError, SpecError

_TOKEN = re.compile(r"[^\W_]+")
MISSING_LABEL = -1


@dataclass
class Document:
    text: str
    label: int = None
    domain_tag: str = None


@dataclass
class EncodedDataset:
    """Rows of the representation space with optional labels and domain tags."""

    representations: np.ndarray
    labels: np.ndarray = None
    domain_tags: list = None

    def __post_init__(self):
        x = np.asarray(self.representations, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"representations must be a 2-D matrix, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise DataError("representations contain non-finite values")
        self.representations = x
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(x),):
                raise DataError("labels must have one entry per row")
        if self.domain_tags is not None:
            self.domain_tags = list(self.domain_tags)
            if len(self.domain_tags) != len(x):
                raise DataError("domain_tags must have one entry per row")

    def __len__(self):
        return self.representations.shape[0]

    @property
    def dim(self):
        return self.representations.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return EncodedDataset(
            self.representations[idx],
            None if self.labels is None else self.labels[idx],
            None if self.domain_tags is None else [self.domain_tags[i] for i in idx],
        )

    def without_labels(self):
        return EncodedDataset(self.representations, None, self.domain_tags)

    @staticmethod
    def concat(parts):
        parts = list(parts)
        labels = None
        if all(p.labels is not None for p in parts):
            labels = np.concatenate([p.labels for p in parts])
        tags = None
        if all(p.domain_tags is not None for p in parts):
            tags = [t for p in parts for t in p.domain_tags]
        return EncodedDataset(np.vstack([p.representations for p in parts]), labels, tags)


def tokenize(text):
    """Lowercase and split on every run of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens):
    return tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]


@dataclass
class Vocabulary:
    index: dict
    doc_freq: dict
    corpus_size: int

    def __len__(self):
        return len(self.index)

    def terms(self):
        return sorted(self.index, key=self.index.__getitem__)


def _texts(corpus):
    return [d.text if isinstance(d, Document) else d for d in corpus]


def build_vocab(corpus, max_features=5000):
    """Keep the ``max_features`` most frequent unigrams and bigrams.

    Frequency is the total count over the corpus; ties go to the
    lexicographically smaller term.  Retained terms are indexed in
    lexicographic order.
    """
    texts = _texts(corpus)
    if not texts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    if max_features <= 0:
        raise SpecError("max_features must be positive")
    totals = Counter()
    df = Counter()
    for text in texts:
        grams = _ngrams(tokenize(text))
        totals.update(grams)
        df.update(set(grams))
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))[:max_features]
    kept = sorted(term for term, _ in ranked)
    return Vocabulary({t: i for i, t in enumerate(kept)}, {t: df[t] for t in kept}, len(texts))


@dataclass
class TfidfModel:
    vocabulary: Vocabulary
    idf: np.ndarray

    @property
    def dim(self):
        return len(self.vocabulary)


def fit_tfidf(corpus, max_features=5000):
    vocab = build_vocab(corpus, max_features)
    n = vocab.corpus_size
    idf = np.empty(len(vocab))
    for term, i in vocab.index.items():
        idf[i] = math.log((1.0 + n) / (1.0 + vocab.doc_freq[term])) + 1.0
    return TfidfModel(vocab, idf)


def tfidf_encode(model, docs):
    """Raw counts times smoothed idf, each nonzero row scaled to unit L2 norm."""
    docs = list(docs)
    index = model.vocabulary.index
    x = np.zeros((len(docs), model.dim))
    for r, text in enumerate(_texts(docs)):
        for gram in _ngrams(tokenize(text)):
            j = index.get(gram)
            if j is not None:
                x[r, j] += 1.0
    x *= model.idf
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    np.divide(x, norms, out=x, where=norms > 0)
    labels = None
    tags = None
    if docs and all(isinstance(d, Document) for d in docs):
        if all(d.label is not None for d in docs):
            labels = [d.label for d in docs]
        if all(d.domain_tag is not None for d in docs):
            tags = [d.domain_tag for d in docs]
    return EncodedDataset(x, labels, tags)


# dense reconstruction autoencoder -----------------------------------------


@dataclass
class PretrainResult:
    encoder: nn.MlpParams
    decoder: nn.MlpParams
    epoch_losses: list


def pretrain_autoencoder(
    all_data,
    latent_dim=256,
    epochs=10,
    seed=0,
    hidden_dim=512,
    batch_size=64,
    base_lr=1e-5,
    decay_every=200,
    decay_factor=0.5,
    beta1=0.5,
    beta2=0.999,
    weight_decay=1e-4,
):
    """Unsupervised MSE autoencoder over pooled source and target rows.

    Only ``all_data.representations`` is read.  Returns the encoder
    (``d -> hidden -> latent``, tanh latent), the discarded-after-use decoder,
    and the mean training loss of each epoch.
    """
    x = all_data.representations
    n, d = x.shape
    if latent_dim >= d:
        raise SpecError(f"latent_dim={latent_dim} must be smaller than the input dimension {d}")
    if n == 0:
        raise DataError("no rows to pre-train on")
    enc = nn.init_params(nn.MlpSpec((d, hidden_dim, latent_dim), "relu", "linear"), seed)
    dec = nn.init_params(nn.MlpSpec((latent_dim, hidden_dim, d), "relu", "linear"), seed + 1)
    hyper = dict(base_lr=base_lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay,
                 decay_factor=decay_factor, decay_every=decay_every)
    enc_opt = nn.AdamState.for_params(enc, **hyper)
    dec_opt = nn.AdamState.for_params(dec, **hyper)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            rows = x[order[start:start + batch_size]]
            tape = ad.Tape()
            be, bd = enc.bind(tape), dec.bind(tape)
            target = tape.constant(rows)
            z = ad.unary(nn.forward(be, target), "tanh")
            err = nn.forward(bd, z) - target
            loss = ad.reduce(err * err, "mean")
            ad.backward(loss)
            nn.adam_step(enc, be.grads(), enc_opt)
            nn.adam_step(dec, bd.grads(), dec_opt)
            total += loss.item() * len(rows)
        losses.append(total / n)
    return PretrainResult(enc, dec, losses)


def encode(encoder, data):
    """Map rows through a frozen encoder (tanh latent)."""
    z = np.tanh(nn.apply(encoder, data.representations))
    return EncodedDataset(z, data.labels, data.domain_tags)


def reconstruction_loss(result, data):
    z = np.tanh(nn.apply(result.encoder, data.representations))
    err = nn.apply(result.decoder, z) - data.representations
    return float(np.mean(err * err))


# file formats ---------------------------------------------------------------


def read_corpus(path):
    """Tab-separated ``label<TAB>domain<TAB>text``; ``-`` marks an absent field."""
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3:
                raise FormatError("expected label, domain and text separated by tabs", lineno)
            label, tag, text = parts
            if label == "-":
                label = None
            else:
                try:
                    label = int(label)
                except ValueError:
                    raise FormatError(f"label {label!r} is not an integer or '-'", lineno) from None
                if label < 0:
                    raise FormatError(f"negative label {label}", lineno)
            docs.append(Document(text, label, None if tag == "-" else tag))
    return docs


def write_corpus(path, docs):
    with open(path, "w", encoding="utf-8") as f:
        for d in docs:
            label = "-" if d.label is None else str(d.label)
            tag = "-" if d.domain_tag is None else d.domain_tag
            f.write(f"{label}\t{tag}\t{d.text}\n")


_HEADER = re.compile(r"^n=(\d+) d=(\d+)$")


def load_external_embeddings(path):
    """Read an embedding file.

    First line ``n=<rows> d=<dim>``; then one row per line of ``d``
    space-separated decimals, optionally prefixed by ``label=<k>`` and
    ``domain=<s>`` (``-`` for absent).  When only some rows carry a label
    the others get ``MISSING_LABEL``.
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError("empty embedding file", 1)
    m = _HEADER.match(lines[0].strip())
    if not m:
        raise FormatError(f"malformed header {lines[0]!r}; expected 'n=<rows> d=<dim>'", 1)
    n, d = int(m.group(1)), int(m.group(2))
    if d == 0:
        raise FormatError("dimension must be positive", 1)
    body = [(i, ln) for i, ln in enumerate(lines[1:], 2) if ln.strip()]
    if len(body) != n:
        raise FormatError(f"header declares {n} rows but file has {len(body)}", 1)
    x = np.empty((n, d))
    labels, tags = [], []
    for r, (lineno, line) in enumerate(body):
        fields = line.split()
        label = tag = None
        while fields and "=" in fields[0]:
            key, _, val = fields.pop(0).partition("=")
            if key == "label":
                if val != "-":
                    try:
                        label = int(val)
                    except ValueError:
                        raise FormatError(f"bad label {val!r}", lineno) from None
            elif key == "domain":
                tag = None if val == "-" else val
            else:
                raise FormatError(f"unknown field {key!r}", lineno)
        if len(fields) != d:
            raise FormatError(f"expected {d} values, got {len(fields)}", lineno)
        try:
            row = [float(v) for v in fields]
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from None
        if not all(math.isfinite(v) for v in row):
            raise FormatError("non-finite value", lineno)
        x[r] = row
        labels.append(label)
        tags.append(tag)
    if any(v is not None for v in labels):
        labels = [MISSING_LABEL if v is None else v for v in labels]
    else:
        labels = None
    return EncodedDataset(x, labels, tags if tags and all(t is not None for t in tags) else None)


def save_embeddings(path, data, labels=None, domain_tags=None):
    """Write ``data`` in the embedding format; ``repr`` floats round-trip exactly."""
    x = data.representations
    labels = data.labels if labels is None else labels
    tags = data.domain_tags if domain_tags is None else domain_tags
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"n={x.shape[0]} d={x.shape[1]}\n")
        for i, row in enumerate(x):
            prefix = []
            if labels is not None:
                lab = labels[i]
                prefix.append(f"label={'-' if lab is None or lab < 0 else int(lab)}")
            if tags is not None:
                prefix.append(f"domain={'-' if tags[i] is None else tags[i]}")
            f.write(" ".join(prefix + [repr(float(v)) for v in row]) + "\n")

"""Datasets: synthetic generation with known Bayes accuracy, plain-text
corpus ingestion, 5-way labeled splits and supervision-rate subsetting.

Token sequences are 1-D ``int64`` arrays over a vocabulary whose first four
ids are reserved (pad 0, unk 1, bos 2, eos 3). Sequences carry no eos
marker; likelihoods condition on the observed length.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import re
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DataError
from .neural import N_RESERVED, TokenBatch

RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
N_SPLITS = 5
CACHE_VERSION = 1
_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list:
    """Casefold, then keep maximal runs of Unicode letters and digits."""
    return _TOKEN.findall(text.casefold())


@dataclass
class Dataset:
    """Labeled pool with 5-way split ids, unlabeled pool, and a test set.

    ``bayes_accuracy`` is known only for synthetic data.
    """

    labeled: list
    labels: np.ndarray
    splits: np.ndarray
    unlabeled: list
    test: list
    test_labels: np.ndarray
    vocab: tuple
    n_classes: int
    bayes_accuracy: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)
        if len(self.labels) != len(self.labeled) or len(self.splits) != len(self.labeled):
            raise DataError("labels and split ids must match the labeled examples")
        if len(self.test_labels) != len(self.test):
            raise DataError("test labels must match the test examples")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def fold(self, dev_split: int):
        """Indices of the labeled pool used for training and as dev data."""
        if not 0 <= dev_split < N_SPLITS:
            raise DataError(f"dev split must lie in [0, {N_SPLITS})")
        return np.flatnonzero(self.splits != dev_split), np.flatnonzero(self.splits == dev_split)

    def batch(self, which: str, idx=None) -> TokenBatch:
        seqs = {"labeled": self.labeled, "unlabeled": self.unlabeled, "test": self.test}[which]
        if idx is not None:
            seqs = [seqs[i] for i in idx]
        return TokenBatch.from_sequences(seqs)

    def equals(self, other: "Dataset") -> bool:
        def same(a, b):
            return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
        return (same(self.labeled, other.labeled) and same(self.unlabeled, other.unlabeled)
                and same(self.test, other.test) and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.splits, other.splits)
                and np.array_equal(self.test_labels, other.test_labels)
                and tuple(self.vocab) == tuple(other.vocab) and self.n_classes == other.n_classes)


def assign_splits(n: int, seed: int) -> np.ndarray:
    """Split ids 0..4 over ``n`` items in near-equal parts, in a seeded random order."""
    order = np.random.default_rng(seed).permutation(n)
    splits = np.empty(n, dtype=np.int64)
    splits[order] = np.arange(n) % N_SPLITS
    return splits


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional bag-of-tokens generator with a continuous style.

    Each class owns ``topic_size`` content tokens. A token is drawn from the
    class topic with probability ``topic_mass`` and otherwise from a
    background shared by all classes, which covers every content token. The
    background of a sequence is ``s * A + (1 - s) * B`` for two fixed
    distributions A, B and a per-sequence style ``s ~ Uniform(0, 1)``, so
    sequences carry continuous variation unrelated to the class
    (``styled=False`` uses A alone). Lengths are uniform on
    ``[min_len, max_len]``. Observed labels are flipped to a uniformly
    chosen other class with probability ``label_noise``.
    """

    n_classes: int = 2
    vocab_size: int = 64
    min_len: int = 8
    max_len: int = 16
    topic_size: int = 8
    topic_mass: float = 0.25
    background_concentration: float = 1.0
    styled: bool = True
    label_noise: float = 0.0
    n_labeled: int = 1000
    n_unlabeled: int = 2000
    n_test: int = 1000
    n_bayes: int = 10_000
    seed: int = 0

    def __post_init__(self):
        content = self.vocab_size - N_RESERVED
        if self.n_classes < 2:
            raise DataError("need at least two classes")
        if self.n_classes * self.topic_size > content:
            raise DataError("class topics do not fit in the content vocabulary")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.topic_mass <= 1.0 or not 0.0 <= self.label_noise < 1.0:
            raise DataError("topic_mass must lie in [0, 1] and label_noise in [0, 1)")


SYN_A = SyntheticSpec()


def emission_tables(spec: SyntheticSpec, style: float | np.ndarray = 0.0) -> np.ndarray:
    """Token distributions, shape (*style.shape, n_classes, vocab_size); reserved ids get 0."""
    rng = np.random.default_rng([spec.seed, 1])
    content = spec.vocab_size - N_RESERVED
    bg = rng.dirichlet(np.full(content, spec.background_concentration), size=2)
    perm = rng.permutation(content)
    topics = np.zeros((spec.n_classes, content))
    for c in range(spec.n_classes):
        topics[c, perm[c * spec.topic_size:(c + 1) * spec.topic_size]] = 1.0 / spec.topic_size
    style = np.asarray(style, dtype=float)
    s = (style if spec.styled else np.ones_like(style))[..., None, None]
    background = s * bg[0] + (1 - s) * bg[1]
    tables = np.zeros(style.shape + (spec.n_classes, spec.vocab_size))
    tables[..., N_RESERVED:] = spec.topic_mass * topics + (1 - spec.topic_mass) * background
    return tables / tables.sum(-1, keepdims=True)


def _sample(spec: SyntheticSpec, n, rng):
    y = rng.integers(spec.n_classes, size=n)
    style = rng.random(n)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    cdf = np.cumsum(emission_tables(spec, style), -1)
    seqs = []
    for i, (c, L) in enumerate(zip(y, lengths)):
        ids = np.searchsorted(cdf[i, c], rng.random(L), side="right")
        seqs.append(np.minimum(ids, spec.vocab_size - 1).astype(np.int64))
    return seqs, y


def _noisy(spec, y, rng):
    if spec.label_noise == 0:
        return y
    flip = rng.random(len(y)) < spec.label_noise
    shift = rng.integers(1, spec.n_classes, size=len(y))
    return np.where(flip, (y + shift) % spec.n_classes, y)


def class_posterior(spec: SyntheticSpec, seqs) -> np.ndarray:
    """p(observed label | x) under the generator, shape (n, n_classes).

    The style is integrated out by Gauss-Legendre quadrature, which is exact
    here because the likelihood is a polynomial in the style of degree at
    most ``max_len``.
    """
    nodes, weights = np.polynomial.legendre.leggauss(spec.max_len // 2 + 1)
    nodes, weights = (nodes + 1) / 2, weights / 2
    with np.errstate(divide="ignore"):
        log_t = np.log(emission_tables(spec, nodes))              # (Q, C, V)
    ll = np.array([log_t[:, :, s].sum(-1) for s in seqs]).reshape(len(seqs), len(nodes), spec.n_classes)
    ll = np.logaddexp.reduce(ll + np.log(weights)[None, :, None], axis=1)
    ll -= ll.max(1, keepdims=True)
    post = np.exp(ll)
    post /= post.sum(1, keepdims=True)
    eps = spec.label_noise
    return (1 - eps) * post + eps * (1 - post) / (spec.n_classes - 1)


def bayes_accuracy(spec: SyntheticSpec, n: int | None = None, seed: int | None = None) -> float:
    """Accuracy of the likelihood-ratio classifier against observed labels.

    Computed as the mean over fresh samples of ``max_c p(label = c | x)``,
    which is the expected accuracy of that classifier.
    """
    rng = np.random.default_rng([spec.seed if seed is None else seed, 2])
    seqs, _ = _sample(spec, spec.n_bayes if n is None else n, rng)
    return float(class_posterior(spec, seqs).max(1).mean())


def generate_synthetic(spec: SyntheticSpec = SYN_A) -> Dataset:
    rng = np.random.default_rng([spec.seed, 0])
    lab, y_lab = _sample(spec, spec.n_labeled, rng)
    unl, _ = _sample(spec, spec.n_unlabeled, rng)
    test, y_test = _sample(spec, spec.n_test, rng)
    y_lab, y_test = _noisy(spec, y_lab, rng), _noisy(spec, y_test, rng)
    content = [f"w{i}" for i in range(spec.vocab_size - N_RESERVED)]
    meta = {"source": "synthetic", "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__}}
    return Dataset(lab, y_lab, assign_splits(spec.n_labeled, spec.seed), unl, test, y_test,
                   RESERVED + tuple(content), spec.n_classes, bayes_accuracy(spec), meta)


# ------------------------------------------------------------------- corpus

def _read_lines(path):
    try:
        with open(path, encoding="utf-8") as f:
            return f.read().splitlines()
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc.reason})") from exc


def read_corpus(path, schema: str = "labeled"):
    """Parse a corpus file into token lists (and raw labels for ``schema="labeled"``).

    Labeled lines are ``label<TAB>text``; unlabeled lines are raw text.
    Blank lines are skipped.
    """
    if schema not in ("labeled", "unlabeled"):
        raise DataError(f"unknown corpus schema {schema!r}")
    texts, labels = [], []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        if schema == "labeled":
            label, sep, text = line.partition("\t")
            if not sep or not label.strip():
                raise DataError("expected 'label<TAB>text'", line=lineno)
            labels.append(label.strip())
        else:
            text = line
        texts.append(tokenize(text))
    if not texts:
        raise DataError(f"{path}: empty corpus")
    return texts, labels


def build_vocab(token_lists, cap: int | None = None) -> tuple:
    """Reserved ids, then tokens by descending frequency, ties lexicographic."""
    counts = Counter(t for toks in token_lists for t in toks)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if cap is not None:
        ranked = ranked[:cap]
    return RESERVED + tuple(ranked)


def encode_tokens(tokens, vocab, max_len: int | None = None) -> np.ndarray:
    index = {t: i for i, t in enumerate(vocab)}
    ids = np.array([index.get(t, 1) for t in tokens], dtype=np.int64)
    return ids[:max_len] if max_len is not None else ids


def _label_map(labels):
    distinct = sorted(set(labels), key=lambda s: (0, int(s), s) if s.lstrip("-").isdigit() else (1, 0, s))
    return {s: i for i, s in enumerate(distinct)}


def ingest_corpus(path, schema: str = "labeled", vocab_cap: int | None = 10_000, max_len: int = 256,
                  seed: int = 0) -> Dataset:
    """Read one corpus file into a :class:`Dataset`.

    A labeled file becomes the labeled pool (with 5-way split ids); an
    unlabeled file becomes the unlabeled pool. The vocabulary is built from
    this file alone. Use :func:`build_corpus_dataset` to combine files.
    """
    texts, labels = read_corpus(path, schema)
    vocab = build_vocab(texts, vocab_cap)
    seqs = [encode_tokens(t, vocab, max_len) for t in texts]
    if schema == "labeled":
        lmap = _label_map(labels)
        y = np.array([lmap[s] for s in labels], dtype=np.int64)
        return Dataset(seqs, y, assign_splits(len(seqs), seed), [], [], np.zeros(0), vocab, len(lmap),
                       meta={"source": os.fspath(path), "label_names": list(lmap)})
    return Dataset([], np.zeros(0), np.zeros(0), seqs, [], np.zeros(0), vocab, 0,
                   meta={"source": os.fspath(path)})


def build_corpus_dataset(labeled_path, test_path, unlabeled_path=None, vocab_cap: int | None = 10_000,
                         max_len: int = 256, seed: int = 0) -> Dataset:
    """Labeled, unlabeled and test files into one :class:`Dataset`.

    The vocabulary comes from the training text (labeled and unlabeled)
    only; test tokens outside it map to unk.
    """
    l_texts, l_labels = read_corpus(labeled_path, "labeled")
    u_texts = read_corpus(unlabeled_path, "unlabeled")[0] if unlabeled_path else []
    t_texts, t_labels = read_corpus(test_path, "labeled")
    vocab = build_vocab(l_texts + u_texts, vocab_cap)
    lmap = _label_map(l_labels)
    unknown = sorted(set(t_labels) - set(lmap))
    if unknown:
        raise DataError(f"test labels not seen in training: {unknown}")
    enc = lambda texts: [encode_tokens(t, vocab, max_len) for t in texts]  # noqa: E731
    return Dataset(enc(l_texts), [lmap[s] for s in l_labels], assign_splits(len(l_texts), seed),
                   enc(u_texts), enc(t_texts), [lmap[s] for s in t_labels], vocab, len(lmap),
                   meta={"source": "corpus", "label_names": list(lmap)})


# --------------------------------------------------------------- subsetting

def _allocate(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``counts``."""
    exact = counts * total / counts.sum()
    keep = np.floor(exact).astype(np.int64)
    rest = total - keep.sum()
    order = sorted(range(len(counts)), key=lambda c: (-(exact[c] - keep[c]), c))
    for c in order[:rest]:
        keep[c] += 1
    return np.minimum(keep, counts)


def supervision_subset(dataset: Dataset, rate: float, seed: int, *, demote: bool = False,
                       protect_split: int | None = None) -> Dataset:
    """Keep ``ceil(rate * n)`` labeled examples, sampled per class without replacement.

    ``n`` counts the labeled pool outside ``protect_split`` (the dev split,
    which is kept whole). Unselected examples are discarded, or appended to
    the unlabeled pool when ``demote`` is true.
    """
    if not 0 < rate <= 1:
        raise DataError(f"supervision rate must lie in (0, 1], got {rate}")
    pool = np.flatnonzero(dataset.splits != protect_split) if protect_split is not None \
        else np.arange(len(dataset.labeled))
    if rate == 1:
        return dataset
    y = dataset.labels[pool]
    present = np.unique(y)
    counts = np.array([np.sum(y == c) for c in present])
    keep_n = _allocate(counts, math.ceil(rate * len(pool)))
    if np.any(keep_n == 0):
        empty = [int(c) for c, n in zip(present, keep_n) if n == 0]
        raise DataError(f"supervision rate {rate} leaves classes {empty} without labeled examples")
    rng = np.random.default_rng([seed, 3])
    chosen = np.concatenate([rng.choice(pool[y == c], size=n, replace=False) for c, n in zip(present, keep_n)])
    keep = np.zeros(len(dataset.labeled), dtype=bool)
    keep[chosen] = True
    if protect_split is not None:
        keep[dataset.splits == protect_split] = True
    idx = np.flatnonzero(keep)
    dropped = np.flatnonzero(~keep)
    unlabeled = list(dataset.unlabeled) + ([dataset.labeled[i] for i in dropped] if demote else [])
    meta = {**dataset.meta, "supervision_rate": rate, "demote": demote}
    return replace(dataset, labeled=[dataset.labeled[i] for i in idx], labels=dataset.labels[idx],
                   splits=dataset.splits[idx], unlabeled=unlabeled, meta=meta)


# ------------------------------------------------------------ serialization

def _pack(seqs):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    flat = np.concatenate(seqs).astype(np.int64) if len(seqs) else np.zeros(0, dtype=np.int64)
    return flat, lengths


def _unpack(flat, lengths):
    ends = np.cumsum(lengths)
    return [flat[e - n:e].copy() for e, n in zip(ends, lengths)]


def _arrays(ds: Dataset) -> dict:
    out = {}
    for name in ("labeled", "unlabeled", "test"):
        out[f"{name}_ids"], out[f"{name}_len"] = _pack(getattr(ds, name))
    out["labels"], out["splits"], out["test_labels"] = ds.labels, ds.splits, ds.test_labels
    return out


def _checksum(arrays: dict, header: dict) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype=np.int64).tobytes())
    return h.hexdigest()


def save_dataset(ds: Dataset, path) -> None:
    """Versioned ``.npz`` cache with a SHA-256 checksum over contents; atomic write."""
    arrays = _arrays(ds)
    header = {"version": CACHE_VERSION, "vocab": list(ds.vocab), "n_classes": ds.n_classes,
              "bayes_accuracy": ds.bayes_accuracy, "meta": ds.meta}
    header["sha256"] = _checksum(arrays, header)
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as f:
        header = json.loads(str(f["__header__"]))
        arrays = {k: f[k] for k in f.files if k != "__header__"}
    if header.get("version") != CACHE_VERSION:
        raise DataError(f"unsupported dataset cache version {header.get('version')}")
    digest = header.pop("sha256", None)
    if digest != _checksum(arrays, header):
        raise DataError(f"{path}: checksum mismatch, cache is corrupted")
    seqs = {n: _unpack(arrays[f"{n}_ids"], arrays[f"{n}_len"]) for n in ("labeled", "unlabeled", "test")}
    return Dataset(seqs["labeled"], arrays["labels"], arrays["splits"], seqs["unlabeled"], seqs["test"],
                   arrays["test_labels"], tuple(header["vocab"]), header["n_classes"],
                   header["bayes_accuracy"], header["meta"])

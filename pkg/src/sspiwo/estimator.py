"""scikit-learn style classifier wrapping the semi-supervised trainer.

Inputs are sequences of token ids. Following the scikit-learn convention
for semi-supervised estimators, a target of ``-1`` marks an unlabeled
example.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, RESERVED, assign_splits
from .neural import N_RESERVED, UNK, TokenBatch
from .objectives import ObjectiveSpec
from .training import TrainConfig, make_model, train

UNLABELED = -1


def check_sequences(X, vocab_size: int | None = None) -> list:
    """Validate a collection of token-id sequences and return 1-D ``int64`` arrays."""
    if isinstance(X, TokenBatch):
        return [X.ids[i, : int(X.lengths[i])].numpy() for i in range(len(X))]
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of token-id sequences")
    out = []
    for i, s in enumerate(X):
        a = np.asarray(s)
        if a.ndim != 1:
            raise ValueError(f"sequence {i} is not one-dimensional")
        if a.size and not np.issubdtype(a.dtype, np.integer):
            raise ValueError(f"sequence {i} holds non-integer token ids")
        a = a.astype(np.int64)
        if a.size and (a.min() < 0 or (vocab_size is not None and a.max() >= vocab_size)):
            raise ValueError(f"sequence {i} has token ids outside [0, {vocab_size})")
        out.append(a)
    if not out:
        raise ValueError("X is empty")
    return out


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("y must hold integer class labels, with -1 for unlabeled examples")
    return y.astype(np.int64)


class SemiSupervisedVAEClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised sequence classifier trained with a variational objective.

    Parameters
    ----------
    flavor : {"none", "vae", "piwo", "ipiwo", "iwae"}
        Objective family. ``"none"`` trains the classifier alone.
    k : int
        Importance samples per bound.
    alpha : float
        Weight of the classification log-likelihood.
    preset : {"desk", "paper"}
        Network sizes.
    anneal_steps, patience, max_epochs, batch_size, lr :
        Training settings, see :class:`~sspiwo.training.TrainConfig`.
    dev_split : int
        Which fifth of the labeled examples is held out for early stopping.
    random_state : int
    """

    def __init__(self, flavor="piwo", k=5, alpha=10.0, preset="desk", anneal_steps=300, patience=4,
                 max_epochs=30, batch_size=32, lr=4e-3, dev_split=0, random_state=0):
        self.flavor = flavor
        self.k = k
        self.alpha = alpha
        self.preset = preset
        self.anneal_steps = anneal_steps
        self.patience = patience
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.dev_split = dev_split
        self.random_state = random_state

    def fit(self, X, y):
        seqs = check_sequences(X)
        y = check_targets(y, len(seqs))
        labeled = y != UNLABELED
        if labeled.sum() < 2:
            raise ValueError("need at least two labeled examples")
        self.classes_, codes = np.unique(y[labeled], return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes among the labeled examples")
        self.vocab_size_ = max(N_RESERVED + 1, int(max((s.max() for s in seqs if s.size), default=0)) + 1)
        lab = [s for s, m in zip(seqs, labeled) if m]
        unl = [s for s, m in zip(seqs, labeled) if not m]
        vocab = RESERVED + tuple(f"t{i}" for i in range(self.vocab_size_ - N_RESERVED))
        ds = Dataset(lab, codes, assign_splits(len(lab), self.random_state), unl, [], np.zeros(0),
                     vocab, len(self.classes_))
        config = TrainConfig(batch_size=self.batch_size, lr=self.lr, anneal_steps=self.anneal_steps,
                             patience=self.patience, max_epochs=self.max_epochs, k=self.k,
                             seed=self.random_state, dev_split=self.dev_split)
        self.model_ = make_model(self.vocab_size_, len(self.classes_), self.random_state, self.preset)
        self.result_ = train(self.model_, ds, ObjectiveSpec(self.flavor, k=self.k, alpha=self.alpha), config)
        return self

    def _batch(self, X) -> TokenBatch:
        check_is_fitted(self, "model_")
        # ids beyond the training vocabulary map to unk
        return TokenBatch.from_sequences([np.where(s >= self.vocab_size_, UNK, s) for s in check_sequences(X)])

    def predict_proba(self, X) -> np.ndarray:
        """q(y|x) for every sequence, columns ordered as ``classes_``."""
        batch = self._batch(X)
        _, probs = self.model_.classify(batch)
        return probs

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        """Posterior means of the continuous code z, shape (n, d_z)."""
        batch = self._batch(X)
        self.model_.eval()
        _, qz = self.model_.encode(batch)
        return qz.mean.numpy()

"""Recurrent sequence model with a discrete class y and a Gaussian code z.

Inference side (phi): token embeddings, a bidirectional LSTM whose final
forward and backward states are concatenated, dropout, and three linear
heads giving the mean and scale of q(z|x) and the logits of q(y|x).

Generative side (theta): p(z) = N(0, I), a linear prior head p(y|z), and an
LSTM decoder that at every step consumes ``[embed(y); z; embed(previous
token)]`` and emits a softmax over the vocabulary. Likelihood terms are
teacher-forced; pad positions are excluded.

Reserved token ids: pad 0, unk 1, bos 2, eos 3.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .distributions import Categorical, DiagonalGaussian, standard_normal_log_prob
from .exceptions import DistributionError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
N_RESERVED = 4
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NeuralConfig:
    """Architecture of :class:`NeuralModel`.

    The defaults are the desk-scale sizes; :func:`preset` also offers the
    large ``"paper"`` sizes.
    """

    vocab_size: int
    n_classes: int
    d_emb: int = 32
    hidden: int = 32
    layers: int = 1
    d_z: int = 16
    d_y: int = 8
    dropout: float = 0.5
    sigma_floor: float = 1e-4
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "n_classes", "d_emb", "hidden", "layers", "d_z", "d_y"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size <= N_RESERVED:
            raise ValueError(f"vocab_size must exceed the {N_RESERVED} reserved ids")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "desk": dict(d_emb=32, hidden=32, layers=1, d_z=16, d_y=8),
    "paper": dict(d_emb=300, hidden=200, layers=2, d_z=100, d_y=50),
}


def preset(name: str, vocab_size: int, n_classes: int, **overrides) -> NeuralConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return NeuralConfig(vocab_size=vocab_size, n_classes=n_classes, **{**PRESETS[name], **overrides})


@dataclass
class TokenBatch:
    """Right-padded batch of token sequences.

    ``ids`` has shape (B, T) with pad id 0 past each length; ``truncated``
    flags sequences cut to ``max_len``.
    """

    ids: torch.Tensor
    lengths: torch.Tensor
    truncated: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.truncated is None:
            self.truncated = np.zeros(len(self.lengths), dtype=bool)

    def __len__(self):
        return int(self.ids.shape[0])

    @classmethod
    def from_sequences(cls, seqs, max_len: int | None = None) -> "TokenBatch":
        seqs = [np.asarray(s, dtype=np.int64).ravel() for s in seqs]
        truncated = np.array([max_len is not None and len(s) > max_len for s in seqs], dtype=bool)
        if max_len is not None:
            seqs = [s[:max_len] for s in seqs]
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        T = max(1, int(lengths.max(initial=0)))
        ids = np.zeros((len(seqs), T), dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        return cls(torch.from_numpy(ids), torch.from_numpy(lengths), truncated)

    def index(self, idx) -> "TokenBatch":
        idx = np.asarray(idx, dtype=np.int64)
        lengths = self.lengths[idx]
        T = max(1, int(lengths.max())) if len(idx) else 1
        return TokenBatch(self.ids[idx, :T], lengths, self.truncated[idx])


class NeuralModel(nn.Module):
    """Sequence model exposing the interface expected by :mod:`sspiwo.objectives`."""

    factorized = True

    def __init__(self, config: NeuralConfig, seed: int | None = None):
        super().__init__()
        self.config = c = config
        if seed is not None:
            torch.manual_seed(seed)
        self.enc_embedding = nn.Embedding(c.vocab_size, c.d_emb)
        self.encoder = nn.LSTM(c.d_emb, c.hidden, num_layers=c.layers, batch_first=True,
                               bidirectional=True)
        self.enc_dropout = nn.Dropout(c.dropout)
        self.head_mu = nn.Linear(2 * c.hidden, c.d_z)
        self.head_sigma = nn.Linear(2 * c.hidden, c.d_z)
        self.head_y = nn.Linear(2 * c.hidden, c.n_classes)
        self.prior_y = nn.Linear(c.d_z, c.n_classes)
        self.y_embedding = nn.Embedding(c.n_classes, c.d_y)
        self.dec_embedding = self.enc_embedding if c.tie_embeddings else nn.Embedding(c.vocab_size, c.d_emb)
        self.decoder = nn.LSTM(c.d_y + c.d_z + c.d_emb, c.hidden, batch_first=True)
        self.output = nn.Linear(c.hidden, c.vocab_size)

    _PHI = ("enc_embedding", "encoder", "head_mu", "head_sigma", "head_y")
    _THETA = ("prior_y", "y_embedding", "dec_embedding", "decoder", "output")

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def dtype(self):
        return self.output.weight.dtype

    def _block(self, names):
        out = {}
        for mod in names:
            for pname, p in getattr(self, mod).named_parameters():
                out[f"{mod}.{pname}"] = p
        return out

    def phi_parameters(self) -> dict:
        """Inference-network parameters. Includes the shared table when tied."""
        return self._block(self._PHI)

    def theta_parameters(self) -> dict:
        """Generative parameters. Includes the shared table when tied."""
        return self._block(self._THETA)

    def set_embeddings(self, matrix) -> None:
        """Overwrite the embedding table(s) with an external (vocab x d_emb) matrix."""
        m = torch.as_tensor(np.asarray(matrix), dtype=self.dtype)
        if tuple(m.shape) != tuple(self.enc_embedding.weight.shape):
            raise DistributionError(f"embedding matrix shape {tuple(m.shape)} != "
                                    f"{tuple(self.enc_embedding.weight.shape)}")
        with torch.no_grad():
            self.enc_embedding.weight.copy_(m)
            self.dec_embedding.weight.copy_(m)

    # ---- inference network ----
    def features(self, x: TokenBatch) -> torch.Tensor:
        """Concatenated final forward/backward states of the top encoder layer, (B, 2H)."""
        emb = self.enc_embedding(x.ids)
        # all-pad rows are run over one pad token so the LSTM sees a non-empty sequence
        lengths = x.lengths.clamp(min=1).cpu()
        packed = pack_padded_sequence(emb, lengths, batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.encoder(packed)
        return self.enc_dropout(torch.cat([h_n[-2], h_n[-1]], dim=-1))

    def encode(self, x: TokenBatch):
        h = self.features(x)
        qy = Categorical(self.head_y(h))
        qz = DiagonalGaussian(self.head_mu(h), F.softplus(self.head_sigma(h)) + self.config.sigma_floor)
        return qy, qz

    # ---- generative network ----
    def step_log_probs(self, x: TokenBatch, y, z) -> torch.Tensor:
        """Per-step log-softmax over the vocabulary, shape (*S, B, T, V), teacher-forced."""
        c = self.config
        y = torch.as_tensor(y, dtype=torch.long)
        if z.shape[-1] != c.d_z or tuple(z.shape[:-1]) != tuple(y.shape) or y.shape[-1] != len(x):
            raise DistributionError(f"expected y of shape (..., {len(x)}) and z of shape (..., {len(x)}, {c.d_z}); "
                                    f"got {tuple(y.shape)} and {tuple(z.shape)}")
        lead = y.shape
        B, T = x.ids.shape
        prev = torch.cat([torch.full((B, 1), BOS, dtype=torch.long), x.ids[:, :-1]], dim=1)
        prev_emb = self.dec_embedding(prev)                              # (B, T, E)
        cond = torch.cat([self.y_embedding(y), z.to(self.dtype)], -1)    # (*S, B, dy+dz)
        N = y.numel()
        cond = cond.reshape(N, 1, -1).expand(N, T, -1)
        prev_emb = prev_emb.expand(*lead[:-1], B, T, -1).reshape(N, T, -1)
        out, _ = self.decoder(torch.cat([cond, prev_emb], -1))
        return torch.log_softmax(self.output(out), -1).reshape(*lead, T, -1)

    def decode_log_prob(self, x: TokenBatch, y, z) -> torch.Tensor:
        """Teacher-forced sum over non-pad positions of log p(x_t | x_<t, y, z), shape (*S, B)."""
        lp = self.step_log_probs(x, y, z)
        ids = x.ids.expand(*lp.shape[:-1])
        tok = lp.gather(-1, ids.unsqueeze(-1)).squeeze(-1)
        mask = torch.arange(x.ids.shape[1]) < x.lengths[:, None]
        return (tok * mask.to(tok.dtype)).sum(-1)

    def log_likelihood(self, x, y, z):
        return self.decode_log_prob(x, y, z)

    def prior_log_prob(self, y, z) -> torch.Tensor:
        """log p(z) + log p(y|z)."""
        y = torch.as_tensor(y, dtype=torch.long)
        log_py = torch.log_softmax(self.prior_y(z), -1).gather(-1, y.unsqueeze(-1)).squeeze(-1)
        return standard_normal_log_prob(z) + log_py

    def log_prior(self, y, z):
        return self.prior_log_prob(y, z)

    @torch.no_grad()
    def classify(self, x: TokenBatch, batch_size: int = 512):
        """Predicted classes and q(y|x) probabilities, evaluated in eval mode."""
        was_training = self.training
        self.eval()
        probs = []
        try:
            for s in range(0, len(x), batch_size):
                qy, _ = self.encode(x.index(np.arange(s, min(s + batch_size, len(x)))))
                probs.append(qy.probs)
        finally:
            self.train(was_training)
        p = torch.cat(probs) if probs else torch.zeros(0, self.n_classes)
        return p.argmax(-1).numpy(), p.numpy()


def save_checkpoint(model: NeuralModel, path, extra: dict | None = None) -> None:
    """Write the parameters as a flat ``.npz`` of named arrays.

    A ``__meta__`` entry holds JSON with the format version, the config, its
    fingerprint and every array's shape. Written atomically.
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config),
            "fingerprint": model.config.fingerprint(),
            "shapes": {k: list(v.shape) for k, v in arrays.items()},
            "dtype": str(model.dtype).replace("torch.", ""), "extra": extra or {}}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def load_checkpoint(path) -> NeuralModel:
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        config = NeuralConfig(**meta["config"])
        if config.fingerprint() != meta["fingerprint"]:
            raise ValueError("checkpoint config fingerprint mismatch")
        model = NeuralModel(config)
        model.to(getattr(torch, meta["dtype"]))
        state = {k: torch.from_numpy(f[k].copy()) for k in meta["shapes"]}
    model.load_state_dict(state)
    return model


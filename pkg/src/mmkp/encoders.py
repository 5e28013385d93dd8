"""Text sub-encoder (word + type embeddings, Bi-GRU, max-pool) and image projection."""

import logging

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import numerics as nx
from .data import FEATURE_DIM, N_REGIONS
from .errors import ConfigError, EmptyInput, NumericError, ShapeError

log = logging.getLogger(__name__)

N_TYPES = 3
INIT_RANGE = 0.1


def init_uniform_(module, scale=INIT_RANGE):
    for p in module.parameters():
        nn.init.uniform_(p, -scale, scale)


class TextEncoder(nn.Module):
    """Bidirectional GRU over ``word_emb[x] + type_emb[t]``.

    ``d1`` is the concatenated state size, so each direction carries ``d1 // 2``
    units.
    """

    def __init__(self, vocab_size, d_emb=200, d1=300, dropout=0.1):
        super().__init__()
        if d1 % 2:
            raise ConfigError("d1 must be even (two GRU directions)")
        self.vocab_size = vocab_size
        self.word_emb = nn.Embedding(vocab_size, d_emb)
        self.type_emb = nn.Embedding(N_TYPES, d_emb)
        self.gru = nn.GRU(d_emb, d1 // 2, batch_first=True, bidirectional=True)
        self.dropout = nn.Dropout(dropout)
        self.d1 = d1
        init_uniform_(self)

    def embed(self, token_ids, type_ids):
        if token_ids.numel() and (int(token_ids.max()) >= self.vocab_size or int(token_ids.min()) < 0):
            raise IndexError(f"token id out of range for vocabulary of {self.vocab_size}")
        if type_ids.numel() and (int(type_ids.max()) >= N_TYPES or int(type_ids.min()) < 0):
            raise IndexError("type id must be 0, 1 or 2")
        return self.dropout(self.word_emb(token_ids) + self.type_emb(type_ids))

    def encode(self, emb, lengths):
        """``emb`` is ``(B, T, d_emb)``; returns ``H_T (B, T, d1)`` and ``M_T (B, d1)``.

        Padding positions of ``H_T`` are zero and excluded from the pooling.
        """
        if emb.shape[1] == 0 or int(lengths.min()) < 1:
            raise EmptyInput("cannot encode a zero-length input")
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        h, _ = pad_packed_sequence(out, batch_first=True, total_length=emb.shape[1])
        h = self.dropout(h)
        mask = length_mask(lengths, emb.shape[1])
        return h, max_pool(h, mask)

    def forward(self, token_ids, type_ids, lengths):
        return self.encode(self.embed(token_ids, type_ids), lengths)


def length_mask(lengths, total):
    return torch.arange(total, device=lengths.device)[None, :] < lengths[:, None]


def max_pool(h, mask=None):
    """Column-wise max over token states (the global text vector)."""
    return nx.maxpool_columns(h, mask)


class ImageEncoder(nn.Module):
    """Linear projection of the 49 x 512 grid into ``d1``; no nonlinearity."""

    def __init__(self, d1=300):
        super().__init__()
        self.proj = nn.Linear(FEATURE_DIM, d1)
        init_uniform_(self)

    def forward(self, raw):
        if raw.shape[-2:] != (N_REGIONS, FEATURE_DIM):
            raise ShapeError(f"image grid must be {N_REGIONS}x{FEATURE_DIM}, got {tuple(raw.shape)}")
        if not torch.isfinite(raw).all():
            raise NumericError("image features contain non-finite values")
        return self.proj(raw)


def load_embeddings(path, vocab, table):
    """Fill rows of ``table`` (an ``nn.Embedding``) from a ``word v1 ... vd`` text file.

    Words missing from the file keep their random initialisation.  Returns the
    number of rows replaced.
    """
    dim = table.weight.shape[1]
    hits = 0
    with open(path, encoding="utf-8") as f, torch.no_grad():
        for line in f:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1 or parts[0] not in vocab:
                continue
            vec = np.asarray(parts[1:], dtype=np.float64)
            table.weight[vocab.id_of[parts[0]]] = torch.as_tensor(vec, dtype=table.weight.dtype)
            hits += 1
    log.info("loaded %d/%d pretrained embeddings from %s", hits, vocab.size, path)
    return hits

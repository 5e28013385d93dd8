"""Text-image fusion and the keyphrase classifier over a fixed label set."""

import torch
from torch import nn

from . import numerics as nx
from .data import phrase_key
from .encoders import init_uniform_
from .noise_filter import MultiHeadCrossAttention


class LabelSet:
    """Distinct training keyphrases, sorted lexicographically."""

    def __init__(self, phrases):
        uniq = {tuple(p) for p in phrases if len(p)}
        self.phrases = sorted(uniq, key=phrase_key)
        self.index = {p: i for i, p in enumerate(self.phrases)}

    @classmethod
    def from_samples(cls, samples):
        return cls(k for s in samples for k in s.keyphrases)

    def __len__(self):
        return len(self.phrases)

    def get(self, phrase, default=-1):
        return self.index.get(tuple(phrase), default)

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self.phrases == other.phrases


class Classifier(nn.Module):
    """``H_f = LayerNorm(x + FFN(x))`` with ``x`` the text-queried attention over
    the filtered grid, followed by a two-layer ReLU MLP over the labels."""

    def __init__(self, d1, n_labels, n_heads=4, d_mlp=None, layernorm_affine=True):
        super().__init__()
        d_mlp = d_mlp or d1
        self.attn = MultiHeadCrossAttention(d1, n_heads)
        self.ffn = nn.Sequential(nn.Linear(d1, 2 * d1), nn.ReLU(), nn.Linear(2 * d1, d1))
        self.mlp = nn.Sequential(nn.Linear(d1, d_mlp), nn.ReLU(), nn.Linear(d_mlp, n_labels))
        init_uniform_(self)
        if layernorm_affine:
            self.ln_weight = nn.Parameter(torch.ones(d1))
            self.ln_bias = nn.Parameter(torch.zeros(d1))
        else:
            self.ln_weight = self.ln_bias = None

    def fuse(self, M_T, H_hat):
        x = self.attn(M_T, H_hat, H_hat)
        return nx.layernorm(x + self.ffn(x), self.ln_weight, self.ln_bias)

    def logits(self, H_f):
        return self.mlp(H_f)

    def classify(self, H_f):
        return nx.softmax(self.logits(H_f), dim=-1)


def top_k_predictions(logits, labels, k=5):
    """Word list ``w`` and word weights ``beta`` from the ``k`` best labels of one sample.

    ``logits`` is a 1-D tensor over the label set.  The selected logits are
    renormalised by a softmax and each phrase's weight is split evenly over its
    words, so ``beta`` sums to one.  Ties go to the lower label index.
    """
    k = min(k, logits.shape[-1])
    # stable sort keeps the lower index first among equal logits
    order = torch.sort(logits.detach(), descending=True, stable=True).indices[:k]
    phrase_w = nx.softmax(logits[order], dim=-1)
    words, beta = [], []
    for rank, li in enumerate(order.tolist()):
        phrase = labels.phrases[li]
        words.extend(phrase)
        beta.append(phrase_w[rank].expand(len(phrase)) / len(phrase))
    return words, torch.cat(beta), order

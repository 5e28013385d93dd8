"""Coarse (image-text matching) and fine (region-text correlation) noise filtering."""

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .data import N_REGIONS
from .encoders import init_uniform_
from .errors import ConfigError, NoTarget, ShapeError


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product attention of one query vector over ``n`` key/value rows."""

    def __init__(self, d_model, n_heads):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        # a key bias only shifts all scores of a head equally, so it is omitted
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        init_uniform_(self)

    def forward(self, query, keys, values, mask=None, return_weights=False):
        # query (B, d); keys/values (B, n, d); mask (B, n) True = attend
        if keys.shape[:-1] != values.shape[:-1] or query.shape[-1] != keys.shape[-1]:
            raise ShapeError(f"attention shapes disagree: q{tuple(query.shape)} k{tuple(keys.shape)} v{tuple(values.shape)}")
        b, n, _ = keys.shape
        h, dh = self.n_heads, self.d_head
        q = self.q(query).view(b, h, 1, dh)
        k = self.k(keys).view(b, n, h, dh).transpose(1, 2)
        v = self.v(values).view(b, n, h, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)).squeeze(-2) / math.sqrt(dh)   # (B, h, n)
        if mask is not None:
            mask = mask[:, None, :].expand_as(scores)
        weights = nx.softmax(scores, dim=-1, mask=mask)
        heads = (weights.unsqueeze(-2) @ v).squeeze(-2)                   # (B, h, dh)
        out = self.o(heads.reshape(b, h * dh))
        return (out, weights) if return_weights else out


@dataclass
class MatchResult:
    H_c: torch.Tensor
    s_c: torch.Tensor
    logit: torch.Tensor


@dataclass
class CorrelationState:
    H_T_bar: torch.Tensor
    H_I_bar: torch.Tensor
    A: torch.Tensor
    A_gt: torch.Tensor = None

    def grid(self, which="A"):
        """View scores as ``(..., 7, 7)``; index ``7*r + c`` maps to cell ``(r, c)``."""
        t = getattr(self, which)
        return t.reshape(*t.shape[:-1], 7, 7)


class NoiseFilter(nn.Module):
    """Matching score ``s_c``, correlation scores ``A`` and sigmoid region gating.

    ``ffn_bypass`` replaces the 49->hidden->49 score network by the identity
    (used by exact oracle tests).  ``smooth_with_match=False`` drops the uniform
    ``s_c`` shift from the correlation scores.
    """

    def __init__(self, d1, d2=128, n_heads=4, d_ffn=64, ffn_bypass=False, smooth_with_match=True):
        super().__init__()
        self.attn = MultiHeadCrossAttention(d1, n_heads)
        self.fc = nn.Linear(d1, 1)
        self.W_T = nn.Linear(d1, d2, bias=False)
        self.W_I = nn.Linear(d1, d2, bias=False)
        self.ffn = nn.Sequential(nn.Linear(N_REGIONS, d_ffn), nn.Tanh(), nn.Linear(d_ffn, N_REGIONS))
        self.d2 = d2
        self.ffn_bypass = ffn_bypass
        self.smooth_with_match = smooth_with_match
        init_uniform_(self)

    def match_score(self, M_T, H_I):
        H_c = self.attn(M_T, H_I, H_I)
        logit = self.fc(H_c).squeeze(-1).clamp(-nx.LOGIT_CLAMP, nx.LOGIT_CLAMP)
        return MatchResult(H_c, torch.sigmoid(logit), logit)

    def correlation_scores(self, M_T, H_I, s_c):
        if H_I.shape[-2] != N_REGIONS:
            raise ShapeError(f"expected {N_REGIONS} regions, got {H_I.shape[-2]}")
        Ht = self.W_T(M_T)                                   # (B, d2)
        Hi = self.W_I(H_I)                                   # (B, 49, d2)
        raw = (Hi @ Ht.unsqueeze(-1)).squeeze(-1) / math.sqrt(self.d2)
        if self.smooth_with_match:
            raw = raw + s_c.unsqueeze(-1)
        A = raw if self.ffn_bypass else self.ffn(raw)
        return CorrelationState(Ht, Hi, A)


def filter_image(A, H_I):
    """Gate each region row by ``sigmoid(A_r)`` (clamped logits)."""
    if A.shape[-1] != N_REGIONS or A.shape != H_I.shape[:-1]:
        raise ShapeError(f"gate {tuple(A.shape)} does not match grid {tuple(H_I.shape)}")
    gate = nx.sigmoid(A)
    return gate.unsqueeze(-1) * H_I, gate


def gt_correlation_scores(encoder, noise_filter, gold_ids, gold_types, gold_lengths, H_I, s_c):
    """Correlation scores driven by the gold keyphrases, returned as a constant.

    The gold phrases of each sample are already joined (sorted, space separated)
    and tokenised into ``gold_ids``.  Dropout is suspended so identical text
    yields identical scores.
    """
    if int(gold_lengths.min()) < 1:
        raise NoTarget("every sample needs at least one gold keyphrase")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            _, M_gt = encoder(gold_ids, gold_types, gold_lengths)
            A_gt = noise_filter.correlation_scores(M_gt, H_I.detach(), s_c.detach()).A
    finally:
        encoder.train(was_training)
    return A_gt.detach()

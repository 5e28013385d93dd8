"""Pointer-network decoder with an extended copy mechanism, and beam search."""

import math

import torch
from torch import nn

from . import numerics as nx
from .encoders import init_uniform_
from .errors import EmptyInput


class Generator(nn.Module):
    """GRU decoder attending over ``H_T``.

    The word embedding table is owned by the text encoder; every method here
    takes already-embedded previous tokens.
    """

    def __init__(self, vocab_size, d_emb, d1):
        super().__init__()
        self.W_0 = nn.Linear(d1, d1, bias=False)
        self.W_alpha = nn.Linear(2 * d1, d1, bias=False)
        self.v_alpha = nn.Linear(d1, 1, bias=False)
        self.cell = nn.GRUCell(d_emb + d1, d1)
        self.W_p = nn.Linear(d_emb + 2 * d1, vocab_size, bias=False)
        self.W_lambda = nn.Linear(d_emb + 2 * d1, 1, bias=False)
        self.vocab_size = vocab_size
        init_uniform_(self)

    def init_state(self, M_T):
        return torch.tanh(self.W_0(M_T))

    def step(self, y_emb, s_prev, H_T, mask=None):
        """One decoding step.  Attention is scored against the pre-update state."""
        if H_T.shape[1] == 0:
            raise EmptyInput("cannot attend over an empty input")
        n = H_T.shape[1]
        pair = torch.cat([s_prev.unsqueeze(1).expand(-1, n, -1), H_T], dim=-1)
        scores = self.v_alpha(torch.tanh(self.W_alpha(pair))).squeeze(-1)
        alpha = nx.softmax(scores, dim=-1, mask=mask)
        c = (alpha.unsqueeze(-1) * H_T).sum(dim=1)
        s = self.cell(torch.cat([y_emb, c], dim=-1), s_prev)
        return s, c, alpha

    @staticmethod
    def features(y_emb, s, c, H_f):
        return torch.cat([y_emb, s, c + H_f], dim=-1)

    def prediction_distribution(self, u):
        return nx.softmax(self.W_p(u), dim=-1)

    def switch(self, u):
        return nx.sigmoid(self.W_lambda(u)).squeeze(-1)


def copy_distribution(alpha, ext_ids, beta, word_ids, lambda_c, ext_size):
    """Copy probabilities over the extended id space.

    ``lambda_c`` of the mass follows the attention over input tokens
    (``ext_ids``); the rest follows the classifier word weights ``beta``
    (``word_ids``).  Repeated words accumulate.  Shapes: ``alpha``/``ext_ids``
    ``(B, T)``, ``beta``/``word_ids`` ``(B, W)``.
    """
    p = alpha.new_zeros(alpha.shape[0], ext_size)
    p = p.scatter_add(1, ext_ids, lambda_c * alpha)
    if beta is not None and lambda_c < 1.0:
        p = p.scatter_add(1, word_ids, (1.0 - lambda_c) * beta)
    return p


def mix_distributions(p_p, p_c, lam):
    """``lam * p_p + (1 - lam) * p_c`` with ``p_p`` zero-padded to the extended space."""
    pad = p_c.shape[-1] - p_p.shape[-1]
    if pad > 0:
        p_p = torch.nn.functional.pad(p_p, (0, pad))
    lam = lam.unsqueeze(-1) if torch.is_tensor(lam) and lam.dim() == p_p.dim() - 1 else lam
    return lam * p_p + (1.0 - lam) * p_c


def _index_state(state, idx):
    if isinstance(state, (tuple, list)):
        return type(state)(_index_state(s, idx) for s in state)
    return state[idx]


def beam_search(step, state, bos, eos, beam_size=10, max_len=6, detokenize=None):
    """Length-expanding beam search.

    ``step(prefixes, state)`` returns ``(log_probs, new_state)`` with
    ``log_probs`` of shape ``(n_hyps, V_ext)`` for the given prefixes (each a
    tuple of generated ids, BOS excluded).  ``state`` is a tensor (or tuple of
    tensors) with one row per hypothesis.  A hypothesis finishes on ``eos`` or
    at ``max_len`` tokens; its score is the summed log-probability over its
    token count.  ``detokenize(ids) -> str`` turns ids (EOS stripped) into a
    keyphrase; empty keyphrases are dropped and duplicates keep the best score.
    Returns ``[(keyphrase, score)]`` sorted by score, ties lexicographic.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    detokenize = detokenize or (lambda ids: " ".join(map(str, ids)))
    hyps = [((), 0.0)]
    finished = []
    for t in range(max_len):
        logp, state = step([h[0] for h in hyps], state)
        base = torch.tensor([h[1] for h in hyps], dtype=logp.dtype)
        total = (base[:, None] + logp).reshape(-1)
        order = torch.sort(total, descending=True, stable=True).indices
        v = logp.shape[1]
        next_hyps, parents = [], []
        for flat in order[:beam_size].tolist():
            score = float(total[flat])
            if not math.isfinite(score):
                break
            parent, tok = divmod(flat, v)
            tokens = hyps[parent][0] + (tok,)
            if tok == eos or t + 1 == max_len:
                finished.append((tokens, score))
            else:
                next_hyps.append((tokens, score))
                parents.append(parent)
        if not next_hyps:
            break
        hyps = next_hyps
        state = _index_state(state, torch.tensor(parents))

    best = {}
    for tokens, score in finished:
        norm = score / len(tokens)
        body = tokens[:-1] if tokens[-1] == eos else tokens
        phrase = detokenize(body)
        if not phrase:
            continue
        if phrase not in best or norm > best[phrase]:
            best[phrase] = norm
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))

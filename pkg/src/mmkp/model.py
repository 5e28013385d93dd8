"""The full multimodal keyphrase model: encoding, filtering, classification, decoding."""

from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .classifier import Classifier, LabelSet, top_k_predictions
from .data import (BOS_ID, EOS_ID, PAD_ID, SRC, UNK_ID, concat_input, encode_matching, phrase_key, replicate_corpus,
                   target_ids)
from .encoders import ImageEncoder, TextEncoder, length_mask
from .errors import ConfigError, ShapeError
from .generator import Generator, beam_search, copy_distribution, mix_distributions
from .noise_filter import NoiseFilter, filter_image, gt_correlation_scores

FILTER_MODES = ("full", "coarse", "none")


@dataclass
class ModelConfig:
    d_emb: int = 200
    d1: int = 300
    d2: int = 128
    n_heads: int = 4
    d_ffn_region: int = 64
    d_mlp: int = None
    dropout: float = 0.1
    lambda_c: float = 0.5
    top_k: int = 5
    max_input_len: int = 200
    max_decode_len: int = 6
    precision: int = 64
    # variant switches
    ffn_bypass: bool = False
    smooth_with_match: bool = True
    filter_mode: str = "full"
    classifier_copy: bool = True
    use_ocr: bool = True
    use_entities: bool = True

    def validate(self):
        for name in ("d_emb", "d1", "d2", "n_heads", "d_ffn_region", "top_k", "max_input_len", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d1 % self.n_heads:
            raise ConfigError(f"d1={self.d1} must be divisible by n_heads={self.n_heads}")
        if self.d1 % 2:
            raise ConfigError("d1 must be even")
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ConfigError("lambda_c must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.filter_mode not in FILTER_MODES:
            raise ConfigError(f"filter_mode must be one of {FILTER_MODES}")
        nx.dtype_for(self.precision)
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Batch:
    token_ids: torch.Tensor
    type_ids: torch.Tensor
    ext_ids: torch.Tensor
    lengths: torch.Tensor
    image: torch.Tensor
    oov: list
    targets: torch.Tensor = None
    target_mask: torch.Tensor = None
    label_idx: torch.Tensor = None
    gold_ids: torch.Tensor = None
    gold_types: torch.Tensor = None
    gold_lengths: torch.Tensor = None
    match_labels: torch.Tensor = None

    @property
    def mask(self):
        return length_mask(self.lengths, self.token_ids.shape[1])

    def __len__(self):
        return self.token_ids.shape[0]


def _pad(seqs, value=PAD_ID):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return torch.from_numpy(out)


def make_batch(encs, features, vocab, dtype=torch.float64, targets=None, gold_sets=None,
               label_set=None, match_labels=None):
    """Collate encoded inputs (and optional training targets) into padded tensors."""
    b = Batch(
        token_ids=_pad([e.token_ids for e in encs]),
        type_ids=_pad([e.type_ids for e in encs], value=SRC),
        ext_ids=_pad([e.ext_ids for e in encs]),
        lengths=torch.tensor([len(e) for e in encs], dtype=torch.int64),
        image=torch.as_tensor(np.stack([np.asarray(f, dtype=np.float64) for f in features]), dtype=dtype),
        oov=[list(e.oov_words) for e in encs],
    )
    if targets is not None:
        ids = [target_ids(t, e, vocab) for t, e in zip(targets, encs)]
        b.targets = _pad(ids)
        b.target_mask = length_mask(torch.tensor([len(i) for i in ids]), b.targets.shape[1])
        if label_set is not None:
            b.label_idx = torch.tensor([label_set.get(t) for t in targets], dtype=torch.int64)
    if gold_sets is not None:
        gold = [[vocab.lookup(w) for w in " ".join(sorted(map(phrase_key, g))).split()] for g in gold_sets]
        b.gold_ids = _pad(gold)
        b.gold_types = torch.zeros_like(b.gold_ids)
        b.gold_lengths = torch.tensor([len(g) for g in gold], dtype=torch.int64)
    if match_labels is not None:
        b.match_labels = torch.tensor(match_labels, dtype=dtype)
    return b


def triplet_batch(triplets, vocab, labels, dtype=torch.float64):
    return make_batch(
        [t.input for t in triplets], [t.image_features for t in triplets], vocab, dtype,
        targets=[t.target for t in triplets],
        gold_sets=[t.sample.keyphrases if t.sample is not None else (t.target,) for t in triplets],
        label_set=labels,
    )


def matching_batch(items, vocab, dtype=torch.float64):
    return make_batch([m.input for m in items], [m.image_features for m in items], vocab, dtype,
                      match_labels=[m.label for m in items])


@dataclass
class ForwardState:
    H_T: torch.Tensor
    M_T: torch.Tensor
    mask: torch.Tensor
    H_I: torch.Tensor
    H_hat: torch.Tensor
    H_f: torch.Tensor
    logits: torch.Tensor
    s_c: torch.Tensor = None
    A: torch.Tensor = None
    extras: dict = field(default_factory=dict)


@dataclass
class CopySupport:
    word_ids: torch.Tensor
    beta: torch.Tensor
    ext_words: list
    ext_size: int


class KeyphraseModel(nn.Module):
    def __init__(self, config, vocab, labels):
        super().__init__()
        config.validate()
        if len(labels) < 2:
            raise ConfigError("the classifier needs at least two candidate keyphrases")
        self.config = config
        self.vocab = vocab
        self.labels = labels
        V = vocab.size
        self.text = TextEncoder(V, config.d_emb, config.d1, config.dropout)
        self.image = ImageEncoder(config.d1)
        self.noise = NoiseFilter(config.d1, config.d2, config.n_heads, config.d_ffn_region,
                                 ffn_bypass=config.ffn_bypass, smooth_with_match=config.smooth_with_match)
        self.cls = Classifier(config.d1, len(labels), config.n_heads, config.d_mlp)
        self.gen = Generator(V, config.d_emb, config.d1)
        self.to(self.dtype)

    @property
    def dtype(self):
        return nx.dtype_for(self.config.precision)

    # ----------------------------------------------------------- encoding

    def encode_input(self, sample):
        c = self.config
        return concat_input(sample, self.vocab, c.max_input_len, c.use_ocr, c.use_entities)

    def triplets(self, samples):
        """One2one training triplets encoded with this model's segment switches."""
        c = self.config
        return replicate_corpus(samples, self.vocab, max_len=c.max_input_len, use_ocr=c.use_ocr,
                                use_entities=c.use_entities)

    def matching(self, pairs):
        c = self.config
        return encode_matching(pairs, self.vocab, c.max_input_len, c.use_ocr, c.use_entities)

    def match_only(self, batch):
        _, M_T = self.text(batch.token_ids, batch.type_ids, batch.lengths)
        H_I = self.image(batch.image)
        return self.noise.match_score(M_T, H_I)

    def forward(self, batch):
        H_T, M_T = self.text(batch.token_ids, batch.type_ids, batch.lengths)
        H_I = self.image(batch.image)
        s_c = A = None
        mode = self.config.filter_mode
        if mode == "none":
            H_hat = H_I
        else:
            match = self.noise.match_score(M_T, H_I)
            s_c = match.s_c
            if mode == "full":
                A = self.noise.correlation_scores(M_T, H_I, s_c).A
                H_hat, _ = filter_image(A, H_I)
            else:
                H_hat = s_c[:, None, None] * H_I
        H_f = self.cls.fuse(M_T, H_hat)
        return ForwardState(H_T, M_T, batch.mask, H_I, H_hat, H_f, self.cls.logits(H_f), s_c, A)

    def gt_correlation(self, batch, state):
        return gt_correlation_scores(self.text, self.noise, batch.gold_ids, batch.gold_types,
                                     batch.gold_lengths, state.H_I, state.s_c)

    # ----------------------------------------------------------- decoding

    def embed_tokens(self, ids):
        ids = torch.where(ids >= self.vocab.size, torch.full_like(ids, UNK_ID), ids)
        return self.text.word_emb(ids)

    def copy_support(self, state, batch):
        """Top-k classifier words per sample, mapped into each sample's extended id space."""
        V = self.vocab.size
        ext_words = [list(o) for o in batch.oov]
        if not self.config.classifier_copy:
            return CopySupport(None, None, ext_words, V + max(len(o) for o in ext_words))
        ids, betas = [], []
        for b in range(len(batch)):
            words, beta, _ = top_k_predictions(state.logits[b], self.labels, self.config.top_k)
            row = []
            for w in words:
                if w in self.vocab:
                    row.append(self.vocab.id_of[w])
                else:
                    if w not in ext_words[b]:
                        ext_words[b].append(w)
                    row.append(V + ext_words[b].index(w))
            ids.append(row)
            betas.append(beta)
        width = max(len(r) for r in ids)
        word_ids = _pad(ids)
        beta = torch.stack([nn.functional.pad(x, (0, width - x.shape[0])) for x in betas])
        return CopySupport(word_ids, beta, ext_words, V + max(len(o) for o in ext_words))

    def decode_step(self, y_prev, s_prev, state, support, H_T=None, mask=None, H_f=None, ext_ids=None):
        """One step of the extended-copy decoder; returns ``(p, s, extras)``."""
        H_T = state.H_T if H_T is None else H_T
        mask = state.mask if mask is None else mask
        H_f = state.H_f if H_f is None else H_f
        y_emb = self.embed_tokens(y_prev)
        s, c, alpha = self.gen.step(y_emb, s_prev, H_T, mask)
        u = self.gen.features(y_emb, s, c, H_f)
        p_p = self.gen.prediction_distribution(u)
        lam = self.gen.switch(u)
        lc = self.config.lambda_c if self.config.classifier_copy else 1.0
        p_c = copy_distribution(alpha, ext_ids, support.beta, support.word_ids, lc, support.ext_size)
        p = mix_distributions(p_p, p_c, lam)
        return p, s, {"alpha": alpha, "p_p": p_p, "p_c": p_c, "lambda": lam, "c": c}

    def step_distributions(self, batch, state=None):
        """Teacher-forced per-step extended distributions for ``batch.targets``."""
        state = self.forward(batch) if state is None else state
        support = self.copy_support(state, batch)
        s = self.gen.init_state(state.M_T)
        y_prev = torch.full((len(batch),), BOS_ID, dtype=torch.int64)
        dists = []
        for j in range(batch.targets.shape[1]):
            p, s, _ = self.decode_step(y_prev, s, state, support, ext_ids=batch.ext_ids)
            dists.append(p)
            y_prev = batch.targets[:, j]
        return dists, state

    # ----------------------------------------------------------- losses

    def generation_loss(self, batch, state=None):
        dists, _ = self.step_distributions(batch, state)
        p = torch.stack(dists, dim=1)                                  # (B, L, ext)
        tok = nx.nll(p, batch.targets) * batch.target_mask
        return tok.sum(dim=1).mean()

    def stage1_terms(self, batch=None, match_batch=None, a_gt=None, use_itm=True, use_irtm=True, use_cla=True,
                     state=None):
        """The three stage-one losses (batch means); absent terms are exact zeros."""
        zero = torch.zeros((), dtype=self.dtype)
        out = {"itm": zero, "irtm": zero, "cla": zero}
        if batch is not None and (use_irtm or use_cla):
            state = self.forward(batch) if state is None else state
            if use_cla and batch.label_idx is not None:
                keep = batch.label_idx >= 0
                if keep.any():
                    d_cla = nx.softmax(state.logits[keep], dim=-1)
                    out["cla"] = loss_cla(d_cla, batch.label_idx[keep]).mean()
            if use_irtm and state.A is not None:
                target = self.gt_correlation(batch, state) if a_gt is None else a_gt
                out["irtm"] = loss_irtm(state.A, target).mean()
        if match_batch is not None and use_itm and self.config.filter_mode != "none":
            out["itm"] = loss_itm(self.match_only(match_batch).s_c, match_batch.match_labels).mean()
        out["total"] = out["itm"] + out["irtm"] + out["cla"]
        return out

    def all_losses(self, batch, match_batch=None, a_gt=None):
        """Stage-one terms plus the generation loss from a single forward pass."""
        state = self.forward(batch)
        out = self.stage1_terms(batch, match_batch, a_gt=a_gt, state=state)
        out["gen"] = self.generation_loss(batch, state)
        return out

    # ----------------------------------------------------------- inference

    def single_batch(self, sample=None, enc=None, features=None):
        if enc is None:
            enc = self.encode_input(sample)
            features = sample.image_features
        return make_batch([enc], [features], self.vocab, self.dtype), enc

    @torch.no_grad()
    def predict(self, sample=None, beam_size=10, max_len=None, enc=None, features=None):
        """Ranked ``[(keyphrase, score)]`` for one sample, plus the forward state."""
        was = self.training
        self.eval()
        try:
            batch, enc = self.single_batch(sample, enc, features)
            state = self.forward(batch)
            support = self.copy_support(state, batch)
            V = self.vocab.size
            words = support.ext_words[0]

            def step(prefixes, s):
                n = len(prefixes)
                y_prev = torch.tensor([p[-1] if p else BOS_ID for p in prefixes], dtype=torch.int64)
                sup = CopySupport(
                    None if support.word_ids is None else support.word_ids.expand(n, -1),
                    None if support.beta is None else support.beta.expand(n, -1),
                    support.ext_words, support.ext_size)
                p, s_new, _ = self.decode_step(
                    y_prev, s, state, sup,
                    H_T=state.H_T.expand(n, -1, -1), mask=state.mask.expand(n, -1),
                    H_f=state.H_f.expand(n, -1), ext_ids=batch.ext_ids.expand(n, -1))
                return torch.log(p), s_new

            def detok(ids):
                return " ".join(self.vocab.word_of[i] if i < V else words[i - V] for i in ids)

            ranked = beam_search(step, self.gen.init_state(state.M_T), BOS_ID, EOS_ID,
                                 beam_size, max_len or self.config.max_decode_len, detok)
            return ranked, state
        finally:
            self.train(was)

    @torch.no_grad()
    def sequence_log_prob(self, sample, ids, enc=None, features=None):
        """Summed log-probability of an extended-id sequence under teacher forcing."""
        was = self.training
        self.eval()
        try:
            batch, _ = self.single_batch(sample, enc, features)
            batch.targets = torch.tensor([list(ids)], dtype=torch.int64)
            batch.target_mask = torch.ones_like(batch.targets, dtype=torch.bool)
            dists, _ = self.step_distributions(batch)
            return sum(float(torch.log(d[0, t])) for d, t in zip(dists, ids))
        finally:
            self.train(was)


# ---------------------------------------------------------------- losses


def loss_itm(s_c, label):
    """Binary cross-entropy of the matching score; ``label`` is 0/1 (tensor or int)."""
    label = torch.as_tensor(label, dtype=s_c.dtype)
    return -(label * torch.log(s_c) + (1 - label) * torch.log(1 - s_c))


def loss_irtm(A, A_gt):
    """Mean squared difference over the 49 regions."""
    return nx.mse(A, A_gt)


def loss_cla(d_cla, gold):
    return nx.nll(d_cla, torch.as_tensor(gold))


def loss_gen(step_distributions, gold):
    """Summed token cross-entropy of one target sequence (EOS included)."""
    if len(step_distributions) != len(gold):
        raise ShapeError(f"{len(step_distributions)} decoder steps for {len(gold)} gold tokens")
    total = 0.0
    for p, g in zip(step_distributions, gold):
        total = total - torch.log(p[g] + 1e-12)
    return total

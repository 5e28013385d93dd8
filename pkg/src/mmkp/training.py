"""Two-stage training, checkpoints, and the finite-difference gradient check."""

import copy
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .classifier import LabelSet
from .data import SPECIALS, Vocabulary, encode_matching, phrase_key
from .errors import ConfigError, NumericError, StageOrderError
from .evaluation import score_predictions
from .model import KeyphraseModel, ModelConfig, matching_batch, triplet_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mmkp-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_NAMES = ("itm", "irtm", "cla", "gen", "sum")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    lambda_c: float = 0.5
    stage: int = 1
    grad_clip: float = 5.0
    eval_every: int = 1
    eval_beam: int = 10
    use_itm_loss: bool = True
    use_irtm_loss: bool = True
    use_cla_loss: bool = True

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        for name in ("learning_rate", "batch_size", "max_epochs", "eval_every", "eval_beam", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Checkpoint:
    params: dict
    vocab: Vocabulary
    labels: LabelSet
    model_config: ModelConfig
    train_config: dict
    stage: int
    history: list = field(default_factory=list)

    @classmethod
    def from_model(cls, model, stage, history=(), train_config=None):
        params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(params, model.vocab, model.labels, copy.deepcopy(model.config),
                   dict(train_config or {}), stage, list(history))

    def build_model(self):
        model = KeyphraseModel(copy.deepcopy(self.model_config), self.vocab, self.labels)
        model.load_state_dict(self.params)
        model.stage = self.stage
        return model

    def save(self, path):
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "vocab": self.vocab.to_list(),
            "labels": [phrase_key(p) for p in self.labels.phrases],
            "history": self.history,
            "params": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in self.params.items()},
        }
        arrays = {f"param/{k}": v.cpu().numpy() for k, v in self.params.items()}
        arrays["header"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        path.write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode("utf-8"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ConfigError(f"{path} is not a checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
            params = {k: torch.from_numpy(z[f"param/{k}"].copy()) for k in header["params"]}
        return cls(
            params=params,
            vocab=Vocabulary(header["vocab"]),
            labels=LabelSet(tuple(p.split()) for p in header["labels"]),
            model_config=ModelConfig(**header["model_config"]),
            train_config=header["train_config"],
            stage=header["stage"],
            history=header["history"],
        )


# ------------------------------------------------------------------ helpers


def _batches(items, size, rng):
    order = rng.permutation(len(items))
    return [[items[i] for i in order[s:s + size]] for s in range(0, len(items), size)]


def _interleave(n_a, n_b):
    """Round-robin order of two batch streams, proportional to their lengths."""
    keys = [((i + 0.5) / n_a, 0, i) for i in range(n_a)] + [((j + 0.5) / n_b, 1, j) for j in range(n_b)]
    return [(src, i) for _, src, i in sorted(keys)]


def _step(model, optimizer, loss, clip):
    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()


def _emit(record, log_file):
    log.info(json.dumps(record))
    if log_file is not None:
        with open(log_file, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")


def _seed(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _loss_flags(config):
    return dict(use_itm=config.use_itm_loss, use_irtm=config.use_irtm_loss, use_cla=config.use_cla_loss)


# ------------------------------------------------------------------ stage 1


@torch.no_grad()
def stage1_validation(model, triplets, matching, config):
    was = model.training
    model.eval()
    sums = {"itm": 0.0, "irtm": 0.0, "cla": 0.0}
    counts = {"itm": 0, "irtm": 0, "cla": 0}
    flags = _loss_flags(config)
    try:
        for s in range(0, len(triplets), config.batch_size):
            chunk = triplets[s:s + config.batch_size]
            t = model.stage1_terms(triplet_batch(chunk, model.vocab, model.labels, model.dtype), **flags)
            for k in ("irtm", "cla"):
                sums[k] += float(t[k]) * len(chunk)
                counts[k] += len(chunk)
        if matching:
            for s in range(0, len(matching), config.batch_size):
                chunk = matching[s:s + config.batch_size]
                t = model.stage1_terms(match_batch=matching_batch(chunk, model.vocab, model.dtype), **flags)
                sums["itm"] += float(t["itm"]) * len(chunk)
                counts["itm"] += len(chunk)
    finally:
        model.train(was)
    terms = {k: (sums[k] / counts[k] if counts[k] else 0.0) for k in sums}
    terms["total"] = terms["itm"] + terms["irtm"] + terms["cla"]
    return terms


def train_stage1(model, triplets, matching, config, valid_triplets=None, valid_matching=None, log_file=None):
    """Minimise ``L_itm + L_irtm + L_cla``; returns the best checkpoint (also loaded into ``model``).

    ``matching`` holds encoded :class:`~mmkp.data.MatchingSample` items.
    """
    config.validate()
    if not triplets or (config.use_itm_loss and model.config.filter_mode != "none" and not matching):
        raise ConfigError("stage 1 needs non-empty keyphrase and matching datasets")
    use_itm = config.use_itm_loss and model.config.filter_mode != "none"
    rng = _seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    valid_triplets = valid_triplets or triplets
    valid_matching = valid_matching if valid_matching is not None else matching
    flags = _loss_flags(config)

    history = []
    best, best_state, bad = math.inf, copy.deepcopy(model.state_dict()), 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        model.train()
        tb = _batches(triplets, config.batch_size, rng)
        mb = _batches(matching, config.batch_size, rng) if use_itm else []
        run = {"itm": 0.0, "irtm": 0.0, "cla": 0.0}
        for src, i in _interleave(len(tb), len(mb)):
            if src == 0:
                terms = model.stage1_terms(batch=triplet_batch(tb[i], model.vocab, model.labels, model.dtype), **flags)
            else:
                terms = model.stage1_terms(match_batch=matching_batch(mb[i], model.vocab, model.dtype), **flags)
            if terms["total"].requires_grad:
                _step(model, opt, terms["total"], config.grad_clip)
            for k in run:
                run[k] += float(terms[k].detach())
        val = stage1_validation(model, valid_triplets, valid_matching if use_itm else [], config)
        rec = {"stage": 1, "epoch": epoch,
               "train": {k: run[k] / max(1, len(tb) if k != "itm" else len(mb)) for k in run},
               "valid": val}
        log.debug("stage 1 epoch %d took %.3fs", epoch, time.time() - t0)
        history.append(rec)
        _emit(rec, log_file)
        if val["total"] < best:
            best, best_state, bad = val["total"], copy.deepcopy(model.state_dict()), 0
        else:
            bad += 1
            if bad > config.patience:
                break
    model.load_state_dict(best_state)
    model.stage = 1
    return Checkpoint.from_model(model, 1, history, config.to_dict())


# ------------------------------------------------------------------ stage 2


def predict_keyphrases(model, samples, beam_size=10, keep_specials=False):
    """Beam-search every sample; keyphrases containing special tokens are dropped."""
    out = []
    for s in samples:
        ranked, _ = model.predict(s, beam_size=beam_size)
        if not keep_specials:
            ranked = [(k, v) for k, v in ranked if not any(w in SPECIALS for w in k.split())]
        out.append(ranked)
    return out


def f1_at_1(model, samples, beam_size):
    preds = [[k for k, _ in r] for r in predict_keyphrases(model, samples, beam_size)]
    return score_predictions(preds, [[phrase_key(k) for k in s.keyphrases] for s in samples]).f1_at_1


def train_stage2(model, triplets, config, valid_samples=None, log_file=None):
    """Minimise the generation loss; early-stops on validation F1@1 (beam search)."""
    config.validate()
    if getattr(model, "stage", 0) < 1:
        raise StageOrderError("stage 2 needs a model that completed stage 1")
    if not triplets:
        raise ConfigError("stage 2 needs a non-empty keyphrase dataset")
    if valid_samples is None:
        seen, valid_samples = set(), []
        for t in triplets:
            if id(t.sample) not in seen:
                seen.add(id(t.sample))
                valid_samples.append(t.sample)
    rng = _seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    history = []
    best, best_state, bad = -1.0, copy.deepcopy(model.state_dict()), 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        model.train()
        batches = _batches(triplets, config.batch_size, rng)
        total = 0.0
        for chunk in batches:
            loss = model.generation_loss(triplet_batch(chunk, model.vocab, model.labels, model.dtype))
            _step(model, opt, loss, config.grad_clip)
            total += float(loss.detach())
        rec = {"stage": 2, "epoch": epoch, "train": {"gen": total / len(batches)}}
        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            f1 = f1_at_1(model, valid_samples, config.eval_beam)
            rec["valid"] = {"f1@1": f1}
            if f1 > best:
                best, best_state, bad = f1, copy.deepcopy(model.state_dict()), 0
            else:
                bad += 1
            rec["best_f1@1"] = best
        log.debug("stage 2 epoch %d took %.3fs", epoch, time.time() - t0)
        history.append(rec)
        _emit(rec, log_file)
        if bad > config.patience:
            break
    model.load_state_dict(best_state)
    model.stage = 2
    return Checkpoint.from_model(model, 2, history, config.to_dict())


# ------------------------------------------------------------------ gradient check


def loss_vector(model, batch, match_batch, a_gt):
    """``[L_itm, L_irtm, L_cla, L_gen, sum]`` on fixed batches with a frozen ``A_gt``."""
    terms = model.all_losses(batch, match_batch, a_gt=a_gt)
    parts = [terms["itm"], terms["irtm"], terms["cla"], terms["gen"]]
    return torch.stack(parts + [sum(parts)])


def grad_check(model, batch, loss_selector=LOSS_NAMES, match_batch=None, eps=1e-5, max_elements=10_000, seed=0):
    """Central-difference check of every parameter for the selected losses.

    ``loss_selector`` names one or more of ``itm``, ``irtm``, ``cla``, ``gen``,
    ``sum``.  Runs in eval mode (no dropout) with the gold correlation target
    computed once, since it is treated as a constant.  Every parameter element
    is probed unless the model holds more than ``max_elements`` values, in which
    case a seeded subsample of that many elements is spread over the tensors.  Returns
    ``{loss: {"max_rel_err": float, "params": {name: {...}}}}``.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if model.dtype != torch.float64:
        raise ConfigError("gradient checking requires 64-bit precision (MKP_PRECISION=64)")
    selected = [loss_selector] if isinstance(loss_selector, str) else list(loss_selector)
    for name in selected:
        if name not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {name!r}")
    idx = [LOSS_NAMES.index(n) for n in selected]
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            state = model.forward(batch)
            a_gt = model.gt_correlation(batch, state) if state.A is not None else None
        params = dict(model.named_parameters())

        def fn():
            return loss_vector(model, batch, match_batch, a_gt)[idx]

        reports = nx.finite_difference_check(fn, params, eps=eps, max_elements=max_elements, seed=seed)
    finally:
        model.train(was)
    out = {}
    for j, name in enumerate(selected):
        per = {p: {"max_rel_err": r["max_rel_err"][j], "checked": r["checked"], "numel": r["numel"]}
               for p, r in reports.items()}
        out[name] = {"max_rel_err": max(v["max_rel_err"] for v in per.values()), "params": per}
    return out

"""Macro-averaged F1@K and MAP@5 over ranked keyphrase predictions."""

import csv
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

log = logging.getLogger(__name__)


def normalize(phrase):
    if not isinstance(phrase, str):
        phrase = " ".join(phrase)
    return " ".join(phrase.lower().split())


def _dedupe(preds):
    seen, out = set(), []
    for p in preds:
        p = normalize(p)
        if p and p not in seen:
            seen.add(p)
            out.append(p)
    return out


def f1_at_k(preds, gold, k):
    """F1 of the top-``k`` predictions against the gold set.

    Precision divides by ``min(k, len(preds))`` so a short list is not
    penalised twice.  Returns ``None`` for an empty gold set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    gold = {normalize(g) for g in gold}
    if not gold:
        return None
    preds = _dedupe(preds)
    if not preds:
        return 0.0
    hits = sum(p in gold for p in preds[:k])
    if hits == 0:
        return 0.0
    # rational arithmetic keeps hand-checkable values exact
    precision = Fraction(hits, min(k, len(preds)))
    recall = Fraction(hits, len(gold))
    return float(2 * precision * recall / (precision + recall))


def map_at_5(preds, gold, cutoff=5):
    """Truncated average precision: summed precision at each hit rank, over ``min(5, |gold|)``."""
    gold = {normalize(g) for g in gold}
    if not gold:
        return None
    preds = _dedupe(preds)[:cutoff]
    hits, total = 0, Fraction(0)
    for rank, p in enumerate(preds, 1):
        if p in gold:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / min(cutoff, len(gold)))


@dataclass
class MetricsReport:
    f1_at_1: float
    f1_at_3: float
    map_at_5: float
    n: int
    per_sample: list = field(default_factory=list)

    def to_dict(self):
        return {"f1@1": self.f1_at_1, "f1@3": self.f1_at_3, "map@5": self.map_at_5, "n": self.n}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=["index", "f1@1", "f1@3", "map@5"])
            w.writeheader()
            w.writerows(self.per_sample)


def score_predictions(predictions, golds):
    """Corpus-level report from ranked prediction lists and gold sets (same order)."""
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} prediction lists for {len(golds)} samples")
    rows = []
    for i, (preds, gold) in enumerate(zip(predictions, golds)):
        f1 = f1_at_k(preds, gold, 1)
        if f1 is None:
            log.warning("sample %d has no gold keyphrases; skipped", i)
            continue
        rows.append({"index": i, "f1@1": f1, "f1@3": f1_at_k(preds, gold, 3), "map@5": map_at_5(preds, gold)})
    n = len(rows)

    def mean(key):
        return sum(r[key] for r in rows) / n if n else 0.0

    return MetricsReport(mean("f1@1"), mean("f1@3"), mean("map@5"), n, rows)


def read_predictions(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line)["keyphrases"] for line in f if line.strip()]


def write_predictions(ranked_lists, path):
    with open(path, "w", encoding="utf-8") as f:
        for ranked in ranked_lists:
            f.write(json.dumps({"keyphrases": [k for k, _ in ranked], "scores": [s for _, s in ranked]}) + "\n")


def evaluate(source, dataset, beam_size=10):
    """Score a model (decoded with beam search), a predictions file, or prediction lists."""
    golds = [[" ".join(k) for k in s.keyphrases] for s in dataset]
    if isinstance(source, (str, Path)):
        predictions = read_predictions(source)
    elif hasattr(source, "predict"):
        from .training import predict_keyphrases

        predictions = [[k for k, _ in r] for r in predict_keyphrases(source, dataset, beam_size)]
    else:
        predictions = list(source)
    return score_predictions(predictions, golds)

"""Synthetic multimodal corpora with a controllable image-text-keyphrase signal.

Every topic owns a pool of keyphrases, some entity and OCR words, and a mean
vector in feature space.  A sample picks a topic and one "slot" of that topic's
keyphrase pool.  The slot is announced in the text by a cue word shared by all
topics, so the text alone says *which* keyphrase but only sometimes *which
topic*: the topic comes from entities, OCR words or the image.  Image rows are
topic-mean plus Gaussian noise; a ``noise_region_fraction`` of rows instead
copy the mean of a uniformly drawn topic, so they carry no information about
the sample.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import FEATURE_DIM, N_REGIONS, MatchingPair, MultiModalSample
from .errors import ConfigError

_ONSETS = "b c d f g h j k l m n p r s t v w z".split() + ["ch", "sh", "th", "br", "tr", "pl", "st"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


@dataclass
class SyntheticSpec:
    n_samples: int = 512
    vocab_size: int = 200
    n_topics: int = 4
    noise_region_fraction: float = 0.0
    avg_keyphrases: float = 1.33
    seed: int = 0
    n_valid: int = None
    n_test: int = None
    n_matching: int = None
    keyphrases_per_topic: int = 3
    text_len: int = 8
    p_entity: float = 0.5
    p_ocr: float = 0.3
    p_topic_word: float = 0.3
    p_present: float = 0.63
    feature_scale: float = 1.0
    noise_std: float = 1.0

    def validate(self):
        if self.n_topics < 2:
            raise ConfigError("n_topics must be >= 2")
        if not 0.0 <= self.noise_region_fraction < 1.0:
            raise ConfigError("noise_region_fraction must lie in [0, 1)")
        if self.avg_keyphrases < 1.0:
            raise ConfigError("avg_keyphrases must be >= 1")
        for name in ("p_entity", "p_ocr", "p_topic_word", "p_present"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.keyphrases_per_topic < 1:
            raise ConfigError("keyphrases_per_topic must be >= 1")


def _lexicon(rng, n):
    words, seen = [], set()
    while len(words) < n:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.integers(2, 4)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class _World:
    """The latent structure shared by every split of one corpus."""

    def __init__(self, spec, rng):
        kpt = spec.keyphrases_per_topic
        per_topic = 2 * kpt + 3 + 2 + 2   # keyphrase words (<=2 each), entities, ocr, source words
        needed = kpt + spec.n_topics * per_topic + 4
        if spec.vocab_size < needed:
            raise ConfigError(f"vocab_size {spec.vocab_size} too small; need >= {needed} for this topic layout")
        lex = iter(_lexicon(rng, spec.vocab_size))
        self.cues = [next(lex) for _ in range(kpt)]
        self.keyphrases, self.entities, self.ocr, self.topic_words = [], [], [], []
        for _ in range(spec.n_topics):
            pool = []
            for _ in range(kpt):
                n_words = 1 + int(rng.random() < 0.5)
                pool.append(tuple(next(lex) for _ in range(n_words)))
            self.keyphrases.append(pool)
            self.entities.append([next(lex) for _ in range(3)])
            self.ocr.append([next(lex) for _ in range(2)])
            self.topic_words.append([next(lex) for _ in range(2)])
        self.filler = list(lex)
        self.means = rng.normal(0.0, spec.feature_scale, size=(spec.n_topics, FEATURE_DIM))


def _n_keyphrases(spec, rng):
    return int(min(spec.keyphrases_per_topic, 1 + rng.poisson(spec.avg_keyphrases - 1.0)))


def _grid(spec, world, topic, rng):
    rows = np.empty((N_REGIONS, FEATURE_DIM))
    n_noise = int(round(spec.noise_region_fraction * N_REGIONS))
    noisy = set(rng.choice(N_REGIONS, size=n_noise, replace=False).tolist()) if n_noise else set()
    # noisy regions all show one unrelated topic
    distractor = int(rng.integers(spec.n_topics - 1))
    distractor += distractor >= topic
    for r in range(N_REGIONS):
        rows[r] = world.means[distractor if r in noisy else topic]
    rows += rng.normal(0.0, spec.noise_std, size=rows.shape)
    return rows.astype(np.float32)


def _sample(spec, world, rng):
    topic = int(rng.integers(spec.n_topics))
    slots = sorted(rng.choice(spec.keyphrases_per_topic, size=_n_keyphrases(spec, rng), replace=False).tolist())
    kps = [world.keyphrases[topic][s] for s in slots]

    text = [world.filler[i] for i in rng.choice(len(world.filler), size=spec.text_len)]
    inserts = [world.cues[s] for s in slots]
    if rng.random() < spec.p_topic_word:
        inserts.append(world.topic_words[topic][rng.integers(2)])
    for kp in kps:
        if rng.random() < spec.p_present:
            inserts.extend(kp)
    for w in inserts:
        text.insert(int(rng.integers(len(text) + 1)), w)

    ocr = []
    if rng.random() < spec.p_ocr:
        ocr = [world.ocr[topic][rng.integers(2)]] + [world.filler[rng.integers(len(world.filler))]]
    entities = []
    if rng.random() < spec.p_entity:
        picks = rng.choice(3, size=int(rng.integers(1, 3)), replace=False)
        entities = [(world.entities[topic][i],) for i in sorted(picks.tolist())]

    return topic, MultiModalSample(
        source_text=text, ocr_text=ocr, entities=entities,
        image_features=_grid(spec, world, topic, rng), keyphrases=kps,
    )


def generate_synthetic_corpus(spec=None, **kw):
    """Return ``(train, valid, test, matching)`` drawn from one latent world.

    ``spec`` is a :class:`SyntheticSpec` or a mapping of its fields; keyword
    arguments override.  The result is a pure function of the spec.
    """
    if spec is None:
        spec = SyntheticSpec()
    elif isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    if kw:
        spec = SyntheticSpec(**{**spec.__dict__, **kw})
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    world = _World(spec, rng)

    n_valid = spec.n_valid if spec.n_valid is not None else max(8, spec.n_samples // 4)
    n_test = spec.n_test if spec.n_test is not None else max(8, spec.n_samples // 4)
    n_match = spec.n_matching if spec.n_matching is not None else spec.n_samples

    splits = []
    for n in (spec.n_samples, n_valid, n_test):
        splits.append([_sample(spec, world, rng)[1] for _ in range(n)])

    # balanced matching set: ceil(n/2) pairs keep their own grid, the rest get
    # the grid of a sample from a different topic
    drawn = [_sample(spec, world, rng) for _ in range(n_match)]
    positive = np.zeros(n_match, dtype=bool)
    positive[rng.permutation(n_match)[: math.ceil(n_match / 2)]] = True
    matching = []
    for i, (topic, s) in enumerate(drawn):
        # matching pairs only feed the matching loss, so they carry no keyphrases
        if positive[i]:
            matching.append(MatchingPair(
                MultiModalSample(s.source_text, s.ocr_text, s.entities, s.image_features, ()), 1))
            continue
        other = int(rng.integers(spec.n_topics - 1))
        other += other >= topic
        grid = _grid(spec, world, other, rng)
        matching.append(MatchingPair(
            MultiModalSample(s.source_text, s.ocr_text, s.entities, grid, ()), 0))
    return splits[0], splits[1], splits[2], matching

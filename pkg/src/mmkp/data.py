"""Samples, vocabulary, input assembly, One2One replication and JSONL I/O."""

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCorpus, NoTarget, ParseError, ShapeError

N_REGIONS = 49
FEATURE_DIM = 512
GRID_SIDE = 7

PAD, UNK, BOS, EOS, SEQ = "<pad>", "<unk>", "<bos>", "<eos>", "<seq>"
SPECIALS = (PAD, UNK, BOS, EOS, SEQ)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEQ_ID = range(5)

SRC, OCR, ENT = 0, 1, 2

DEFAULT_VOCAB_SIZE = 45_000
DEFAULT_MAX_LEN = 200


def tokenize(text):
    return tuple(text.lower().split())


def normalize_keyphrase(text):
    words = tokenize(text)
    if words and words[0].startswith("#"):
        head = words[0].lstrip("#")
        words = ((head,) if head else ()) + words[1:]
    return words


def phrase_key(words):
    return " ".join(words)


@dataclass(eq=False)
class MultiModalSample:
    source_text: tuple
    ocr_text: tuple = ()
    entities: tuple = ()
    image_features: np.ndarray = None
    keyphrases: tuple = ()

    def __post_init__(self):
        self.source_text = tuple(self.source_text)
        self.ocr_text = tuple(self.ocr_text)
        self.entities = tuple(tuple(e) for e in self.entities)
        # a set of phrases; stored sorted for determinism
        self.keyphrases = tuple(sorted({tuple(k) for k in self.keyphrases if len(k)}, key=phrase_key))
        if self.image_features is None:
            self.image_features = np.zeros((N_REGIONS, FEATURE_DIM), dtype=np.float32)
        self.image_features = check_features(np.asarray(self.image_features))

    @classmethod
    def from_strings(cls, text, ocr="", entities=(), features=None, keyphrases=()):
        return cls(
            source_text=tokenize(text),
            ocr_text=tokenize(ocr),
            entities=[tokenize(e) for e in entities],
            image_features=features,
            keyphrases=[normalize_keyphrase(k) for k in keyphrases],
        )

    def __eq__(self, other):
        if not isinstance(other, MultiModalSample):
            return NotImplemented
        return (
            self.source_text == other.source_text
            and self.ocr_text == other.ocr_text
            and self.entities == other.entities
            and self.keyphrases == other.keyphrases
            and self.image_features.shape == other.image_features.shape
            and np.array_equal(self.image_features, other.image_features)
        )

    def all_words(self):
        yield from self.source_text
        yield from self.ocr_text
        for e in self.entities:
            yield from e
        for k in self.keyphrases:
            yield from k


@dataclass(eq=False)
class MatchingPair:
    """A raw image-text pair with a relevance label, before encoding."""

    sample: MultiModalSample
    label: int

    def __eq__(self, other):
        if not isinstance(other, MatchingPair):
            return NotImplemented
        return self.label == other.label and self.sample == other.sample


def check_features(arr):
    if arr.shape != (N_REGIONS, FEATURE_DIM):
        raise ShapeError(f"image features must be {N_REGIONS}x{FEATURE_DIM}, got {arr.shape}")
    return arr


class Vocabulary:
    """Word <-> id mapping; the five special tokens always occupy ids 0-4."""

    def __init__(self, words):
        self.word_of = list(SPECIALS)
        for w in words:
            if w not in SPECIALS:
                self.word_of.append(w)
        self.id_of = {w: i for i, w in enumerate(self.word_of)}
        if len(self.id_of) != len(self.word_of):
            raise ValueError("duplicate words in vocabulary")

    specials = dict(zip(("PAD", "UNK", "BOS", "EOS", "SEQ_DELIM"), range(5)))

    @property
    def size(self):
        return len(self.word_of)

    def __len__(self):
        return len(self.word_of)

    def __contains__(self, word):
        return word in self.id_of

    def lookup(self, word):
        return self.id_of.get(word, UNK_ID)

    def to_list(self):
        return list(self.word_of[len(SPECIALS):])

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.word_of == other.word_of


def build_vocabulary(corpus, max_size=DEFAULT_VOCAB_SIZE):
    """Keep the ``max_size`` most frequent words over all text fields.

    Ties in frequency are broken lexicographically.  The specials are added on
    top of ``max_size``.
    """
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    counts = Counter()
    for s in corpus:
        counts.update(w for w in s.all_words() if w not in SPECIALS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(w for w, _ in ranked[:max_size])


@dataclass
class EncodedInput:
    words: list
    token_ids: list
    type_ids: list
    ext_ids: list = field(default_factory=list)
    oov_words: list = field(default_factory=list)

    def __len__(self):
        return len(self.token_ids)

    def oov_index(self, vocab_size):
        return {w: vocab_size + i for i, w in enumerate(self.oov_words)}


def concat_input(sample, vocab, max_len=DEFAULT_MAX_LEN, use_ocr=True, use_entities=True):
    """Lay out ``source <seq> ocr <seq> entities`` with segment type ids.

    Each delimiter takes the type of the segment it opens.  Dropping a segment
    (ablations) also drops its delimiter.  Tokens beyond ``max_len`` are cut
    from the tail.
    """
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    words = list(sample.source_text)
    types = [SRC] * len(words)
    if use_ocr:
        words += [SEQ, *sample.ocr_text]
        types += [OCR] * (len(sample.ocr_text) + 1)
    if use_entities:
        ent = [w for e in sample.entities for w in e]
        words += [SEQ, *ent]
        types += [ENT] * (len(ent) + 1)
    words, types = words[:max_len], types[:max_len]

    token_ids, ext_ids, oov = [], [], []
    for w in words:
        if w in vocab:
            token_ids.append(vocab.id_of[w])
            ext_ids.append(vocab.id_of[w])
        else:
            if w not in oov:
                oov.append(w)
            token_ids.append(UNK_ID)
            ext_ids.append(vocab.size + oov.index(w))
    return EncodedInput(words, token_ids, types, ext_ids, oov)


@dataclass
class Triplet:
    input: EncodedInput
    image_features: np.ndarray
    target: tuple
    sample: MultiModalSample = None


@dataclass
class MatchingSample:
    input: EncodedInput
    image_features: np.ndarray
    label: int


def replicate_one2one(sample, vocab, max_len=DEFAULT_MAX_LEN, use_ocr=True, use_entities=True):
    """One triplet per gold keyphrase, in lexicographic keyphrase order."""
    if not sample.keyphrases:
        raise NoTarget("sample has no keyphrases")
    enc = concat_input(sample, vocab, max_len, use_ocr, use_entities)
    return [Triplet(enc, sample.image_features, kp, sample) for kp in sorted(sample.keyphrases, key=phrase_key)]


def replicate_corpus(samples, vocab, **kw):
    out = []
    for s in samples:
        out.extend(replicate_one2one(s, vocab, **kw))
    return out


def encode_matching(pairs, vocab, max_len=DEFAULT_MAX_LEN, use_ocr=True, use_entities=True):
    return [MatchingSample(concat_input(p.sample, vocab, max_len, use_ocr, use_entities),
                           p.sample.image_features, int(p.label)) for p in pairs]


def target_ids(target, enc, vocab):
    """Gold decoder ids (EOS appended); OOV words copy from X_T when present, else UNK."""
    oov = enc.oov_index(vocab.size)
    ids = []
    for w in target:
        if w in vocab:
            ids.append(vocab.id_of[w])
        else:
            ids.append(oov.get(w, UNK_ID))
    ids.append(EOS_ID)
    return ids


# --------------------------------------------------------------------- I/O


def _sample_record(sample, features_ref):
    return {
        "text": " ".join(sample.source_text),
        "ocr": " ".join(sample.ocr_text),
        "entities": [" ".join(e) for e in sample.entities],
        "features": features_ref,
    }


def _write_features(sample, path, features_dir, index):
    if features_dir is None:
        return sample.image_features.astype(np.float64).tolist()
    features_dir = Path(features_dir)
    features_dir.mkdir(parents=True, exist_ok=True)
    fpath = features_dir / f"{index:06d}.f32"
    sample.image_features.astype("<f4").tofile(fpath)
    rel = os.path.relpath(fpath, Path(path).parent)
    return {"path": rel}


def save_dataset(samples, path, features_dir=None):
    """Write JSONL.  Features are inlined unless ``features_dir`` is given,
    in which case one raw little-endian float32 file per sample is written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for i, s in enumerate(samples):
            rec = _sample_record(s, _write_features(s, path, features_dir, i))
            rec["keyphrases"] = [" ".join(k) for k in s.keyphrases]
            f.write(json.dumps(rec) + "\n")


def save_matching(pairs, path, features_dir=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for i, p in enumerate(pairs):
            rec = _sample_record(p.sample, _write_features(p.sample, path, features_dir, i))
            rec["label"] = int(p.label)
            f.write(json.dumps(rec) + "\n")


def _read_features(ref, base, lineno):
    if isinstance(ref, dict):
        if "path" not in ref:
            raise ParseError("features object needs a 'path'", lineno)
        fpath = Path(ref["path"])
        if not fpath.is_absolute():
            fpath = base / fpath
        try:
            arr = np.fromfile(fpath, dtype="<f4")
        except OSError as exc:
            raise ParseError(f"cannot read features file {fpath}: {exc}", lineno) from None
        if arr.size != N_REGIONS * FEATURE_DIM:
            raise ShapeError(f"line {lineno}: {fpath} holds {arr.size} values, expected {N_REGIONS * FEATURE_DIM}")
        return arr.reshape(N_REGIONS, FEATURE_DIM).astype(np.float32)
    try:
        arr = np.asarray(ref, dtype=np.float64)
    except (TypeError, ValueError):
        raise ShapeError(f"line {lineno}: ragged or non-numeric feature grid") from None
    if arr.shape != (N_REGIONS, FEATURE_DIM):
        raise ShapeError(f"line {lineno}: image features must be {N_REGIONS}x{FEATURE_DIM}, got {arr.shape}")
    return arr


def _iter_records(path):
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record must be a JSON object", lineno)
            for key in ("text", "features"):
                if key not in rec:
                    raise ParseError(f"missing key {key!r}", lineno)
            yield lineno, rec


def _record_sample(rec, base, lineno, keyphrases=()):
    try:
        return MultiModalSample.from_strings(
            rec["text"], rec.get("ocr", ""), rec.get("entities", []),
            _read_features(rec["features"], base, lineno), keyphrases,
        )
    except (AttributeError, TypeError) as exc:
        raise ParseError(f"bad field type ({exc})", lineno) from None


def load_dataset(path):
    """Read a JSONL dataset.  A missing ``keyphrases`` key yields an empty set."""
    base = Path(path).parent
    return [_record_sample(rec, base, lineno, rec.get("keyphrases", [])) for lineno, rec in _iter_records(path)]


def load_matching(path):
    base = Path(path).parent
    out = []
    for lineno, rec in _iter_records(path):
        if rec.get("label") not in (0, 1):
            raise ParseError("matching label must be 0 or 1", lineno)
        out.append(MatchingPair(_record_sample(rec, base, lineno), rec["label"]))
    return out

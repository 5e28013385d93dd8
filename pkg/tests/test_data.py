import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmkp.data import (
    DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE, ENT, N_REGIONS, OCR, SEQ, SPECIALS, SRC, UNK_ID, FEATURE_DIM,
    MultiModalSample, Vocabulary, build_vocabulary, concat_input, load_dataset, load_matching,
    normalize_keyphrase, replicate_corpus, replicate_one2one, save_dataset, save_matching, target_ids,
)
from mmkp.errors import EmptyCorpus, NoTarget, ParseError, ShapeError
from mmkp.synthetic import generate_synthetic_corpus

WORDS = st.sampled_from(["a", "b", "c", "d", "e", "f", "gg", "hh"])


def sample(text, ocr="", entities=(), keyphrases=()):
    return MultiModalSample.from_strings(text, ocr, entities, keyphrases=keyphrases)


# ------------------------------------------------------------------ vocabulary


def test_vocab_all_words_fit():
    v = build_vocabulary([sample("a a b")], max_size=10)
    assert v.to_list() == ["a", "b"]
    assert v.size == 2 + len(SPECIALS)
    assert v.word_of[:5] == list(SPECIALS)


def test_vocab_keeps_most_frequent():
    v = build_vocabulary([sample("a a b")], max_size=1)
    assert v.to_list() == ["a"]


def test_vocab_frequency_oracle(rng):
    texts = [" ".join(rng.choice(list("abcdefgh"), size=6)) for _ in range(20)]
    v = build_vocabulary([sample(t) for t in texts], max_size=4)
    counts = {}
    for t in texts:
        for w in t.split():
            counts[w] = counts.get(w, 0) + 1
    expected = sorted(counts, key=lambda w: (-counts[w], w))[:4]
    assert v.to_list() == expected


def test_vocab_tie_break_lexicographic():
    assert build_vocabulary([sample("z y x")], max_size=2).to_list() == ["x", "y"]


def test_vocab_default_size():
    assert DEFAULT_VOCAB_SIZE == 45000


def test_vocab_includes_ocr_entities_keyphrases():
    v = build_vocabulary([sample("a", ocr="o", entities=["e f"], keyphrases=["k"])])
    assert set(v.to_list()) == {"a", "o", "e", "f", "k"}


def test_vocab_empty_corpus():
    with pytest.raises(EmptyCorpus):
        build_vocabulary([])


@given(st.lists(st.lists(WORDS, min_size=1, max_size=6), min_size=1, max_size=5), st.integers(1, 10))
def test_vocab_round_trip(texts, max_size):
    v = build_vocabulary([sample(" ".join(t)) for t in texts], max_size)
    for w in v.word_of:
        assert v.word_of[v.id_of[w]] == w
    assert len(v.to_list()) <= max_size


# ------------------------------------------------------------------ concat_input


def test_concat_layout():
    v = build_vocabulary([sample("a b c d e")])
    enc = concat_input(sample("a b", ocr="c", entities=["d e"]), v)
    assert enc.words == ["a", "b", SEQ, "c", SEQ, "d", "e"]
    assert enc.type_ids == [0, 0, 1, 1, 2, 2, 2]


def test_concat_all_empty():
    v = build_vocabulary([sample("a")])
    enc = concat_input(MultiModalSample(()), v)
    assert enc.words == [SEQ, SEQ]
    assert enc.type_ids == [OCR, ENT]


def test_concat_oov():
    v = build_vocabulary([sample("a")])
    enc = concat_input(sample("a zz"), v)
    assert enc.token_ids[1] == UNK_ID
    assert enc.oov_words == ["zz"]
    assert enc.ext_ids[1] == v.size


def test_concat_truncates_tail():
    v = build_vocabulary([sample("a")])
    enc = concat_input(sample(" ".join(["a"] * 300)), v)
    assert len(enc) == DEFAULT_MAX_LEN == 200
    enc = concat_input(sample("a b c d", ocr="e"), v, max_len=5)
    assert enc.words == ["a", "b", "c", "d", SEQ]


def test_concat_drops_segments():
    v = build_vocabulary([sample("a b c")])
    s = sample("a", ocr="b", entities=["c"])
    assert concat_input(s, v, use_ocr=False).words == ["a", SEQ, "c"]
    assert concat_input(s, v, use_entities=False).words == ["a", SEQ, "b"]


@given(st.lists(WORDS, max_size=5), st.lists(WORDS, max_size=5), st.lists(st.lists(WORDS, min_size=1, max_size=3), max_size=3),
       st.integers(3, 12))
def test_concat_invariants(src, ocr, ents, max_len):
    s = MultiModalSample(src, ocr, ents)
    v = build_vocabulary([MultiModalSample(["a", "b", "c"])])
    enc = concat_input(s, v, max_len=max_len)
    assert len(enc.token_ids) == len(enc.type_ids) == len(enc.ext_ids) <= max_len
    assert all(x <= y for x, y in zip(enc.type_ids, enc.type_ids[1:]))
    assert set(enc.type_ids) <= {SRC, OCR, ENT}


def test_keyphrase_normalization():
    assert normalize_keyphrase("#NBA Finals") == ("nba", "finals")
    assert normalize_keyphrase("#") == ()


# ------------------------------------------------------------------ one2one


def test_replicate_two():
    v = build_vocabulary([sample("a")])
    ts = replicate_one2one(sample("a", keyphrases=["k2", "k1"]), v)
    assert [t.target for t in ts] == [("k1",), ("k2",)]
    assert ts[0].input is ts[1].input


def test_replicate_one():
    v = build_vocabulary([sample("a")])
    assert len(replicate_one2one(sample("a", keyphrases=["k"]), v)) == 1


def test_replicate_no_target():
    v = build_vocabulary([sample("a")])
    with pytest.raises(NoTarget):
        replicate_one2one(sample("a"), v)


@given(st.lists(st.lists(WORDS, min_size=1, max_size=2), min_size=1, max_size=4))
def test_replicate_count(kps):
    s = MultiModalSample(["a"], keyphrases=kps)
    v = build_vocabulary([s])
    assert len(replicate_one2one(s, v)) == len({tuple(k) for k in kps})


def test_target_ids_copy_and_unk():
    v = build_vocabulary([sample("a")])
    enc = concat_input(sample("a zz"), v)
    assert target_ids(("a", "zz", "qq"), enc, v) == [v.id_of["a"], v.size, UNK_ID, 3]


# ------------------------------------------------------------------ synthetic


def _dump(split):
    return [(s.source_text, s.ocr_text, s.entities, s.keyphrases, s.image_features.tobytes()) for s in split]


def test_synthetic_deterministic():
    a = generate_synthetic_corpus(n_samples=12, seed=7)
    b = generate_synthetic_corpus(n_samples=12, seed=7)
    for x, y in zip(a[:3], b[:3]):
        assert _dump(x) == _dump(y)
    assert [(p.label, p.sample.image_features.tobytes()) for p in a[3]] == \
        [(p.label, p.sample.image_features.tobytes()) for p in b[3]]


def test_synthetic_seed_changes_output():
    a = generate_synthetic_corpus(n_samples=12, seed=7)
    b = generate_synthetic_corpus(n_samples=12, seed=8)
    assert _dump(a[0]) != _dump(b[0])


@pytest.mark.parametrize("n", [1, 7, 12])
def test_synthetic_matching_balance(n):
    *_, matching = generate_synthetic_corpus(n_samples=12, n_matching=n, seed=3)
    assert len(matching) == n
    assert sum(p.label for p in matching) == math.ceil(n / 2)


def test_synthetic_noise_free_grids_follow_topic():
    # with no noisy regions, every row is the topic mean plus unit noise, so
    # row means of (row - grid mean) are small and rows correlate strongly
    train, *_ = generate_synthetic_corpus(n_samples=8, seed=1, noise_region_fraction=0.0, noise_std=1e-6)
    for s in train:
        g = s.image_features.astype(np.float64)
        assert np.abs(g - g[0]).max() < 1e-4


def test_synthetic_noise_regions_differ():
    train, *_ = generate_synthetic_corpus(n_samples=4, seed=1, noise_region_fraction=0.5, noise_std=1e-6)
    g = train[0].image_features.astype(np.float64)
    same = np.abs(g - g[0]).max(axis=1) < 1e-4
    other = g[~same]
    assert 0 < len(other) < N_REGIONS
    assert np.abs(other - other[0]).max() < 1e-4
    assert {int(same.sum()), len(other)} == {24, 25}


def test_synthetic_shapes_and_sizes():
    train, valid, test, matching = generate_synthetic_corpus(n_samples=40, seed=2)
    assert len(train) == 40 and len(valid) == 10 and len(test) == 10
    for s in train:
        assert s.image_features.shape == (N_REGIONS, FEATURE_DIM)
        assert 1 <= len(s.keyphrases)


def test_synthetic_average_keyphrases():
    train, *_ = generate_synthetic_corpus(n_samples=2000, seed=0, avg_keyphrases=1.33)
    avg = sum(len(s.keyphrases) for s in train) / len(train)
    assert abs(avg - 1.33) < 0.05


# ------------------------------------------------------------------ I/O


def test_save_load_round_trip(tmp_path):
    train, _, _, matching = generate_synthetic_corpus(n_samples=6, seed=5)
    save_dataset(train, tmp_path / "inline.jsonl")
    assert load_dataset(tmp_path / "inline.jsonl") == train
    save_dataset(train, tmp_path / "ext.jsonl", tmp_path / "feats")
    assert load_dataset(tmp_path / "ext.jsonl") == train
    save_matching(matching, tmp_path / "m.jsonl", tmp_path / "mf")
    assert load_matching(tmp_path / "m.jsonl") == matching


def test_load_bad_grid(tmp_path):
    rec = {"text": "a", "features": np.zeros((48, 512)).tolist(), "keyphrases": ["a"]}
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ShapeError):
        load_dataset(p)


def test_load_missing_keyphrases(tmp_path):
    train, *_ = generate_synthetic_corpus(n_samples=2, seed=5)
    save_dataset(train, tmp_path / "t.jsonl")
    lines = []
    for line in (tmp_path / "t.jsonl").read_text().splitlines():
        rec = json.loads(line)
        del rec["keyphrases"]
        lines.append(json.dumps(rec))
    (tmp_path / "t.jsonl").write_text("\n".join(lines) + "\n")
    assert all(s.keyphrases == () for s in load_dataset(tmp_path / "t.jsonl"))


def test_load_parse_error_reports_line(tmp_path):
    train, *_ = generate_synthetic_corpus(n_samples=1, seed=5)
    save_dataset(train, tmp_path / "t.jsonl")
    (tmp_path / "t.jsonl").write_text((tmp_path / "t.jsonl").read_text() + "{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(tmp_path / "t.jsonl")


def test_vocabulary_equality():
    assert Vocabulary(["a", "b"]) == Vocabulary(["a", "b"])
    assert Vocabulary(["a", "b"]) != Vocabulary(["b", "a"])

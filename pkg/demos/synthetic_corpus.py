"""Walk through a synthetic corpus: layout of one post, its image grid and keyphrases."""

import numpy as np

from mmkp import build_vocabulary, concat_input, generate_synthetic_corpus

train, valid, test, matching = generate_synthetic_corpus(n_samples=32, noise_region_fraction=0.5, seed=3)
print(len(train), len(valid), len(test), "samples;", len(matching), "matching pairs")

s = train[0]
print("post:    ", " ".join(s.source_text))
print("ocr:     ", " ".join(s.ocr_text))
print("entities:", [" ".join(e) for e in s.entities])
print("gold:    ", [" ".join(k) for k in s.keyphrases])

# the model reads one flat sequence; segment types tell the parts apart
vocab = build_vocabulary(train)
enc = concat_input(s, vocab)
print(list(zip([vocab.word_of[i] for i in enc.token_ids], enc.type_ids))[:12])

# half the regions were replaced by another topic's features
grid = s.image_features
print(grid.shape, "distinct region rows:", len(np.unique(grid.round(6), axis=0)))

# matching pairs are balanced
print("positive pairs:", sum(p.label for p in matching), "of", len(matching))

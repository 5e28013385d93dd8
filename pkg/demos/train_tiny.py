"""Train a small model through both stages and look at its predictions."""

import torch

from mmkp import (KeyphraseModel, LabelSet, ModelConfig, TrainConfig, build_vocabulary, evaluate,
                  generate_synthetic_corpus, train_stage1, train_stage2)

torch.manual_seed(0)
train, valid, test, matching = generate_synthetic_corpus(n_samples=64, seed=0)
vocab = build_vocabulary(train)
model = KeyphraseModel(ModelConfig(d1=32, d_emb=16, d2=16, dropout=0.0), vocab, LabelSet.from_samples(train))
print("parameters:", sum(p.numel() for p in model.parameters()))

# stage 1: matching, region correlation and classification losses
ck1 = train_stage1(model, model.triplets(train), model.matching(matching), TrainConfig(max_epochs=10, batch_size=16))
print("stage 1 validation losses:", [round(h["valid"]["total"], 3) for h in ck1.history])

# stage 2: the decoder
ck2 = train_stage2(model, model.triplets(train), TrainConfig(stage=2, max_epochs=10, batch_size=16, eval_beam=5),
                   valid_samples=valid)
print("stage 2 validation F1@1:", [round(h["valid"]["f1@1"], 3) for h in ck2.history])

ranked, state = model.predict(test[0], beam_size=10)
print("gold:", [" ".join(k) for k in test[0].keyphrases])
print("top 5:", ranked[:5])
print(evaluate(model, test, beam_size=10).to_dict())

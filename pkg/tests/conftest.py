import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, n_samples=6, d1=8, d_emb=4, d2=4, n_heads=2, vocab_max=45000, scale=None, **cfg):
    """A small model with its corpus: ``(model, train, matching)``."""
    from mmkp.classifier import LabelSet
    from mmkp.data import build_vocabulary
    from mmkp.model import KeyphraseModel, ModelConfig
    from mmkp.synthetic import generate_synthetic_corpus

    train, _, _, matching = generate_synthetic_corpus(n_samples=n_samples, vocab_size=60, seed=seed)
    vocab = build_vocabulary(train, vocab_max)
    torch.manual_seed(seed)
    model = KeyphraseModel(ModelConfig(d1=d1, d_emb=d_emb, d2=d2, n_heads=n_heads, d_ffn_region=8, dropout=0.0, **cfg),
                           vocab, LabelSet.from_samples(train))
    if scale is not None:
        with torch.no_grad():
            for p in model.parameters():
                p.uniform_(-scale, scale)
    return model, train, matching


# one "PASS/FAIL <criterion>: detail" line per acceptance check, echoed at the end of the run
ACCEPTANCE = []


def record(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

import json
from pathlib import Path

import pytest

from cmsmol import minicorpus
from cmsmol.tokenizer import train_bpe

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def corpus():
    return minicorpus.load()


@pytest.fixture(scope="session")
def vocab(corpus):
    return train_bpe(corpus, 1024)


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden_tasks.json").read_text())


def _forced(vocab, token_id, strength=40.0):
    """Zero-layer model whose every prediction is ``token_id``.

    With the final layer-norm gain at zero, every hidden state equals the
    final bias ``v``, so the logits are ``wte @ v`` for all positions.
    """
    import numpy as np

    from cmsmol.generate import TextModel
    from cmsmol.model import ModelConfig, init

    cfg = ModelConfig(vocab.size, n_layers=0, n_heads=1, d_model=8, d_ff=8, context_length=160)
    params = init(cfg, 0)
    v = np.zeros(8)
    v[0] = 1.0
    params["lnf.g"][:] = 0.0
    params["lnf.b"][:] = v
    params["wte"][:, 0] = 0.0
    params["wte"][token_id, 0] = strength
    return TextModel(params, cfg, vocab)


@pytest.fixture(scope="session")
def forced_model():
    return _forced


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(LINES[key])

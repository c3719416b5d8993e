import numpy as np
import pytest

from cosparse.model import Model, ModelConfig
from cosparse.trainer import CharCorpus


@pytest.fixture(scope="session")
def corpus():
    return CharCorpus.bundled()


@pytest.fixture
def tiny_config(corpus):
    return ModelConfig(vocab=corpus.vocab, d_model=16, layers=2, heads=2, d_ffn=32, max_seq_len=32)


@pytest.fixture
def tiny_model(tiny_config):
    return Model(tiny_config, seed=3)


def fd_check(f, w: np.ndarray, probes, h: float = 1e-5):
    """Central differences of scalar ``f`` at ``probes`` entries of ``w``, perturbed in place."""
    out = []
    for idx in probes:
        old = w[idx]
        w[idx] = old + h
        up = f()
        w[idx] = old - h
        down = f()
        w[idx] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor: float = 1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def announce(capsys):
    def _announce(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
    return _announce


DENSE_SEEDS = range(10)
DENSE_STEPS = (12, 50)  # epochs x steps per epoch


@pytest.fixture(scope="session")
def dense_models(corpus):
    """Dense-trained toy char-LMs, one per seed, shared by the coupled-vs-uncoupled comparisons."""
    from cosparse.trainer import TrainConfig, train
    out = {}
    for seed in DENSE_SEEDS:
        m = Model(ModelConfig(vocab=corpus.vocab, d_model=64, layers=2, heads=4, d_ffn=128, max_seq_len=64), seed=seed)
        train(m, corpus, TrainConfig(epochs=DENSE_STEPS[0], steps_per_epoch=DENSE_STEPS[1], seed=seed))
        out[seed] = m
    return out

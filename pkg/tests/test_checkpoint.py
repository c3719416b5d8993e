import numpy as np
import pytest

from cosparse import checkpoint
from cosparse import numerics as nx
from cosparse.model import Model, ModelConfig, coupled_pairs
from cosparse.sparsifier import coupled_remove
from cosparse.trainer import AdamState, loss_and_grads


@pytest.fixture
def trained(tiny_model, corpus):
    opt = AdamState(lr=0.01, weight_decay=0.001)
    batch = corpus.sample(2, 8, nx.Rng(0))
    opt.step(tiny_model.params, loss_and_grads(tiny_model, batch)[1])
    coupled_remove(next(coupled_pairs(tiny_model)), [0], optimizer=opt)
    return tiny_model, opt


class TestRoundTrip:
    def test_bit_exact(self, trained, tmp_path):
        model, opt = trained
        digest = checkpoint.save(tmp_path / "m.ecsp", model, opt)
        m2, o2 = checkpoint.load(tmp_path / "m.ecsp")
        assert m2.config == model.config and m2.original_dims == model.original_dims
        for store, other in ((model.params, m2.params), (model.buffers, m2.buffers), (opt.m, o2.m), (opt.v, o2.v)):
            assert list(store) == list(other)
            for k in store:
                assert store[k].tobytes() == other[k].tobytes()
        assert (o2.t, o2.lr, o2.weight_decay) == (opt.t, opt.lr, opt.weight_decay)
        assert checkpoint.save(tmp_path / "again.ecsp", m2, o2) == digest

    def test_without_optimizer(self, tiny_model):
        m2, opt = checkpoint.from_bytes(checkpoint.to_bytes(tiny_model))
        assert opt is None and m2.params.keys() == tiny_model.params.keys()

    def test_deterministic_bytes(self, tiny_config):
        assert checkpoint.to_bytes(Model(tiny_config, seed=1)) == checkpoint.to_bytes(Model(tiny_config, seed=1))

    def test_layout(self, tiny_model):
        data = checkpoint.to_bytes(tiny_model)
        assert data[:4] == b"ECSP" and int.from_bytes(data[4:8], "little") == 1


class TestCorruption:
    def test_every_sampled_byte_flip_detected(self, tiny_model):
        data = checkpoint.to_bytes(tiny_model)
        for pos in np.linspace(0, len(data) - 1, 97).astype(int):
            bad = bytearray(data)
            bad[pos] ^= 0x01
            with pytest.raises(checkpoint.CorruptCheckpoint):
                checkpoint.from_bytes(bytes(bad))

    def test_truncated(self, tiny_model):
        with pytest.raises(checkpoint.CorruptCheckpoint):
            checkpoint.from_bytes(checkpoint.to_bytes(tiny_model)[:-40])

    def test_missing_file(self, tmp_path):
        with pytest.raises(checkpoint.CorruptCheckpoint):
            checkpoint.load(tmp_path / "nope.ecsp")

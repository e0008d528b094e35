import math

import numpy as np
import pytest

from mbc import numcore as nc
from mbc.adaptation import OnlineAdapter
from mbc.corpus import gen_synthetic
from mbc.model import ModelConfig
from mbc.numcore import Tensor
from mbc.training import (CheckpointError, EpochMetrics, Trainer, TrainConfig, TrainingError,
                          apply_backprop_dropout, backprop_dropout_mask, collapse_codebook, collapse_experiment,
                          read_checkpoint, total_loss)

SMALL = ModelConfig(vocab_size=80, dim=8, tokens=2, max_sequence_length=12, encoder_blocks=1, encoder_heads=2,
                    aggregator_blocks=2, aggregator_heads=2, decoder_layers=2, decoder_heads=2, n_lora=1,
                    lora_rank=2, lora_alpha=4.0, num_codes=32, group_size=8)
TOY = dict(learning_rate=3e-3, backprop_dropout=0.0, batch_size=8, epochs=3, seed=0)


def trainer(n_docs=24, **kw):
    corpus = gen_synthetic(n_docs, seed=0)
    return Trainer.from_corpus(SMALL, TrainConfig(**{**TOY, **kw}), corpus), corpus


def test_total_loss():
    a, b = Tensor(np.array(2.0)), Tensor(np.array(0.5))
    assert float(total_loss(a, b, 1.0).data) == 2.5
    assert total_loss(a, b, 0.0) is a


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.beta_commit, c.lambda_vq, c.learning_rate, c.backprop_dropout) == (0.25, 1.0, 1e-5, 0.75)
    for bad in (dict(batch_size=0), dict(lambda_vq=-1.0), dict(backprop_dropout=1.0), dict(learning_rate=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})


def test_dropout_mask():
    r = np.random.default_rng(0)
    assert backprop_dropout_mask(5, 0.0, r).all()
    draws = np.array([backprop_dropout_mask(32, 0.75, r) for _ in range(10000)])
    assert abs(draws.sum(1).mean() - 8) < 0.5
    assert draws.any(1).all()
    assert all(backprop_dropout_mask(1, 0.9, r).all() for _ in range(50))
    with pytest.raises(ValueError):
        backprop_dropout_mask(4, 1.0, r)


def test_dropout_forward_identity_and_gradient_mask():
    x = Tensor(np.arange(12.0).reshape(3, 2, 2), requires_grad=True)
    keep = np.array([True, False, True])
    y = apply_backprop_dropout(x, keep)
    assert np.array_equal(y.data, x.data)
    nc.backward(nc.sum_(y * y))
    assert np.array_equal(x.grad[1], np.zeros((2, 2)))
    assert np.array_equal(x.grad[[0, 2]], 2 * x.data[[0, 2]])


def test_one_epoch_sanity_and_frozen_base():
    tr, _ = trainer(n_docs=8, batch_size=8, epochs=1)
    base = tr.model.base_hash()
    m = tr.train_epoch()
    assert all(math.isfinite(v) for v in (m.loss_qa, m.loss_vq, m.loss_total))
    assert 1.0 <= m.perplexity <= SMALL.num_codes
    assert tr.model.base_hash() == base


def test_same_seed_same_trace():
    a, _ = trainer()
    b, _ = trainer()
    a.fit()
    b.fit()
    assert a.state.history == b.state.history
    assert a.model.param_hash() == b.model.param_hash()


def test_codebook_untouched_without_vq_and_reset():
    tr, _ = trainer(lambda_vq=0.0, reset_codes=False, epochs=2)
    E = tr.model.codebook.E.data.copy()
    other = tr.model.amort["enc.embed"].data.copy()
    tr.fit()
    assert np.array_equal(tr.model.codebook.E.data, E)
    assert not np.array_equal(tr.model.amort["enc.embed"].data, other)


def test_loss_trends_down():
    tr, _ = trainer(n_docs=32, epochs=8)
    hist = tr.fit()
    assert hist[-1].loss_total < hist[0].loss_total


def test_warmup_schedule():
    tr, _ = trainer(n_docs=24, epochs=10, warmup_fraction=0.1)  # 3 steps/epoch, 30 total, 3 warm
    assert [tr.learning_rate(s) for s in range(4)] == pytest.approx([1e-3, 2e-3, 3e-3, 3e-3])


def test_non_finite_loss_aborts_with_diagnostics():
    tr, _ = trainer()
    tr.model.input["inp.embed"].data[:] = np.nan
    with pytest.raises(TrainingError, match=r"doc\d+") as exc:
        tr.train_step(tr.examples[:2])
    assert "loss_qa" in str(exc.value)


def test_checkpoint_resume_is_bit_identical(tmp_path):
    full, corpus = trainer(epochs=3)
    full.fit()

    part, _ = trainer(epochs=3)
    part.fit(epochs=1)
    part.save(tmp_path / "c.mbck")
    resumed = Trainer.load(tmp_path / "c.mbck", corpus.train, corpus.documents, corpus.val)
    assert resumed.model.param_hash() == part.model.param_hash()
    resumed.fit()
    assert resumed.state.history == full.state.history
    assert resumed.model.param_hash() == full.model.param_hash()


def test_checkpoint_contents(tmp_path):
    tr, _ = trainer(epochs=1)
    tr.fit()
    tr.save(tmp_path / "c.mbck")
    meta, blocks = read_checkpoint(tmp_path / "c.mbck")
    assert meta["epoch"] == 1 and meta["vocab"][:4] == ["<pad>", "<unk>", "<bos>", "<eoa>"]
    assert "dec.embed" in blocks and "codebook.usage" in blocks and "adam.m.codebook.E" in blocks
    assert ModelConfig.from_dict(meta["model"]) == SMALL


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing"])
def test_corrupt_checkpoint(tmp_path, mutate):
    tr, _ = trainer(epochs=1)
    p = tmp_path / "c.mbck"
    tr.save(p)
    raw = p.read_bytes()
    raw = {"magic": b"XXXX" + raw[4:], "truncate": raw[:-5], "trailing": raw + b"\0"}[mutate]
    p.write_bytes(raw)
    with pytest.raises(CheckpointError):
        read_checkpoint(p)


def test_validate(monkeypatch):
    tr, corpus = trainer()
    with pytest.raises(ValueError):
        tr.validate([])
    gold = {r.question: r.answer for r in corpus.val}
    monkeypatch.setattr(OnlineAdapter, "answer", lambda self, q: gold[q])
    assert tr.validate(corpus.val) == (1.0, 1.0)
    monkeypatch.setattr(OnlineAdapter, "answer", lambda self, q: "")
    assert tr.validate(corpus.val) == (0.0, 0.0)


def test_best_selection_breaks_ties_by_f1():
    tr, _ = trainer()
    for ep, em, f1 in [(1, 0.5, 0.6), (2, 0.5, 0.7), (3, 0.4, 0.9), (4, 0.5, 0.65)]:
        tr._track_best(EpochMetrics(ep, 0, 0, 0, None, 0, em, f1))
    assert tr.state.best["epoch"] == 2


def test_collapse_experiment_separates_runs():
    corpus = gen_synthetic(32, seed=0, split=(1.0, 0.0, 0.0))
    traces = collapse_experiment(SMALL, TrainConfig(**{**TOY, "epochs": 2}), corpus, epochs=2)
    assert traces["no_reset"][-1] == pytest.approx(1.0)
    assert traces["reset"][-1] >= 2 * traces["no_reset"][-1]


def test_collapse_init_sends_everything_to_code_zero():
    tr, _ = trainer()
    collapse_codebook(tr.model)
    from mbc.codebook import nearest_codes
    from mbc.encoder import encode_documents
    phi = encode_documents([e.doc for e in tr.examples], tr.model.amort, SMALL.encoder)
    assert not nearest_codes(phi, tr.model.codebook).any()

import numpy as np
import pytest

from mbc.model import MBCModel, ModelConfig, closed_form_overhead, param_report

SMALL = ModelConfig(vocab_size=40, dim=8, tokens=2, max_sequence_length=10, encoder_blocks=1, encoder_heads=2,
                    aggregator_blocks=2, aggregator_heads=2, decoder_layers=2, decoder_heads=2, n_lora=1,
                    lora_rank=2, lora_alpha=4.0, num_codes=16)


def test_init_is_deterministic():
    a = MBCModel(SMALL, np.random.default_rng(0))
    b = MBCModel(SMALL, np.random.default_rng(0))
    assert a.param_hash() == b.param_hash()
    assert a.param_hash() != MBCModel(SMALL, np.random.default_rng(1)).param_hash()


def test_trainable_excludes_base():
    m = MBCModel(SMALL, np.random.default_rng(0))
    names = set(m.trainable())
    assert "codebook.E" in names
    assert not any(n.startswith("dec.") for n in names)
    assert all(not t.requires_grad for _, t in m.base)


def test_arrays_round_trip():
    a = MBCModel(SMALL, np.random.default_rng(0))
    b = MBCModel(SMALL, np.random.default_rng(1))
    b.load_arrays(a.all_arrays())
    assert a.param_hash() == b.param_hash()


def test_config_dict_round_trip_and_unknown_keys():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"dims": 3})


def test_param_report_counts():
    m = MBCModel(SMALL, np.random.default_rng(0))
    rep = param_report(m)
    assert rep.codebook == 16 * 8
    assert rep.lora == 3 * 2 * 8
    assert rep.networks == m.amort.count() + m.input.count() + m.aggregator.count() + m.base.count()
    assert rep.overhead_percent == pytest.approx(100 * (rep.codebook + rep.lora) / rep.networks)


def test_closed_form_distilgpt2():
    rep = closed_form_overhead(768, 512, 16, 6, True, 197_000_000)
    assert rep.added == 512 * 768 + 6 * 3 * 16 * 768 == 614_400
    assert rep.overhead_percent < 0.5


def test_closed_form_edge_cases():
    assert closed_form_overhead(8, 4, 0, 1, True, 1000).added == 32
    a = closed_form_overhead(8, 4, 2, 1, True, 1000)
    b = closed_form_overhead(8, 8, 2, 1, True, 1000)
    assert b.codebook == 2 * a.codebook

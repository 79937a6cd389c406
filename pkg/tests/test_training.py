import dataclasses

import numpy as np
import pytest

from sarcmtl.autodiff import Tensor
from sarcmtl.data import SynthConfig, synth_generate
from sarcmtl.model import VariantKind, save_checkpoint
from sarcmtl.training import (AdamState, NumericError, TrainConfig, adam_step, train,
                              write_run_dir)

SMALL = TrainConfig(encoder="transformer", d=8, layers=1, heads=2, n_max=20, batch_size=32,
                    epochs=5, learning_rate=3e-3)


def adam_cfg(lr=0.1):
    return TrainConfig(learning_rate=lr)


class TestAdam:
    def test_first_step(self):
        p = {"w": Tensor.param([[0.0]])}
        adam_step(p, {"w": np.array([[1.0]])}, AdamState(), 1, adam_cfg(0.1))
        assert p["w"].value[0, 0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_zero_gradient_leaves_params_and_decays_moments(self):
        p = {"w": Tensor.param([[1.5, -2.0]])}
        state = AdamState()
        adam_step(p, {"w": np.array([[1.0, 1.0]])}, state, 1, adam_cfg())
        before = p["w"].value.copy()
        m0 = state.m["w"].copy()
        adam_step(p, {"w": np.zeros((1, 2))}, state, 2, adam_cfg())
        np.testing.assert_allclose(state.m["w"], 0.9 * m0)
        # a zero gradient still moves the parameter through the first moment,
        # except from a fresh state
        fresh = {"w": Tensor.param([[1.5, -2.0]])}
        adam_step(fresh, {"w": np.zeros((1, 2))}, AdamState(), 1, adam_cfg())
        assert fresh["w"].value.tolist() == [[1.5, -2.0]]
        assert not np.array_equal(before, p["w"].value)

    def test_constant_gradient_step_approaches_lr(self):
        p = {"w": Tensor.param([[0.0, 0.0]])}
        state = AdamState()
        lr = 0.01
        for t in range(1, 2001):
            prev = p["w"].value.copy()
            adam_step(p, {"w": np.array([[3.0, -0.2]])}, state, t, adam_cfg(lr))
        step = p["w"].value - prev
        np.testing.assert_allclose(step, [[-lr, lr]], rtol=1e-6)

    def test_lr_zero_is_bit_identical(self):
        rng = np.random.default_rng(0)
        p = {"w": Tensor.param(rng.normal(size=(3, 3)))}
        before = p["w"].value.tobytes()
        for t in range(1, 4):
            adam_step(p, {"w": rng.normal(size=(3, 3))}, AdamState(), t, adam_cfg(0.0))
        assert p["w"].value.tobytes() == before

    def test_nan_gradient_names_parameter(self):
        p = {"enc.W": Tensor.param([[1.0]])}
        with pytest.raises(NumericError, match="enc.W"):
            adam_step(p, {"enc.W": np.array([[np.nan]])}, AdamState(), 1, adam_cfg())

    def test_step_counter(self):
        with pytest.raises(ValueError):
            adam_step({}, {}, AdamState(), 0, adam_cfg())


@pytest.fixture(scope="module")
def separable():
    return synth_generate(SynthConfig(n_examples=300, signal_strength=1.0, vocab_size=80,
                                      indicators_per_class=2, max_len=10, seed=1))


def test_training_is_deterministic(separable, tmp_path):
    cfg = dataclasses.replace(SMALL, epochs=2)
    a = write_run_dir(train(separable, cfg), cfg, tmp_path / "a")
    b = write_run_dir(train(separable, cfg), cfg, tmp_path / "b")
    for f in ("history.tsv", "checkpoint.final", "config.snapshot"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_loss_decreases_on_separable_data(separable):
    res = train(separable, SMALL)
    losses = res.history.losses()
    assert len(losses) == 5 and losses[-1] < losses[0]
    assert all(np.isfinite(losses))


def test_history_layout(separable):
    res = train(separable, dataclasses.replace(SMALL, variant=VariantKind.ST_sarc, epochs=1))
    tsv = res.history.to_tsv().splitlines()
    assert tsv[0].split("\t")[:4] == ["epoch", "loss_total", "loss_bce", "loss_ce"]
    row = tsv[1].split("\t")
    assert row[0] == "1" and row[3] == "NA" and row[2] != "NA"
    # sentiment metrics absent for a sarcasm-only model
    assert row[-1] == "NA"


def test_split_is_shared_across_variants(separable):
    a = train(separable, dataclasses.replace(SMALL, variant=VariantKind.ST_sent, epochs=1))
    b = train(separable, dataclasses.replace(SMALL, variant=VariantKind.MTL, epochs=1))
    assert a.dev_records == b.dev_records
    assert len(a.train_records) + len(a.dev_records) == len(separable)


def test_lr_zero_training_keeps_initial_params(separable, tmp_path):
    cfg = dataclasses.replace(SMALL, learning_rate=0.0, epochs=1)
    res = train(separable, cfg)
    from sarcmtl.model import Model
    fresh = Model.create(res.model.config, res.model.vocab)
    save_checkpoint(res.model, tmp_path / "a")
    save_checkpoint(fresh, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(learning_rate=-1.0), dict(batch_size=0),
                                 dict(dev_ratio=1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        dataclasses.replace(SMALL, **bad).validate()


def test_config_round_trip():
    cfg = dataclasses.replace(SMALL, variant=VariantKind.ST_ATT_sent)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg

import math

import numpy as np
import pytest

from pitvqa.data import generate_corpus
from pitvqa.model import ConfigError, ModelConfig, init_parameters
from pitvqa.training import (
    AdamState,
    TrainConfig,
    ablation_run,
    adam_step,
    batch_indices,
    batch_loss,
    default_vocab,
    encode_corpus,
    evaluate,
    predict,
    train,
)
from pitvqa.metrics import validate_report, ABLATION_SCHEMA
from pitvqa.rng import stream

SMALL = ModelConfig(d_model=16, n_heads=2, n_img_layers=1, n_text_layers=1, n_decoder_layers=1)


@pytest.fixture(scope="module")
def data():
    return encode_corpus(generate_corpus(5, 2, 6), default_vocab(), 16)


class TestAdam:
    def test_hand_case(self):
        cfg = TrainConfig(learning_rate=0.1)
        p, st = adam_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, AdamState.zeros_like({"w": np.zeros(1)}), cfg)
        assert st.t == 1
        assert p["w"][0] == pytest.approx(0.9, abs=1e-7)
        np.testing.assert_allclose(st.m["w"], 0.1)
        np.testing.assert_allclose(st.v["w"], 0.001)

    def test_zero_gradient(self):
        cfg = TrainConfig()
        params = {"w": np.arange(3.0)}
        p, st = adam_step(params, {}, AdamState.zeros_like(params), cfg)
        np.testing.assert_array_equal(p["w"], params["w"])
        assert st.t == 1

    def test_inputs_untouched(self):
        params = {"w": np.ones(2)}
        state = AdamState.zeros_like(params)
        adam_step(params, {"w": np.ones(2)}, state, TrainConfig())
        assert state.t == 0 and np.all(state.m["w"] == 0) and np.all(params["w"] == 1)

    def test_shape_mismatch(self):
        params = {"w": np.ones(2)}
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.ones(3)}, AdamState.zeros_like(params), TrainConfig())

    def test_second_moment_nonnegative(self):
        rng = np.random.default_rng(0)
        params = {"w": rng.normal(size=5)}
        st = AdamState.zeros_like(params)
        for _ in range(5):
            params, st = adam_step(params, {"w": rng.normal(size=5)}, st, TrainConfig())
        assert np.all(st.v["w"] >= 0) and st.t == 5


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(batch_size=1), dict(max_steps=-1), dict(beta1=1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


class TestBatches:
    def test_epoch_is_permutation(self):
        idx = np.concatenate([batch_indices(s, 64, 16, 3) for s in range(4)])
        assert sorted(idx.tolist()) == list(range(64))

    def test_new_epoch_reshuffles(self):
        assert not np.array_equal(batch_indices(0, 64, 16, 3), batch_indices(4, 64, 16, 3))

    def test_deterministic(self):
        assert np.array_equal(batch_indices(7, 100, 16, 1), batch_indices(7, 100, 16, 1))


class TestTraining:
    def test_initial_loss(self, data):
        net = init_parameters(ModelConfig())
        loss = batch_loss(net, data, np.arange(16), True, stream(0, "dropout", 0)).item()
        assert abs(loss - math.log(59)) <= 0.2

    def test_zero_steps(self, data):
        net = init_parameters(SMALL)
        before = {k: v.copy() for k, v in net.params.items()}
        res = train(net, data, TrainConfig(max_steps=0))
        assert res.losses == [] and res.step == 0
        assert all(np.array_equal(before[k], net.params[k]) for k in before)

    def test_deterministic(self, data):
        cfg = TrainConfig(learning_rate=1e-3, max_steps=4, seed=2)
        a = train(init_parameters(SMALL), data, cfg).losses
        b = train(init_parameters(SMALL), data, cfg).losses
        assert a == b and len(a) == 4
        assert all(lr == 1e-3 for _, _, lr in a)

    def test_loss_decreases(self, data):
        net = init_parameters(SMALL)
        idx = np.arange(16)
        before = batch_loss(net, data, idx, False, None).item()
        train(net, data.take(idx), TrainConfig(learning_rate=3e-3, max_steps=30, seed=1))
        assert batch_loss(net, data, idx, False, None).item() < before

    def test_checkpoints(self, data, tmp_path):
        res = train(init_parameters(SMALL), data, TrainConfig(max_steps=4, eval_every=2), checkpoint_dir=tmp_path)
        assert [p.name for p in res.checkpoints] == ["step_000002.ckpt", "step_000004.ckpt"]

    def test_running_stats_move(self, data):
        net = init_parameters(SMALL)
        train(net, data, TrainConfig(max_steps=2))
        assert not np.array_equal(net.buffers["eb.bn.var"], np.ones(16))

    def test_empty(self, data):
        with pytest.raises(ValueError):
            train(init_parameters(SMALL), data.take(np.arange(0)), TrainConfig())


class TestEvaluate:
    def test_predict_shape(self, data):
        preds = predict(init_parameters(SMALL), data, chunk=7)
        assert preds.shape == (len(data),) and preds.max() < 59

    def test_report(self, data):
        rep = evaluate(init_parameters(SMALL), data)
        assert rep.n_samples == len(data)
        assert set(rep.per_category) <= {"phase", "step", "instrument", "quantity", "position", "note"}
        validate_report(rep.to_dict())

    def test_empty(self, data):
        with pytest.raises(ValueError):
            evaluate(init_parameters(SMALL), data.take(np.arange(0)))


def test_ablation_harness(data):
    doc = ablation_run(data, data, SMALL, TrainConfig(max_steps=2, seed=4))
    validate_report(doc, ABLATION_SCHEMA)
    assert len(doc["eb_on"]["per_class"]) == len(doc["eb_off"]["per_class"])
    assert doc["delta"]["accuracy"] == doc["eb_on"]["accuracy"] - doc["eb_off"]["accuracy"]

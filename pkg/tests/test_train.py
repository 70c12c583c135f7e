import numpy as np
import pytest

from rankfusion.data import SynthSpec, generate
from rankfusion.neural import (
    CheckpointError,
    TrainConfig,
    evaluate,
    init_model,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    train,
)
from rankfusion.neural.train import accuracy, clip_by_global_norm
from rankfusion.noise import NoiseSpec

TINY = SynthSpec(n_train=40, n_valid=10, n_test=10, T=5, dims=(3, 3, 3), latent_rank=2)


@pytest.fixture(scope="module")
def tiny():
    return generate(TINY)


def arrays_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.arrays().values(), b.arrays().values()))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"reg_weight": -1}, {"epochs": 0}, {"batch_size": 0}, {"optimizer": "rmsprop"}, {"grad_clip": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestAccuracy:
    def test_tie_predicts_positive(self):
        assert accuracy([0.0, 0.0], [True, False]) == 0.5

    def test_perfect(self):
        assert accuracy([2.0, -1.0, 0.5], [True, False, True]) == 1.0

    def test_random_logits(self):
        rng = np.random.default_rng(0)
        pos = np.arange(1000) % 2 == 0
        assert accuracy(rng.standard_normal(1000), pos) == pytest.approx(0.5, abs=0.05)

    def test_zero_classifier_balanced(self, tiny):
        p = init_model("t2fn", tiny.dims, hidden_dims=2)
        p.clf_w[:] = 0
        assert evaluate(p, tiny.test) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(init_model("tfn", (1, 1, 1), hidden_dims=1), [])


def test_clip_by_global_norm(tiny):
    g = init_model("lf_lstm", tiny.dims, hidden_dims=2).map(lambda a: np.full_like(a, 3.0))
    n = sum(a.size for a in g.arrays().values())
    norm = clip_by_global_norm(g, 1.0)
    assert norm == pytest.approx(3.0 * np.sqrt(n))
    total = np.sqrt(sum(float(np.sum(a * a)) for a in g.arrays().values()))
    assert total == pytest.approx(1.0)


class TestTrain:
    def test_zero_learning_rate_keeps_params(self, tiny):
        p0 = init_model("t2fn", tiny.dims, hidden_dims=2, seed=1)
        for opt in ("adam", "sgd"):
            res = train(p0, tiny.train, tiny.valid, TrainConfig(learning_rate=0.0, epochs=3, optimizer=opt, reg_weight=0.01))
            assert arrays_equal(res.params, p0)

    def test_input_params_not_mutated(self, tiny):
        p0 = init_model("tfn", tiny.dims, hidden_dims=2, seed=1)
        snapshot = p0.copy()
        train(p0, tiny.train, tiny.valid, TrainConfig(epochs=2))
        assert arrays_equal(p0, snapshot)

    def test_bit_identical_reruns(self, tiny):
        p0 = init_model("t2fn", tiny.dims, hidden_dims=2, seed=2)
        cfg = TrainConfig(epochs=3, reg_weight=0.001, batch_size=8)
        noise = NoiseSpec("random_drop", 0.3, seed=4)
        a = train(p0, tiny.train, tiny.valid, cfg, noise)
        b = train(p0, tiny.train, tiny.valid, cfg, noise)
        assert a.history == b.history
        assert arrays_equal(a.params, b.params)

    def test_history_contents(self, tiny):
        res = train(init_model("t2fn", tiny.dims, hidden_dims=2), tiny.train, tiny.valid, TrainConfig(epochs=4, reg_weight=0.01))
        assert [m.epoch for m in res.history] == [1, 2, 3, 4]
        for m in res.history:
            assert m.loss == pytest.approx(m.bce + 0.01 * m.reg, rel=1e-9)
            assert 0.0 <= m.valid_accuracy <= 1.0
        best = max(m.valid_accuracy for m in res.history)
        assert res.history[res.best_epoch - 1].valid_accuracy == best
        assert res.best_epoch == min(m.epoch for m in res.history if m.valid_accuracy == best)

    def test_returns_best_validation_params(self, tiny):
        res = train(init_model("lf_lstm", tiny.dims, hidden_dims=3), tiny.train, tiny.valid, TrainConfig(epochs=5, learning_rate=0.01))
        assert evaluate(res.params, tiny.valid) == res.history[res.best_epoch - 1].valid_accuracy

    def test_lambda_ignored_for_baselines(self, tiny):
        p0 = init_model("tfn", tiny.dims, hidden_dims=2)
        a = train(p0, tiny.train, tiny.valid, TrainConfig(epochs=2))
        b = train(p0, tiny.train, tiny.valid, TrainConfig(epochs=2, reg_weight=0.1))
        assert a.history == b.history

    def test_learns_separable_data(self, tiny):
        res = train(init_model("t2fn", tiny.dims, hidden_dims=4), tiny.train, tiny.valid, TrainConfig(epochs=30, learning_rate=0.01))
        assert res.history[-1].train_accuracy >= 0.9

    def test_eval_noise_fixed(self, tiny):
        p = init_model("t2fn", tiny.dims, hidden_dims=2, seed=3)
        noise = NoiseSpec("structured_drop", 0.5, seed=1)
        assert evaluate(p, tiny.test, noise) == evaluate(p, tiny.test, noise)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["t2fn", "tfn", "ef_lstm", "lf_lstm"])
    def test_round_trip(self, tmp_path, tiny, variant):
        p = init_model(variant, tiny.dims, hidden_dims=(2, 3, 4), seed=8)
        save_checkpoint(tmp_path / "m.npz", p, meta={"seed": 8, "note": "x"})
        q, meta = load_checkpoint(tmp_path / "m.npz")
        assert q.variant == p.variant
        assert arrays_equal(p, q)
        assert meta == {"seed": "8", "note": "x"}
        np.testing.assert_array_equal(predict_logits(p, tiny.test), predict_logits(q, tiny.test))

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "m.npz", init_model("t2fn", (1, 2, 3), hidden_dims=2))
        with np.load(tmp_path / "m.npz") as z:
            assert str(z["__format__"]) == "rankfusion-checkpoint"
            assert int(z["__version__"]) == 1
            assert str(z["__variant__"]) == "t2fn"
            assert tuple(z["__input_dims__"]) == (1, 2, 3)
            assert z["lang.W"].shape == (8, 3)
            assert z["classifier.w"].shape == (27,)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.npz")

    def test_garbage(self, tmp_path):
        (tmp_path / "bad.npz").write_bytes(b"not a zip")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.npz")

    def test_wrong_version(self, tmp_path):
        p = init_model("tfn", (1, 1, 1), hidden_dims=1)
        save_checkpoint(tmp_path / "m.npz", p)
        with np.load(tmp_path / "m.npz") as z:
            entries = dict(z)
        entries["__version__"] = np.int64(99)
        np.savez(tmp_path / "v.npz", **entries)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.npz")

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from omsn.archive import restore_model
from omsn.data import synth_dataset, SynthConfig
from omsn.engine.tensor import Tensor
from omsn.network import OMSN, preset
from omsn.postprocess import FAZ, VESSEL, one_hot_encode
from omsn.trainer import (FitResult, OptimizerState, TrainConfig, adam_step, batch_indices, evaluate, fit,
                          poly_lr, predict_labels, stack_batch, train_epoch, validate)


def tiny(oc=3, seed=0, size=48):
    return OMSN(preset("tiny", output_channels=oc, input_size=size), seed=seed)


@pytest.fixture(scope="module")
def samples():
    return synth_dataset(8, SynthConfig(size=48, seed=11))


def onehot_predictor(samples):
    truth = np.stack([one_hot_encode(s.labels).astype(np.float64) for s in samples])
    return lambda images: truth


class TestPolyLR:
    cfg = TrainConfig()

    def test_endpoints(self):
        assert poly_lr(0, self.cfg) == self.cfg.lr_init
        assert poly_lr(self.cfg.max_epochs, self.cfg) == 0.0

    def test_midpoint(self):
        assert poly_lr(100, self.cfg) == pytest.approx(5.3589e-5, abs=1e-9)
        assert poly_lr(100, self.cfg) == pytest.approx(1e-4 * 0.5 ** 0.9, rel=1e-14)

    @given(st.floats(0.05, 5.0), st.integers(1, 300))
    def test_strictly_decreasing(self, power, max_epochs):
        cfg = TrainConfig(power=power, max_epochs=max_epochs)
        lrs = [poly_lr(e, cfg) for e in range(max_epochs + 1)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("epoch", [-1, 201])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            poly_lr(epoch, self.cfg)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr_init, c.power, c.max_epochs, c.batch_size, c.weight_decay, c.patience) == \
            (1e-4, 0.9, 200, 2, 1e-4, 20)

    def test_desk(self):
        assert TrainConfig.desk().max_epochs == 30

    @pytest.mark.parametrize("kwargs", [{"lr_init": 0}, {"power": 0}, {"batch_size": 0}, {"task": "both"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_dict_roundtrip(self):
        c = TrainConfig(seed=5, task="single", target_class=FAZ)
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestAdam:
    def param(self, value):
        return Tensor(np.array(value, dtype=np.float64), requires_grad=True)

    def test_zero_gradient_noop(self, rng):
        p = self.param(rng.standard_normal((3, 4)))
        before = p.data.copy()
        st_ = OptimizerState.for_params([p])
        for _ in range(3):
            assert adam_step([p], [np.zeros((3, 4))], st_, 1e-3, 0.0)
        np.testing.assert_array_equal(p.data, before)

    @pytest.mark.parametrize("g", [0.3, -2.5, 40.0])
    def test_first_step_sign(self, g):
        p = self.param([1.0])
        adam_step([p], [np.array([g])], OptimizerState.for_params([p]), 1e-3, 0.0)
        assert p.data[0] - 1.0 == pytest.approx(-1e-3 * np.sign(g), rel=1e-6)

    def test_constant_gradient_steps(self):
        # with a constant gradient every bias-corrected step is -lr * g / (|g| + eps)
        p = self.param([0.0])
        state = OptimizerState.for_params([p])
        for _ in range(5):
            adam_step([p], [np.array([0.7])], state, 1e-2, 0.0)
        assert p.data[0] == pytest.approx(-5e-2, rel=1e-6)
        assert state.step == 5

    def test_lr_zero_bitwise(self, rng):
        p = self.param(rng.standard_normal(5))
        before = p.data.copy()
        adam_step([p], [rng.standard_normal(5)], OptimizerState.for_params([p]), 0.0, 1e-4)
        assert p.data.tobytes() == before.tobytes()

    def test_weight_decay_coupled(self):
        p = self.param([2.0])
        state = OptimizerState.for_params([p])
        adam_step([p], [np.array([0.0])], state, 1e-3, 0.1)
        np.testing.assert_allclose(state.m[0], [0.1 * 0.2])
        assert p.data[0] == pytest.approx(2.0 - 1e-3, rel=1e-6)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_rejected(self, bad):
        p = self.param([1.0, 2.0])
        state = OptimizerState.for_params([p])
        assert not adam_step([p], [np.array([0.1, bad])], state, 1e-3, 0.0)
        assert state.rejected == 1 and state.step == 0
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_deterministic(self, rng):
        grads = [rng.standard_normal(6) for _ in range(4)]
        finals = []
        for _ in range(2):
            p = self.param(np.linspace(-1, 1, 6))
            state = OptimizerState.for_params([p])
            for g in grads:
                adam_step([p], [g], state, 1e-3, 1e-4)
            finals.append(p.data.tobytes())
        assert finals[0] == finals[1]


class TestBatching:
    @given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 1000))
    def test_partition(self, n, bs, seed):
        batches = batch_indices(n, bs, np.random.default_rng(seed))
        flat = [i for b in batches for i in b]
        assert sorted(flat) == list(range(n))
        if n > 1:
            assert all(len(b) >= 2 for b in batches) or bs == 1

    def test_stack(self, samples):
        images, labels = stack_batch(samples[:3])
        assert images.shape == (3, 1, 48, 48) and labels.shape == (3, 48, 48)


class TestTraining:
    def test_loss_decreases(self, samples):
        model = tiny()
        cfg = TrainConfig.desk(max_epochs=10, task="multi", seed=0)
        state = OptimizerState.for_params(model.parameters())
        rng = np.random.default_rng(0)
        losses = [train_epoch(model, samples, cfg, state, 2e-3, rng) for _ in range(10)]
        assert all(np.isfinite(losses))
        assert losses[-1] < losses[0]
        assert state.rejected == 0

    def test_single_task_epoch(self, samples):
        model = tiny(oc=1)
        cfg = TrainConfig.desk(task="single", target_class=FAZ)
        loss = train_epoch(model, samples[:4], cfg, OptimizerState.for_params(model.parameters()),
                           1e-3, np.random.default_rng(0))
        assert np.isfinite(loss) and loss > 0


class TestValidate:
    cfg = TrainConfig(task="multi")

    def test_untrained_in_range(self, samples):
        assert 0.0 <= validate(tiny(), samples[:3], self.cfg) <= 1.0

    def test_oracle_stub(self, samples):
        assert validate(None, samples, self.cfg, predictor=onehot_predictor(samples)) == 1.0

    def test_oracle_stub_single(self, samples):
        cfg = TrainConfig(task="single", target_class=VESSEL)
        truth = np.stack([(s.labels == VESSEL)[None].astype(float) for s in samples])
        assert validate(None, samples, cfg, predictor=lambda x: truth) == 1.0

    def test_deterministic(self, samples):
        model = tiny()
        assert validate(model, samples[:3], self.cfg) == validate(model, samples[:3], self.cfg)

    def test_preserves_mode(self, samples):
        model = tiny()
        model.train()
        validate(model, samples[:2], self.cfg)
        assert model.training

    def test_empty(self):
        with pytest.raises(ValueError):
            validate(tiny(), [], self.cfg)

    def test_predict_labels_values(self, samples):
        out = predict_labels(tiny(), np.stack([s.image for s in samples[:2]]), "multi")
        assert out.shape == (2, 48, 48) and set(np.unique(out)) <= {0, 1, 2}


class TestEvaluate:
    def test_oracle(self, samples):
        out = evaluate(samples, onehot_predictor(samples), "multi")
        assert out["macro"]["dice"] == {"mean": 1.0, "std": 0.0}
        assert set(out["per_class"]) == {"vessel", "faz"}
        assert out["images"] == [s.id for s in samples]

    def test_std_is_population(self, samples):
        zero = lambda images: np.zeros((len(images), 3, 48, 48))
        truth = onehot_predictor(samples)
        half = samples[:2]
        pred = lambda images: np.concatenate([truth(images)[:1], zero(images)[:1]])
        out = evaluate(half, pred, "multi")
        assert out["mean"]["faz"]["dice"] == pytest.approx(0.5)
        assert out["std"]["faz"]["dice"] == pytest.approx(0.5)


class TestFit:
    def run(self, samples, **kw):
        cfg = TrainConfig.desk(max_epochs=kw.pop("epochs", 2), task="multi", seed=3, **kw)
        return fit(tiny(seed=3), samples[:6], samples[6:], cfg)

    def test_best_is_max(self, samples):
        res = self.run(samples, epochs=3)
        assert isinstance(res, FitResult)
        assert res.best_dice == max(r["val_dice"] for r in res.log)
        assert res.archive.config["best_val_dice"] == res.best_dice
        assert res.log[res.best_epoch]["val_dice"] == res.best_dice

    def test_patience_stop(self, samples):
        cfg = TrainConfig.desk(max_epochs=10, patience=1, task="multi")
        res = fit(tiny(), samples[:4], samples[4:], cfg, validator=lambda m: 0.5)
        assert len(res.log) == 2 and res.best_epoch == 0

    def test_reproducible_bytes(self, samples):
        a, b = self.run(samples), self.run(samples)
        assert a.archive.to_bytes() == b.archive.to_bytes()

    def test_restores_best_snapshot(self, samples):
        scores = iter([0.2, 0.9, 0.1])
        snaps = []

        def validator(model):
            snaps.append({k: v.copy() for k, v in model.state_dict().items()})
            return next(scores)

        cfg = TrainConfig.desk(max_epochs=3, task="multi")
        res = fit(tiny(), samples[:4], samples[4:], cfg, validator=validator)
        assert res.best_epoch == 1
        restored = restore_model(res.archive).state_dict()
        for k, v in snaps[1].items():
            np.testing.assert_array_equal(restored[k], v.astype(np.float32))

    def test_log_csv(self, samples):
        res = self.run(samples, epochs=1)
        lines = res.log_csv().splitlines()
        assert lines[0] == "epoch,lr,train_loss,val_dice" and len(lines) == 2
        assert res.summary()["epochs_run"] == 1

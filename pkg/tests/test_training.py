import numpy as np
import pytest

from twophase import network, training
from twophase.network import FcnConfig
from twophase.training import (MaskProvider, PhasePlan, TrainConfig,
                               history_csv, lr_at, sgd_update, train_phase)


def tiny_config(seed=0):
    return FcnConfig(input_size=16, class_count=2,
                     feature_stack=((4, 3, 2), (4, 3, 1)),
                     feedback_layer_index=1,
                     head_stack=((6, 3, 1), (2, 1, 1)),
                     rng_seed=seed)


class TinySample:
    """Duck-typed stand-in: exposes to_tensor() and labels like a real sample."""

    def __init__(self, rng, class_id):
        self._tensor = rng.standard_normal((1, 16, 16)).astype(np.float32)
        self.labels = np.zeros(2, dtype=np.uint8)
        self.labels[class_id] = 1

    def to_tensor(self):
        return self._tensor


@pytest.fixture
def tiny_samples(rng):
    return [TinySample(rng, i % 2) for i in range(8)]


class TestLrSchedule:
    def test_reference_recipe_values(self):
        cfg = training.REFERENCE_SCALE
        assert lr_at(cfg, 0) == pytest.approx(0.001)
        assert lr_at(cfg, 1999) == pytest.approx(0.001)
        assert lr_at(cfg, 2000) == pytest.approx(0.0001)
        assert lr_at(cfg, 4000) == pytest.approx(1e-5)
        assert lr_at(cfg, 6000) == pytest.approx(1e-6)

    def test_nonincreasing(self):
        cfg = TrainConfig()
        lrs = [lr_at(cfg, i) for i in range(0, cfg.iterations, 97)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestSgdUpdate:
    def test_decay_only_step(self):
        w = np.array([1.0], dtype=np.float64)
        b = np.array([0.5], dtype=np.float64)
        sgd_update([(w, b)], [(np.zeros(1), np.ones(1))], lr=0.001, weight_decay=0.0005)
        assert w[0] == pytest.approx(0.9999995, abs=1e-12)
        assert b[0] == pytest.approx(0.499)  # bias gets no decay

    def test_plain_gradient_step(self):
        w = np.array([[2.0]])
        b = np.array([0.0])
        sgd_update([(w, b)], [(np.array([[4.0]]), np.array([1.0]))],
                   lr=0.5, weight_decay=0.0)
        assert w[0, 0] == pytest.approx(0.0)
        assert b[0] == pytest.approx(-0.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="sgd_update"):
            sgd_update([(np.zeros((2, 2)), np.zeros(2))],
                       [(np.zeros((3, 3)), np.zeros(2))], 0.1, 0.0)


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"iterations": 0}, {"batch_size": 0}, {"base_lr": 0.0},
        {"base_lr": -1.0}, {"lr_drop_every": 0}, {"weight_decay": -0.1},
        {"lr_drop_factor": 1.0},
    ])
    def test_bad_train_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs).validate()

    def test_plan_threshold_count(self):
        with pytest.raises(ValueError, match="thresholds"):
            PhasePlan(phase_count=3, thresholds=(0.6,),
                      configs=(TrainConfig(),) * 3).validate()

    def test_plan_thresholds_must_decrease(self):
        with pytest.raises(ValueError, match="decreasing"):
            PhasePlan(phase_count=3, thresholds=(0.4, 0.6),
                      configs=(TrainConfig(),) * 3).validate()

    def test_plan_threshold_range(self):
        with pytest.raises(ValueError):
            PhasePlan(phase_count=2, thresholds=(1.5,),
                      configs=(TrainConfig(),) * 2).validate()

    def test_default_plan_valid_and_seeds_distinct(self):
        plan = PhasePlan.default(phase_count=3)
        plan.validate()
        seeds = [c.rng_seed for c in plan.configs]
        assert len(set(seeds)) == 3


class TestTrainPhase:
    def test_deterministic(self, tiny_samples):
        cfg = TrainConfig(iterations=5, batch_size=4, base_lr=0.01, rng_seed=3)
        init = network.init_model(tiny_config())
        m1, h1 = train_phase(init, tiny_samples, cfg)
        m2, h2 = train_phase(init, tiny_samples, cfg)
        assert m1.checksum() == m2.checksum()
        assert h1 == h2

    def test_does_not_mutate_input_model(self, tiny_samples):
        init = network.init_model(tiny_config())
        before = init.checksum()
        train_phase(init, tiny_samples, TrainConfig(iterations=3, batch_size=4))
        assert init.checksum() == before

    def test_all_ones_mask_matches_unmasked_trajectory(self, tiny_samples):
        cfg = TrainConfig(iterations=5, batch_size=4, base_lr=0.01, rng_seed=3)
        init = network.init_model(tiny_config())
        fs = tiny_config().feedback_size()
        plain, _ = train_phase(init, tiny_samples, cfg)
        masked, _ = train_phase(init, tiny_samples, cfg,
                                mask_provider=lambda i, s: np.ones((fs, fs),
                                                                   dtype=np.float32))
        assert plain.checksum() == masked.checksum()

    def test_history_covers_all_iterations(self, tiny_samples):
        cfg = TrainConfig(iterations=7, batch_size=4, lr_drop_every=3)
        _, hist = train_phase(network.init_model(tiny_config()), tiny_samples, cfg)
        assert [it for it, _, _ in hist] == list(range(7))
        assert hist[0][1] == pytest.approx(cfg.base_lr)
        assert hist[-1][1] == pytest.approx(cfg.base_lr / 100)
        assert all(np.isfinite(loss) for _, _, loss in hist)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_phase(network.init_model(tiny_config()), [], TrainConfig())

    def test_frozen_model_mutation_detected(self, tiny_samples):
        frozen = network.init_model(tiny_config(seed=9))
        fs = tiny_config().feedback_size()

        class MutatingProvider:
            frozen_models = [frozen]

            def __call__(self, i, s):
                frozen.params[0][0][0, 0, 0, 0] += 1.0
                return np.ones((fs, fs), dtype=np.float32)

        with pytest.raises(RuntimeError, match="mutated"):
            train_phase(network.init_model(tiny_config()), tiny_samples,
                        TrainConfig(iterations=2, batch_size=4), MutatingProvider())


class TestMaskProvider:
    def test_caches_per_sample(self, tiny_samples):
        frozen = network.init_model(tiny_config(seed=5))
        provider = MaskProvider([frozen], fraction=0.6)
        a = provider(0, tiny_samples[0])
        b = provider(0, tiny_samples[0])
        assert a is b
        provider(1, tiny_samples[1])
        assert len(provider._cache) == 2

    def test_mask_has_feedback_resolution(self, tiny_samples):
        frozen = network.init_model(tiny_config(seed=5))
        grid = MaskProvider([frozen], 0.6)(0, tiny_samples[0])
        fs = tiny_config().feedback_size()
        assert grid.shape == (fs, fs)
        assert set(np.unique(grid)) <= {0.0, 1.0}


class TestRunPipeline:
    def test_two_phase_models_differ(self, tiny_samples):
        plan = PhasePlan.default(
            phase_count=2, train_config=TrainConfig(iterations=4, batch_size=4))
        models = training.run_pipeline(plan, tiny_samples, tiny_config())
        assert len(models) == 2
        assert models[0].checksum() != models[1].checksum()

    def test_pipeline_deterministic(self, tiny_samples):
        plan = PhasePlan.default(
            phase_count=2, train_config=TrainConfig(iterations=3, batch_size=4))
        a = training.run_pipeline(plan, tiny_samples, tiny_config())
        b = training.run_pipeline(plan, tiny_samples, tiny_config())
        assert [m.checksum() for m in a] == [m.checksum() for m in b]

    def test_config_count_mismatch_rejected(self, tiny_samples):
        plan = PhasePlan(phase_count=2, thresholds=(0.6,), configs=(TrainConfig(),))
        with pytest.raises(ValueError, match="configs"):
            training.run_pipeline(plan, tiny_samples, tiny_config())


class TestHistoryCsv:
    def test_round_trippable_text(self):
        text = history_csv([(0, 0.05, 2.5), (1, 0.05, 2.25)])
        lines = text.strip().split("\n")
        assert lines[0] == "iteration,lr,loss"
        assert lines[1].startswith("0,0.05,2.5")
        assert text.endswith("\n")

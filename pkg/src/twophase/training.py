"""SGD training for phase 1 and mask-fed later phases.

Phase 1 is plain mini-batch SGD on the multi-label loss. Phase k >= 2
treats the frozen earlier models as a function image -> suppression mask
and multiplies that mask into the feedback layer on both the forward and
backward pass. Everything is reproducible: shuffling, init, and mask
computation are pure functions of the configured seeds.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import network, suppression
from .network import FcnConfig, FcnModel


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 15
    base_lr: float = 0.05
    lr_drop_every: int = 1100
    lr_drop_factor: float = 10.0
    weight_decay: float = 0.0005
    rng_seed: int = 0
    # restart from a derived init seed if the loss has not fallen below the
    # paired ceiling by the paired iteration; 0 restarts disables the checks
    plateau_checks: tuple = ((500, 2.0), (1000, 1.0))
    max_restarts: int = 4

    def validate(self):
        if min(self.iterations, self.batch_size, self.lr_drop_every) < 1 \
                or self.base_lr <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid TrainConfig: {self}")
        if self.lr_drop_factor <= 1:
            raise ValueError(f"lr_drop_factor must be > 1, got {self.lr_drop_factor}")
        if self.max_restarts < 0 or any(it < 1 or ceil <= 0
                                        for it, ceil in self.plateau_checks):
            raise ValueError(f"invalid plateau restart settings: {self}")


# learning-rate schedule from the original recipe: 0.001, /10 every 2000,
# 8000 iterations total
REFERENCE_SCALE = TrainConfig(iterations=8000, batch_size=15, base_lr=0.001,
                          lr_drop_every=2000, lr_drop_factor=10.0,
                          weight_decay=0.0005)


@dataclass(frozen=True)
class PhasePlan:
    phase_count: int = 2
    thresholds: tuple = (0.6,)            # suppression fraction per phase >= 2
    configs: tuple = ()                   # per-phase TrainConfig

    def validate(self):
        if self.phase_count < 1:
            raise ValueError("phase_count must be >= 1")
        if len(self.thresholds) != self.phase_count - 1:
            raise ValueError(
                f"need {self.phase_count - 1} thresholds, got {len(self.thresholds)}")
        for a, b in zip(self.thresholds, self.thresholds[1:]):
            if not b < a:
                raise ValueError("thresholds must be strictly decreasing")
        for t in self.thresholds:
            if not 0 < t < 1:
                raise ValueError(f"threshold {t} outside (0,1)")

    @classmethod
    def default(cls, phase_count=2, train_config=None):
        base = train_config or TrainConfig()
        thresholds = (0.6, 0.4, 0.3, 0.25)[:phase_count - 1]
        configs = tuple(replace(base, rng_seed=base.rng_seed + p)
                        for p in range(phase_count))
        return cls(phase_count=phase_count, thresholds=thresholds, configs=configs)


def lr_at(config: TrainConfig, iteration: int) -> float:
    return config.base_lr / config.lr_drop_factor ** (iteration // config.lr_drop_every)


def sgd_update(params, grads, lr, weight_decay):
    """In-place step p <- p - lr*(g + wd*p); decay applies to weights only."""
    for (w, b), (gw, gb) in zip(params, grads):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise ValueError(
                f"sgd_update: param shapes {w.shape}/{b.shape} != "
                f"grad shapes {gw.shape}/{gb.shape}")
        w -= (lr * (gw + weight_decay * w)).astype(w.dtype)
        b -= (lr * gb).astype(b.dtype)
    return params


class MaskProvider:
    """Computes and caches per-sample suppression masks from frozen models."""

    def __init__(self, frozen_models, fraction):
        self.frozen_models = frozen_models
        self.fraction = fraction
        self._cache = {}

    def __call__(self, sample_index, sample):
        key = (sample_index, self.fraction)
        if key not in self._cache:
            mask = suppression.build_cumulative_mask(
                self.frozen_models, sample.to_tensor(), sample.labels, self.fraction)
            self._cache[key] = mask.grid
        return self._cache[key]


def train_phase(model: FcnModel, samples, config: TrainConfig, mask_provider=None):
    """Returns (trained copy, history) with history rows (iteration, lr, loss).

    If the loss is still above a ``plateau_checks`` ceiling at its paired
    iteration (stuck or slowly escaping runs — a known failure mode of
    this init at high learning rates), the attempt is abandoned and
    training restarts from a deterministically derived init seed, up to
    ``max_restarts`` times.
    """
    config.validate()
    if not samples:
        raise ValueError("train_phase: empty dataset")
    frozen_sums = None
    if mask_provider is not None and hasattr(mask_provider, "frozen_models"):
        frozen_sums = [m.checksum() for m in mask_provider.frozen_models]

    attempt_model = model.copy()
    for restart in range(config.max_restarts + 1):
        last = restart == config.max_restarts
        result = _run_sgd(attempt_model, samples, config, mask_provider,
                          abort_on_plateau=not last)
        if result is not None:
            trained, history = result
            break
        attempt_model = network.init_model(
            replace(model.config, rng_seed=model.config.rng_seed + 1_000_000 * (restart + 1)))

    if frozen_sums is not None:
        after = [m.checksum() for m in mask_provider.frozen_models]
        if after != frozen_sums:
            raise RuntimeError("frozen provider models were mutated during training")
    return trained, history


def _run_sgd(model, samples, config, mask_provider, abort_on_plateau):
    """One training attempt; returns (model, history) or None if abandoned."""
    model = model.copy()
    images = np.stack([s.to_tensor() for s in samples])
    labels = np.stack([s.labels.astype(np.float32) for s in samples])
    n = len(samples)

    order = np.empty(0, dtype=np.intp)
    epoch = 0
    cursor = 0
    history = []
    for it in range(config.iterations):
        idx = []
        while len(idx) < config.batch_size:
            if cursor >= len(order):
                order = np.random.default_rng((config.rng_seed, epoch)).permutation(n)
                epoch += 1
                cursor = 0
            take = min(config.batch_size - len(idx), len(order) - cursor)
            idx.extend(order[cursor:cursor + take])
            cursor += take
        idx = np.asarray(idx)

        batch = images[idx]
        batch_labels = labels[idx]
        mask = None
        if mask_provider is not None:
            mask = np.stack([mask_provider(int(i), samples[int(i)]) for i in idx])

        lr = lr_at(config, it)
        loss, grads, _, result = network.loss_and_grads(model, batch, batch_labels, mask)
        if mask is not None and it == 0:
            _probe_suppression(result, mask)
        sgd_update(model.params, grads, lr, config.weight_decay)
        history.append((it, lr, loss))

        if abort_on_plateau and it + 1 < config.iterations:
            for check_at, ceiling in config.plateau_checks:
                if it + 1 == check_at:
                    recent = np.mean([l for _, _, l in history[-100:]])
                    if recent >= ceiling:
                        return None
    return model, history


def _probe_suppression(result, mask):
    """Masked feedback activations must be exactly zero at suppressed pixels."""
    import twophase.ops as ops
    masked = ops.masked_multiply(result.features_at_feedback, mask)
    zeros = masked * (1.0 - np.asarray(mask)[:, None, :, :])
    if np.any(zeros != 0.0):
        raise RuntimeError("suppression probe failed: nonzero masked activation")


def run_pipeline(plan: PhasePlan, samples, model_config: FcnConfig = None):
    """Trains all phases; phase p >= 2 suppresses via the AND of all earlier
    models' masks at that phase's threshold. Returns the trained models."""
    plan.validate()
    if len(plan.configs) != plan.phase_count:
        raise ValueError(f"need {plan.phase_count} train configs, got {len(plan.configs)}")
    model_config = model_config or FcnConfig.default()
    models = []
    for p in range(plan.phase_count):
        cfg = replace(model_config, rng_seed=model_config.rng_seed + 1000 * p)
        init = network.init_model(cfg)
        provider = None
        if p > 0:
            provider = MaskProvider(models[:p], plan.thresholds[p - 1])
        trained, _ = train_phase(init, samples, plan.configs[p], provider)
        models.append(trained)
    return models


def history_csv(history):
    lines = ["iteration,lr,loss"]
    lines += [f"{it},{lr:.10g},{loss:.10g}" for it, lr, loss in history]
    return "\n".join(lines) + "\n"

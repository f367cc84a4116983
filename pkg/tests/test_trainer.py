import numpy as np
import pytest
import torch
from helpers_scenes import FAST_CFG, scene_pools, toy_scene

from m2m.estimator import forward, init_free_variable, init_masknet
from m2m.fcp import TapConfig
from m2m.loss import EstimatePair
from m2m.trainer import (
    ALTERNATE_PROPORTIONAL,
    ALTERNATE_STRICT,
    ORIGIN_REAL,
    ORIGIN_SIMULATED,
    BatchSampler,
    TrainConfig,
    Trainer,
    adjust_lr,
    no_closetalk,
)

TOY_TAPS = TapConfig(
    speech_past=4,
    speech_future=1,
    noise_past=4,
    noise_future=1,
    ct_speech_past=4,
    ct_speech_future=3,
    ct_noise_past=4,
    ct_noise_future=3,
)


def _toy_cfg(**kw):
    defaults = dict(
        segment_seconds=0.25,
        max_epochs=1,
        steps_per_epoch=4,
        seed=0,
        snr_augment=False,
        input_mics=1,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def _masknet(seed=0, hidden=8, mics=1):
    return init_masknet(FAST_CFG.num_bins, mics, hidden=hidden, stft=FAST_CFG, seed=seed)


def test_adjust_lr_rule():
    assert adjust_lr([1.0, 0.9, 0.8], 1e-3, 2) == 1e-3  # improving: unchanged
    assert adjust_lr([1.0, 1.1, 1.2], 1e-3, 2) == 0.5e-3  # stale after epoch 3
    assert adjust_lr([], 1e-3, 2) == 1e-3
    assert adjust_lr([1.0, 1.1, 1.2, 1.3], 1e-3, 2) == 0.25e-3  # still stale
    # never increases, and every drop is exactly x0.5
    losses = [1.0, 0.8, 0.9, 0.9, 0.7, 0.9, 0.9]
    lrs = [adjust_lr(losses[: k + 1], 1e-3, 2) for k in range(len(losses))]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(b == a or b == a / 2 for a, b in zip(lrs, lrs[1:]))


class _FakeScene:
    """Just enough surface for the sampler."""

    class _Far:
        num_frames = 100

    class _Spec:
        stft_config = FAST_CFG
        ref_index = 0

    far = [_Far()]
    spec = _Spec()


def test_strict_alternation_pattern():
    sampler = BatchSampler([_FakeScene()], [_FakeScene()], _toy_cfg(alternation=ALTERNATE_STRICT))
    rng = np.random.default_rng(0)
    origins = [sampler.next_batch(rng)[0].origin for _ in range(6)]
    assert origins == [ORIGIN_REAL, ORIGIN_SIMULATED] * 3


def test_proportional_sampling_matches_pool_sizes():
    real = [_FakeScene()] * 1600
    simu = [_FakeScene()] * 7138
    sampler = BatchSampler(real, simu, _toy_cfg(alternation=ALTERNATE_PROPORTIONAL))
    rng = np.random.default_rng(1)
    n = 100_000
    reals = sum(sampler.next_batch(rng)[0].origin == ORIGIN_REAL for _ in range(n))
    p = 1600 / 8738
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(reals - n * p) <= 3 * sigma


def test_single_pool_falls_back_to_that_origin():
    sampler = BatchSampler([], [_FakeScene()], _toy_cfg())
    rng = np.random.default_rng(2)
    assert sampler.next_batch(rng)[0].origin == ORIGIN_SIMULATED
    with pytest.raises(ValueError):
        BatchSampler([], [], _toy_cfg())


def test_segment_cropping_bounds():
    sampler = BatchSampler([_FakeScene()], [], _toy_cfg(segment_seconds=0.1))
    rng = np.random.default_rng(3)
    want = int(round(0.1 * FAST_CFG.sample_rate_hz / FAST_CFG.hop_samples))
    for _ in range(20):
        (b,) = sampler.next_batch(rng)
        assert b.num_frames == want
        assert 0 <= b.frame_offset <= 100 - b.num_frames


def test_loss_routing_by_origin():
    real, simu = scene_pools(2, 2)
    trainer = Trainer(_masknet(), TOY_TAPS, _toy_cfg(steps_per_epoch=4), real, simu)
    seen = set()
    for _ in range(4):
        (batch,) = trainer.next_batch()
        out = trainer.train_step(batch)
        seen.add(batch.origin)
        if batch.origin == ORIGIN_REAL:
            assert out.mc_ref is not None and out.sup_target is None
            assert out.mc_closetalk is not None
        else:
            assert out.sup_target is not None and out.mc_ref is None
    assert seen == {ORIGIN_REAL, ORIGIN_SIMULATED}


def test_supervised_stationary_point_leaves_params_unchanged():
    scene = toy_scene(5)
    pair = EstimatePair(scene.speech_ref, scene.noise_ref)
    params = init_free_variable(scene.speech_ref.data.shape, FAST_CFG, init_pair=pair)
    before = {k: v.detach().clone() for k, v in params.tensors.items()}
    cfg = _toy_cfg(segment_seconds=10.0, steps_per_epoch=1)  # full-length segments
    trainer = Trainer(params, TOY_TAPS, cfg, [], [scene])
    out = trainer.train_step(trainer.next_batch())
    assert out.total == 0.0
    for k, v in params.tensors.items():
        drift = (v.detach() - before[k]).abs().max()
        assert float(drift) <= 1e-12


def test_training_is_deterministic():
    def run():
        torch.manual_seed(0)
        real, simu = scene_pools(2, 2)
        trainer = Trainer(
            _masknet(seed=3),
            TOY_TAPS,
            _toy_cfg(steps_per_epoch=6, snr_augment=True),
            real,
            simu,
        )
        history = trainer.train()
        return history

    a, b = run(), run()
    assert a["log_lines"] == b["log_lines"]
    assert a["val_losses"] == b["val_losses"]
    assert a["lr_history"] == b["lr_history"]


def test_mixed_origin_batch_rejected():
    real, simu = scene_pools(1, 1)
    trainer = Trainer(_masknet(), TOY_TAPS, _toy_cfg(), real, simu)
    a = trainer.next_batch()[0]
    b = trainer.next_batch()[0]
    assert a.origin != b.origin
    with pytest.raises(ValueError):
        trainer.train_step([a, b])


def test_toy_run_improves_validation_loss():
    real, simu = scene_pools(4, 4, seed0=40)
    params = _masknet(seed=1, hidden=16)
    cfg = _toy_cfg(max_epochs=2, steps_per_epoch=8, seed=7)
    trainer = Trainer(params, TOY_TAPS, cfg, real, simu)
    initial = trainer.validate()
    history = trainer.train()
    assert history["val_losses"][-1] < initial
    # lr history never increases
    lrs = history["lr_history"]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_batch_size_two_runs_one_update_per_step():
    real, simu = scene_pools(2, 2)
    trainer = Trainer(_masknet(seed=2), TOY_TAPS, _toy_cfg(batch_size=2, steps_per_epoch=2), real, simu)
    trainer.run_epoch()
    assert trainer.step_count == 2
    assert len(trainer.log_lines) == 2


def test_no_closetalk_variant_drops_term():
    real, simu = scene_pools(1, 1)
    cfg = no_closetalk(TOY_TAPS)
    assert not cfg.uses_closetalk
    trainer = Trainer(_masknet(seed=4), cfg, _toy_cfg(steps_per_epoch=2), real, simu)
    for _ in range(2):
        (batch,) = trainer.next_batch()
        out = trainer.train_step(batch)
        if batch.origin == ORIGIN_REAL:
            assert out.mc_closetalk is None


def test_metric_log_format():
    real, simu = scene_pools(1, 1)
    trainer = Trainer(_masknet(seed=5), TOY_TAPS, _toy_cfg(steps_per_epoch=2, max_epochs=1), real, simu)
    trainer.train()
    log = trainer.metric_log()
    lines = log.strip().split("\n")
    assert lines[0] == "step\tsource\tmc_ref\tmc_nonref_sum\tmc_closetalk\ttotal"
    assert len(lines) == 3
    assert lines[1].startswith("0\treal\t")
    assert lines[2].startswith("1\tsimu\t")
    val_log = trainer.validation_log()
    assert val_log.startswith("epoch\tval_loss\tlr\n")

"""Co-learning loop: mixture-constraint steps on real-style scenes alternate
with supervised steps on simulated scenes, training one shared estimator.

Real batches carry mixtures only and contribute mixture-constraint terms;
simulated batches carry ground truth and contribute supervised terms, with
optional on-the-fly SNR augmentation of the speech part. One Adam update
per step; the learning rate halves when the validation loss has not
improved within the patience window.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import estimator as estimator_mod
from . import loss as loss_mod
from .fcp import TapConfig, apply_filter
from .loss import EstimatePair, LossBreakdown, MixtureSet
from .simulate import SceneTruth, sample_u, snr_gain
from .spectral import ComplexSpectrogram, consistency_project

ORIGIN_REAL = "real"
ORIGIN_SIMULATED = "simulated"

ALTERNATE_STRICT = "strict_alternate"
ALTERNATE_PROPORTIONAL = "proportional_sample"

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    lr_halving_patience_epochs: int = 2
    batch_size: int = 1
    segment_seconds: float = 8.0
    alternation: str = ALTERNATE_STRICT
    max_epochs: int = 2
    seed: int = 0
    steps_per_epoch: int | None = None
    snr_augment: bool = True
    grad_mode: str = loss_mod.GRAD_THROUGH_SOLVE
    consistency_projection: bool = False
    input_mics: int = 1
    checkpoint_every_steps: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.lr_halving_patience_epochs < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.input_mics < 1:
            raise ValueError("batch_size, max_epochs and input_mics must be >= 1")
        if self.segment_seconds <= 0:
            raise ValueError("segment_seconds must be positive")
        if self.alternation not in (ALTERNATE_STRICT, ALTERNATE_PROPORTIONAL):
            raise ValueError(f"unknown alternation {self.alternation!r}")


@dataclass(frozen=True)
class BatchDescriptor:
    origin: str
    scene_index: int
    frame_offset: int
    num_frames: int


def adjust_lr(val_losses, lr0: float, patience: int) -> float:
    """Current learning rate after the recorded validation history.

    The rate halves at every epoch whose best-so-far validation loss is at
    least `patience` epochs old; it never increases.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    lr = lr0
    best_epoch = 0
    best = float("inf")
    for epoch, v in enumerate(val_losses):
        if v < best:
            best, best_epoch = v, epoch
        if epoch - best_epoch >= patience:
            lr *= 0.5
    return lr


class BatchSampler:
    """Draws the per-step batch origin, scene, and segment crop."""

    def __init__(self, real_pool, simu_pool, cfg: TrainConfig):
        if not real_pool and not simu_pool:
            raise ValueError("both scene pools are empty")
        self.real_pool = real_pool
        self.simu_pool = simu_pool
        self.cfg = cfg
        self._step = 0

    def _segment(self, scene, rng) -> tuple:
        stft_cfg = scene.spec.stft_config
        total = scene.far[scene.spec.ref_index].num_frames
        want = int(round(self.cfg.segment_seconds * stft_cfg.sample_rate_hz / stft_cfg.hop_samples))
        n = min(total, max(want, 1))
        offset = int(rng.integers(0, total - n + 1))
        return offset, n

    def next_batch(self, rng, size: int = 1) -> list:
        """Descriptors for one training step; all items share the origin."""
        if not self.real_pool:
            origin = ORIGIN_SIMULATED
        elif not self.simu_pool:
            origin = ORIGIN_REAL
        elif self.cfg.alternation == ALTERNATE_STRICT:
            origin = ORIGIN_REAL if self._step % 2 == 0 else ORIGIN_SIMULATED
        else:
            p_real = len(self.real_pool) / (len(self.real_pool) + len(self.simu_pool))
            origin = ORIGIN_REAL if rng.random() < p_real else ORIGIN_SIMULATED
        self._step += 1
        pool = self.real_pool if origin == ORIGIN_REAL else self.simu_pool
        batch = []
        for _ in range(size):
            index = int(rng.integers(0, len(pool)))
            offset, n = self._segment(pool[index], rng)
            batch.append(BatchDescriptor(origin, index, offset, n))
        return batch


def _crop(spec: ComplexSpectrogram, offset: int, n: int) -> ComplexSpectrogram:
    return ComplexSpectrogram(spec.data[offset : offset + n], spec.config, None)


def _input_order(scene: SceneTruth, count: int) -> list:
    q = scene.spec.ref_index
    order = [q] + [i for i in range(len(scene.far)) if i != q]
    if count > len(order):
        raise ValueError(f"requested {count} input mics but the scene has {len(order)}")
    return order[:count]


class Trainer:
    def __init__(
        self,
        params: estimator_mod.EstimatorParams,
        tap_cfg: TapConfig,
        cfg: TrainConfig,
        real_pool,
        simu_pool,
        real_val=None,
        simu_val=None,
    ):
        self.params = params
        self.tap_cfg = tap_cfg
        self.cfg = cfg
        self.sampler = BatchSampler(real_pool, simu_pool, cfg)
        self.real_val = real_pool if real_val is None else real_val
        self.simu_val = simu_pool if simu_val is None else simu_val
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = torch.optim.Adam(
            params.parameter_list(), lr=cfg.lr0, betas=ADAM_BETAS, eps=ADAM_EPS
        )
        self.step_count = 0
        self.log_lines: list[str] = []
        self.val_losses: list[float] = []
        self.lr_history: list[float] = [cfg.lr0]

    # -- single-utterance loss construction ---------------------------------

    def _estimates_for(self, inputs) -> EstimatePair:
        pair = estimator_mod.forward(self.params, inputs)
        if self.cfg.consistency_projection:
            pair = EstimatePair(
                consistency_project(pair.speech), consistency_project(pair.noise)
            )
        return pair

    def _real_terms(self, scene: SceneTruth, offset: int, n: int) -> dict:
        use_ct = self.tap_cfg.uses_closetalk
        if use_ct and scene.closetalk is None:
            raise ValueError("tap config demands a close-talk mixture this scene lacks")
        far = [_crop(y, offset, n) for y in scene.far]
        closetalk = _crop(scene.closetalk, offset, n) if use_ct else None
        mixtures = MixtureSet(far, scene.spec.ref_index, closetalk)
        inputs = [far[i] for i in _input_order(scene, self.cfg.input_mics)]
        pair = self._estimates_for(inputs)
        return loss_mod.mc_loss_tensors(
            pair.speech.data, pair.noise.data, mixtures, self.tap_cfg, self.cfg.grad_mode
        )

    def _simulated_terms(self, scene: SceneTruth, offset: int, n: int, u_db: float | None) -> dict:
        q = scene.spec.ref_index
        gain = 1.0 if u_db is None else snr_gain(u_db)
        mic_order = _input_order(scene, self.cfg.input_mics)
        inputs = []
        for p in mic_order:
            if p == q:
                noise_part = scene.noise_ref.data
            else:
                noise_part = apply_filter(scene.cross_noise[p], scene.noise_ref.data)
            speech_part = scene.far[p].data - noise_part
            mixed = scene.far[p].with_data(gain * speech_part + noise_part)
            inputs.append(_crop(mixed, offset, n))
        pair = self._estimates_for(inputs)
        truth_speech = _crop(
            scene.speech_ref.with_data(scene.speech_ref.data * gain), offset, n
        )
        truth_noise = _crop(scene.noise_ref, offset, n)
        return loss_mod.supervised_loss_tensors(
            pair.speech.data, pair.noise.data, truth_speech, truth_noise, inputs[0]
        )

    # -- training ------------------------------------------------------------

    def next_batch(self) -> list:
        return self.sampler.next_batch(self.rng, self.cfg.batch_size)

    def train_step(self, batch) -> LossBreakdown:
        """One optimizer update from one batch; returns the loss breakdown.

        A batch is a BatchDescriptor or a same-origin list of them; with
        several items the step optimizes their mean loss.
        """
        items = [batch] if isinstance(batch, BatchDescriptor) else list(batch)
        origin = items[0].origin
        if any(b.origin != origin for b in items):
            raise ValueError("a batch must not mix real and simulated items")
        pool = self.sampler.real_pool if origin == ORIGIN_REAL else self.sampler.simu_pool

        mean_total = None
        accum: dict = {}
        for item in items:
            scene = pool[item.scene_index]
            if origin == ORIGIN_REAL:
                terms = self._real_terms(scene, item.frame_offset, item.num_frames)
                accum.setdefault("mc_ref", []).append(float(terms["ref"].detach()))
                accum.setdefault("mc_nonref", []).append(
                    tuple(float(t.detach()) for t in terms["nonref"])
                )
                if terms["closetalk"] is not None:
                    accum.setdefault("mc_closetalk", []).append(float(terms["closetalk"].detach()))
                if terms["ct_future_taps"] is not None:
                    accum.setdefault("ct_future_taps", []).append(terms["ct_future_taps"])
            else:
                u_db = sample_u(self.rng) if self.cfg.snr_augment else None
                terms = self._simulated_terms(scene, item.frame_offset, item.num_frames, u_db)
                accum.setdefault("sup_target", []).append(float(terms["target"].detach()))
                accum.setdefault("sup_nontarget", []).append(float(terms["nontarget"].detach()))
            part = terms["total"] / len(items)
            mean_total = part if mean_total is None else mean_total + part

        def mean_of(key):
            return float(np.mean(accum[key])) if key in accum else None

        if origin == ORIGIN_REAL:
            nonref = np.mean(np.array(accum["mc_nonref"]), axis=0)
            taps_seen = accum.get("ct_future_taps")
            breakdown = LossBreakdown(
                total=float(mean_total.detach()),
                mc_ref=mean_of("mc_ref"),
                mc_nonref=tuple(float(v) for v in nonref),
                mc_closetalk=mean_of("mc_closetalk"),
                ct_future_taps=taps_seen[0] if taps_seen else None,
            )
        else:
            breakdown = LossBreakdown(
                total=float(mean_total.detach()),
                sup_target=mean_of("sup_target"),
                sup_nontarget=mean_of("sup_nontarget"),
            )
        if not np.isfinite(breakdown.total):
            raise RuntimeError(
                f"non-finite loss {breakdown.total} at step {self.step_count} "
                f"({origin} scenes {[b.scene_index for b in items]})"
            )
        self.optimizer.zero_grad()
        mean_total.backward()
        self.optimizer.step()

        source = "real" if origin == ORIGIN_REAL else "simu"
        self.log_lines.append(breakdown.log_line(self.step_count, source))
        self.step_count += 1
        return breakdown

    def validate(self) -> float:
        """Mean mixture-constraint loss on held-out real-style scenes plus
        mean supervised loss on held-out simulated scenes, equally weighted."""
        pool_means = []
        with torch.no_grad():
            if self.real_val:
                vals = []
                for scene in self.real_val:
                    n = scene.far[scene.spec.ref_index].num_frames
                    terms = self._real_terms(scene, 0, n)
                    vals.append(float(terms["total"]))
                pool_means.append(float(np.mean(vals)))
            if self.simu_val:
                vals = []
                for scene in self.simu_val:
                    terms = self._simulated_terms(scene, 0, scene.speech_ref.num_frames, None)
                    vals.append(float(terms["total"]))
                pool_means.append(float(np.mean(vals)))
        if not pool_means:
            raise ValueError("no validation scenes")
        return float(np.mean(pool_means))

    def run_epoch(self, on_checkpoint=None) -> None:
        steps = self.cfg.steps_per_epoch
        if steps is None:
            steps = len(self.sampler.real_pool) + len(self.sampler.simu_pool)
        for _ in range(steps):
            self.train_step(self.next_batch())
            every = self.cfg.checkpoint_every_steps
            if on_checkpoint is not None and every > 0 and self.step_count % every == 0:
                on_checkpoint(self)

    def train(self, on_checkpoint=None) -> dict:
        for _ in range(self.cfg.max_epochs):
            self.run_epoch(on_checkpoint)
            self.val_losses.append(self.validate())
            lr = adjust_lr(self.val_losses, self.cfg.lr0, self.cfg.lr_halving_patience_epochs)
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            self.lr_history.append(lr)
        return {
            "log_lines": list(self.log_lines),
            "val_losses": list(self.val_losses),
            "lr_history": list(self.lr_history),
        }

    def metric_log(self) -> str:
        return loss_mod.LOG_HEADER + "\n" + "\n".join(self.log_lines) + "\n"

    def validation_log(self) -> str:
        lines = ["epoch\tval_loss\tlr"]
        for epoch, v in enumerate(self.val_losses):
            lines.append(f"{epoch}\t{v:.12g}\t{self.lr_history[epoch + 1]:.12g}")
        return "\n".join(lines) + "\n"


def no_closetalk(cfg: TapConfig) -> TapConfig:
    """The far-field-only loss variant (drops the close-talk term)."""
    return replace(cfg, ct_speech_past=None)

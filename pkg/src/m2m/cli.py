"""Command-line pipeline: scene generation, training, enhancement, evaluation.

Commands:
    m2m simulate --config cfg --out dir [--seed N]
    m2m train    --manifest file --config cfg --out dir
    m2m enhance  --checkpoint file --inputs in.wav --out out.wav [--reinforce-db G]
    m2m evaluate --manifest file --enhanced dir --out dir

Scenes are stored as versioned binary spectrogram bundles (base.m2mscn +
base.json) so the generated mixtures survive storage bit-exactly; the
manifest is JSON-lines, one utterance per record. Config files are flat
key=value text (see README for the key tables).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import estimator as estimator_mod
from . import trainer as trainer_mod
from .fcp import TapConfig
from .metrics import MetricReport, sdr, si_sdr, speaker_reinforce
from .simulate import (
    SceneSpec,
    TrueTaps,
    generate_scene,
    load_scene,
    save_scene,
    synth_speechlike,
)
from .spectral import ComplexSpectrogram, StftConfig, istft, stft

ROLE_REAL = "real"
ROLE_SIMULATED = "simulated"


# ---------------------------------------------------------------------------
# WAV I/O: 32-bit float, any channel count


def write_wav(path, sample_rate_hz: int, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    wavfile.write(str(path), sample_rate_hz, data)


def read_wav(path) -> tuple[int, np.ndarray]:
    rate, data = wavfile.read(str(path))
    data = np.asarray(data)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    else:
        data = data.astype(np.float64)
    return int(rate), data


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRecord:
    """One training/evaluation utterance.

    Component fields name the scene bundle (base path, no extension) each
    part loads from; real records never carry truth paths and simulated
    records always do.
    """

    utt_id: str
    role: str
    far: list
    ref_index: int = 0
    closetalk: str | None = None
    truth_speech: str | None = None
    truth_noise: str | None = None

    def validate(self) -> None:
        if self.role not in (ROLE_REAL, ROLE_SIMULATED):
            raise ValueError(f"{self.utt_id}: unknown role {self.role!r}")
        if not self.far:
            raise ValueError(f"{self.utt_id}: no far-field channels")
        if not 0 <= self.ref_index < len(self.far):
            raise ValueError(f"{self.utt_id}: ref_index out of range")
        has_truth = self.truth_speech is not None or self.truth_noise is not None
        if self.role == ROLE_REAL and has_truth:
            raise ValueError(f"{self.utt_id}: real records must not carry truth paths")
        if self.role == ROLE_SIMULATED and (self.truth_speech is None or self.truth_noise is None):
            raise ValueError(f"{self.utt_id}: simulated records must carry truth paths")


def save_manifest(path, records: list) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "id": r.utt_id,
                        "role": r.role,
                        "far": r.far,
                        "ref_index": r.ref_index,
                        "closetalk": r.closetalk,
                        "truth_speech": r.truth_speech,
                        "truth_noise": r.truth_noise,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_manifest(path) -> list:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            rec = ManifestRecord(
                utt_id=raw["id"],
                role=raw["role"],
                far=raw["far"],
                ref_index=raw.get("ref_index", 0),
                closetalk=raw.get("closetalk"),
                truth_speech=raw.get("truth_speech"),
                truth_noise=raw.get("truth_noise"),
            )
            rec.validate()
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# config files: flat key=value


def parse_config(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _get(cfg: dict, key: str, default, kind=str):
    if key not in cfg:
        return default
    raw = cfg[key]
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    return kind(raw)


def _tap_config_from(cfg: dict) -> TapConfig:
    ct_past_raw = cfg.get("ct_speech_past", "20")
    ct_speech_past = None if ct_past_raw.lower() == "none" else int(ct_past_raw)

    def future(key):
        raw = cfg.get(key, "4")
        return raw if raw == "estimate" else int(raw)

    span = _get(cfg, "ref_reverb_span", None, int)
    return TapConfig(
        ref_reverb_span=span,
        ref_reverb_delay=_get(cfg, "ref_reverb_delay", 3 if span else None, int),
        speech_past=_get(cfg, "speech_past", 20, int),
        speech_future=_get(cfg, "speech_future", 1, int),
        noise_past=_get(cfg, "noise_past", 20, int),
        noise_future=_get(cfg, "noise_future", 1, int),
        ct_speech_past=ct_speech_past,
        ct_speech_future=future("ct_speech_future"),
        ct_noise_past=_get(cfg, "ct_noise_past", 20, int),
        ct_noise_future=future("ct_noise_future"),
        weight_floor=_get(cfg, "weight_floor", 1e-2, float),
        max_future_search=_get(cfg, "max_future_search", 8, int),
        search_filter_len=_get(cfg, "search_filter_len", 3, int),
        ref_weight=_get(cfg, "ref_weight", 1.0, float),
        nonref_weight=_get(cfg, "nonref_weight", 0.2, float),
    )


# ---------------------------------------------------------------------------
# scene/manifest loading for training and evaluation


@dataclass
class UtteranceSpec:
    ref_index: int
    stft_config: StftConfig


@dataclass
class RealUtterance:
    """Mixtures-only view the trainer consumes for real-style records."""

    spec: UtteranceSpec
    far: list
    closetalk: ComplexSpectrogram | None


def _load_channels(base_or_wav: str, root: Path, stft_cfg: StftConfig | None):
    """A far-field entry is a scene bundle base path or a WAV file; WAVs
    contribute one spectrogram per channel."""
    path = root / base_or_wav
    if str(base_or_wav).endswith(".wav"):
        if stft_cfg is None:
            raise ValueError("an stft config is required to load WAV channels")
        rate, data = read_wav(path)
        if rate != stft_cfg.sample_rate_hz:
            raise ValueError(f"{path}: sample rate {rate} != config {stft_cfg.sample_rate_hz}")
        if data.ndim == 1:
            data = data[:, None]
        return [stft(data[:, c], stft_cfg) for c in range(data.shape[1])]
    truth = load_scene(path)
    return list(truth.far)


def _scene_cache_load(cache: dict, base: str, root: Path):
    if base not in cache:
        cache[base] = load_scene(root / base)
    return cache[base]


def load_pools(records: list, manifest_dir: Path, stft_cfg: StftConfig | None = None):
    """Build the real/simulated scene pools the trainer consumes."""
    cache: dict = {}
    real, simu = [], []
    for rec in records:
        rec.validate()
        if rec.role == ROLE_SIMULATED:
            truth = _scene_cache_load(cache, rec.truth_speech, manifest_dir)
            simu.append(truth)
            continue
        if len(rec.far) == 1 and not str(rec.far[0]).endswith(".wav"):
            truth = _scene_cache_load(cache, rec.far[0], manifest_dir)
            far = list(truth.far)
            cfg = truth.spec.stft_config
            closetalk = truth.closetalk if rec.closetalk is not None else None
        else:
            far = []
            for entry in rec.far:
                far.extend(_load_channels(entry, manifest_dir, stft_cfg))
            cfg = far[0].config
            closetalk = None
            if rec.closetalk is not None:
                closetalk = _load_channels(rec.closetalk, manifest_dir, cfg)[0]
        real.append(RealUtterance(UtteranceSpec(rec.ref_index, cfg), far, closetalk))
    return real, simu


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(config_path, out_dir, seed: int = 0) -> list:
    """Generate seeded scenes plus the manifest; returns the records."""
    cfg = parse_config(config_path)
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)

    n_scenes = _get(cfg, "scenes", 8, int)
    rate = _get(cfg, "sample_rate_hz", 16000, int)
    stft_cfg = StftConfig(
        rate,
        _get(cfg, "win_samples", int(round(0.032 * rate)), int),
        _get(cfg, "hop_samples", int(round(0.008 * rate)), int),
    )
    seconds = _get(cfg, "seconds", 1.0, float)
    num_far = _get(cfg, "far_mics", 2, int)
    real_fraction = _get(cfg, "real_fraction", 0.5, float)
    with_closetalk = _get(cfg, "closetalk", True, bool)
    snr_low = _get(cfg, "snr_db_low", -5.0, float)
    snr_high = _get(cfg, "snr_db_high", 5.0, float)
    adv_low = _get(cfg, "advance_low", 0, int)
    adv_high = _get(cfg, "advance_high", 4, int)
    taps = TrueTaps(
        ref_reverb_span=_get(cfg, "true_reverb_span", 0, int),
        ref_reverb_delay=_get(cfg, "true_reverb_delay", 1, int),
        cross_speech_past=_get(cfg, "true_cross_past", 3, int),
        cross_speech_future=_get(cfg, "true_cross_future", 1, int),
        cross_noise_past=_get(cfg, "true_cross_past", 3, int),
        cross_noise_future=_get(cfg, "true_cross_future", 1, int),
        ct_speech_past=_get(cfg, "true_ct_past", 3, int),
        ct_noise_past=_get(cfg, "true_ct_past", 3, int),
    )

    master = np.random.default_rng(seed)
    n_samples = int(seconds * rate)
    n_real = int(round(real_fraction * n_scenes))
    records = []
    for i in range(n_scenes):
        scene_seed = int(master.integers(0, 2**62))
        rng = np.random.default_rng(scene_seed)
        speech = synth_speechlike(rng, n_samples, rate)
        noise = rng.standard_normal(n_samples)
        spec = SceneSpec(
            speech_source=speech,
            noise_source=noise,
            num_far_mics=num_far,
            true_taps=taps,
            filter_seed=scene_seed,
            snr_db=float(rng.uniform(snr_low, snr_high)),
            closetalk_advance_frames=int(rng.integers(adv_low, adv_high + 1)),
            stft_config=stft_cfg,
        )
        truth = generate_scene(spec)
        base = f"scenes/scene_{i:04d}"
        save_scene(out / base, truth)
        utt_id = f"scene_{i:04d}"
        if i < n_real:
            records.append(
                ManifestRecord(
                    utt_id,
                    ROLE_REAL,
                    far=[base],
                    ref_index=spec.ref_index,
                    closetalk=base if with_closetalk else None,
                )
            )
        else:
            records.append(
                ManifestRecord(
                    utt_id,
                    ROLE_SIMULATED,
                    far=[base],
                    ref_index=spec.ref_index,
                    truth_speech=base,
                    truth_noise=base,
                )
            )
    save_manifest(out / "manifest.jsonl", records)
    return records


def cmd_train(manifest_path, config_path, out_dir) -> dict:
    """Run co-learning from a manifest; writes logs and the checkpoint."""
    cfg = parse_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest_path)
    manifest_dir = Path(manifest_path).parent
    real, simu = load_pools(records, manifest_dir)
    if not real and not simu:
        raise ValueError("manifest holds no usable records")

    tap_cfg = _tap_config_from(cfg)
    if real and any(u.closetalk is None for u in real) and tap_cfg.uses_closetalk:
        # close-talk-free records train the far-field-only variant
        tap_cfg = trainer_mod.no_closetalk(tap_cfg)

    sample = (real[0].far[0] if real else simu[0].far[0]).config
    train_cfg = trainer_mod.TrainConfig(
        lr0=_get(cfg, "lr0", 1e-3, float),
        lr_halving_patience_epochs=_get(cfg, "patience", 2, int),
        batch_size=_get(cfg, "batch_size", 1, int),
        segment_seconds=_get(cfg, "segment_seconds", 8.0, float),
        alternation=_get(cfg, "alternation", trainer_mod.ALTERNATE_STRICT),
        max_epochs=_get(cfg, "max_epochs", 2, int),
        seed=_get(cfg, "seed", 0, int),
        steps_per_epoch=_get(cfg, "steps_per_epoch", None, int),
        snr_augment=_get(cfg, "snr_augment", True, bool),
        grad_mode=_get(cfg, "grad_mode", "through"),
        consistency_projection=_get(cfg, "consistency_projection", False, bool),
        input_mics=_get(cfg, "input_mics", 1, int),
        checkpoint_every_steps=_get(cfg, "checkpoint_every", 0, int),
    )

    mode = _get(cfg, "estimator", "masknet")
    if mode == "masknet":
        params = estimator_mod.init_masknet(
            sample.num_bins,
            train_cfg.input_mics,
            hidden=_get(cfg, "hidden", 32, int),
            stft=sample,
            seed=train_cfg.seed,
        )
    elif mode == "free_variable":
        ref = (real[0] if real else simu[0]).far[0]
        params = estimator_mod.init_free_variable(
            ref.data.shape, sample, seed=train_cfg.seed, scale=_get(cfg, "init_scale", 0.1, float)
        )
    else:
        raise ValueError(f"unknown estimator {mode!r}")

    val_fraction = _get(cfg, "val_fraction", 0.0, float)

    def split(pool):
        if val_fraction <= 0.0 or len(pool) < 2:
            return pool, None
        n_val = max(1, int(round(val_fraction * len(pool))))
        return pool[:-n_val], pool[-n_val:]

    real_train, real_val = split(real)
    simu_train, simu_val = split(simu)

    trainer = trainer_mod.Trainer(
        params, tap_cfg, train_cfg, real_train, simu_train, real_val, simu_val
    )

    def checkpoint_hook(tr):
        estimator_mod.save_checkpoint(out / f"checkpoint_step{tr.step_count:06d}.m2mckp", params)

    history = trainer.train(on_checkpoint=checkpoint_hook)
    (out / "log.tsv").write_text(trainer.metric_log())
    (out / "val.tsv").write_text(trainer.validation_log())
    estimator_mod.save_checkpoint(out / "checkpoint.m2mckp", params)
    return history


def cmd_enhance(checkpoint_path, input_wavs: list, out_path, reinforce_db: float | None = None) -> np.ndarray:
    """Enhance WAV input(s) with a trained checkpoint; writes one WAV."""
    params = estimator_mod.load_checkpoint(checkpoint_path)
    cfg = params.stft
    channels: list[np.ndarray] = []
    rate = None
    for path in input_wavs:
        r, data = read_wav(path)
        if rate is None:
            rate = r
        elif r != rate:
            raise ValueError("input WAVs disagree on the sample rate")
        if data.ndim == 1:
            data = data[:, None]
        channels.extend(data[:, c] for c in range(data.shape[1]))
    if rate != cfg.sample_rate_hz:
        raise ValueError(f"input rate {rate} != checkpoint rate {cfg.sample_rate_hz}")
    if params.mode == estimator_mod.MODE_MASKNET and len(channels) != params.num_input_mics:
        raise ValueError(
            f"checkpoint expects {params.num_input_mics} input channels, got {len(channels)}"
        )
    mics = [stft(ch, cfg) for ch in channels]
    pair = estimator_mod.forward(params, mics)
    enhanced = istft(pair.speech).detach().numpy()
    if reinforce_db is not None:
        enhanced = speaker_reinforce(enhanced, channels[0], reinforce_db)
    write_wav(out_path, cfg.sample_rate_hz, enhanced)
    return enhanced


def cmd_evaluate(manifest_path, enhanced_dir, out_dir) -> MetricReport:
    """Score enhanced WAVs against manifest truth; writes TSV and JSON."""
    records = [r for r in load_manifest(manifest_path) if r.role == ROLE_SIMULATED]
    if not records:
        raise ValueError("manifest holds no records with truth to evaluate against")
    manifest_dir = Path(manifest_path).parent
    enhanced_dir = Path(enhanced_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    report = MetricReport()
    for rec in records:
        truth = _scene_cache_load(cache, rec.truth_speech, manifest_dir)
        reference = istft(truth.speech_ref).numpy()
        wav_path = enhanced_dir / f"{rec.utt_id}.wav"
        if not wav_path.exists():
            raise FileNotFoundError(f"missing enhanced file {wav_path}")
        rate, estimate = read_wav(wav_path)
        if estimate.ndim > 1:
            estimate = estimate[:, 0]
        n = min(reference.size, estimate.size)
        report.add(rec.utt_id, si_sdr(reference[:n], estimate[:n]), sdr(reference[:n], estimate[:n]))
    (out / "metrics.tsv").write_text(report.to_tsv())
    (out / "metrics.json").write_text(report.to_json() + "\n")
    return report


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="m2m", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic scenes and a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run co-learning from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("enhance", help="enhance WAV input with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reinforce-db", type=float, default=None)

    p = sub.add_parser("evaluate", help="score enhanced files against truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--enhanced", required=True)
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "simulate":
        cmd_simulate(args.config, args.out, args.seed)
    elif args.command == "train":
        cmd_train(args.manifest, args.config, args.out)
    elif args.command == "enhance":
        cmd_enhance(args.checkpoint, args.inputs, args.out, args.reinforce_db)
    elif args.command == "evaluate":
        cmd_evaluate(args.manifest, args.enhanced, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

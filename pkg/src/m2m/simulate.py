"""Synthetic multi-microphone scenes with exactly-known mixing filters.

Every mixture is built, in the STFT domain, by applying per-frequency FIR
filters along frames to a speech and a noise source spectrogram, so the
narrowband mixing model holds with zero modeling error and the true
sources/filters are available as oracles. Filters are drawn from a seeded
complex Gaussian with geometric tap decay around a dominant tap.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .fcp import FilterBank, TapWindow, apply_filter
from .loss import MixtureSet
from .spectral import ComplexSpectrogram, StftConfig, default_stft_config, stft

TAP_DECAY = 0.7  # geometric magnitude decay per tap away from the dominant one
SIDE_AMP = 0.4  # non-dominant taps scale, relative to the dominant tap
REVERB_AMP = 0.5  # first reverb tap, relative to the direct path
CT_NOISE_GAIN = 0.15  # noise attenuation at the close-talk microphone


@dataclass(frozen=True)
class TrueTaps:
    """Tap counts of the ground-truth mixing filters. Zero counts degrade
    the corresponding filter to a unit pass-through (ref reverb: absent)."""

    ref_reverb_span: int = 0
    ref_reverb_delay: int = 1
    cross_speech_past: int = 3
    cross_speech_future: int = 1
    cross_noise_past: int = 3
    cross_noise_future: int = 1
    ct_speech_past: int = 3
    ct_speech_future: int = 0
    ct_noise_past: int = 3
    ct_noise_future: int = 0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ref_reverb_span and self.ref_reverb_span <= self.ref_reverb_delay:
            raise ValueError("reverb span must exceed the delay when present")

    def max_span(self) -> int:
        spans = [
            self.ref_reverb_span,
            self.cross_speech_past + self.cross_speech_future,
            self.cross_noise_past + self.cross_noise_future,
            self.ct_speech_past + self.ct_speech_future,
            self.ct_noise_past + self.ct_noise_future,
        ]
        return max(spans)


@dataclass
class SceneSpec:
    """Everything needed to render one scene deterministically."""

    speech_source: np.ndarray
    noise_source: np.ndarray
    num_far_mics: int = 2
    ref_index: int = 0
    true_taps: TrueTaps = field(default_factory=TrueTaps)
    filter_seed: int = 0
    snr_db: float = 0.0
    closetalk_advance_frames: int = 0
    stft_config: StftConfig = field(default_factory=default_stft_config)

    def __post_init__(self):
        self.speech_source = np.asarray(self.speech_source, dtype=np.float64)
        self.noise_source = np.asarray(self.noise_source, dtype=np.float64)
        if self.num_far_mics < 1:
            raise ValueError("need at least one far-field microphone")
        if not 0 <= self.ref_index < self.num_far_mics:
            raise ValueError("ref_index out of range")
        if self.closetalk_advance_frames < 0:
            raise ValueError("closetalk_advance_frames must be >= 0")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


@dataclass
class SceneTruth:
    """Rendered mixtures plus the sources and filters that made them."""

    spec: SceneSpec
    speech_ref: ComplexSpectrogram
    noise_ref: ComplexSpectrogram
    far: list
    closetalk: ComplexSpectrogram
    ref_reverb: FilterBank | None
    cross_speech: dict
    cross_noise: dict
    ct_speech: FilterBank
    ct_noise: FilterBank

    def mixtures(self, include_closetalk: bool = True) -> MixtureSet:
        return MixtureSet(
            far=list(self.far),
            ref_index=self.spec.ref_index,
            closetalk=self.closetalk if include_closetalk else None,
        )


def synth_speechlike(
    rng: np.random.Generator,
    num_samples: int,
    sample_rate_hz: int,
    f0_hz: float | None = None,
    num_harmonics: int = 7,
) -> np.ndarray:
    """Speech-like test source: a harmonic comb under a syllabic-rate
    amplitude envelope plus a weak co-modulated noise floor. Broadband
    enough that frame-domain filters acting on it are identifiable."""
    if f0_hz is None:
        f0_hz = float(rng.uniform(120.0, 260.0))
    t = np.arange(num_samples) / sample_rate_hz
    env = 0.25 + 0.75 * np.sin(2 * np.pi * 9.0 * t + rng.uniform(0, 2 * np.pi)) ** 2
    voiced = sum(
        np.sin(2 * np.pi * f0_hz * k * t + rng.uniform(0, 2 * np.pi)) / k
        for k in range(1, num_harmonics + 1)
    )
    return env * (voiced + 0.4 * rng.standard_normal(num_samples))


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _random_bank(
    rng: np.random.Generator,
    num_bins: int,
    window: TapWindow,
    dominant_lag: int,
    dominant: np.ndarray | float,
) -> FilterBank:
    """Filter bank with a fixed dominant tap and decaying random side taps."""
    lags = np.array(list(window.lags))
    taps = np.zeros((num_bins, len(lags)), dtype=np.complex128)
    for k, lag in enumerate(lags):
        dist = abs(int(lag) - dominant_lag)
        if dist == 0:
            taps[:, k] = dominant
        else:
            taps[:, k] = dominant * SIDE_AMP * TAP_DECAY ** (dist - 1) * _complex_normal(rng, num_bins)
    return FilterBank(taps, window)


def _passthrough(num_bins: int, lag: int = 0) -> FilterBank:
    window = TapWindow(past=1, future=0, delay=-lag)
    return FilterBank(np.ones((num_bins, 1), dtype=np.complex128), window)


def _energy(x: torch.Tensor) -> float:
    return float((x.real**2 + x.imag**2).sum())


def generate_scene(spec: SceneSpec) -> SceneTruth:
    """Render the far-field and close-talk mixtures of one scene.

    The reference mixture is speech image (direct path plus optional
    filtered reverb) plus noise; other microphones apply cross filters to
    the reference-mic sources; the close-talk speech filter has its
    dominant tap advanced by the configured frame count. Noise is scaled
    so the reference-mic speech-to-noise energy ratio meets snr_db.
    """
    cfg = spec.stft_config
    taps = spec.true_taps
    if spec.speech_source.size == 0 or spec.noise_source.size == 0:
        raise ValueError("empty source signal")
    if not np.any(spec.speech_source) or not np.any(spec.noise_source):
        raise ValueError("zero-energy source signal")

    speech = stft(spec.speech_source, cfg)
    noise_raw = stft(spec.noise_source, cfg)
    if noise_raw.num_frames != speech.num_frames:
        raise ValueError("speech and noise sources must have equal length")
    T = speech.num_frames
    needed = max(taps.max_span() + spec.closetalk_advance_frames, 1)
    if T < 2 * needed:
        raise ValueError(f"sources too short: {T} frames for tap span {needed}")

    F_bins = cfg.num_bins
    rng = np.random.default_rng(spec.filter_seed)

    # reference-mic reverb filter on the direct-path speech
    ref_reverb = None
    if taps.ref_reverb_span > 0:
        window = TapWindow(
            past=taps.ref_reverb_span - taps.ref_reverb_delay,
            future=0,
            delay=taps.ref_reverb_delay,
        )
        ref_reverb = _random_bank(rng, F_bins, window, -taps.ref_reverb_delay, REVERB_AMP)
        # the reverb bank has no unit tap; its "dominant" is the earliest one
    speech_image = speech.data
    if ref_reverb is not None:
        speech_image = speech_image + apply_filter(ref_reverb, speech.data)

    # scale the noise source so the reference-mic SNR is exact
    speech_energy = _energy(speech_image)
    noise_energy = _energy(noise_raw.data)
    gain = np.sqrt(speech_energy / (noise_energy * 10.0 ** (spec.snr_db / 10.0)))
    noise = noise_raw.with_data(noise_raw.data * gain)

    y_ref = speech.with_data(speech_image + noise.data)

    cross_speech, cross_noise, far = {}, {}, []
    for p in range(spec.num_far_mics):
        if p == spec.ref_index:
            far.append(y_ref)
            continue
        n_s = taps.cross_speech_past + taps.cross_speech_future
        if n_s == 0:
            h_p = _passthrough(F_bins)
        else:
            h_p = _random_bank(
                rng,
                F_bins,
                TapWindow(past=taps.cross_speech_past, future=taps.cross_speech_future),
                0,
                1.0,
            )
        n_v = taps.cross_noise_past + taps.cross_noise_future
        if n_v == 0:
            r_p = _passthrough(F_bins)
        else:
            phase = np.exp(2j * np.pi * rng.random(F_bins))
            r_p = _random_bank(
                rng,
                F_bins,
                TapWindow(past=taps.cross_noise_past, future=taps.cross_noise_future),
                0,
                phase,
            )
        cross_speech[p] = h_p
        cross_noise[p] = r_p
        far.append(speech.with_data(apply_filter(h_p, speech.data) + apply_filter(r_p, noise.data)))

    # close-talk: speech filter support shifted toward future taps by the
    # advance; noise reaches the close-talk mic attenuated
    adv = spec.closetalk_advance_frames
    n_cs = taps.ct_speech_past + taps.ct_speech_future
    if n_cs == 0:
        ct_speech = _passthrough(F_bins, lag=adv)
    else:
        window = TapWindow(past=taps.ct_speech_past, future=taps.ct_speech_future, delay=-adv)
        ct_speech = _random_bank(rng, F_bins, window, adv, 1.0)
    n_cv = taps.ct_noise_past + taps.ct_noise_future
    if n_cv == 0:
        ct_noise = _passthrough(F_bins)
    else:
        phase = CT_NOISE_GAIN * np.exp(2j * np.pi * rng.random(F_bins))
        ct_noise = _random_bank(
            rng,
            F_bins,
            TapWindow(past=taps.ct_noise_past, future=taps.ct_noise_future),
            0,
            phase,
        )
    closetalk = speech.with_data(
        apply_filter(ct_speech, speech.data) + apply_filter(ct_noise, noise.data)
    )

    return SceneTruth(
        spec=spec,
        speech_ref=speech,
        noise_ref=noise,
        far=far,
        closetalk=closetalk,
        ref_reverb=ref_reverb,
        cross_speech=cross_speech,
        cross_noise=cross_noise,
        ct_speech=ct_speech,
        ct_noise=ct_noise,
    )


def snr_gain(u_db: float) -> float:
    if not np.isfinite(u_db):
        raise ValueError("u_db must be finite")
    return 10.0 ** (u_db / 20.0)


def snr_augment(speech: ComplexSpectrogram, noise: ComplexSpectrogram, u_db: float) -> ComplexSpectrogram:
    """Re-mix the same speech/noise pair with the speech shifted by u_db."""
    if speech.data.shape != noise.data.shape:
        raise ValueError("speech and noise shapes differ")
    return speech.with_data(speech.data * snr_gain(u_db) + noise.data)


SNR_AUGMENT_LOW_DB = -10.0
SNR_AUGMENT_HIGH_DB = 5.0


def sample_u(rng: np.random.Generator) -> float:
    """Per-step SNR offset, uniform over the augmentation range."""
    return float(rng.uniform(SNR_AUGMENT_LOW_DB, SNR_AUGMENT_HIGH_DB))


# ---------------------------------------------------------------------------
# serialization: versioned binary array container + JSON sidecar

_SCENE_MAGIC = b"M2MSCN1\x00"
_KIND_C128 = 0
_KIND_F64 = 1


def _write_arrays(path, arrays: dict) -> None:
    with open(path, "wb") as f:
        f.write(_SCENE_MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype == np.complex128:
                kind = _KIND_C128
            elif arr.dtype == np.float64:
                kind = _KIND_F64
            else:
                raise ValueError(f"unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BI", kind, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_arrays(path) -> dict:
    arrays = {}
    with open(path, "rb") as f:
        if f.read(len(_SCENE_MAGIC)) != _SCENE_MAGIC:
            raise ValueError(f"{path}: not a scene array file")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            kind, ndim = struct.unpack("<BI", f.read(5))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            dtype = np.complex128 if kind == _KIND_C128 else np.float64
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(n_items * dtype().itemsize), dtype=dtype)
            arrays[name] = data.reshape(shape).copy()
    return arrays


def _bank_to_entries(prefix: str, bank: FilterBank | None, arrays: dict, meta: dict) -> None:
    if bank is None:
        return
    arrays[prefix] = bank.numpy()
    meta[prefix] = [bank.window.past, bank.window.future, bank.window.delay]


def _bank_from_entries(prefix: str, arrays: dict, meta: dict) -> FilterBank | None:
    if prefix not in arrays:
        return None
    past, future, delay = meta[prefix]
    return FilterBank(arrays[prefix], TapWindow(past, future, delay))


def save_scene(path_base, truth: SceneTruth) -> None:
    """Write <base>.m2mscn (arrays) and <base>.json (scene description)."""
    path_base = str(path_base)
    spec = truth.spec
    arrays = {
        "speech_source": spec.speech_source,
        "noise_source": spec.noise_source,
        "speech_ref": truth.speech_ref.numpy(),
        "noise_ref": truth.noise_ref.numpy(),
        "closetalk": truth.closetalk.numpy(),
    }
    for p, y in enumerate(truth.far):
        arrays[f"far_{p}"] = y.numpy()
    windows: dict = {}
    _bank_to_entries("filter_ref_reverb", truth.ref_reverb, arrays, windows)
    _bank_to_entries("filter_ct_speech", truth.ct_speech, arrays, windows)
    _bank_to_entries("filter_ct_noise", truth.ct_noise, arrays, windows)
    for p in truth.cross_speech:
        _bank_to_entries(f"filter_cross_speech_{p}", truth.cross_speech[p], arrays, windows)
        _bank_to_entries(f"filter_cross_noise_{p}", truth.cross_noise[p], arrays, windows)
    _write_arrays(path_base + ".m2mscn", arrays)

    cfg = spec.stft_config
    sidecar = {
        "format": "M2MSCN1",
        "num_far_mics": spec.num_far_mics,
        "ref_index": spec.ref_index,
        "filter_seed": spec.filter_seed,
        "snr_db": spec.snr_db,
        "closetalk_advance_frames": spec.closetalk_advance_frames,
        "true_taps": asdict(spec.true_taps),
        "stft": {
            "sample_rate_hz": cfg.sample_rate_hz,
            "win_len_samples": cfg.win_len_samples,
            "hop_samples": cfg.hop_samples,
            "fft_size": cfg.fft_size,
        },
        "num_samples": int(spec.speech_source.size),
        "filter_windows": windows,
    }
    with open(path_base + ".json", "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")


def load_scene(path_base) -> SceneTruth:
    path_base = str(path_base)
    with open(path_base + ".json") as f:
        sidecar = json.load(f)
    arrays = _read_arrays(path_base + ".m2mscn")
    stft_meta = sidecar["stft"]
    cfg = StftConfig(
        sample_rate_hz=stft_meta["sample_rate_hz"],
        win_len_samples=stft_meta["win_len_samples"],
        hop_samples=stft_meta["hop_samples"],
        fft_size=stft_meta["fft_size"],
    )
    spec = SceneSpec(
        speech_source=arrays["speech_source"],
        noise_source=arrays["noise_source"],
        num_far_mics=sidecar["num_far_mics"],
        ref_index=sidecar["ref_index"],
        true_taps=TrueTaps(**sidecar["true_taps"]),
        filter_seed=sidecar["filter_seed"],
        snr_db=sidecar["snr_db"],
        closetalk_advance_frames=sidecar["closetalk_advance_frames"],
        stft_config=cfg,
    )
    n = sidecar["num_samples"]

    def spec_of(name):
        return ComplexSpectrogram(arrays[name], cfg, num_samples=n)

    windows = sidecar["filter_windows"]
    far = [spec_of(f"far_{p}") for p in range(spec.num_far_mics)]
    cross_speech, cross_noise = {}, {}
    for p in range(spec.num_far_mics):
        if p == spec.ref_index:
            continue
        cross_speech[p] = _bank_from_entries(f"filter_cross_speech_{p}", arrays, windows)
        cross_noise[p] = _bank_from_entries(f"filter_cross_noise_{p}", arrays, windows)
    return SceneTruth(
        spec=spec,
        speech_ref=spec_of("speech_ref"),
        noise_ref=spec_of("noise_ref"),
        far=far,
        closetalk=spec_of("closetalk"),
        ref_reverb=_bank_from_entries("filter_ref_reverb", arrays, windows),
        cross_speech=cross_speech,
        cross_noise=cross_noise,
        ct_speech=_bank_from_entries("filter_ct_speech", arrays, windows),
        ct_noise=_bank_from_entries("filter_ct_noise", arrays, windows),
    )

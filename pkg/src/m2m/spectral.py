"""STFT analysis/synthesis and the iSTFT-STFT consistency projection.

Analysis uses a square-root Hann window (32 ms window / 8 ms hop at the
default 16 kHz rate), synthesis the same window with overlap-add, so the
window product satisfies constant-overlap-add and interior reconstruction
is exact. Signals are zero-padded by (win - hop) on both sides so every
original sample receives full window coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

WINDOW_SQRT_HANN = "sqrt_hann"

_REAL_DTYPE = torch.float64
_COMPLEX_DTYPE = torch.complex128


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters. fft_size defaults to the window length."""

    sample_rate_hz: int
    win_len_samples: int
    hop_samples: int
    window: str = WINDOW_SQRT_HANN
    fft_size: int = 0

    def __post_init__(self):
        if self.fft_size == 0:
            object.__setattr__(self, "fft_size", self.win_len_samples)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.win_len_samples <= 0 or self.hop_samples <= 0:
            raise ValueError("window and hop must be positive")
        if self.hop_samples > self.win_len_samples:
            raise ValueError("hop must not exceed the window length")
        if self.win_len_samples % self.hop_samples != 0:
            raise ValueError("hop must divide the window length")
        if self.fft_size < self.win_len_samples:
            raise ValueError("fft_size must be >= win_len_samples")
        if self.window != WINDOW_SQRT_HANN:
            raise ValueError(f"unsupported window: {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        # zero padding applied to each end before framing
        return self.win_len_samples - self.hop_samples


def default_stft_config(sample_rate_hz: int = 16000) -> StftConfig:
    """32 ms window, 8 ms hop (512/128 samples at 16 kHz)."""
    win = int(round(0.032 * sample_rate_hz))
    hop = int(round(0.008 * sample_rate_hz))
    return StftConfig(sample_rate_hz, win, hop)


def sqrt_hann(win_len: int, dtype=_REAL_DTYPE) -> torch.Tensor:
    """Square root of the periodic Hann window."""
    n = torch.arange(win_len, dtype=dtype)
    hann = 0.5 - 0.5 * torch.cos(2.0 * math.pi * n / win_len)
    return torch.sqrt(hann)


@dataclass
class ComplexSpectrogram:
    """T x F complex spectrogram plus the framing metadata that produced it.

    num_samples remembers the original signal length so istft can undo the
    edge padding exactly; None means the canonical length implied by the
    frame count.
    """

    data: torch.Tensor
    config: StftConfig
    num_samples: int | None = field(default=None)

    def __post_init__(self):
        if not torch.is_tensor(self.data):
            self.data = torch.as_tensor(np.asarray(self.data), dtype=_COMPLEX_DTYPE)
        if self.data.dtype != _COMPLEX_DTYPE:
            self.data = self.data.to(_COMPLEX_DTYPE)
        if self.data.ndim != 2:
            raise ValueError(f"spectrogram must be T x F, got shape {tuple(self.data.shape)}")
        if self.data.shape[1] != self.config.num_bins:
            raise ValueError(
                f"bin count {self.data.shape[1]} inconsistent with fft_size "
                f"{self.config.fft_size} (expected {self.config.num_bins})"
            )
        if not bool(torch.isfinite(self.data.detach().real).all()) or not bool(
            torch.isfinite(self.data.detach().imag).all()
        ):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()

    def with_data(self, data: torch.Tensor) -> "ComplexSpectrogram":
        """Same metadata, new T x F payload."""
        return ComplexSpectrogram(data, self.config, self.num_samples)


def _canonical_length(num_frames: int, cfg: StftConfig) -> int:
    return (num_frames - 1) * cfg.hop_samples + cfg.win_len_samples - 2 * cfg.pad


def stft(signal, cfg: StftConfig) -> ComplexSpectrogram:
    """Analyze a real 1-D signal into a one-sided T x F spectrogram."""
    if not torch.is_tensor(signal):
        signal = torch.as_tensor(np.asarray(signal), dtype=_REAL_DTYPE)
    if signal.dtype != _REAL_DTYPE:
        signal = signal.to(_REAL_DTYPE)
    if signal.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    n = signal.shape[0]
    if n == 0:
        raise ValueError("empty signal")

    win, hop = cfg.win_len_samples, cfg.hop_samples
    padded_len = n + 2 * cfg.pad
    num_frames = max(1, math.ceil((padded_len - win) / hop) + 1)
    total = (num_frames - 1) * hop + win
    signal = F.pad(signal.unsqueeze(0), (cfg.pad, cfg.pad + (total - padded_len))).squeeze(0)

    frames = signal.unfold(0, win, hop)  # (T, win)
    frames = frames * sqrt_hann(win)
    data = torch.fft.rfft(frames, n=cfg.fft_size, dim=1)  # (T, F)
    return ComplexSpectrogram(data, cfg, num_samples=n)


def istft(spec: ComplexSpectrogram) -> torch.Tensor:
    """Overlap-add synthesis; inverse of stft on the original sample range."""
    cfg = spec.config
    win, hop = cfg.win_len_samples, cfg.hop_samples
    frames = torch.fft.irfft(spec.data, n=cfg.fft_size, dim=1)[:, :win]  # (T, win)
    window = sqrt_hann(win)
    frames = frames * window

    num_frames = spec.num_frames
    total = (num_frames - 1) * hop + win
    # overlap-add via fold; the squared-window envelope normalizes the COLA sum
    stacked = frames.T.unsqueeze(0)  # (1, win, T)
    out = F.fold(stacked, output_size=(1, total), kernel_size=(1, win), stride=(1, hop))
    out = out.reshape(total)
    env = F.fold(
        (window**2).unsqueeze(1).expand(win, num_frames).unsqueeze(0),
        output_size=(1, total),
        kernel_size=(1, win),
        stride=(1, hop),
    ).reshape(total)
    out = out / torch.clamp(env, min=1e-12)

    n_out = spec.num_samples if spec.num_samples is not None else _canonical_length(num_frames, cfg)
    if n_out < 0 or cfg.pad + n_out > total:
        raise ValueError("spectrogram metadata inconsistent with frame count")
    return out[cfg.pad : cfg.pad + n_out]


def consistency_project(spec: ComplexSpectrogram) -> ComplexSpectrogram:
    """Project onto the subspace of spectrograms realizable by some signal.

    Computed as stft(istft(spec)); idempotent, and the identity on
    spectrograms that already came from stft of a signal.
    """
    projected = stft(istft(spec), spec.config)
    if projected.num_frames != spec.num_frames:
        raise ValueError("projection changed the frame count; metadata inconsistent")
    return ComplexSpectrogram(projected.data, spec.config, spec.num_samples)

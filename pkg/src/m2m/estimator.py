"""Minimal trainable complex-spectrum estimators.

Two modes: a free-variable estimator whose parameters are the source
spectrograms themselves (useful for direct optimization of one utterance),
and a small per-frame net ("masknet") mapping stacked real/imag features of
the input microphones through one tanh hidden layer to the real/imag parts
of the speech and noise estimates. Parameters are plain float64 tensors so
a standard optimizer can drive them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .loss import EstimatePair
from .spectral import ComplexSpectrogram, StftConfig

MODE_FREE_VARIABLE = "free_variable"
MODE_MASKNET = "masknet"


@dataclass
class EstimatorParams:
    mode: str
    tensors: dict
    num_input_mics: int
    hidden: int
    stft: StftConfig

    def parameter_list(self) -> list:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def clone_detached(self) -> "EstimatorParams":
        tensors = {k: v.detach().clone().requires_grad_(v.requires_grad) for k, v in self.tensors.items()}
        return EstimatorParams(self.mode, tensors, self.num_input_mics, self.hidden, self.stft)


_FREE_KEYS = ("speech_real", "speech_imag", "noise_real", "noise_imag")
_NET_KEYS = ("w_in", "b_in", "w_out", "b_out")


def init_free_variable(
    shape: tuple,
    stft: StftConfig,
    seed: int = 0,
    scale: float = 1.0,
    init_pair: EstimatePair | None = None,
) -> EstimatorParams:
    """Free-variable estimator; random complex init unless a pair is given."""
    if init_pair is not None:
        vals = (
            init_pair.speech.data.real,
            init_pair.speech.data.imag,
            init_pair.noise.data.real,
            init_pair.noise.data.imag,
        )
        tensors = {k: v.detach().clone().to(torch.float64) for k, v in zip(_FREE_KEYS, vals)}
    else:
        rng = np.random.default_rng(seed)
        tensors = {
            k: torch.as_tensor(scale * rng.standard_normal(shape), dtype=torch.float64)
            for k in _FREE_KEYS
        }
    for v in tensors.values():
        v.requires_grad_(True)
    return EstimatorParams(MODE_FREE_VARIABLE, tensors, 1, 0, stft)


def init_masknet(
    num_bins: int,
    num_input_mics: int,
    hidden: int,
    stft: StftConfig,
    seed: int = 0,
    zero: bool = False,
) -> EstimatorParams:
    d_in = 2 * num_bins * num_input_mics
    d_out = 4 * num_bins
    rng = np.random.default_rng(seed)
    if zero:
        w_in = np.zeros((hidden, d_in))
        w_out = np.zeros((d_out, hidden))
    else:
        w_in = rng.standard_normal((hidden, d_in)) / np.sqrt(d_in)
        w_out = rng.standard_normal((d_out, hidden)) / np.sqrt(hidden)
    tensors = {
        "w_in": torch.as_tensor(w_in, dtype=torch.float64),
        "b_in": torch.zeros(hidden, dtype=torch.float64),
        "w_out": torch.as_tensor(w_out, dtype=torch.float64),
        "b_out": torch.zeros(d_out, dtype=torch.float64),
    }
    for v in tensors.values():
        v.requires_grad_(True)
    return EstimatorParams(MODE_MASKNET, tensors, num_input_mics, hidden, stft)


def forward(params: EstimatorParams, input_mics: list) -> EstimatePair:
    """Produce the speech/noise estimate pair for one utterance.

    input_mics lists the input spectrograms in the fixed microphone order,
    reference first; the free-variable mode ignores their content.
    """
    if len(input_mics) < 1:
        raise ValueError("need at least one input microphone")
    ref = input_mics[0]
    shape = ref.data.shape
    for mic in input_mics[1:]:
        if mic.data.shape != shape:
            raise ValueError("input microphones must share a shape")

    if params.mode == MODE_FREE_VARIABLE:
        t = params.tensors
        if t["speech_real"].shape != shape:
            raise ValueError(
                f"free-variable shape {tuple(t['speech_real'].shape)} does not match "
                f"the input shape {tuple(shape)}"
            )
        speech = torch.complex(t["speech_real"], t["speech_imag"])
        noise = torch.complex(t["noise_real"], t["noise_imag"])
    elif params.mode == MODE_MASKNET:
        if len(input_mics) != params.num_input_mics:
            raise ValueError(
                f"estimator expects {params.num_input_mics} input mics, got {len(input_mics)}"
            )
        feats = torch.cat(
            [torch.cat([m.data.real, m.data.imag], dim=1) for m in input_mics], dim=1
        )  # (T, 2*F*M)
        # global scale from the reference mixture keeps the net input O(1)
        rms = torch.sqrt((ref.data.detach().real**2 + ref.data.detach().imag**2).mean()).clamp(min=1e-30)
        t = params.tensors
        hidden = torch.tanh(feats / rms @ t["w_in"].T + t["b_in"])
        out = (hidden @ t["w_out"].T + t["b_out"]) * rms  # (T, 4F)
        n_bins = shape[1]
        sr, si, nr, ni = torch.split(out, n_bins, dim=1)
        speech = torch.complex(sr, si)
        noise = torch.complex(nr, ni)
    else:
        raise ValueError(f"unknown estimator mode {params.mode!r}")

    wrap = lambda data: ComplexSpectrogram(data, ref.config, ref.num_samples)
    return EstimatePair(wrap(speech), wrap(noise))


def backward(params: EstimatorParams, input_mics: list, grad_speech, grad_noise) -> dict:
    """Chain upstream estimate gradients into parameter gradients.

    grad_speech/grad_noise are complex arrays holding dL/dRe + i dL/dIm of
    the respective estimate; returns {name: gradient} for every parameter.
    """
    gs = torch.as_tensor(np.asarray(grad_speech), dtype=torch.complex128)
    gv = torch.as_tensor(np.asarray(grad_noise), dtype=torch.complex128)
    pair = forward(params, input_mics)
    s, v = pair.speech.data, pair.noise.data
    surrogate = (
        (s.real * gs.real).sum()
        + (s.imag * gs.imag).sum()
        + (v.real * gv.real).sum()
        + (v.imag * gv.imag).sum()
    )
    names = sorted(params.tensors)
    grads = torch.autograd.grad(surrogate, [params.tensors[k] for k in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        g = torch.zeros_like(params.tensors[name]) if g is None else g
        if not bool(torch.isfinite(g).all()):
            idx = (~torch.isfinite(g)).nonzero()[0]
            raise FloatingPointError(f"non-finite gradient for {name} at {tuple(int(i) for i in idx)}")
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# checkpoint format: versioned binary, bit-exact round trip

_CKPT_MAGIC = b"M2MCKP1\x00"
_MODE_CODES = {MODE_FREE_VARIABLE: 0, MODE_MASKNET: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def save_checkpoint(path, params: EstimatorParams) -> None:
    cfg = params.stft
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(
            struct.pack(
                "<BIIIIII",
                _MODE_CODES[params.mode],
                params.num_input_mics,
                params.hidden,
                cfg.sample_rate_hz,
                cfg.win_len_samples,
                cfg.hop_samples,
                cfg.fft_size,
            )
        )
        names = sorted(params.tensors)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = params.tensors[name].detach().cpu().numpy().astype(np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> EstimatorParams:
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        mode_code, mics, hidden, rate, win, hop, fft = struct.unpack("<BIIIIII", f.read(25))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n_items), dtype=np.float64).reshape(shape)
            tensors[name] = torch.as_tensor(data.copy(), dtype=torch.float64).requires_grad_(True)
    if mode_code not in _MODE_NAMES:
        raise ValueError("corrupt checkpoint: unknown mode")
    expected = set(_FREE_KEYS if mode_code == 0 else _NET_KEYS)
    if set(tensors) != expected:
        raise ValueError("corrupt checkpoint: unexpected tensor set")
    return EstimatorParams(
        _MODE_NAMES[mode_code],
        tensors,
        mics,
        hidden,
        StftConfig(rate, win, hop, fft_size=fft),
    )

"""Per-frequency weighted least-squares filter estimation (FCP) and filtering.

A filter is a per-frequency complex vector applied along the frame axis,
ŷ(t,f) = h(f)^H x̃(t,f), where x̃ stacks a window of frames of the regressor.
Filters are estimated in closed form from the normal equations of the
weighted problem min_h sum_t |y(t,f) - h(f)^H x̃(t,f)|^2 / λ(t,f), each
frequency independently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .spectral import ComplexSpectrogram

_COMPLEX_DTYPE = torch.complex128

# escalating diagonal loading, relative to mean diagonal, on singular systems
_LOADING_START = 1e-8
_LOADING_TRIES = 6


@dataclass(frozen=True)
class TapWindow:
    """Frame window of a filter: lags -delay-past+1 .. -delay+future.

    past counts taps at or before the anchor lag, future taps after it;
    delay shifts the whole window (positive = into the past). A negative
    delay expresses windows that end at a future frame.
    """

    past: int
    future: int = 0
    delay: int = 0

    def __post_init__(self):
        if self.past < 0 or self.future < 0:
            raise ValueError("tap counts must be non-negative")
        if self.past + self.future < 1:
            raise ValueError("a filter needs at least one tap")

    @property
    def num_taps(self) -> int:
        return self.past + self.future

    @property
    def lags(self) -> range:
        start = -self.delay - self.past + 1
        return range(start, start + self.num_taps)


@dataclass(frozen=True)
class TapConfig:
    """Filter-tap hyper-parameters for the mixture-constraint loss.

    ref_reverb_span/ref_reverb_delay configure the optional reverb filter at
    the reference microphone (None disables it, reproducing the unfiltered
    reference-mic reconstruction). ct_* fields configure the close-talk
    microphone; ct_speech_past=None drops the close-talk term entirely.
    ct_speech_future/ct_noise_future accept the sentinel "estimate" to have
    the future taps searched per utterance.
    """

    ref_reverb_span: int | None = None
    ref_reverb_delay: int | None = None
    speech_past: int = 20
    speech_future: int = 1
    noise_past: int = 20
    noise_future: int = 1
    ct_speech_past: int | None = 20
    ct_speech_future: int | str = 4
    ct_noise_past: int = 20
    ct_noise_future: int | str = 4
    weight_floor: float = 1e-2
    max_future_search: int = 8
    search_filter_len: int = 3
    ref_weight: float = 1.0
    nonref_weight: float = 0.2

    def __post_init__(self):
        if (self.ref_reverb_span is None) != (self.ref_reverb_delay is None):
            raise ValueError("reverb span and delay must be given together")
        if self.ref_reverb_span is not None:
            if self.ref_reverb_delay < 1:
                raise ValueError("reverb prediction delay must be >= 1")
            if self.ref_reverb_span <= self.ref_reverb_delay:
                raise ValueError("reverb span must exceed the prediction delay")
        for name in ("speech_past", "speech_future", "noise_past", "noise_future", "ct_noise_past"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.weight_floor <= 0:
            raise ValueError("weight_floor must be positive")
        if self.search_filter_len < 1:
            raise ValueError("search_filter_len must be >= 1")
        if self.max_future_search < 0:
            raise ValueError("max_future_search must be >= 0")
        for name in ("ct_speech_future", "ct_noise_future"):
            v = getattr(self, name)
            if isinstance(v, str) and v != "estimate":
                raise ValueError(f"{name} must be an int or 'estimate'")

    @property
    def uses_closetalk(self) -> bool:
        return self.ct_speech_past is not None

    @property
    def estimates_ct_future(self) -> bool:
        return self.ct_speech_future == "estimate" or self.ct_noise_future == "estimate"

    def ref_reverb_window(self) -> TapWindow | None:
        if self.ref_reverb_span is None:
            return None
        return TapWindow(
            past=self.ref_reverb_span - self.ref_reverb_delay,
            future=0,
            delay=self.ref_reverb_delay,
        )


@dataclass
class FilterBank:
    """Per-frequency complex filter vectors, shape (F, num_taps)."""

    taps: torch.Tensor
    window: TapWindow

    def __post_init__(self):
        if not torch.is_tensor(self.taps):
            self.taps = torch.as_tensor(np.asarray(self.taps), dtype=_COMPLEX_DTYPE)
        if self.taps.ndim != 2 or self.taps.shape[1] != self.window.num_taps:
            raise ValueError(
                f"filter shape {tuple(self.taps.shape)} does not match window "
                f"({self.window.num_taps} taps)"
            )
        detached = self.taps.detach()
        if not bool(torch.isfinite(detached.real).all() & torch.isfinite(detached.imag).all()):
            raise ValueError("filter bank contains non-finite values")

    def numpy(self) -> np.ndarray:
        return self.taps.detach().resolve_conj().cpu().numpy()


@dataclass
class LambdaWeight:
    """Per-(t,f) positive weights for one microphone, floored away from zero."""

    values: torch.Tensor

    def __post_init__(self):
        if not torch.is_tensor(self.values):
            self.values = torch.as_tensor(np.asarray(self.values), dtype=torch.float64)
        if bool((self.values <= 0).any()):
            raise ValueError("weights must be strictly positive")


def _as_tensor(spec) -> torch.Tensor:
    if isinstance(spec, ComplexSpectrogram):
        return spec.data
    if torch.is_tensor(spec):
        return spec
    return torch.as_tensor(np.asarray(spec), dtype=_COMPLEX_DTYPE)


def compute_lambda(mixture, weight_floor: float) -> LambdaWeight:
    """λ(t,f) = floor * max|Y|^2 + |Y(t,f)|^2, max over the whole spectrogram."""
    if weight_floor <= 0:
        raise ValueError("weight_floor must be positive")
    y = _as_tensor(mixture).detach()
    power = y.real**2 + y.imag**2
    peak = power.max()
    if float(peak) == 0.0:
        raise ValueError("all-zero mixture: weighting undefined up to scale")
    return LambdaWeight(weight_floor * peak + power)


def stack_frames(spec, window: TapWindow) -> torch.Tensor:
    """Stack lagged copies of a (T, F) spectrogram into (F, T, num_taps).

    Column k holds the signal at lag window.lags[k]; frames shifted past
    either edge are zero.
    """
    x = _as_tensor(spec)
    T = x.shape[0]
    cols = []
    zeros_row = torch.zeros((1, x.shape[1]), dtype=x.dtype)
    for lag in window.lags:
        if lag >= T or lag <= -T:
            cols.append(zeros_row.expand(T, -1))
        elif lag >= 0:
            pad = zeros_row.expand(lag, -1)
            cols.append(torch.cat([x[lag:], pad], dim=0))
        else:
            pad = zeros_row.expand(-lag, -1)
            cols.append(torch.cat([pad, x[:lag]], dim=0))
    return torch.stack(cols, dim=2).permute(1, 0, 2)  # (F, T, K)


def _window_of(taps) -> TapWindow:
    if isinstance(taps, TapWindow):
        return taps
    past, future, delay = taps
    return TapWindow(past=past, future=future, delay=delay)


def _solve_normal_equations(A: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched Hermitian solve with escalating diagonal loading on failure."""
    n = A.shape[-1]
    eye = torch.eye(n, dtype=A.dtype)
    loading = 0.0
    scale = torch.real(torch.diagonal(A.detach(), dim1=-2, dim2=-1)).mean().clamp(min=1e-300)
    for attempt in range(_LOADING_TRIES):
        try:
            sol = torch.linalg.solve(A + loading * eye, b.unsqueeze(-1)).squeeze(-1)
        except torch.linalg.LinAlgError:
            sol = None
        if sol is not None and bool(torch.isfinite(sol.detach().real).all()):
            return sol
        loading = float(scale) * _LOADING_START * (10.0**attempt)
    raise RuntimeError("normal equations singular even after diagonal loading")


def solve_joint(target, blocks, lam: LambdaWeight) -> list[FilterBank]:
    """Weighted LS of several filtered regressors jointly onto one target.

    blocks is a sequence of (spectrogram, TapWindow) pairs; the stacked
    designs are concatenated so the filters are estimated in a single
    closed-form solve per frequency. Returns one FilterBank per block.
    """
    y = _as_tensor(target)
    T = y.shape[0]
    windows = [_window_of(w) for _, w in blocks]
    total_taps = sum(w.num_taps for w in windows)
    if total_taps >= T:
        raise ValueError(f"tap span {total_taps} must be smaller than the frame count {T}")
    X = torch.cat([stack_frames(x, w) for (x, _), w in zip(blocks, windows)], dim=2)  # (F,T,K)
    inv_lam = (1.0 / lam.values).T.unsqueeze(-1)  # (F, T, 1)
    Xw = X * inv_lam
    A = torch.einsum("ftk,ftl->fkl", X.conj(), Xw)
    b = torch.einsum("ftk,ft->fk", Xw.conj(), y.T)
    coeffs = _solve_normal_equations(A, b)  # apply-side coefficients c; filter h = conj(c)
    banks = []
    offset = 0
    for w in windows:
        banks.append(FilterBank(coeffs[:, offset : offset + w.num_taps].conj(), w))
        offset += w.num_taps
    return banks


def fcp_solve(target, regressor, taps, lam: LambdaWeight) -> FilterBank:
    """Closed-form minimizer of sum_t |target - h^H x̃|^2 / λ per frequency."""
    return solve_joint(target, [(regressor, taps)], lam)[0]


def apply_filter(bank: FilterBank, source) -> torch.Tensor:
    """Filter a (T, F) spectrogram along frames: ŷ(t,f) = h(f)^H x̃(t,f)."""
    x = _as_tensor(source)
    X = stack_frames(x, bank.window)  # (F, T, K)
    return torch.einsum("ftk,fk->tf", X, bank.taps.conj())


def estimate_future_taps(closetalk, speech_est, noise_est, cfg: TapConfig) -> int:
    """Enumerate future taps 0..R and pick the one whose short joint filters
    best reconstruct the close-talk mixture; ties resolve to the smallest."""
    from .loss import mc_term  # deferred: loss builds on this module

    y0 = _as_tensor(closetalk).detach()
    s = _as_tensor(speech_est).detach()
    v = _as_tensor(noise_est).detach()
    length = cfg.search_filter_len
    if y0.shape[0] <= 2 * length:
        raise ValueError("spectrogram too short for the enumeration filters")
    lam = compute_lambda(y0, cfg.weight_floor)
    best_z, best_score = 0, None
    for z in range(cfg.max_future_search + 1):
        window = TapWindow(past=length, future=0, delay=-z)
        h_s, h_v = solve_joint(y0, [(s, window), (v, window)], lam)
        recon = apply_filter(h_s, s) + apply_filter(h_v, v)
        score = float(mc_term(y0, recon))
        if best_score is None or score < best_score - 1e-12:
            best_z, best_score = z, score
    return best_z


_FILTER_MAGIC = b"M2MFLT1\x00"


def save_filter_bank(path, bank: FilterBank) -> None:
    """Versioned binary dump: shape header + interleaved complex64 taps."""
    taps = bank.numpy().astype(np.complex64)
    with open(path, "wb") as f:
        f.write(_FILTER_MAGIC)
        f.write(struct.pack("<IIiii", taps.shape[0], taps.shape[1], bank.window.past, bank.window.future, bank.window.delay))
        f.write(taps.tobytes())


def load_filter_bank(path) -> FilterBank:
    with open(path, "rb") as f:
        magic = f.read(len(_FILTER_MAGIC))
        if magic != _FILTER_MAGIC:
            raise ValueError("not a filter bank file")
        nf, nk, past, future, delay = struct.unpack("<IIiii", f.read(20))
        data = np.frombuffer(f.read(nf * nk * 8), dtype=np.complex64).reshape(nf, nk)
    return FilterBank(data.astype(np.complex128), TapWindow(past, future, delay))

import numpy as np
import pytest
import torch

from m2m.spectral import (
    ComplexSpectrogram,
    StftConfig,
    consistency_project,
    default_stft_config,
    istft,
    sqrt_hann,
    stft,
)


def _rel_rms(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(np.mean((a - b) ** 2)) / max(np.sqrt(np.mean(b**2)), 1e-300)


def test_default_config_matches_32ms_8ms_at_16k():
    cfg = default_stft_config(16000)
    assert cfg.win_len_samples == 512
    assert cfg.hop_samples == 128
    assert cfg.num_bins == 257


def test_zero_signal_gives_zero_spectrogram():
    cfg = default_stft_config(16000)
    spec = stft(np.zeros(16000), cfg)
    assert spec.num_bins == 257
    assert np.all(spec.numpy() == 0.0)


def test_config_validation_errors():
    with pytest.raises(ValueError):
        StftConfig(16000, 512, 513)  # hop > window
    with pytest.raises(ValueError):
        StftConfig(16000, 512, 100)  # hop does not divide window
    with pytest.raises(ValueError):
        StftConfig(16000, 512, 128, fft_size=256)  # fft too small
    with pytest.raises(ValueError):
        stft(np.zeros(0), default_stft_config())


def test_sine_at_bin_center_matches_direct_dft_oracle():
    cfg = default_stft_config(16000)
    k = 32  # 1 kHz at 512-point fft
    n = np.arange(16000)
    x = np.sin(2.0 * np.pi * k * n / cfg.fft_size)
    spec = stft(x, cfg).numpy()

    # independent oracle: DFT by definition of one fully-interior windowed frame
    m = 10
    start = m * cfg.hop_samples - cfg.pad
    frame = x[start : start + cfg.win_len_samples]
    w = sqrt_hann(cfg.win_len_samples).numpy()
    v = w * frame
    freqs = np.arange(cfg.num_bins)
    samples = np.arange(cfg.win_len_samples)
    oracle = (v[None, :] * np.exp(-2j * np.pi * freqs[:, None] * samples[None, :] / cfg.fft_size)).sum(axis=1)

    np.testing.assert_allclose(spec[m], oracle, rtol=0, atol=1e-9 * np.abs(oracle).max())
    mags = np.abs(spec[m])
    assert int(np.argmax(mags)) == k
    # off-bin leakage bounded by the oracle's own sidelobe level
    off = np.delete(mags, [k - 1, k, k + 1])
    oracle_off = np.delete(np.abs(oracle), [k - 1, k, k + 1])
    assert off.max() <= oracle_off.max() * (1 + 1e-9)


@pytest.mark.parametrize("length", [16000, 3000, 1537, 512, 130])
def test_cola_round_trip(length):
    rng = np.random.default_rng(7)
    cfg = default_stft_config(16000)
    x = rng.standard_normal(length)
    y = istft(stft(x, cfg)).numpy()
    assert y.shape == x.shape
    assert _rel_rms(y, x) <= 1e-6


def test_zero_spectrogram_synthesizes_zero_signal():
    cfg = default_stft_config(16000)
    spec = ComplexSpectrogram(np.zeros((40, 257), dtype=np.complex128), cfg)
    y = istft(spec).numpy()
    assert np.all(y == 0.0)


def test_linearity():
    rng = np.random.default_rng(11)
    cfg = default_stft_config(16000)
    x = rng.standard_normal(4000)
    y = rng.standard_normal(4000)
    a, b = 2.5, -0.7
    lhs = stft(a * x + b * y, cfg).numpy()
    rhs = a * stft(x, cfg).numpy() + b * stft(y, cfg).numpy()
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(np.max(np.abs(rhs)), 1.0)


def test_phase_perturbation_is_inconsistent():
    rng = np.random.default_rng(3)
    cfg = default_stft_config(16000)
    x = rng.standard_normal(4000)
    spec = stft(x, cfg)
    phase = np.exp(1j * rng.uniform(-np.pi, np.pi, size=spec.data.shape))
    perturbed = spec.with_data(spec.data * torch.as_tensor(phase))
    y = istft(perturbed).numpy()
    assert _rel_rms(y, x) > 1e-3  # output differs from the original signal
    reanalyzed = stft(y, cfg).numpy()
    assert np.max(np.abs(reanalyzed - perturbed.numpy())) > 1e-3  # inconsistency witness


def test_consistent_spectrogram_is_fixed_point():
    rng = np.random.default_rng(5)
    cfg = default_stft_config(16000)
    spec = stft(rng.standard_normal(5000), cfg)
    proj = consistency_project(spec)
    scale = np.abs(spec.numpy()).max()
    assert np.max(np.abs(proj.numpy() - spec.numpy())) <= 1e-6 * scale


def test_projection_idempotent_on_random_spectrogram():
    rng = np.random.default_rng(9)
    cfg = StftConfig(8000, 256, 64)
    raw = rng.standard_normal((30, cfg.num_bins)) + 1j * rng.standard_normal((30, cfg.num_bins))
    spec = ComplexSpectrogram(raw, cfg)
    once = consistency_project(spec)
    twice = consistency_project(once)
    scale = np.abs(once.numpy()).max()
    assert np.max(np.abs(twice.numpy() - once.numpy())) <= 1e-6 * scale


def test_projection_of_zero_is_zero():
    cfg = StftConfig(8000, 256, 64)
    spec = ComplexSpectrogram(np.zeros((12, cfg.num_bins), dtype=np.complex128), cfg)
    assert np.all(consistency_project(spec).numpy() == 0.0)


def test_parseval_energy_agreement():
    rng = np.random.default_rng(13)
    cfg = default_stft_config(16000)
    x = rng.standard_normal(8000)
    spec = stft(x, cfg).numpy()

    fft = cfg.fft_size
    mags2 = np.abs(spec) ** 2
    per_frame = (mags2[:, 0] + mags2[:, -1] + 2.0 * mags2[:, 1:-1].sum(axis=1)) / fft
    spectral_energy = per_frame.sum()

    # window normalization constant: overlap-add of the squared analysis window
    w2 = sqrt_hann(cfg.win_len_samples).numpy() ** 2
    cola = np.zeros(cfg.win_len_samples)
    for j in range(cfg.win_len_samples // cfg.hop_samples):
        cola[: cfg.hop_samples] += w2[j * cfg.hop_samples : (j + 1) * cfg.hop_samples]
    const = cola[: cfg.hop_samples]
    assert np.allclose(const, const[0])  # constant overlap-add of w^2

    signal_energy = np.sum(x**2)
    assert abs(spectral_energy - const[0] * signal_energy) <= 1e-5 * const[0] * signal_energy


def test_spectrogram_validation():
    cfg = StftConfig(8000, 256, 64)
    with pytest.raises(ValueError):
        ComplexSpectrogram(np.zeros((10, 5), dtype=np.complex128), cfg)  # wrong bins
    bad = np.zeros((10, cfg.num_bins), dtype=np.complex128)
    bad[3, 4] = np.nan
    with pytest.raises(ValueError):
        ComplexSpectrogram(bad, cfg)

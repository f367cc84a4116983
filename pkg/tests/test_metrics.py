import json

import numpy as np
import pytest

from m2m.metrics import CAP_DB, MetricReport, sdr, si_sdr, speaker_reinforce


def test_si_sdr_perfect_and_scaled_hit_cap():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(4000)
    assert si_sdr(s, s) == CAP_DB
    assert si_sdr(s, 2.0 * s) == CAP_DB


def test_si_sdr_scale_invariance():
    rng = np.random.default_rng(1)
    s = rng.standard_normal(4000)
    est = s + 0.3 * rng.standard_normal(4000)
    base = si_sdr(s, est)
    for c in (2.0, -0.5, 1e-3, 1e3):
        assert abs(si_sdr(s, c * est) - base) <= 1e-9


def test_si_sdr_orthogonal_estimate_hits_negative_cap():
    rng = np.random.default_rng(2)
    s = rng.standard_normal(4000)
    raw = rng.standard_normal(4000)
    est = raw - (np.dot(raw, s) / np.dot(s, s)) * s  # explicit projection oracle
    assert abs(np.dot(est, s)) < 1e-8 * np.linalg.norm(est) * np.linalg.norm(s)
    assert si_sdr(s, est) == -CAP_DB


def test_sdr_hand_values():
    rng = np.random.default_rng(3)
    s = rng.standard_normal(4000)
    assert sdr(s, s) == CAP_DB
    assert sdr(s, np.zeros_like(s)) == pytest.approx(0.0, abs=1e-12)
    assert sdr(s, -s) == pytest.approx(10.0 * np.log10(0.25), abs=1e-12)  # -6.02 dB


def test_metric_errors():
    with pytest.raises(ValueError):
        si_sdr(np.zeros(10), np.ones(10))
    with pytest.raises(ValueError):
        sdr(np.zeros(10), np.ones(10))
    with pytest.raises(ValueError):
        si_sdr(np.ones(10), np.ones(11))


def test_speaker_reinforce_disabled_returns_enhanced():
    rng = np.random.default_rng(4)
    s_hat = rng.standard_normal(100)
    out = speaker_reinforce(s_hat, rng.standard_normal(100), None)
    np.testing.assert_array_equal(out, s_hat)


def test_speaker_reinforce_unit_energy_hand_value():
    s_hat = np.zeros(100)
    s_hat[0] = 1.0  # unit energy
    y = np.zeros(100)
    y[1] = 1.0  # unit energy, disjoint support
    out = speaker_reinforce(s_hat, y, 10.0)
    eta = out[1]
    assert eta == pytest.approx(10.0 ** (-0.5), abs=1e-12)


@pytest.mark.parametrize("gamma", [10.0, 15.0, 20.0])
def test_speaker_reinforce_ratio_exact(gamma):
    rng = np.random.default_rng(5)
    s_hat = rng.standard_normal(3000)
    y = rng.standard_normal(3000)
    out = speaker_reinforce(s_hat, y, gamma)
    added = out - s_hat
    measured = 10.0 * np.log10(np.dot(s_hat, s_hat) / np.dot(added, added))
    assert abs(measured - gamma) <= 1e-9


def test_speaker_reinforce_zero_signals_rejected():
    with pytest.raises(ValueError):
        speaker_reinforce(np.zeros(10), np.ones(10), 10.0)
    with pytest.raises(ValueError):
        speaker_reinforce(np.ones(10), np.zeros(10), 10.0)


def test_metrics_strictly_decrease_with_added_noise():
    rng = np.random.default_rng(6)
    s = rng.standard_normal(4000)
    w = rng.standard_normal(4000)
    prev_si, prev_sdr = si_sdr(s, s), sdr(s, s)
    for scale in (1e-2, 1e-1, 0.5, 1.0, 2.0):
        est = s + scale * w
        cur_si, cur_sdr = si_sdr(s, est), sdr(s, est)
        assert cur_si < prev_si
        assert cur_sdr < prev_sdr
        prev_si, prev_sdr = cur_si, cur_sdr


def test_metric_report_output():
    report = MetricReport()
    report.add("utt0", 10.0, 11.0)
    report.add("utt1", 20.0, 21.0)
    tsv = report.to_tsv()
    assert tsv.startswith("id\tsi_sdr_db\tsdr_db\n")
    assert "utt0\t10\t11" in tsv
    assert tsv.strip().endswith("mean\t15\t16")
    parsed = json.loads(report.to_json())
    assert parsed["mean_si_sdr_db"] == 15.0
    assert len(parsed["utterances"]) == 2

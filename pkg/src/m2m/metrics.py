"""SI-SDR / SDR evaluation and speaker-reinforcement post-processing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CAP_DB = 60.0  # metrics are reported within +/- this bound


def _as_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D sample vector")
    return x


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +/-60.

    Projects the estimate onto the reference, so any nonzero rescaling of
    the estimate leaves the value unchanged.
    """
    s = _as_signal(reference)
    s_hat = _as_signal(estimate)
    if s.shape != s_hat.shape:
        raise ValueError("signals must have equal length")
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise ValueError("zero reference signal")
    alpha = float(np.dot(s_hat, s)) / ref_energy
    target = alpha * s
    num = float(np.dot(target, target))
    den = float(np.sum((target - s_hat) ** 2))
    if num == 0.0:
        return -CAP_DB
    if den == 0.0:
        return CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -CAP_DB, CAP_DB))


def sdr(reference, estimate) -> float:
    """Plain energy-ratio SDR in dB, capped at +/-60."""
    s = _as_signal(reference)
    s_hat = _as_signal(estimate)
    if s.shape != s_hat.shape:
        raise ValueError("signals must have equal length")
    num = float(np.dot(s, s))
    if num == 0.0:
        raise ValueError("zero reference signal")
    den = float(np.sum((s - s_hat) ** 2))
    if den == 0.0:
        return CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -CAP_DB, CAP_DB))


def speaker_reinforce(enhanced, mixture, gamma_db: float | None) -> np.ndarray:
    """Re-mix a scaled copy of the input into the enhanced signal.

    The mixing gain is chosen so 10 log10(||enhanced||^2 / ||gain * mixture||^2)
    equals gamma_db exactly; gamma_db=None disables the re-mix.
    """
    s_hat = _as_signal(enhanced)
    if gamma_db is None:
        return s_hat.copy()
    y = _as_signal(mixture)
    if s_hat.shape != y.shape:
        raise ValueError("signals must have equal length")
    e_hat = float(np.dot(s_hat, s_hat))
    e_mix = float(np.dot(y, y))
    if e_hat == 0.0 or e_mix == 0.0:
        raise ValueError("zero signal; reinforcement gain undefined")
    eta = np.sqrt(e_hat / (10.0 ** (gamma_db / 10.0) * e_mix))
    return s_hat + eta * y


@dataclass
class MetricReport:
    """Per-utterance SI-SDR/SDR rows plus their means."""

    rows: list = field(default_factory=list)  # dicts: id, si_sdr_db, sdr_db

    def add(self, utt_id: str, si_sdr_db: float, sdr_db: float) -> None:
        self.rows.append({"id": utt_id, "si_sdr_db": si_sdr_db, "sdr_db": sdr_db})

    @property
    def mean_si_sdr_db(self) -> float:
        return float(np.mean([r["si_sdr_db"] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_sdr_db(self) -> float:
        return float(np.mean([r["sdr_db"] for r in self.rows])) if self.rows else float("nan")

    def to_tsv(self) -> str:
        lines = ["id\tsi_sdr_db\tsdr_db"]
        for r in self.rows:
            lines.append(f"{r['id']}\t{r['si_sdr_db']:.12g}\t{r['sdr_db']:.12g}")
        lines.append(f"mean\t{self.mean_si_sdr_db:.12g}\t{self.mean_sdr_db:.12g}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {
                "utterances": self.rows,
                "mean_si_sdr_db": self.mean_si_sdr_db,
                "mean_sdr_db": self.mean_sdr_db,
            },
            indent=1,
            sort_keys=True,
        )

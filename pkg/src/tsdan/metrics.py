"""Rate-estimation metrics: MAE, harmonic-template SNR and availability."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricsReport:
    band: str
    condition: str
    n_windows: int
    mae_bpm: float
    availability: float
    mean_snr_db: float

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self, label="model"):
        return format_table([(label, self)])


def mae(pred_bpm, true_bpm):
    pred, true = np.asarray(pred_bpm, dtype=float), np.asarray(true_bpm, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {true.size} references")
    if pred.size == 0:
        raise ValueError("mae of empty lists")
    return float(np.mean(np.abs(pred - true)))


def snr_dehaan(window, f_ref_hz, band, fps, template_hz=0.1, window_s=None, pad_factor=1):
    """SNR (dB) of a waveform window around the first two harmonics of ``f_ref_hz``.

    Power inside +-``template_hz`` of ``f_ref_hz`` and ``2*f_ref_hz`` (within
    the band) is signal; every other in-band bin is noise.  ``pad_factor``
    zero-pads the FFT so narrow templates are sampled on a finer grid.
    """
    from .pipeline import band_indices, spectrum

    x = np.asarray(window, dtype=np.float64)
    if window_s is not None and x.size < int(round(window_s * fps)):
        raise ValueError(f"window of {x.size} samples shorter than {window_s}s at {fps} fps")
    if not band.low_hz <= f_ref_hz <= band.high_hz:
        raise ValueError(f"reference {f_ref_hz} Hz outside band {band.low_hz}-{band.high_hz} Hz")
    freqs, power = spectrum(x, fps, pad_factor)
    idx = band_indices(freqs, band)
    f = freqs[idx]
    eps = 1e-9
    template = (np.abs(f - f_ref_hz) <= template_hz + eps) | (np.abs(f - 2 * f_ref_hz) <= template_hz + eps)
    if template.all():
        raise ValueError(f"band {band.low_hz}-{band.high_hz} Hz leaves no bins outside the harmonic template")
    signal = power[idx][template].sum()
    noise = power[idx][~template].sum()
    if signal == 0 and noise == 0:
        return float("nan")
    # caps the ratio at +120 dB for noise-free windows
    noise = max(noise, signal * 1e-12)
    if signal == 0:
        return -math.inf
    return float(10.0 * np.log10(signal / noise))


def availability(snrs):
    snrs = np.asarray(snrs, dtype=float)
    if snrs.size == 0:
        raise ValueError("availability of an empty list")
    return float(np.mean(snrs >= 0.0))


def evaluate(estimates, truth_bpm_per_window, band, condition="") -> MetricsReport:
    """Aggregate per-window estimates (invalid windows excluded) against per-window truth."""
    band_name = getattr(band, "name", band)
    if len(estimates) != len(truth_bpm_per_window):
        raise ValueError(f"{len(estimates)} estimates vs {len(truth_bpm_per_window)} truth windows")
    pairs = [(e, t) for e, t in zip(estimates, truth_bpm_per_window) if getattr(e, "valid", True)]
    if not pairs:
        raise ValueError("no valid windows to evaluate")
    bpm = [e.bpm for e, _ in pairs]
    truth = [t for _, t in pairs]
    snr = [e.snr_db for e, _ in pairs]
    return MetricsReport(
        band=band_name,
        condition=condition,
        n_windows=len(pairs),
        mae_bpm=mae(bpm, truth),
        availability=availability(snr),
        mean_snr_db=float(np.mean(snr)),
    )


def format_table(rows):
    """Aligned text table with the MAE | Availability | SNR column order."""
    header = f"{'Model':<24}{'Band':<6}{'Condition':<12}{'MAE':>10}{'Availability':>14}{'SNR':>10}{'Windows':>9}"
    lines = [header, "-" * len(header)]
    for label, r in rows:
        lines.append(f"{label:<24}{r.band:<6}{r.condition:<12}{r.mae_bpm:>10.3f}{r.availability:>14.3f}"
                     f"{r.mean_snr_db:>10.3f}{r.n_windows:>9d}")
    return "\n".join(lines)

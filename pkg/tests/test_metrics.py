import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tsdan import metrics
from tsdan import pipeline as P
from tsdan.pipeline import RateEstimate

FPS = 20.0
N = 200


def tone(f, amp=1.0, phase=0.4):
    t = np.arange(N) / FPS
    return amp * np.sin(2 * np.pi * f * t + phase)


def band_noise(seed, band=P.HR):
    """White noise restricted to the band by zeroing out-of-band FFT bins."""
    spec = np.fft.rfft(np.random.default_rng(seed).standard_normal(N))
    f = np.fft.rfftfreq(N, 1 / FPS)
    spec[(f < band.low_hz) | (f > band.high_hz)] = 0
    return np.fft.irfft(spec, n=N)


def definition_snr(x, f_ref, band, half=0.1, pad=1):
    """SNR straight from the definition, written without the library helpers."""
    x = np.asarray(x, float)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(x.size) / x.size)
    p = np.abs(np.fft.rfft((x - x.mean()) * w, n=pad * x.size)) ** 2
    f = np.fft.rfftfreq(pad * x.size, 1 / FPS)
    inband = (f >= band.low_hz - 1e-9) & (f <= band.high_hz + 1e-9)
    tmpl = (np.abs(f - f_ref) <= half + 1e-9) | (np.abs(f - 2 * f_ref) <= half + 1e-9)
    return 10 * np.log10(p[inband & tmpl].sum() / p[inband & ~tmpl].sum())


# --------------------------------------------------------------------- mae


def test_mae_examples():
    assert metrics.mae([72, 74], [70, 70]) == 3.0
    assert metrics.mae([60, 61.5], [60, 61.5]) == 0.0
    a, b = 71.0, 80.0
    assert metrics.mae([a, b], [b, a]) == abs(a - b)


def test_mae_errors():
    with pytest.raises(ValueError, match="length"):
        metrics.mae([1, 2], [1])
    with pytest.raises(ValueError):
        metrics.mae([], [])


@given(st.lists(st.floats(40, 240), min_size=1, max_size=20), st.floats(-30, 30))
def test_mae_detects_translation(truth, c):
    pred = [t + c for t in truth]
    assert metrics.mae(pred, truth) == pytest.approx(abs(c), abs=1e-9)


# --------------------------------------------------------------------- snr


def test_pure_sine_snr_high():
    for f in (0.8, 1.5, 2.3):
        assert metrics.snr_dehaan(tone(f), f, P.HR, FPS) > 20


def test_snr_matches_definition_oracle(rng):
    x = tone(1.2) + 0.8 * band_noise(3)
    assert metrics.snr_dehaan(x, 1.2, P.HR, FPS) == pytest.approx(definition_snr(x, 1.2, P.HR), rel=1e-9)


def test_noise_only_snr_negative_in_95_of_100_seeds():
    neg = sum(metrics.snr_dehaan(band_noise(s), 1.3, P.HR, FPS) < 0 for s in range(100))
    assert neg >= 95


def test_snr_sweep_crosses_zero_monotonically():
    noise = band_noise(7)
    noise_power = np.mean(noise ** 2)
    amps = np.linspace(0.1, 3.0, 15) * np.sqrt(2 * noise_power)
    snrs = [metrics.snr_dehaan(tone(1.5, a) + noise, 1.5, P.HR, FPS) for a in amps]
    assert all(b > a for a, b in zip(snrs, snrs[1:]))
    equal = metrics.snr_dehaan(tone(1.5, np.sqrt(2 * noise_power)) + noise, 1.5, P.HR, FPS)
    assert abs(equal) <= 3.0


@given(st.floats(1e-3, 1e4))
def test_snr_scale_invariant(c):
    x = tone(1.1) + band_noise(2)
    assert metrics.snr_dehaan(c * x, 1.1, P.HR, FPS) == pytest.approx(metrics.snr_dehaan(x, 1.1, P.HR, FPS), abs=1e-9)


def test_snr_errors():
    with pytest.raises(ValueError, match="outside band"):
        metrics.snr_dehaan(tone(1.0), 5.0, P.HR, FPS)
    with pytest.raises(ValueError, match="no bins outside"):
        metrics.snr_dehaan(tone(0.2), 0.2, P.RR, FPS, template_hz=0.1)
    with pytest.raises(ValueError, match="shorter"):
        metrics.snr_dehaan(tone(1.0)[:100], 1.0, P.HR, FPS, window_s=10)


def test_rr_snr_with_narrow_template():
    # Hann leakage puts a quarter of the tone power in each neighbouring 0.1 Hz bin: SNR = 10*log10(2)
    snr = metrics.snr_dehaan(tone(0.2), 0.2, P.RR, FPS, template_hz=0.05)
    assert snr == pytest.approx(definition_snr(tone(0.2), 0.2, P.RR, half=0.05), rel=1e-9)
    assert snr == pytest.approx(10 * np.log10(2), abs=0.1)


@pytest.mark.parametrize("f", [0.12, 0.2, 0.25, 0.33, 0.41, 0.48])
def test_rr_snr_on_padded_grid(f):
    snr = metrics.snr_dehaan(tone(f), f, P.RR, FPS, template_hz=0.075, pad_factor=4)
    assert snr == pytest.approx(definition_snr(tone(f), f, P.RR, half=0.075, pad=4), rel=1e-9)
    # a clean tone must clear 0 dB with margin, which the one-bin grid cannot guarantee
    assert snr > 5.0


# ------------------------------------------------------------ availability


def test_availability_examples():
    assert metrics.availability([1, -2, 0, 3]) == 0.75
    assert metrics.availability([-1, -0.1]) == 0.0
    assert metrics.availability([0, 0, 0]) == 1.0
    with pytest.raises(ValueError):
        metrics.availability([])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=30), st.data())
def test_availability_monotone(snrs, data):
    bumps = data.draw(st.lists(st.floats(0, 10), min_size=len(snrs), max_size=len(snrs)))
    assert metrics.availability([s + b for s, b in zip(snrs, bumps)]) >= metrics.availability(snrs)


# ---------------------------------------------------------------- evaluate


def est(i, bpm, snr, valid=True):
    return RateEstimate(i, bpm, snr, "hr", valid)


def test_single_perfect_window():
    r = metrics.evaluate([est(0, 72.0, 12.0)], [72.0], P.HR, "clean")
    assert (r.mae_bpm, r.availability, r.n_windows, r.band) == (0.0, 1.0, 1, "hr")


def test_composite_report():
    ests = [est(0, 72, 1), est(1, 74, -2), est(2, 70, 0), est(3, 73, 3), est(4, 0, 0, valid=False)]
    r = metrics.evaluate(ests, [70, 70, 70, 70, 70], P.HR, "natural")
    assert r.mae_bpm == (2 + 4 + 0 + 3) / 4
    assert r.availability == 0.75
    assert r.mean_snr_db == 0.5
    assert r.n_windows == 4
    assert json.loads(r.to_json()) == {"band": "hr", "condition": "natural", "n_windows": 4, "mae_bpm": 2.25,
                                       "availability": 0.75, "mean_snr_db": 0.5}


def test_evaluate_rejects_misaligned():
    with pytest.raises(ValueError):
        metrics.evaluate([est(0, 70, 1)], [70, 71], P.HR)
    with pytest.raises(ValueError, match="no valid"):
        metrics.evaluate([est(0, 70, 1, valid=False)], [70], P.HR)


def test_aggregate_matches_recomputation_from_csv(tmp_path):
    rng = np.random.default_rng(5)
    ests = [est(i, float(b), float(s)) for i, (b, s) in enumerate(zip(rng.uniform(50, 150, 12), rng.normal(1, 3, 12)))]
    truth = list(rng.uniform(50, 150, 12))
    P.write_rates_csv(tmp_path / "rates.csv", ests)
    with open(tmp_path / "rates.csv") as fh:
        rows = list(csv.DictReader(fh))
    bpm = np.array([float(r["bpm"]) for r in rows])
    snr = np.array([float(r["snr_db"]) for r in rows])
    report = metrics.evaluate(ests, truth, P.HR)
    assert report.mae_bpm == pytest.approx(np.mean(np.abs(bpm - truth)), abs=1e-5)
    assert report.availability == np.mean(snr >= 0)
    assert report.mean_snr_db == pytest.approx(snr.mean(), abs=1e-5)


def test_table_column_order():
    r = metrics.evaluate([est(0, 72.0, 12.0)], [70.0], P.HR, "clean")
    header = r.table("TS-DAN").splitlines()[0]
    assert header.index("MAE") < header.index("Availability") < header.index("SNR")
    assert "TS-DAN" in r.table("TS-DAN")

"""Clip preprocessing and waveform post-processing.

Preprocessing turns a frame stack into motion maps (consecutive-frame
differences) and appearance maps (the frames themselves), both resized to
the network input and standardized per clip and channel.  Post-processing
band-limits a predicted waveform with a zero-phase Butterworth filter and
reads the dominant frequency of each 10 s window.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal as sps

HR_BAND = (0.67, 4.0)
RR_BAND = (0.08, 0.50)
VAR_FLOOR = 1e-6
# SNR template half-width per band; +-0.1 Hz swallows every RR bin of a 10 s window
TEMPLATE_HZ = {"hr": 0.1, "rr": 0.075}


@dataclass(frozen=True)
class BandpassSpec:
    low_hz: float
    high_hz: float
    order: int = 2
    name: str = "hr"

    def validate(self, fps):
        if not 0 < self.low_hz:
            raise ValueError(f"band low edge {self.low_hz} Hz must be positive")
        if not self.low_hz < self.high_hz:
            raise ValueError(f"band low edge {self.low_hz} Hz must be below high edge {self.high_hz} Hz")
        if not self.high_hz < fps / 2:
            raise ValueError(f"band high edge {self.high_hz} Hz is not below Nyquist {fps / 2} Hz")

    @property
    def bpm_range(self):
        return 60 * self.low_hz, 60 * self.high_hz


HR = BandpassSpec(*HR_BAND, name="hr")
RR = BandpassSpec(*RR_BAND, name="rr")
BANDS = {"hr": HR, "rr": RR}


@dataclass
class RateEstimate:
    window_index: int
    bpm: float
    snr_db: float
    band: str
    valid: bool = True


@dataclass
class ClipBatch:
    motion: np.ndarray  # [T-1,3,hw,hw]
    appearance: np.ndarray  # [T-1,3,hw,hw]
    pulse_gt: Optional[np.ndarray]
    resp_gt: Optional[np.ndarray]
    fps: float
    source_id: str = ""
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.motion.shape != self.appearance.shape:
            raise ValueError(f"motion {self.motion.shape} and appearance {self.appearance.shape} differ")

    def __len__(self):
        return self.motion.shape[0]

    def unstandardize(self):
        """Undo the per-channel standardization -> (motion, appearance) in resized pixel units."""
        s = self.stats
        m = self.motion * s["motion_std"][None, :, None, None] + s["motion_mean"][None, :, None, None]
        a = self.appearance * s["app_std"][None, :, None, None] + s["app_mean"][None, :, None, None]
        return m, a


# ------------------------------------------------------------ preprocessing


def _interp_matrix(n_out, n_in):
    """Bilinear weights (half-pixel centres) mapping ``n_in`` samples to ``n_out``."""
    if n_out == n_in:
        return np.eye(n_out)
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1 - frac
    mat[np.arange(n_out), hi] += frac
    return mat


def crop_resize(frames, roi=None, size=72):
    """Crop ``roi=(top, left, height, width)`` (or the full frame) and bilinear-resize."""
    frames = np.asarray(frames)
    _, _, h, w = frames.shape
    if roi is None or roi == "full":
        roi = (0, 0, h, w)
    top, left, rh, rw = (int(v) for v in roi)
    if rh <= 0 or rw <= 0:
        raise ValueError(f"degenerate roi {roi}")
    if top < 0 or left < 0 or top + rh > h or left + rw > w:
        raise ValueError(f"roi {roi} outside {h}x{w} frame")
    crop = frames[:, :, top:top + rh, left:left + rw]
    if rh == size and rw == size:
        return crop.astype(np.float32, copy=True)
    ry, rx = _interp_matrix(size, rh), _interp_matrix(size, rw)
    return np.einsum("yh,tchw,xw->tcyx", ry, crop, rx, optimize=True).astype(np.float32)


def _channel_stats(x):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.sqrt(np.maximum(var, VAR_FLOOR)).astype(np.float32)


def _standardize(x, mean, std):
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def waveform_targets(wave):
    """Network target for a waveform: first difference, scaled to unit std."""
    d = np.diff(np.asarray(wave, dtype=np.float64))
    return (d / max(d.std(), 1e-12)).astype(np.float32)


class ClipSource:
    """A resized clip with standardization statistics, sliced lazily into windows.

    Holding resized frames and cutting motion/appearance windows on demand
    keeps memory at one copy of the clip instead of two standardized maps.
    """

    def __init__(self, frames, roi=None, fps=20.0, size=72, pulse=None, resp=None, source_id=""):
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[0] < 2:
            raise ValueError(f"need a [T>=2,3,H,W] stack, got {frames.shape}")
        self.resized = crop_resize(frames, roi, size)
        self.fps = float(fps)
        self.source_id = source_id
        motion = np.diff(self.resized, axis=0)
        m_mean, m_std = _channel_stats(motion)
        a_mean, a_std = _channel_stats(self.resized[1:])
        del motion
        self.stats = {"motion_mean": m_mean, "motion_std": m_std, "app_mean": a_mean, "app_std": a_std}
        self.pulse_target = None if pulse is None else waveform_targets(pulse)
        self.resp_target = None if resp is None else waveform_targets(resp)

    def __len__(self):
        return self.resized.shape[0] - 1

    def window(self, start, length):
        """Standardized (motion, appearance, pulse, resp) for map indices [start, start+length)."""
        if start < 0 or start + length > len(self):
            raise IndexError(f"window [{start}, {start + length}) outside {len(self)} maps")
        frames = self.resized[start:start + length + 1]
        s = self.stats
        motion = _standardize(np.diff(frames, axis=0), s["motion_mean"], s["motion_std"])
        app = _standardize(frames[1:], s["app_mean"], s["app_std"])
        sl = slice(start, start + length)
        pulse = None if self.pulse_target is None else self.pulse_target[sl]
        resp = None if self.resp_target is None else self.resp_target[sl]
        return motion, app, pulse, resp

    def batch(self):
        motion, app, pulse, resp = self.window(0, len(self))
        return ClipBatch(motion, app, pulse, resp, self.fps, self.source_id, dict(self.stats))


def preprocess_clip(frames, roi=None, fps=20.0, size=72, pulse=None, resp=None, source_id="") -> ClipBatch:
    """Motion/appearance maps for a whole clip.

    ``motion[t] = resized[t+1] - resized[t]`` and ``appearance[t] =
    resized[t+1]``; both standardized per channel over the clip (variance
    floor 1e-6).  Optional ground-truth waveforms become per-map targets
    via :func:`waveform_targets`.
    """
    return ClipSource(frames, roi, fps, size, pulse, resp, source_id).batch()


# ----------------------------------------------------------- postprocessing


def align_to_frames(wave):
    """Map-rate waveform (one sample per frame difference) padded to one sample per frame.

    The first frame has no predecessor, so it repeats the first prediction;
    this keeps a 30 s clip at three whole 10 s windows.
    """
    wave = np.asarray(wave)
    return np.concatenate([wave[:1], wave])


def butter_sos(spec: BandpassSpec, fps):
    spec.validate(fps)
    return sps.butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass", fs=fps, output="sos")


def butterworth_bandpass(series, spec: BandpassSpec, fps):
    """Zero-phase (forward-backward) Butterworth band-pass; output length equals input length."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size <= 3 * spec.order:
        raise ValueError(f"series of length {x.size} too short for order {spec.order}")
    sos = butter_sos(spec, fps)
    padlen = min(3 * (2 * len(sos) + 1), x.size - 1)
    return sps.sosfiltfilt(sos, x, padlen=padlen)


def analytic_fb_gain(freq_hz, spec: BandpassSpec, fps):
    """Closed-form amplitude gain of the forward-backward Butterworth band-pass.

    Bilinear design maps digital frequency f to analog ``2*fs*tan(pi*f/fs)``
    and the analog band-pass has power response
    ``|H|^2 = 1 / (1 + ((W^2 - Wl*Wh) / (W*(Wh - Wl)))^(2n))``.  Filtering
    forward then backward multiplies the amplitude by ``|H|`` twice, so the
    amplitude gain is that power response.
    """
    warp = lambda f: 2 * fps * np.tan(np.pi * np.asarray(f, dtype=float) / fps)  # noqa: E731
    w, wl, wh = warp(freq_hz), warp(spec.low_hz), warp(spec.high_hz)
    with np.errstate(divide="ignore"):
        x = (w * w - wl * wh) / (w * (wh - wl))
    return 1.0 / (1.0 + x ** (2 * spec.order))


def window_bounds(n_samples, fps, window_s=10.0, stride_s=None):
    size = int(round(window_s * fps))
    stride = size if stride_s is None else int(round(stride_s * fps))
    if n_samples < size:
        raise ValueError(f"series of {n_samples} samples shorter than one {window_s}s window")
    return [(s, s + size) for s in range(0, n_samples - size + 1, stride)]


def spectrum(window, fps, pad_factor=1):
    """Hann-tapered one-sided power spectrum of a mean-removed window -> (freqs, power)."""
    x = np.asarray(window, dtype=np.float64)
    x = (x - x.mean()) * sps.get_window("hann", x.size)
    n = int(x.size * pad_factor)
    power = np.abs(np.fft.rfft(x, n=n)) ** 2
    return np.fft.rfftfreq(n, d=1.0 / fps), power


def band_indices(freqs, spec: BandpassSpec, tol=1e-9):
    return np.flatnonzero((freqs >= spec.low_hz - tol) & (freqs <= spec.high_hz + tol))


def dominant_frequency(window, fps, spec: BandpassSpec, pad_factor=1):
    freqs, power = spectrum(window, fps, pad_factor)
    idx = band_indices(freqs, spec)
    if idx.size == 0:
        raise ValueError(f"no FFT bin inside {spec.low_hz}-{spec.high_hz} Hz")
    # argmax returns the first maximum -> ties resolve to the lower frequency
    return float(freqs[idx[np.argmax(power[idx])]])


def estimate_rate_fft(series, fps, band: BandpassSpec, window_s=10.0, stride_s=None, pad_factor=1,
                      f_ref_hz=None, template_hz=None):
    """Dominant in-band rate per window, with the SNR of each window attached.

    ``f_ref_hz`` (scalar or one value per window) is the reference frequency
    for the SNR; when absent the estimated peak is used.  Windows with zero
    variance are returned with ``valid=False``.
    """
    from .metrics import snr_dehaan

    if template_hz is None:
        template_hz = TEMPLATE_HZ.get(band.name, 0.1)
    x = np.asarray(series, dtype=np.float64)
    out = []
    bounds = window_bounds(x.size, fps, window_s, stride_s)
    refs = np.broadcast_to(np.asarray(f_ref_hz if f_ref_hz is not None else np.nan, dtype=float), (len(bounds),))
    for i, (lo, hi) in enumerate(bounds):
        win = x[lo:hi]
        if np.var(win) == 0:
            out.append(RateEstimate(i, float("nan"), float("nan"), band.name, valid=False))
            continue
        f_peak = dominant_frequency(win, fps, band, pad_factor)
        ref = f_peak if np.isnan(refs[i]) else float(refs[i])
        snr = snr_dehaan(win, ref, band, fps, template_hz=template_hz, window_s=window_s, pad_factor=pad_factor)
        out.append(RateEstimate(i, 60.0 * f_peak, snr, band.name))
    return out


def rates_from_waveform(series, fps, band: BandpassSpec, window_s=10.0, stride_s=None, pad_factor=1,
                        f_ref_hz=None, template_hz=None):
    """Band-pass then windowed FFT: the full post-processing chain."""
    filtered = butterworth_bandpass(series, band, fps)
    return estimate_rate_fft(filtered, fps, band, window_s, stride_s, pad_factor, f_ref_hz, template_hz)


# ----------------------------------------------------------------- file I/O


def write_waveform_csv(path, values, fps, t0=0.0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds", "value"])
        for i, v in enumerate(values):
            w.writerow([f"{t0 + i / fps:.6f}", f"{float(v):.9g}"])


def write_rates_csv(path, estimates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_index", "bpm", "snr_db", "band"])
        for e in estimates:
            w.writerow([e.window_index, f"{e.bpm:.6f}", f"{e.snr_db:.6f}", e.band])


def read_rates_csv(path):
    with open(path, newline="") as fh:
        return [RateEstimate(int(r["window_index"]), float(r["bpm"]), float(r["snr_db"]), r["band"])
                for r in csv.DictReader(fh)]

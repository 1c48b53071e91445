"""Synthetic face-patch clips from the dichromatic skin reflection model.

Each skin pixel follows::

    C(t) = I0 * (1 + psi(t)) * (u_s * (s0 + phi(t)) + u_d * d0 + u_p * theta(t)) + v_n(t)

with ``theta = pulse_amp * b(t) + resp_amp * r(t)`` (``b`` a sinusoid at
the heart rate plus an optional second harmonic, ``r`` a sinusoid at the
respiratory rate), ``psi = psi_amp * m(t)``, ``phi = phi_amp * m(t)`` and
``m(t)`` a slow illumination drift that is zero in the clean condition.
Background pixels see only the illumination term and sensor noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dten

HR_BAND_BPM = (40.0, 240.0)
RR_BAND_BPM = (4.8, 30.0)
CONDITIONS = ("clean", "natural")


def _unit(v):
    v = np.asarray(v, dtype=float)
    return tuple(float(x) for x in v / np.linalg.norm(v))


@dataclass(frozen=True)
class SceneConfig:
    I0: float = 1.0
    u_s: tuple = _unit((1.0, 1.0, 1.0))
    u_d: tuple = _unit((0.80, 0.50, 0.33))
    u_p: tuple = _unit((0.33, 0.77, 0.53))
    s0: float = 0.05
    d0: float = 0.6
    background_rgb: tuple = (0.22, 0.30, 0.38)
    pulse_bpm: float = 72.0
    resp_bpm: float = 15.0
    pulse_amp: float = 0.004
    resp_amp: float = 0.008
    harmonic_ratio: float = 0.3
    psi_amp: float = 0.0
    phi_amp: float = 0.0
    motion_amp: float = 0.0
    noise_sigma: float = 0.004
    quant_bits: int = 8
    fps: float = 20.0
    duration_s: float = 30.0
    patch_hw: int = 72
    skin_mask: tuple = (12, 12, 48, 48)  # top, left, height, width
    seed: int = 0
    condition: str = "clean"

    def __post_init__(self):
        for name in ("u_s", "u_d", "u_p", "background_rgb", "skin_mask"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        def fail(name, why):
            raise ValueError(f"SceneConfig.{name}: {why}")

        if not HR_BAND_BPM[0] <= self.pulse_bpm <= HR_BAND_BPM[1]:
            fail("pulse_bpm", f"{self.pulse_bpm} outside {HR_BAND_BPM}")
        if not RR_BAND_BPM[0] <= self.resp_bpm <= RR_BAND_BPM[1]:
            fail("resp_bpm", f"{self.resp_bpm} outside {RR_BAND_BPM}")
        for name in ("u_s", "u_d", "u_p"):
            u = np.asarray(getattr(self, name))
            if u.shape != (3,) or (u < 0).any() or abs(np.linalg.norm(u) - 1) > 1e-6:
                fail(name, "must be a nonnegative unit RGB vector")
        if self.fps <= 2 * self.pulse_bpm / 60:
            fail("fps", f"{self.fps} does not sample {self.pulse_bpm} BPM above Nyquist")
        if self.duration_s <= 0:
            fail("duration_s", "must be positive")
        top, left, h, w = self.skin_mask
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > self.patch_hw or left + w > self.patch_hw:
            fail("skin_mask", f"{self.skin_mask} does not fit a {self.patch_hw}px patch")
        if self.condition not in CONDITIONS:
            fail("condition", f"{self.condition!r} not in {CONDITIONS}")
        if self.quant_bits < 1:
            fail("quant_bits", "must be >= 1")

    @property
    def n_frames(self):
        return int(round(self.duration_s * self.fps))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def clean_preset(**kw) -> SceneConfig:
    base = dict(psi_amp=0.0, phi_amp=0.0, motion_amp=0.0, noise_sigma=0.004, condition="clean")
    base.update(kw)
    return SceneConfig(**base)


def natural_preset(**kw) -> SceneConfig:
    base = dict(psi_amp=0.15, phi_amp=0.05, motion_amp=1.5, noise_sigma=0.006, condition="natural")
    base.update(kw)
    return SceneConfig(**base)


PRESETS = {"clean": clean_preset, "natural": natural_preset}


@dataclass
class SyntheticClip:
    frames: np.ndarray  # [T,3,H,W] float32 in [0, 1]
    pulse_gt: np.ndarray  # [T]
    resp_gt: np.ndarray  # [T]
    config: SceneConfig
    condition: str = field(default="clean")

    @property
    def skin_mask_array(self):
        top, left, h, w = self.config.skin_mask
        mask = np.zeros((self.config.patch_hw,) * 2, dtype=bool)
        mask[top:top + h, left:left + w] = True
        return mask


# ------------------------------------------------------------------ signals


class _Latents:
    """Seeded phases, drift and jitter components for one scene."""

    def __init__(self, config: SceneConfig):
        rng = np.random.default_rng([config.seed, 0x5D])
        self.pulse_phase = rng.uniform(0, 2 * np.pi)
        self.harmonic_phase = rng.uniform(0, 2 * np.pi)
        self.resp_phase = rng.uniform(0, 2 * np.pi)
        self.drift_f = rng.uniform(0.02, 0.3, size=3)
        self.drift_ph = rng.uniform(0, 2 * np.pi, size=3)
        self.drift_w = rng.uniform(0.5, 1.0, size=3)
        self.jitter_f = rng.uniform(0.05, 0.5, size=(2, 3))
        self.jitter_ph = rng.uniform(0, 2 * np.pi, size=(2, 3))
        self.noise_seed = int(rng.integers(2**32))


def _sum_of_sines(t, freqs, phases, weights=None):
    t = np.asarray(t, dtype=float)[..., None]
    weights = np.ones_like(freqs) if weights is None else weights
    return (weights * np.sin(2 * np.pi * freqs * t + phases)).sum(-1) / weights.sum()


def pulse_wave(config: SceneConfig, t, lat=None):
    lat = lat or _Latents(config)
    f = config.pulse_bpm / 60.0
    t = np.asarray(t, dtype=float)
    return np.sin(2 * np.pi * f * t + lat.pulse_phase) + config.harmonic_ratio * np.sin(
        4 * np.pi * f * t + lat.harmonic_phase)


def resp_wave(config: SceneConfig, t, lat=None):
    lat = lat or _Latents(config)
    return np.sin(2 * np.pi * config.resp_bpm / 60.0 * np.asarray(t, dtype=float) + lat.resp_phase)


def theta(config: SceneConfig, t, lat=None):
    lat = lat or _Latents(config)
    return config.pulse_amp * pulse_wave(config, t, lat) + config.resp_amp * resp_wave(config, t, lat)


def drift(config: SceneConfig, t, lat=None):
    """Non-physiological variation m(t); slow (< 0.3 Hz), zero when clean."""
    if config.condition == "clean":
        return np.zeros_like(np.asarray(t, dtype=float))
    lat = lat or _Latents(config)
    return _sum_of_sines(t, lat.drift_f, lat.drift_ph, lat.drift_w)


def jitter(config: SceneConfig, t, lat=None):
    """Integer (dy, dx) offsets of the skin region per time sample."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if config.condition == "clean" or config.motion_amp == 0:
        return np.zeros((t.size, 2), dtype=int)
    lat = lat or _Latents(config)
    offs = [config.motion_amp * _sum_of_sines(t, lat.jitter_f[i], lat.jitter_ph[i]) * 3 / np.sqrt(3)
            for i in range(2)]
    return np.rint(np.stack(offs, axis=-1)).astype(int)


def _quantize(x, bits):
    levels = 2**bits - 1
    return np.rint(np.clip(x, 0.0, 1.0) * levels) / levels


def _colors(config: SceneConfig, t, lat):
    """Noise-free skin and background RGB at times ``t`` -> two [len(t), 3] arrays."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    m = drift(config, t, lat)
    th = theta(config, t, lat)
    illum = config.I0 * (1.0 + config.psi_amp * m)
    u_s, u_d, u_p = (np.asarray(v) for v in (config.u_s, config.u_d, config.u_p))
    specular = u_s[None] * (config.s0 + config.phi_amp * m)[:, None]
    diffuse = u_d[None] * config.d0 + u_p[None] * th[:, None]
    skin = illum[:, None] * (specular + diffuse)
    background = illum[:, None] * np.asarray(config.background_rgb)[None]
    return skin, background


def drm_pixel_signal(config: SceneConfig, t, is_skin, rng=None):
    """RGB value of one pixel at time ``t`` (clamped and quantized)."""
    if not 0 <= t <= config.duration_s:
        raise ValueError(f"t={t} outside clip duration {config.duration_s}")
    lat = _Latents(config)
    skin, background = _colors(config, t, lat)
    c = (skin if is_skin else background)[0]
    if config.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(lat.noise_seed)
        c = c + rng.normal(0.0, config.noise_sigma, size=3)
    return _quantize(c, config.quant_bits)


def render_clip(config: SceneConfig) -> SyntheticClip:
    config.validate()
    lat = _Latents(config)
    n, hw = config.n_frames, config.patch_hw
    t = np.arange(n) / config.fps
    skin, background = _colors(config, t, lat)
    offsets = jitter(config, t, lat)
    top, left, h, w = config.skin_mask

    frames = np.empty((n, 3, hw, hw), dtype=np.float64)
    frames[:] = background[:, :, None, None]
    for i in range(n):
        dy, dx = offsets[i]
        y0, x0 = np.clip(top + dy, 0, hw - h), np.clip(left + dx, 0, hw - w)
        frames[i, :, y0:y0 + h, x0:x0 + w] = skin[i][:, None, None]
    if config.noise_sigma > 0:
        rng = np.random.default_rng(lat.noise_seed)
        frames += rng.normal(0.0, config.noise_sigma, size=frames.shape)
    frames = _quantize(frames, config.quant_bits).astype(np.float32)
    return SyntheticClip(
        frames=frames,
        pulse_gt=pulse_wave(config, t, lat).astype(np.float32),
        resp_gt=resp_wave(config, t, lat).astype(np.float32),
        config=config,
        condition=config.condition,
    )


# ------------------------------------------------------------------ datasets


@dataclass
class Dataset:
    clips: list
    manifest: dict


def make_dataset(n_clips, condition_mix="clean", seed=0, hr_range=(45.0, 150.0), rr_range=(8.0, 24.0),
                 render=True, **scene_overrides):
    """Draw ``n_clips`` scenes with rates uniform in the given ranges.

    ``condition_mix`` is ``"clean"``, ``"natural"``, ``"mixed"`` (alternating)
    or a fraction of natural clips in [0, 1].  With ``render=False`` only
    the configs are produced (clips list holds ``SceneConfig`` objects).
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    rng = np.random.default_rng(seed)
    clip_seeds = np.random.SeedSequence(seed).generate_state(n_clips)
    if condition_mix == "mixed":
        conditions = ["clean" if i % 2 == 0 else "natural" for i in range(n_clips)]
    elif condition_mix in CONDITIONS:
        conditions = [condition_mix] * n_clips
    else:
        frac = float(condition_mix)
        conditions = ["natural" if u < frac else "clean" for u in rng.random(n_clips)]
    configs = []
    for i in range(n_clips):
        hr = float(rng.uniform(*hr_range))
        rr = float(rng.uniform(*rr_range))
        preset = PRESETS[conditions[i]]
        configs.append(preset(pulse_bpm=hr, resp_bpm=rr, seed=int(clip_seeds[i]), **scene_overrides))
    manifest = {
        "seed": seed,
        "condition_mix": condition_mix,
        "hr_range": list(hr_range),
        "rr_range": list(rr_range),
        "clips": [{"id": f"clip_{i:04d}", "config": c.to_dict()} for i, c in enumerate(configs)],
    }
    clips = [render_clip(c) for c in configs] if render else configs
    return Dataset(clips, manifest)


def _write_waveform(path, t, values):
    with open(path, "w") as fh:
        fh.write("t_seconds,value\n")
        for ti, v in zip(t, values):
            fh.write(f"{ti:.6f},{float(v):.9g}\n")


def read_waveform(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def save_clip(clip: SyntheticClip, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t = np.arange(clip.frames.shape[0]) / clip.config.fps
    dten.save(directory / "frames.dten", clip.frames)
    _write_waveform(directory / "pulse.csv", t, clip.pulse_gt)
    _write_waveform(directory / "resp.csv", t, clip.resp_gt)
    (directory / "config.json").write_text(json.dumps(clip.config.to_dict(), indent=2, sort_keys=True))
    return {"frames": "frames.dten", "pulse": "pulse.csv", "resp": "resp.csv", "config": "config.json"}


def load_clip(directory) -> SyntheticClip:
    directory = Path(directory)
    for name in ("frames.dten", "pulse.csv", "resp.csv", "config.json"):
        if not (directory / name).exists():
            raise FileNotFoundError(f"missing clip file {directory / name}")
    config = SceneConfig.from_dict(json.loads((directory / "config.json").read_text()))
    return SyntheticClip(
        frames=dten.load(directory / "frames.dten"),
        pulse_gt=read_waveform(directory / "pulse.csv")[1].astype(np.float32),
        resp_gt=read_waveform(directory / "resp.csv")[1].astype(np.float32),
        config=config,
        condition=config.condition,
    )


def save_dataset(dataset: Dataset, directory):
    """Write every clip to its own subdirectory plus ``manifest.json``.

    Config-only datasets are rendered one clip at a time.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(dataset.manifest)
    entries = []
    for entry, clip in zip(manifest["clips"], dataset.clips):
        if isinstance(clip, SceneConfig):
            clip = render_clip(clip)
        files = save_clip(clip, directory / entry["id"])
        entries.append({**entry, "path": entry["id"], "files": files})
    manifest["clips"] = entries
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    manifest = json.loads(path.read_text())
    manifest["_root"] = str(path.parent)
    return manifest


def iter_manifest_clips(manifest):
    root = Path(manifest["_root"])
    for entry in manifest["clips"]:
        yield entry["id"], load_clip(root / entry["path"])


def with_seed(config: SceneConfig, seed) -> SceneConfig:
    return replace(config, seed=seed)

"""Optimization loop, evaluation and the clean/natural cross-condition protocol."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, pipeline, synth
from .model import Model, ModelConfig, build, loss_multitask

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_clips: int = 1
    steps: int = 600
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    eval_every: int = 0
    train_condition: str = "clean"
    eval_condition: str = "clean"
    window_s: float = 10.0
    hr_pad_factor: int = 1
    rr_pad_factor: int = 4
    hr_template_hz: float = 0.1
    rr_template_hz: float = 0.075

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr >= 0:
            raise ValueError(f"TrainConfig.lr must be >= 0, got {self.lr}")
        if self.steps < 1:
            raise ValueError("TrainConfig.steps must be >= 1")
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("TrainConfig.alpha/beta must be >= 0 and not both zero")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"TrainConfig.optimizer {self.optimizer!r} not in (adam, sgd)")
        if self.batch_clips < 1:
            raise ValueError("TrainConfig.batch_clips must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def update(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.lr:
                p.assign(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params, self.lr = list(params), lr

    def update(self):
        if not self.lr:
            return
        for p in self.params:
            p.assign(p.data - self.lr * p.grad)


def make_optimizer(model: Model, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(model.parameters(), config.lr, config.betas, config.eps)
    return SGD(model.parameters(), config.lr)


def _stack(batch):
    motion = np.concatenate([b[0] for b in batch])
    app = np.concatenate([b[1] for b in batch])
    pulse = None if batch[0][2] is None else np.concatenate([b[2] for b in batch])
    resp = None if batch[0][3] is None else np.concatenate([b[3] for b in batch])
    return motion, app, pulse, resp


def compute_loss(model: Model, batch, config: TrainConfig, dropout_seed=0):
    """Forward + loss for a list of equal-length ``(motion, appearance, pulse, resp)`` windows."""
    motion, app, pulse, resp = _stack(batch)
    segment = batch[0][0].shape[0]
    out = model.forward(motion, app, mode="train", seed=dropout_seed, segment=segment)
    return loss_multitask(out, {"p": pulse, "r": resp}, config.alpha, config.beta)


def step(model: Model, batch, config: TrainConfig, optimizer=None, dropout_seed=0):
    """One forward, backward and parameter update; returns the pre-update loss."""
    model.zero_grad()
    loss = compute_loss(model, batch, config, dropout_seed)
    value = float(loss.data)
    loss.backward()
    bad = _offender(model)
    if bad or not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}; " + (bad or "all parameters and gradients finite"))
    (optimizer or make_optimizer(model, config)).update()
    return {"loss": value}


def _offender(model):
    for p in model.parameters():
        if not np.isfinite(p.data).all():
            return f"parameter {p.name} holds non-finite values"
    for p in model.parameters():
        if not np.isfinite(p.grad).all():
            return f"parameter {p.name} has a non-finite gradient"
    return ""


# ------------------------------------------------------------------ sources


def clip_source(clip: synth.SyntheticClip, size, source_id=""):
    src = pipeline.ClipSource(clip.frames, None, clip.config.fps, size, clip.pulse_gt, clip.resp_gt, source_id)
    src.truth_bpm = {"hr": clip.config.pulse_bpm, "rr": clip.config.resp_bpm}
    src.scene = clip.config
    return src


def sources_from(data, size):
    """Accept a manifest path, a loaded manifest, a :class:`synth.Dataset` or a list of clips/configs."""
    if isinstance(data, (str, Path)):
        data = synth.load_manifest(data)
    if isinstance(data, dict):
        return [clip_source(clip, size, cid) for cid, clip in synth.iter_manifest_clips(data)]
    if isinstance(data, synth.Dataset):
        ids = [e["id"] for e in data.manifest["clips"]]
        data = list(zip(ids, data.clips))
    else:
        data = [(f"clip_{i:04d}", c) for i, c in enumerate(data)]
    out = []
    for cid, clip in data:
        if isinstance(clip, synth.SceneConfig):
            clip = synth.render_clip(clip)
        if isinstance(clip, pipeline.ClipSource):
            out.append(clip)
        else:
            out.append(clip_source(clip, size, cid))
    return out


def sample_batch(sources, rng, batch_clips, length):
    batch = []
    for _ in range(batch_clips):
        src = sources[rng.integers(len(sources))]
        start = int(rng.integers(len(src) - length + 1))
        batch.append(src.window(start, length))
    return batch


# --------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    reports: dict
    per_clip: list = field(default_factory=list)


def evaluate_model(model: Model, sources, config: TrainConfig = None, condition="") -> Evaluation:
    """Predict every clip, post-process each head and aggregate per band."""
    config = config or TrainConfig()
    bands = {"pulse": ("hr", config.hr_pad_factor, config.hr_template_hz), "resp": ("rr", config.rr_pad_factor, config.rr_template_hz)}
    gathered = {b: ([], []) for b, _, _ in bands.values()}
    per_clip = []
    for src in sources:
        batch = src.batch()
        pulse, resp, masks = model.predict(batch.motion, batch.appearance)
        entry = {"id": src.source_id, "pulse": pulse, "resp": resp, "masks": masks}
        for head, wave in (("pulse", pulse), ("resp", resp)):
            if wave is None:
                continue
            wave = pipeline.align_to_frames(wave)
            band_name, pad, template = bands[head]
            band = pipeline.BANDS[band_name]
            truth = getattr(src, "truth_bpm", {}).get(band_name)
            if truth is None:
                target = pipeline.align_to_frames(src.pulse_target if head == "pulse" else src.resp_target)
                ref = pipeline.estimate_rate_fft(target, src.fps, band, config.window_s, pad_factor=pad)
                truths = [e.bpm for e in ref]
            else:
                n_win = len(pipeline.window_bounds(len(wave), src.fps, config.window_s))
                truths = [truth] * n_win
            filtered = pipeline.butterworth_bandpass(wave, band, src.fps)
            est = pipeline.estimate_rate_fft(filtered, src.fps, band, config.window_s, pad_factor=pad,
                                             f_ref_hz=np.asarray(truths) / 60.0, template_hz=template)
            gathered[band_name][0].extend(est)
            gathered[band_name][1].extend(truths)
            entry[band_name] = est
        per_clip.append(entry)
    reports = {b: metrics.evaluate(e, t, b, condition) for b, (e, t) in gathered.items() if e}
    return Evaluation(reports, per_clip)


# --------------------------------------------------------------------- runs


@dataclass
class RunResult:
    model: Model
    losses: list
    log_rows: list
    evaluation: Evaluation = None
    out_dir: Path = None


def run(config: TrainConfig, model_config: ModelConfig, train_data, eval_data=None, out_dir=None,
        model_seed=None, progress=False):
    """Train for ``config.steps`` steps, evaluating every ``eval_every`` steps and at the end.

    Writes ``train_log.csv``, ``run_config.json``, ``checkpoint/`` and
    ``metrics.json`` under ``out_dir`` when given.
    """
    size = model_config.input_hw
    train_sources = sources_from(train_data, size)
    eval_sources = sources_from(eval_data, size) if eval_data is not None else None
    model = build(model_config, config.seed if model_seed is None else model_seed)
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    drop_seeds = np.random.SeedSequence([config.seed, 1]).generate_state(config.steps)
    length = model_config.frames_per_clip

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run_config.json").write_text(json.dumps(
            {"train": config.to_dict(), "model": model_config.to_dict()}, indent=2, sort_keys=True))

    losses, rows = [], []
    started = time.time()
    for i in range(1, config.steps + 1):
        batch = sample_batch(train_sources, rng, config.batch_clips, length)
        loss = step(model, batch, config, optimizer, int(drop_seeds[i - 1]))["loss"]
        losses.append(loss)
        row = {"step": i, "loss": loss, "eval_hr_mae": ""}
        if eval_sources and config.eval_every and i % config.eval_every == 0:
            ev = evaluate_model(model, eval_sources, config, config.eval_condition)
            row["eval_hr_mae"] = ev.reports["hr"].mae_bpm if "hr" in ev.reports else ""
        rows.append(row)
        if progress and (i % 50 == 0 or i == 1):
            log.info("step %d loss %.4f (%.1fs)", i, loss, time.time() - started)

    evaluation = evaluate_model(model, eval_sources, config, config.eval_condition) if eval_sources else None
    if out_dir is not None:
        with open(out_dir / "train_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "eval_hr_mae"])
            w.writeheader()
            for row in rows:
                w.writerow({**row, "loss": f"{row['loss']:.8g}"})
        model.save(out_dir / "checkpoint", step=config.steps)
        if evaluation is not None:
            (out_dir / "metrics.json").write_text(json.dumps(
                {b: asdict(r) for b, r in evaluation.reports.items()}, indent=2, sort_keys=True))
    return RunResult(model, losses, rows, evaluation, out_dir)


def cross_condition(model_config: ModelConfig, config: TrainConfig, clean_train, natural_train, clean_eval,
                    natural_eval, out_dir=None):
    """C2N (train clean, test natural) and N2C (train natural, test clean) runs."""
    results = {}
    for tag, train_data, eval_data, tc, ec in (
        ("C2N", clean_train, natural_eval, "clean", "natural"),
        ("N2C", natural_train, clean_eval, "natural", "clean"),
    ):
        cfg = TrainConfig(**{**config.to_dict(), "train_condition": tc, "eval_condition": ec})
        sub = None if out_dir is None else Path(out_dir) / tag
        results[tag] = run(cfg, model_config, train_data, eval_data, sub)
    return results

"""Command-line entry point: ``tsdan <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 missing artifact,
3 numeric failure.  ``RPPG_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import metrics, model, pipeline, synth, train
from .model import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = ("model", "train", "synth")

log = logging.getLogger("tsdan")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()):
    """Sectioned JSON config with ``section.key=value`` overrides applied after the file."""
    cfg = {s: {} for s in SECTIONS}
    if path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing config file {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        for section, values in loaded.items():
            if section not in SECTIONS:
                raise UsageError(f"unknown config section {section!r}; expected one of {SECTIONS}")
            cfg[section].update(values)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise UsageError(f"override {item!r} must look like section.key=value with section in {SECTIONS}")
        cfg[section][name] = _parse_value(value)
    return cfg


def _check_keys(section, values, allowed):
    unknown = set(values) - set(allowed)
    if unknown:
        raise UsageError(f"unknown {section} key(s): {', '.join(sorted(unknown))}")


def model_config(cfg):
    allowed = [f.name for f in fields(model.ModelConfig)]
    _check_keys("model", cfg["model"], allowed)
    values = dict(cfg["model"])
    # a baseline variant alone implies no ECA gates
    if values.get("variant", "tsdan") != "tsdan":
        values.setdefault("eca_count", 0)
    mc = model.ModelConfig.from_dict(values)
    mc.validate()
    return mc


def train_config(cfg):
    _check_keys("train", cfg["train"], [f.name for f in fields(train.TrainConfig)])
    try:
        return train.TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- commands


SAMPLED_SCENE_KEYS = ("pulse_bpm", "resp_bpm", "seed", "condition")


def cmd_synth(args, cfg):
    _check_keys("synth", cfg["synth"], [f.name for f in fields(synth.SceneConfig)])
    fixed = sorted(set(cfg["synth"]) & set(SAMPLED_SCENE_KEYS))
    if fixed:
        raise UsageError(f"synth.{fixed[0]} is drawn per clip; use --hr-range/--rr-range/--seed/--condition")
    ds = synth.make_dataset(args.n, args.condition, args.seed, tuple(args.hr_range), tuple(args.rr_range),
                            render=False, **cfg["synth"])
    for c in ds.clips:
        c.validate()
    path = synth.save_dataset(ds, args.out)
    print(path)


def cmd_train(args, cfg):
    mc, tc = model_config(cfg), train_config(cfg)
    train_manifest = synth.load_manifest(args.data)
    eval_manifest = synth.load_manifest(args.eval_data) if args.eval_data else None
    result = train.run(tc, mc, train_manifest, eval_manifest, args.out, progress=True)
    print(Path(args.out) / "checkpoint")
    if result.evaluation is not None:
        _print_reports(result.evaluation.reports, mc.variant)


def _print_reports(reports, label):
    print(metrics.format_table([(label, r) for r in reports.values()]))


def cmd_eval(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = train_config(cfg)
    if args.pred:
        reports = _eval_waveforms(args, tc)
        label = Path(args.pred).stem
    else:
        if not args.checkpoint or not args.data:
            raise UsageError("eval needs --checkpoint and --data, or --pred and --truth")
        m = model.Model.load(args.checkpoint)
        sources = train.sources_from(synth.load_manifest(args.data), m.config.input_hw)
        condition = args.condition or tc.eval_condition
        reports = train.evaluate_model(m, sources, tc, condition).reports
        label = m.config.variant
    (out / "metrics.json").write_text(json.dumps({b: asdict(r) for b, r in reports.items()}, indent=2,
                                                 sort_keys=True))
    table = metrics.format_table([(label, r) for r in reports.values()])
    (out / "metrics.txt").write_text(table + "\n")
    print(table)


def _eval_waveforms(args, tc):
    if not args.truth:
        raise UsageError("--pred needs --truth")
    t_pred, pred = synth.read_waveform(args.pred)
    t_true, truth = synth.read_waveform(args.truth)
    if pred.size != truth.size:
        raise UsageError(f"--pred has {pred.size} samples but --truth has {truth.size}")
    fps = args.fps or 1.0 / float(np.median(np.diff(t_pred)))
    band = pipeline.BANDS[args.band]
    pad = tc.hr_pad_factor if args.band == "hr" else tc.rr_pad_factor
    ref = pipeline.rates_from_waveform(truth, fps, band, tc.window_s, pad_factor=pad)
    truths = [e.bpm for e in ref]
    est = pipeline.rates_from_waveform(pred, fps, band, tc.window_s, pad_factor=pad,
                                       f_ref_hz=np.asarray(truths) / 60.0)
    return {args.band: metrics.evaluate(est, truths, band, args.condition or "")}


def _load_clip_source(path, size):
    clip = synth.load_clip(path)
    return train.clip_source(clip, size, Path(path).name), clip


def cmd_infer(args, cfg):
    tc = train_config(cfg)
    m = model.Model.load(args.checkpoint)
    src, clip = _load_clip_source(args.clip, m.config.input_hw)
    batch = src.batch()
    pulse, resp, _ = m.predict(batch.motion, batch.appearance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for head, wave, band_name, pad in (("pulse", pulse, "hr", tc.hr_pad_factor), ("resp", resp, "rr", tc.rr_pad_factor)):
        if wave is None:
            continue
        wave = pipeline.align_to_frames(wave)
        band = pipeline.BANDS[band_name]
        pipeline.write_waveform_csv(out / f"{head}.csv", wave, src.fps)
        est = pipeline.rates_from_waveform(wave, src.fps, band, tc.window_s, pad_factor=pad)
        pipeline.write_rates_csv(out / f"rates_{band_name}.csv", est)
        print(out / f"rates_{band_name}.csv")


def write_pgm(path, grid):
    """8-bit binary PGM, min-max scaled; a constant grid maps to zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    scaled = np.zeros(grid.shape, np.uint8) if hi == lo else np.round(255 * (grid - lo) / (hi - lo)).astype(np.uint8)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(scaled.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w)


def check_mask_sums(masks, rtol=1e-3):
    """Every per-frame mask must sum to H*W/2."""
    masks = np.asarray(masks, dtype=np.float64)
    h, w = masks.shape[-2:]
    sums = masks.reshape(masks.shape[0], -1).sum(axis=1)
    bad = ~(np.abs(sums - h * w / 2) <= rtol * h * w / 2)
    if bad.any():
        raise train.NumericError(f"attention mask sum {sums[bad][0]:.6g} != {h * w / 2} at frame "
                                 f"{int(np.argmax(bad))}; the model is broken")


def cmd_attention_dump(args, cfg):
    m = model.Model.load(args.checkpoint)
    src, _ = _load_clip_source(args.clip, m.config.input_hw)
    batch = src.batch()
    _, _, masks = m.predict(batch.motion, batch.appearance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, mk in enumerate(masks, start=1):
        mk = mk[:, 0]
        check_mask_sums(mk)
        grid = mk.mean(axis=0) if args.frame is None else mk[args.frame]
        np.savetxt(out / f"mask{i}.csv", grid, delimiter=",", fmt="%.8g")
        write_pgm(out / f"mask{i}.pgm", grid)
        print(out / f"mask{i}.csv")


def cmd_grad_check(args, cfg):
    base = {**model.miniature_config().to_dict(), **cfg["model"]}
    mc = model.ModelConfig.from_dict(base)
    mc.validate()
    rows = []
    worst = 0.0
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        n = mc.frames_per_clip
        shape = (n, 3, mc.input_hw, mc.input_hw)
        motion, app = rng.standard_normal(shape), rng.standard_normal(shape)
        truth = {"p": rng.standard_normal(n), "r": rng.standard_normal(n)}
        m = model.build(mc, seed, dtype=np.float64)
        rep = model.grad_check_model(m, motion, app, truth, tolerance=args.tolerance,
                                     max_elements=args.max_elements, seed=seed)
        rows.append({"seed": seed, "max_rel_err": rep.max_rel_err, "passed": rep.passed, "n_checked": rep.n_checked})
        worst = max(worst, rep.max_rel_err)
        print(f"seed {seed}: max rel err {rep.max_rel_err:.3e} over {rep.n_checked} entries "
              f"{'ok' if rep.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.json").write_text(json.dumps({"config": mc.to_dict(), "seeds": rows}, indent=2))
    if not all(r["passed"] for r in rows):
        raise train.NumericError(f"gradient check failed: worst relative error {worst:.3e}")


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="tsdan", description="TS-DAN rPPG heart and respiration rate toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file with model/train/synth sections")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable, applied after --config)")
        sp.add_argument("--out", required=out_required, help="output directory (created if absent)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress")

    sp = sub.add_parser("synth", help="render a synthetic dataset")
    common(sp)
    sp.add_argument("--n", type=int, default=8, help="number of clips")
    sp.add_argument("--condition", default="clean", help="clean, natural, mixed or a natural fraction")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hr-range", type=float, nargs=2, default=(50.0, 150.0), metavar=("LO", "HI"),
                    help="pulse rate range in BPM")
    sp.add_argument("--rr-range", type=float, nargs=2, default=(8.0, 24.0), metavar=("LO", "HI"),
                    help="respiration rate range in BPM")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a dataset manifest")
    common(sp)
    sp.add_argument("--data", required=True, help="training manifest.json or dataset directory")
    sp.add_argument("--eval-data", help="held-out manifest for periodic and final evaluation")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint, or a predicted waveform against a reference")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint directory")
    sp.add_argument("--data", help="evaluation manifest.json or dataset directory")
    sp.add_argument("--pred", help="predicted waveform CSV (t_seconds,value)")
    sp.add_argument("--truth", help="reference waveform CSV for --pred")
    sp.add_argument("--band", choices=sorted(pipeline.BANDS), default="hr", help="band for --pred")
    sp.add_argument("--fps", type=float, help="sample rate for --pred (default: from timestamps)")
    sp.add_argument("--condition", help="condition label for the report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="waveforms and per-window rates for one clip")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--clip", required=True, help="clip directory (frames.dten, config.json, ...)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("attention-dump", help="write both attention masks as CSV and PGM")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--frame", type=int, help="dump one frame instead of the clip mean")
    sp.set_defaults(func=cmd_attention_dump)

    sp = sub.add_parser("grad-check", help="finite-difference check of the miniature model")
    common(sp, out_required=False)
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--max-elements", type=int, default=None, help="sample this many entries per tensor")
    sp.set_defaults(func=cmd_grad_check)
    return p


def _limit_threads():
    value = os.environ.get("RPPG_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"RPPG_THREADS must be an integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _limit_threads()
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (train.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

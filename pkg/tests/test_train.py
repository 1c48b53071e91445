import csv
import json

import numpy as np
import pytest

from tsdan import model as M
from tsdan import synth, train
from tsdan.model import ModelConfig
from tsdan.train import TrainConfig

TINY = ModelConfig(input_hw=12, frames_per_clip=4, conv_widths=(4, 8), dense_units=8)


def tiny_scenes(n, condition="clean", seed=0):
    return synth.make_dataset(n, condition, seed, render=False, patch_hw=16, skin_mask=(4, 4, 8, 8),
                              duration_s=10.0).clips


def tiny_batch(rng, n_clips=1, cfg=TINY):
    t, hw = cfg.frames_per_clip, cfg.input_hw
    return [(rng.standard_normal((t, 3, hw, hw)).astype(np.float32),
             rng.standard_normal((t, 3, hw, hw)).astype(np.float32),
             rng.standard_normal(t).astype(np.float32),
             rng.standard_normal(t).astype(np.float32)) for _ in range(n_clips)]


def test_config_validation():
    with pytest.raises(ValueError, match="steps"):
        TrainConfig(steps=0)
    with pytest.raises(ValueError, match="alpha"):
        TrainConfig(alpha=0, beta=0)
    with pytest.raises(ValueError, match="optimizer"):
        TrainConfig(optimizer="lbfgs")


def test_lr_zero_leaves_parameters(rng):
    m = M.build(TINY)
    before = {k: p.data.copy() for k, p in m.params.items()}
    for opt in ("sgd", "adam"):
        out = train.step(m, tiny_batch(rng), TrainConfig(lr=0.0, optimizer=opt))
        assert np.isfinite(out["loss"])
    for k, p in m.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_step_returns_pre_update_loss(rng):
    m = M.build(TINY)
    batch, cfg = tiny_batch(rng), TrainConfig(lr=1e-2)
    expected = train.compute_loss(m, batch, cfg, dropout_seed=3).item()
    assert train.step(m, batch, cfg, dropout_seed=3)["loss"] == expected
    assert train.compute_loss(m, batch, cfg, dropout_seed=3).item() != expected


def test_overfit_single_batch(rng):
    m = M.build(TINY, seed=1)
    cfg = TrainConfig(lr=3e-3)
    opt = train.make_optimizer(m, cfg)
    batch = tiny_batch(rng)
    losses = [train.step(m, batch, cfg, opt)["loss"] for _ in range(200)]
    assert losses[0] / min(losses[-10:]) >= 10


def test_batch_gradient_is_mean_of_clip_gradients(rng):
    cfg = TrainConfig()
    # dropout masks depend on the batch shape, so compare without them
    m = M.build(M.with_overrides(TINY, dropout_rates=(0, 0, 0)), seed=2, dtype=np.float64)
    batch = tiny_batch(rng, 2)

    def grads(b):
        m.zero_grad()
        train.compute_loss(m, b, cfg).backward()
        return {k: p.grad.copy() for k, p in m.params.items()}

    joint, g0, g1 = grads(batch), grads(batch[:1]), grads(batch[1:])
    for k in joint:
        np.testing.assert_allclose(joint[k], (g0[k] + g1[k]) / 2, rtol=1e-9, atol=1e-12)


def test_hr_head_gradients_match_single_task(rng):
    batch = tiny_batch(rng)
    multi = M.build(TINY, seed=4, dtype=np.float64)
    single = M.build(M.with_overrides(TINY, task="hr"), seed=4, dtype=np.float64)
    for name, p in single.params.items():
        p.assign(multi.params[name].data)
    for m, cfg in ((multi, TrainConfig(alpha=1, beta=0)), (single, TrainConfig())):
        m.zero_grad()
        train.compute_loss(m, batch, cfg).backward()
    for name, p in single.params.items():
        np.testing.assert_allclose(p.grad, multi.params[name].grad, rtol=1e-10, atol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_parameter(rng):
    m = M.build(TINY)
    bad = m.params["dense1.w"].data.copy()
    bad[0, 0] = np.inf
    m.params["dense1.w"].assign(bad)
    with pytest.raises(train.NumericError, match="dense1.w"):
        train.step(m, tiny_batch(rng), TrainConfig())


def test_run_is_deterministic_and_logs(tmp_path):
    scenes = tiny_scenes(2)
    cfg = TrainConfig(steps=3, seed=5)
    a = train.run(cfg, TINY, scenes, out_dir=tmp_path / "a")
    b = train.run(cfg, TINY, scenes, out_dir=tmp_path / "b")
    assert a.losses == b.losses
    rows = list(csv.reader(open(tmp_path / "a" / "train_log.csv")))
    assert rows[0] == ["step", "loss", "eval_hr_mae"] and len(rows) == 4
    assert json.loads((tmp_path / "a" / "run_config.json").read_text())["train"]["steps"] == 3
    back = M.Model.load(tmp_path / "a" / "checkpoint")
    for k, p in a.model.params.items():
        np.testing.assert_array_equal(back.params[k].data, p.data)


def test_single_step_log(tmp_path):
    train.run(TrainConfig(steps=1), TINY, tiny_scenes(1), out_dir=tmp_path)
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 2


def test_periodic_evaluation_entries(tmp_path):
    res = train.run(TrainConfig(steps=4, eval_every=2), TINY, tiny_scenes(1), tiny_scenes(1, seed=9), tmp_path)
    evals = [r for r in res.log_rows if r["eval_hr_mae"] != ""]
    assert [r["step"] for r in evals] == [2, 4]
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert set(report) == {"hr", "rr"} and report["hr"]["n_windows"] == 1


def test_run_from_manifest_and_missing_clip(tmp_path):
    d = synth.make_dataset(2, "clean", 0, render=False, patch_hw=16, skin_mask=(4, 4, 8, 8), duration_s=10.0)
    path = synth.save_dataset(d, tmp_path / "ds")
    res = train.run(TrainConfig(steps=2), TINY, path)
    assert len(res.losses) == 2
    (tmp_path / "ds" / "clip_0001" / "pulse.csv").unlink()
    with pytest.raises(FileNotFoundError, match="clip_0001"):
        train.run(TrainConfig(steps=1), TINY, path)


def test_cross_condition_protocol(tmp_path):
    res = train.cross_condition(TINY, TrainConfig(steps=2), tiny_scenes(1), tiny_scenes(1, "natural"),
                                tiny_scenes(1, seed=3), tiny_scenes(1, "natural", seed=4), tmp_path)
    assert set(res) == {"C2N", "N2C"}
    c2n = res["C2N"]
    assert c2n.evaluation.reports["hr"].condition == "natural"
    assert (tmp_path / "C2N" / "train_log.csv").exists()
    assert json.loads((tmp_path / "C2N" / "run_config.json").read_text())["train"]["train_condition"] == "clean"
    assert res["N2C"].evaluation.reports["hr"].condition == "clean"


class GroundTruthModel:
    """Stands in for a network by replaying the source's own targets."""

    def __init__(self, src):
        self.src = src

    def predict(self, motion, appearance):
        return self.src.pulse_target, self.src.resp_target, ()


def test_evaluate_model_on_perfect_waveforms():
    for src in train.sources_from(tiny_scenes(3), TINY.input_hw):
        reports = train.evaluate_model(GroundTruthModel(src), [src]).reports
        # the remaining error is spectral resolution: half a bin for HR, about 1.6 BPM worst case for padded RR
        assert reports["hr"].mae_bpm <= 3.0
        assert reports["rr"].mae_bpm <= 2.0
        assert reports["hr"].availability == 1.0

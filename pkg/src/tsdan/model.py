"""Two-branch attention networks: 2D-CAN, TS-CAN and TS-DAN.

The motion branch sees frame differences, the appearance branch sees the
raw frames and produces two soft spatial masks that weight the motion
features.  TS variants add temporal shifts before every motion conv; TS-DAN
also inserts ECA channel gates (before each attention 1x1 conv in the
appearance branch and/or before the final pooling of the motion branch).
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import blocks, dten
from . import numerics as nx
from .blocks import ShiftSpec
from .numerics import Parameter, Tensor

VARIANTS = ("can2d", "tscan", "tsdan")
TASKS = ("hr", "rr", "multitask")
ECA_SITES = ("att1", "att2", "final")
DEFAULT_PLACEMENT = {0: (), 1: ("final",), 3: ("att1", "att2", "final")}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "tsdan"
    eca_count: int = 3
    task: str = "multitask"
    input_hw: int = 72
    frames_per_clip: int = 10
    conv_widths: tuple = (32, 64)
    kernel: int = 3
    dense_units: int = 128
    dropout_rates: tuple = (0.25, 0.25, 0.5)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    eca_kernel: int = 3
    eca_placement: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(self.conv_widths))
        object.__setattr__(self, "dropout_rates", tuple(self.dropout_rates))
        if isinstance(self.shift, (list, tuple)):
            object.__setattr__(self, "shift", ShiftSpec.from_json(self.shift))
        if self.eca_placement is not None:
            object.__setattr__(self, "eca_placement", tuple(self.eca_placement))
        self.validate()

    def validate(self):
        def fail(name, why):
            raise ConfigError(f"ModelConfig.{name}: {why}")

        if self.variant not in VARIANTS:
            fail("variant", f"{self.variant!r} not in {VARIANTS}")
        if self.task not in TASKS:
            fail("task", f"{self.task!r} not in {TASKS}")
        if self.eca_count not in (0, 1, 3):
            fail("eca_count", f"must be 0, 1 or 3, got {self.eca_count}")
        if (self.eca_count == 0) != (self.variant != "tsdan"):
            fail("eca_count", f"{self.eca_count} is inconsistent with variant {self.variant!r}")
        if self.input_hw < 4 or self.input_hw % 4:
            fail("input_hw", f"must be a positive multiple of 4, got {self.input_hw}")
        if self.variant != "can2d" and self.frames_per_clip < 2:
            fail("frames_per_clip", "shifted variants need at least 2 frames")
        if self.frames_per_clip < 1:
            fail("frames_per_clip", "must be >= 1")
        if len(self.conv_widths) != 2 or min(self.conv_widths) < 1:
            fail("conv_widths", f"need two positive widths, got {self.conv_widths}")
        if self.kernel % 2 == 0:
            fail("kernel", f"must be odd, got {self.kernel}")
        if self.eca_kernel % 2 == 0:
            fail("eca_kernel", f"must be odd, got {self.eca_kernel}")
        if len(self.dropout_rates) != 3 or not all(0 <= r < 1 for r in self.dropout_rates):
            fail("dropout_rates", f"need three rates in [0, 1), got {self.dropout_rates}")
        placement = self.placement
        if len(placement) != self.eca_count or not set(placement) <= set(ECA_SITES):
            fail("eca_placement", f"{placement} does not name {self.eca_count} sites from {ECA_SITES}")

    @property
    def placement(self):
        if self.eca_placement is not None:
            return self.eca_placement
        return DEFAULT_PLACEMENT[self.eca_count]

    @property
    def shifted(self):
        return self.variant != "can2d"

    def to_dict(self):
        d = asdict(self)
        d["shift"] = self.shift.to_json()
        d["conv_widths"] = list(self.conv_widths)
        d["dropout_rates"] = list(self.dropout_rates)
        if self.eca_placement is not None:
            d["eca_placement"] = list(self.eca_placement)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelOutput:
    pulse: Optional[Tensor]
    resp: Optional[Tensor]
    attention_maps: tuple


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.use_shift = config.shifted
        self.eca_sites = tuple(config.placement)
        self.params = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    def _add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(np.asarray(value, dtype=self.dtype), name)

    def _init_params(self, rng):
        cfg = self.config
        c1, c2 = cfg.conv_widths
        k = cfg.kernel
        chans = [(3, c1), (c1, c1), (c1, c2), (c2, c2)]
        for branch in ("motion", "app"):
            for i, (cin, cout) in enumerate(chans, start=1):
                self._add(f"{branch}_conv{i}.w", _glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k))
                self._add(f"{branch}_conv{i}.b", np.zeros(cout))
        for i, cin in ((1, c1), (2, c2)):
            self._add(f"att{i}.w", _glorot(rng, (1, cin, 1, 1), cin, 1))
            self._add(f"att{i}.b", np.zeros(1))
        pooled = cfg.input_hw // 4
        flat = c2 * pooled * pooled
        self._add("dense1.w", _glorot(rng, (flat, cfg.dense_units), flat, cfg.dense_units))
        self._add("dense1.b", np.zeros(cfg.dense_units))
        for head in self.heads:
            self._add(f"head_{head}.w", _glorot(rng, (cfg.dense_units, 1), cfg.dense_units, 1))
            self._add(f"head_{head}.b", np.zeros(1))
        # ECA kernels last so shared layers match the non-ECA variants seed-for-seed
        bound = 1.0 / np.sqrt(cfg.eca_kernel)
        for site in self.eca_sites:
            self._add(f"eca_{site}.k", rng.uniform(-bound, bound, size=cfg.eca_kernel))

    @property
    def heads(self):
        task = self.config.task
        return {"hr": ("pulse",), "rr": ("resp",), "multitask": ("pulse", "resp")}[task]

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def manifest(self):
        """Ordered layer names, e.g. for asserting which blocks a variant has."""
        layers = []
        for i in (1, 2, 3, 4):
            if self.use_shift:
                layers.append(f"motion_shift{i}")
            layers.append(f"motion_conv{i}")
            layers.append(f"app_conv{i}")
            if i in (2, 4):
                site = f"att{i // 2}"
                if site in self.eca_sites:
                    layers.append(f"eca_{site}")
                layers.append(site)
                if i == 4 and "final" in self.eca_sites:
                    layers.append("eca_final")
                layers.append(f"pool{i // 2}")
        layers += ["dense1"] + [f"head_{h}" for h in self.heads]
        return layers

    def ablate(self, shift=False, eca=False):
        """A view sharing this model's parameters with shifts and/or ECA gates disabled."""
        other = object.__new__(Model)
        other.__dict__.update(self.__dict__)
        if shift:
            other.use_shift = False
        if eca:
            other.eca_sites = ()
        return other

    # ---------------------------------------------------------------- forward

    def forward(self, motion, appearance, mode="infer", seed=0, segment=None) -> ModelOutput:
        cfg = self.config
        p = self.params
        motion, appearance = nx.as_tensor(motion), nx.as_tensor(appearance)
        hw = cfg.input_hw
        if motion.shape != appearance.shape or motion.data.ndim != 4 or motion.shape[1:] != (3, hw, hw):
            raise ValueError(f"expected matching [N,3,{hw},{hw}] inputs, got {motion.shape} / {appearance.shape}")
        if not (np.isfinite(motion.data).all() and np.isfinite(appearance.data).all()):
            raise ValueError("non-finite model input")
        n = motion.shape[0]
        segment = segment or min(cfg.frames_per_clip, n)
        if n % segment:
            raise ValueError(f"{n} frames do not split into clips of {segment}")
        training = mode == "train"
        drop = cfg.dropout_rates
        seeds = np.random.SeedSequence(seed).generate_state(3)

        def shift(x):
            return blocks.temporal_shift(x, cfg.shift, segment) if self.use_shift else x

        def conv(branch, i, x):
            return nx.tanh(nx.conv2d(x, p[f"{branch}_conv{i}.w"], p[f"{branch}_conv{i}.b"]))

        def gate(site, x):
            return blocks.eca_gate(x, p[f"eca_{site}.k"]) if site in self.eca_sites else x

        m = conv("motion", 1, shift(motion))
        m = conv("motion", 2, shift(m))
        a = conv("app", 1, appearance)
        a = conv("app", 2, a)
        a = gate("att1", a)
        mask1 = blocks.spatial_attention_mask(a, p["att1.w"], p["att1.b"])
        m = blocks.apply_spatial_attention(m, mask1)
        m = nx.dropout(nx.avg_pool2d(m), drop[0], seeds[0], training)
        a = nx.avg_pool2d(a)

        m = conv("motion", 3, shift(m))
        m = conv("motion", 4, shift(m))
        a = conv("app", 3, a)
        a = conv("app", 4, a)
        a = gate("att2", a)
        mask2 = blocks.spatial_attention_mask(a, p["att2.w"], p["att2.b"])
        m = blocks.apply_spatial_attention(m, mask2)
        m = gate("final", m)
        m = nx.dropout(nx.avg_pool2d(m), drop[1], seeds[1], training)

        flat = nx.reshape(m, (n, -1))
        hidden = nx.tanh(nx.dense(flat, p["dense1.w"], p["dense1.b"]))
        hidden = nx.dropout(hidden, drop[2], seeds[2], training)
        outs = {}
        for head in self.heads:
            outs[head] = nx.reshape(nx.dense(hidden, p[f"head_{head}.w"], p[f"head_{head}.b"]), (n,))
        return ModelOutput(outs.get("pulse"), outs.get("resp"), (mask1, mask2))

    __call__ = forward

    def predict(self, motion, appearance, chunk_clips=8):
        """Infer-mode waveforms for an arbitrarily long frame stack.

        Frames are processed in clips of ``frames_per_clip``; a trailing
        partial clip is covered by the last full-length window.
        """
        motion, appearance = np.asarray(motion, self.dtype), np.asarray(appearance, self.dtype)
        n = motion.shape[0]
        t = min(self.config.frames_per_clip, n)
        starts = list(range(0, n - t + 1, t))
        if starts[-1] + t < n:
            starts.append(n - t)
        out = {h: np.zeros(n, dtype=self.dtype) for h in self.heads}
        masks = [None, None]
        with nx.no_grad():
            for i in range(0, len(starts), chunk_clips):
                group = starts[i:i + chunk_clips]
                idx = np.concatenate([np.arange(s, s + t) for s in group])
                res = self.forward(motion[idx], appearance[idx], mode="infer", segment=t)
                for h in self.heads:
                    vals = (res.pulse if h == "pulse" else res.resp).data
                    out[h][idx] = vals
                for j, mk in enumerate(res.attention_maps):
                    full = masks[j] if masks[j] is not None else np.zeros((n,) + mk.shape[1:], self.dtype)
                    full[idx] = mk.data
                    masks[j] = full
        return out.get("pulse"), out.get("resp"), tuple(masks)

    # ------------------------------------------------------------- checkpoint

    def save(self, directory, step=0, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, param in self.params.items():
            dten.save(directory / f"{name}.dten", param.data)
        manifest = {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "step": step,
            "parameters": list(self.params),
        }
        if extra:
            manifest.update(extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        model = cls(ModelConfig.from_dict(manifest["config"]), seed=manifest["seed"])
        names = manifest["parameters"]
        if names != list(model.params):
            raise ValueError(f"checkpoint parameters {names} do not match the configured model")
        for name in names:
            model.params[name].assign(dten.load(directory / f"{name}.dten"))
        model.step = manifest.get("step", 0)
        return model


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


def forward(model: Model, motion, appearance, mode="infer", seed=0, segment=None) -> ModelOutput:
    return model.forward(motion, appearance, mode, seed, segment)


def miniature_config(**overrides) -> ModelConfig:
    """The small configuration used for gradient checks."""
    base = dict(variant="tsdan", eca_count=3, task="multitask", input_hw=12, frames_per_clip=2,
                conv_widths=(4, 8), dense_units=8)
    base.update(overrides)
    return ModelConfig(**base)


def grad_check_model(model: Model, motion, appearance, truth, step=1e-5, tolerance=1e-3,
                     max_elements=None, seed=0, include_inputs=False):
    """Finite-difference check of the full forward+loss w.r.t. every parameter.

    The model should be built in float64.  Dropout masks are fixed by
    ``seed`` so every perturbed evaluation sees the same network.
    """
    names = list(model.params)
    originals = dict(model.params)
    segment = model.config.frames_per_clip

    def loss_of(*leaves):
        try:
            model.params = OrderedDict(zip(names, leaves[:len(names)]))
            mo, ap = (leaves[len(names)], leaves[len(names) + 1]) if include_inputs else (motion, appearance)
            out = model.forward(mo, ap, mode="train", seed=seed, segment=segment)
            return loss_multitask(out, truth)
        finally:
            model.params = originals

    inputs = [p.data for p in originals.values()]
    if include_inputs:
        inputs += [np.asarray(motion), np.asarray(appearance)]
    return nx.grad_check(loss_of, inputs, step=step, tolerance=tolerance, max_elements=max_elements, seed=seed)


def loss_multitask(pred: ModelOutput, truth, alpha=1.0, beta=1.0):
    """``alpha * MSE(pulse) + beta * MSE(resp)``; missing heads drop their term."""
    terms = []
    for key, weight, head in (("p", alpha, pred.pulse), ("r", beta, pred.resp)):
        if head is None or truth.get(key) is None:
            continue
        target = nx.as_tensor(np.asarray(getattr(truth[key], "data", truth[key]), dtype=head.dtype))
        if target.shape != head.shape:
            raise ValueError(f"waveform length mismatch for {key!r}: {head.shape} vs {target.shape}")
        terms.append(nx.mul(nx.mse(head, target), float(weight)))
    if not terms:
        raise ValueError("no waveform to compare: prediction and truth share no head")
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return total


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)

"""
Temporal shift, soft attention and channel gates
================================================

A tour of the three blocks the networks are built from, followed by a
finite-difference check of the whole miniature model.
"""

# %%
# Temporal shift
# --------------
# An eighth of the channels read the previous frame and another eighth read
# the next one.  Frames at a clip boundary receive zeros instead of leaking
# into the neighbouring clip.
import numpy as np

from tsdan import blocks, model
from tsdan import numerics as nx

stack = np.arange(4 * 8, dtype=np.float32).reshape(4, 8, 1, 1)
shifted = blocks.temporal_shift(stack, blocks.ShiftSpec(), segment=2).data
print("channel 0 (reads t-1):", shifted[:, 0, 0, 0])
print("channel 1 (reads t+1):", shifted[:, 1, 0, 0])
print("channel 2 (unchanged):", shifted[:, 2, 0, 0])

# %%
# Spatial attention mask
# ----------------------
# A 1x1 convolution and a sigmoid score every pixel; dividing by the L1 norm
# and scaling by H*W/2 fixes the per-frame total, so the mask redistributes
# weight instead of changing the overall gain.
rng = np.random.default_rng(0)
feat = rng.standard_normal((3, 16, 9, 9)).astype(np.float32)
mask = blocks.spatial_attention_mask(feat, rng.standard_normal((1, 16, 1, 1)), np.zeros(1)).data
print("mask sums per frame:", mask.sum(axis=(1, 2, 3)), "target", 9 * 9 / 2)

# %%
# Efficient channel attention
# ---------------------------
# Global average pooling, a 1-D convolution across channels and a sigmoid
# give one gate per channel and frame.
gates = blocks.eca_gates(feat, np.array([0.2, 1.0, 0.2], np.float32)).data
print("gate range:", gates.min().round(3), gates.max().round(3))

# %%
# Gradient check of the composed model
# ------------------------------------
# The miniature network (12x12 input, two frames, widths 4 and 8) is small
# enough to compare every analytic gradient against central differences in
# double precision.
cfg = model.miniature_config()
m = model.build(cfg, seed=0, dtype=np.float64)
shape = (cfg.frames_per_clip, 3, cfg.input_hw, cfg.input_hw)
truth = {"p": rng.standard_normal(2), "r": rng.standard_normal(2)}
report = model.grad_check_model(m, rng.standard_normal(shape), rng.standard_normal(shape), truth, max_elements=32)
print(f"{m.n_parameters()} parameters, {report.n_checked} entries checked, "
      f"max relative error {report.max_rel_err:.2e}")

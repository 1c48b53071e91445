"""Temporal shift, spatial attention masks and efficient channel attention."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import numerics as nx
from .numerics import Tensor, as_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShiftSpec:
    """Fractions of channels moved one frame forward / backward in time."""

    fraction_forward: Fraction = Fraction(1, 8)
    fraction_backward: Fraction = Fraction(1, 8)

    def __post_init__(self):
        fwd, bwd = Fraction(self.fraction_forward), Fraction(self.fraction_backward)
        if fwd < 0 or bwd < 0 or fwd + bwd > 1:
            raise ValueError(f"invalid shift fractions {fwd} + {bwd}")
        object.__setattr__(self, "fraction_forward", fwd)
        object.__setattr__(self, "fraction_backward", bwd)

    def folds(self, channels):
        return (int(channels * self.fraction_forward), int(channels * self.fraction_backward))

    def to_json(self):
        return [str(self.fraction_forward), str(self.fraction_backward)]

    @classmethod
    def from_json(cls, value):
        return cls(Fraction(value[0]), Fraction(value[1]))


def _shift_array(x, n_fwd, n_bwd, segment):
    t, c, h, w = x.shape
    xs = x.reshape(t // segment, segment, c, h, w)
    out = xs.copy()
    # forward: frame t receives frame t-1
    out[:, 0, :n_fwd] = 0
    out[:, 1:, :n_fwd] = xs[:, :-1, :n_fwd]
    lo, hi = n_fwd, n_fwd + n_bwd
    out[:, -1, lo:hi] = 0
    out[:, :-1, lo:hi] = xs[:, 1:, lo:hi]
    return out.reshape(x.shape)


def _unshift_array(g, n_fwd, n_bwd, segment):
    t, c, h, w = g.shape
    gs = g.reshape(t // segment, segment, c, h, w)
    out = gs.copy()
    out[:, -1, :n_fwd] = 0
    out[:, :-1, :n_fwd] = gs[:, 1:, :n_fwd]
    lo, hi = n_fwd, n_fwd + n_bwd
    out[:, 0, lo:hi] = 0
    out[:, 1:, lo:hi] = gs[:, :-1, lo:hi]
    return out.reshape(g.shape)


def temporal_shift(stack, spec: ShiftSpec = ShiftSpec(), segment=None):
    """Shift channel folds of a ``[T,C,H,W]`` frame stack along time.

    The first ``floor(C*fraction_forward)`` channels read frame ``t-1``, the
    next ``floor(C*fraction_backward)`` read frame ``t+1``; vacated frames
    are zero-filled.  ``segment`` splits the stack into independent clips of
    that many frames so nothing leaks across clip boundaries.
    """
    stack = as_tensor(stack)
    if stack.data.ndim != 4:
        raise ValueError(f"temporal_shift expects [T,C,H,W], got {stack.shape}")
    t = stack.shape[0]
    segment = t if segment is None else segment
    if t % segment:
        raise ValueError(f"{t} frames do not split into segments of {segment}")
    n_fwd, n_bwd = spec.folds(stack.shape[1])
    if n_fwd == 0 and n_bwd == 0:
        return stack
    out = _shift_array(stack.data, n_fwd, n_bwd, segment)
    return nx._make(out, (stack,), lambda g: (_unshift_array(g, n_fwd, n_bwd, segment),))


def spatial_attention_mask(appearance_feat, w, b):
    """Soft attention mask from appearance features.

    ``mask = H*W * sigmoid(w * X + b) / (2 * ||sigmoid(w * X + b)||_1)`` per
    frame, where ``w`` is a 1x1 convolution to a single channel.  The
    result has shape ``[T,1,H,W]`` and sums to ``H*W/2`` over each frame.
    """
    x = as_tensor(appearance_feat)
    h, wd = x.shape[2], x.shape[3]
    response = nx.sigmoid(nx.conv2d(x, w, b, padding="same"))
    if np.any(response.data.sum(axis=(2, 3)) == 0):
        log.warning("attention response underflowed to zero; affected frames get the uniform 0.5 mask")
    # the smallest normal keeps every entry positive; an all-underflow frame becomes uniform
    response = nx.add(response, np.finfo(x.dtype).tiny)
    l1 = nx.sum_(response, axis=(2, 3), keepdims=True)
    return nx.mul(nx.div(response, l1), 0.5 * h * wd)


def apply_spatial_attention(motion_feat, mask):
    """Broadcast a single-channel mask over every motion channel."""
    motion_feat, mask = as_tensor(motion_feat), as_tensor(mask)
    if mask.data.ndim != 4 or mask.shape[1] != 1:
        raise ValueError(f"mask must be [T,1,H,W], got {mask.shape}")
    if motion_feat.shape[0] != mask.shape[0] or motion_feat.shape[2:] != mask.shape[2:]:
        raise ValueError(f"mask {mask.shape} does not match features {motion_feat.shape}")
    return nx.mul(motion_feat, mask)


def eca_gates(feat, kernel):
    """Per-frame, per-channel gates in (0, 1): ``sigmoid(conv1d(GAP(feat)))``."""
    return nx.sigmoid(nx.conv1d(nx.global_avg_pool(feat), kernel))


def eca_gate(feat, kernel):
    feat = as_tensor(feat)
    g = eca_gates(feat, kernel)
    n, c = g.shape
    return nx.mul(feat, nx.reshape(g, (n, c, 1, 1)))

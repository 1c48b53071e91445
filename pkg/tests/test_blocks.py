import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tsdan import blocks
from tsdan import numerics as nx
from tsdan.blocks import ShiftSpec


def brute_shift(x, n_fwd, n_bwd):
    t_len, c_len = x.shape[:2]
    out = np.zeros_like(x)
    for t in range(t_len):
        for c in range(c_len):
            if c < n_fwd:
                src = t - 1
            elif c < n_fwd + n_bwd:
                src = t + 1
            else:
                src = t
            if 0 <= src < t_len:
                out[t, c] = x[src, c]
    return out


def loop_attention(motion, app, w, b):
    """Scalar-loop version of the masked motion features."""
    t_len, c_len, h, wd = app.shape
    out = np.zeros_like(motion)
    for t in range(t_len):
        resp = np.zeros((h, wd))
        for i in range(h):
            for j in range(wd):
                z = b[0] + sum(w[0, c, 0, 0] * app[t, c, i, j] for c in range(c_len))
                resp[i, j] = 1.0 / (1.0 + math.exp(-z))
        l1 = resp.sum()
        for c in range(motion.shape[1]):
            for i in range(h):
                for j in range(wd):
                    out[t, c, i, j] = motion[t, c, i, j] * h * wd * resp[i, j] / (2 * l1)
    return out


# ---------------------------------------------------------------- shift


def test_shift_spelled_out_example():
    x = np.broadcast_to(np.arange(3.0)[:, None, None, None], (3, 8, 1, 1)).copy()
    out = blocks.temporal_shift(x).data[:, :, 0, 0]
    assert out[:, 0].tolist() == [0, 0, 1]
    assert out[:, 1].tolist() == [1, 2, 0]
    for c in range(2, 8):
        assert out[:, c].tolist() == [0, 1, 2]


def test_zero_fractions_are_identity(rng):
    x = rng.standard_normal((4, 8, 3, 3)).astype(np.float32)
    out = blocks.temporal_shift(x, ShiftSpec(Fraction(0), Fraction(0)))
    np.testing.assert_array_equal(out.data, x)


@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31))
def test_shift_matches_brute_force(t_len, c_len, num_f, num_b, seed):
    spec = ShiftSpec(Fraction(num_f, 8), Fraction(num_b, 8))
    x = np.random.default_rng(seed).standard_normal((t_len, c_len, 2, 2))
    nf, nb = spec.folds(c_len)
    assert (nf, nb) == (c_len * num_f // 8, c_len * num_b // 8)
    np.testing.assert_array_equal(blocks.temporal_shift(x, spec).data, brute_shift(x.astype(np.float32), nf, nb))


def test_shift_segments_do_not_leak(rng):
    a, b = rng.standard_normal((2, 3, 8, 2, 2)).astype(np.float32)
    joint = blocks.temporal_shift(np.concatenate([a, b]), segment=3).data
    np.testing.assert_array_equal(joint[:3], blocks.temporal_shift(a).data)
    np.testing.assert_array_equal(joint[3:], blocks.temporal_shift(b).data)


def test_shift_preserves_values_except_boundary_drops(rng):
    x = rng.uniform(1, 2, (5, 16, 2, 2))
    out = blocks.temporal_shift(x).data
    # channel 0 loses the last frame, channel 2 loses the first, others keep everything
    np.testing.assert_array_equal(np.sort(out[:, 0][out[:, 0] != 0]), np.sort(x[:-1, 0].astype(np.float32).ravel()))
    np.testing.assert_array_equal(np.sort(out[:, 2][out[:, 2] != 0]), np.sort(x[1:, 2].astype(np.float32).ravel()))
    np.testing.assert_array_equal(out[:, 4:], x[:, 4:].astype(np.float32))


def test_shift_spec_validation_and_json():
    with pytest.raises(ValueError):
        ShiftSpec(Fraction(3, 4), Fraction(1, 2))
    spec = ShiftSpec(Fraction(1, 4), Fraction(1, 8))
    assert ShiftSpec.from_json(spec.to_json()) == spec


@pytest.mark.parametrize("seed", range(10))
def test_shift_gradients(seed):
    x = np.random.default_rng(seed).standard_normal((3, 8, 2, 2))
    assert nx.grad_check(blocks.temporal_shift, [x], seed=seed).passed


# ------------------------------------------------------------- attention


def test_zero_weights_give_half_mask(rng):
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    mask = blocks.spatial_attention_mask(x, np.zeros((1, 4, 1, 1), np.float32), np.zeros(1, np.float32))
    assert mask.shape == (2, 1, 6, 6)
    assert np.all(mask.data == 0.5)


@given(arrays(np.float32, (3, 4, 5, 6), elements=st.floats(-50, 50, width=32)),
       arrays(np.float32, (1, 4, 1, 1), elements=st.floats(-5, 5, width=32)),
       st.floats(-20, 20, width=32))
def test_mask_sum_invariant(x, w, b):
    mask = blocks.spatial_attention_mask(x, w, np.array([b], np.float32)).data
    sums = mask.reshape(3, -1).sum(axis=1, dtype=np.float64)
    np.testing.assert_allclose(sums, 5 * 6 / 2, rtol=1e-3)
    assert np.all(mask > 0)


def test_mask_underflow_falls_back_to_uniform(caplog):
    x = np.full((1, 1, 4, 4), 1e4, np.float32)
    mask = blocks.spatial_attention_mask(x, -np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(mask.data, 0.5)
    assert "underflow" in caplog.text


def test_masked_features_match_scalar_loop(rng):
    motion, app = rng.standard_normal((2, 2, 4, 6, 6))
    w, b = rng.standard_normal((1, 4, 1, 1)), rng.standard_normal(1)
    with nx.float64_mode():
        mask = blocks.spatial_attention_mask(app, w, b)
        out = blocks.apply_spatial_attention(motion, mask).data
    np.testing.assert_allclose(out, loop_attention(motion, app, w, b), rtol=1e-5, atol=1e-9)


def test_apply_attention_trivial_masks_and_errors(rng):
    m = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(blocks.apply_spatial_attention(m, np.ones((2, 1, 4, 4))).data, m)
    np.testing.assert_array_equal(blocks.apply_spatial_attention(m, np.full((2, 1, 4, 4), 0.5)).data, m * 0.5)
    with pytest.raises(ValueError):
        blocks.apply_spatial_attention(m, np.ones((2, 1, 4, 5)))


@pytest.mark.parametrize("seed", range(10))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    motion, app = rng.standard_normal((2, 2, 3, 4, 4))
    w, b = rng.standard_normal((1, 3, 1, 1)), rng.standard_normal(1)

    def f(motion, app, w, b):
        return blocks.apply_spatial_attention(motion, blocks.spatial_attention_mask(app, w, b))

    assert nx.grad_check(f, [motion, app, w, b], seed=seed).passed


# ------------------------------------------------------------------- ECA


def test_eca_zero_kernel_halves_input(rng):
    x = rng.standard_normal((2, 5, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(blocks.eca_gate(x, np.zeros(3, np.float32)).data, x * np.float32(0.5))


def test_eca_closed_form_center_kernel():
    means = np.array([0.5, -1.0, 2.0])
    x = np.broadcast_to(means[None, :, None, None], (1, 3, 2, 2)).astype(np.float64)
    kappa = 1.5
    with nx.float64_mode():
        gates = blocks.eca_gates(x, np.array([0.0, kappa, 0.0])).data[0]
    np.testing.assert_allclose(gates, 1 / (1 + np.exp(-kappa * means)), rtol=1e-12)


@given(arrays(np.float32, (2, 6, 3, 3), elements=st.floats(-100, 100, width=32)),
       arrays(np.float32, (3,), elements=st.floats(-3, 3, width=32)))
def test_eca_keeps_sign_and_never_grows(x, k):
    out = blocks.eca_gate(x, k).data
    assert np.all(np.sign(out) * np.sign(x) >= 0)
    assert np.all(np.abs(out) <= np.abs(x))


@pytest.mark.parametrize("seed", range(10))
def test_eca_gradients(seed):
    rng = np.random.default_rng(seed)
    assert nx.grad_check(blocks.eca_gate, [rng.standard_normal((2, 5, 3, 3)), rng.standard_normal(3)],
                         seed=seed).passed


def test_composed_blocks_gradients(rng):
    motion, app = rng.standard_normal((2, 4, 8, 4, 4))
    w, b, k = rng.standard_normal((1, 8, 1, 1)), rng.standard_normal(1), rng.standard_normal(3)

    def f(motion, app, w, b, k):
        gated = blocks.eca_gate(app, k)
        mask = blocks.spatial_attention_mask(gated, w, b)
        return blocks.apply_spatial_attention(blocks.temporal_shift(motion), mask)

    assert nx.grad_check(f, [motion, app, w, b, k], max_elements=30).passed

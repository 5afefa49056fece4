"""Rotary encoding: rotation-matrix oracle, shift equivalence, composition."""

import numpy as np
import pytest

from streamkv.rope import RopeConfig, apply_rope, default_split, temporal_shift


def rotate_pairs_oracle(x, positions, cfg):
    """Apply the 2x2 rotation matrix pair by pair, axis block by axis block."""
    out = np.array(x, dtype=np.float64)
    flat = out.reshape(out.shape[0], -1, cfg.head_dim)
    pair = 0
    for axis, d_axis in enumerate(cfg.split):
        for i in range(d_axis // 2):
            theta = positions[:, axis] * cfg.base ** (-2.0 * i / d_axis)
            c, s = np.cos(theta), np.sin(theta)
            a = flat[:, :, 2 * pair].copy()
            b = flat[:, :, 2 * pair + 1].copy()
            flat[:, :, 2 * pair] = c[:, None] * a - s[:, None] * b
            flat[:, :, 2 * pair + 1] = s[:, None] * a + c[:, None] * b
            pair += 1
    return out


def test_matches_pairwise_rotation_oracle():
    cfg = RopeConfig(16, (6, 6, 4))
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(1, 20))
        x = rng.standard_normal((n, 3, 16))
        positions = rng.integers(0, 64, size=(n, 3))
        got = apply_rope(x, positions, cfg)
        np.testing.assert_allclose(got, rotate_pairs_oracle(x, positions, cfg),
                                   rtol=1e-12, atol=1e-12)


def test_unit_pair_lands_on_the_circle():
    # (1, 0) in the first temporal pair must rotate to (cos t, sin t)
    cfg = RopeConfig(8, (4, 2, 2))
    x = np.zeros((1, 8))
    x[0, 0] = 1.0
    for frame in (0, 1, 7, 31):
        out = apply_rope(x, np.array([[frame, 0, 0]]), cfg)
        np.testing.assert_allclose(out[0, :2], [np.cos(frame), np.sin(frame)],
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(out[0, 2:4], x[0, 2:4])


def test_zero_position_is_identity():
    cfg = RopeConfig(16, (6, 6, 4))
    x = np.random.default_rng(1).standard_normal((5, 2, 16))
    out = apply_rope(x, np.zeros((5, 3), dtype=np.int64), cfg)
    np.testing.assert_array_equal(out, x)


def test_shift_equals_reencoding_at_shifted_frame():
    cfg = RopeConfig(16, (6, 6, 4))
    rng = np.random.default_rng(2)
    for _ in range(25):
        n = int(rng.integers(1, 16))
        raw = rng.standard_normal((n, 4, 16))
        positions = rng.integers(0, 64, size=(n, 3))
        delta = int(rng.integers(0, 33))
        encoded = apply_rope(raw, positions, cfg)
        shifted_pos = positions.copy()
        shifted_pos[:, 0] += delta
        want = apply_rope(raw, shifted_pos, cfg)
        got = temporal_shift(encoded, delta, cfg)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


def test_shift_composition_is_additive():
    cfg = RopeConfig(16, (6, 6, 4))
    rng = np.random.default_rng(3)
    x = rng.standard_normal((12, 4, 16))
    once = temporal_shift(x, 9, cfg)
    twice = temporal_shift(temporal_shift(x, 4, cfg), 5, cfg)
    np.testing.assert_allclose(twice, once, rtol=0, atol=1e-9)


def test_shift_leaves_spatial_dims_byte_identical():
    cfg = RopeConfig(16, (6, 6, 4))
    x = np.random.default_rng(4).standard_normal((20, 4, 16))
    out = temporal_shift(x, 17, cfg)
    assert out[..., 6:].tobytes() == x[..., 6:].tobytes()


def test_shift_zero_is_exact_copy():
    cfg = RopeConfig(16, (6, 6, 4))
    x = np.random.default_rng(5).standard_normal((7, 16))
    out = temporal_shift(x, 0, cfg)
    assert out is not x
    assert out.tobytes() == x.tobytes()


def test_relative_logits_are_translation_invariant():
    # q . k after encoding depends only on the position difference
    cfg = RopeConfig(16, (6, 6, 4))
    rng = np.random.default_rng(6)
    q_raw = rng.standard_normal(16)
    k_raw = rng.standard_normal(16)
    base_q = np.array([[3, 1, 2]])
    base_k = np.array([[0, 1, 2]])
    ref = apply_rope(q_raw[None], base_q, cfg)[0] @ apply_rope(k_raw[None], base_k, cfg)[0]
    for shift in ((5, 0, 0), (0, 4, 0), (0, 0, 9), (11, 2, 3)):
        off = np.array([shift])
        logit = apply_rope(q_raw[None], base_q + off, cfg)[0] @ \
            apply_rope(k_raw[None], base_k + off, cfg)[0]
        np.testing.assert_allclose(logit, ref, rtol=0, atol=1e-6)


def test_default_split_reference_widths():
    assert default_split(128) == (44, 42, 42)
    assert default_split(16) == (6, 6, 4)
    for head_dim in (6, 8, 12, 24, 32, 48, 64, 96, 128, 256):
        split = default_split(head_dim)
        assert sum(split) == head_dim
        assert all(d >= 0 and d % 2 == 0 for d in split)


def test_config_validation():
    with pytest.raises(ValueError, match="sum to head_dim"):
        RopeConfig(16, (6, 6, 6))
    with pytest.raises(ValueError, match="even"):
        RopeConfig(16, (7, 5, 4))
    with pytest.raises(ValueError, match="positions"):
        apply_rope(np.zeros((3, 16)), np.zeros((2, 3)), RopeConfig(16, (6, 6, 4)))
    with pytest.raises(ValueError, match="integer frame count"):
        temporal_shift(np.zeros((3, 16)), 1.5, RopeConfig(16, (6, 6, 4)))

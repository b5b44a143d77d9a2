import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pynet_isp import alignkit, rawio
from pynet_isp.alignkit import AlignmentConfig
from pynet_isp.errors import ConfigError, ContractError, RegistrationError
from pynet_isp.rawio import BayerFrame, RgbImage
from scenes import global_capture, window_at_pose


# --- NCC ---------------------------------------------------------------------------


def test_ncc_identities(rng):
    a = rng.random((16, 16))
    assert alignkit.ncc(a, a) == pytest.approx(1.0, abs=1e-12)
    assert alignkit.ncc(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert alignkit.ncc(a, np.full_like(a, 0.3)) == 0.0
    with pytest.raises(ContractError):
        alignkit.ncc(a, a[:8])


def test_ncc_matches_two_pass_oracle(rng):
    for _ in range(5):
        a, b = rng.random((12, 9)), rng.random((12, 9))
        assert alignkit.ncc(a, b) == pytest.approx(oracles.ncc_twopass(a, b), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 2**31))
def test_ncc_affine_invariance(scale, offset, seed):
    r = np.random.default_rng(seed)
    a, b = r.random((10, 10)), r.random((10, 10))
    assert alignkit.ncc(a, scale * b + offset) == pytest.approx(alignkit.ncc(a, b), abs=1e-9)
    assert -1.0 <= alignkit.ncc(a, b) <= 1.0


# --- configuration -------------------------------------------------------------------


def test_config_grid_and_margin():
    cfg = AlignmentConfig()
    assert list(cfg.shifts()) == list(range(-8, 9))
    assert list(cfg.rotations()) == [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5]
    assert cfg.margin == 15
    assert AlignmentConfig(max_rotation=0.0).rotations().tolist() == [0.0]
    with pytest.raises(ConfigError):
        AlignmentConfig(accept_threshold=1.01)
    with pytest.raises(ConfigError):
        AlignmentConfig(window=447)
    with pytest.raises(ConfigError):
        AlignmentConfig(shift_step=0.5)


# --- local refinement ----------------------------------------------------------------


def test_refine_identity_pose(rng):
    cfg = AlignmentConfig(window=64, max_shift=3, max_rotation=1.0)
    m = cfg.margin
    region = rng.random((64 + 2 * m, 64 + 2 * m))
    raw_luma = alignkit._box2(region)[m: m + 64: 2, m: m + 64: 2]
    (dx, dy), rot, score = alignkit.refine_local(raw_luma, region, cfg)
    assert (dx, dy, rot) == (0, 0, 0.0)
    assert score == pytest.approx(1.0, abs=1e-12)


def test_refine_ties_prefer_zero_pose():
    cfg = AlignmentConfig(window=32, max_shift=2, max_rotation=0.5)
    m = cfg.margin
    # a flat region scores 0 everywhere, so every pose ties
    pose = alignkit.refine_local(np.random.default_rng(0).random((16, 16)),
                                 np.full((32 + 2 * m, 32 + 2 * m), 0.5), cfg)
    assert pose == ((0, 0), 0.0, 0.0)


def test_refine_rejects_bad_sizes(rng):
    cfg = AlignmentConfig(window=32, max_shift=2)
    with pytest.raises(ContractError):
        alignkit.refine_local(rng.random((15, 16)), rng.random((40, 40)), cfg)
    with pytest.raises(ContractError):
        alignkit.refine_local(rng.random((16, 16)), rng.random((34, 34)), cfg)


def test_refine_picks_bruteforce_optimum(rng):
    """Every grid score equals a directly computed NCC and the reported pose is the maximum."""
    cfg = AlignmentConfig(window=32, max_shift=2, max_rotation=1.0)
    m = cfg.margin
    side = 32 + 2 * m
    region = cv2.GaussianBlur(rng.random((side, side)), (0, 0), 1.5)
    raw_luma = cv2.GaussianBlur(rng.random((16, 16)), (0, 0), 1.0) * 0.2
    raw_luma += region[m + 1: m + 33: 2, m - 1: m + 31: 2]
    scores = alignkit.pose_scores(raw_luma, region, cfg)
    best = (-2.0, None)
    for r, angle in enumerate(cfg.rotations()):
        c = (side - 1) / 2
        rot = cv2.warpAffine(region.astype(np.float32), cv2.getRotationMatrix2D((c, c), angle, 1.0),
                             (side, side), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REFLECT).astype(np.float64)
        if angle == 0:
            rot = region
        for i, dy in enumerate(cfg.shifts()):
            for j, dx in enumerate(cfg.shifts()):
                crop = rot[m + dy: m + dy + 32, m + dx: m + dx + 32]
                down = crop.reshape(16, 2, 16, 2).mean(axis=(1, 3))
                value = oracles.ncc_twopass(raw_luma, down)
                assert scores[r, i, j] == pytest.approx(value, abs=1e-9)
                if value > best[0] + 1e-12:
                    best = (value, ((int(dx), int(dy)), float(angle)))
    shift, angle, score = alignkit.refine_local(raw_luma, region, cfg)
    assert (shift, angle) == best[1]
    assert score == pytest.approx(best[0], abs=1e-9)


@pytest.mark.parametrize("pose", [(3, -5, 1.0), (-8, 8, -1.5), (0, 0, 0.0), (5, 2, 0.5)])
def test_refine_recovers_known_pose(rng, pose):
    cfg = AlignmentConfig()
    raw, canvas = window_at_pose(rng, cfg.window, cfg.margin, *pose)
    pairs = alignkit.extract_patch_pairs(raw, canvas, cfg, pad=cfg.margin)
    assert len(pairs) == 1
    pair = pairs[0]
    assert pair.shift == (pose[0], pose[1])
    assert pair.rotation == pose[2]
    assert pair.ncc_score >= 0.9


def test_off_grid_pose_rounds_to_nearest(rng):
    cfg = AlignmentConfig()
    raw, canvas = window_at_pose(rng, cfg.window, cfg.margin, 2.3, -0.4, 0.7)
    (pair,) = alignkit.extract_patch_pairs(raw, canvas, cfg, pad=cfg.margin)
    assert abs(pair.shift[0] - 2.3) <= 0.5 and abs(pair.shift[1] + 0.4) <= 0.5
    assert abs(pair.rotation - 0.7) <= 0.5


def test_large_misalignment_rejected(rng):
    cfg = AlignmentConfig()
    raw, canvas = window_at_pose(rng, cfg.window, cfg.margin, 0, 0, 0.0, offset=(0, 30))
    assert alignkit.extract_patch_pairs(raw, canvas, cfg, pad=cfg.margin) == []


# --- patch extraction ----------------------------------------------------------------


def test_extract_four_windows_from_896(rng):
    cfg = AlignmentConfig(max_shift=2, max_rotation=0.0)
    scene = np.clip(rng.random((896, 896, 3)), 0, 1)
    scene = cv2.GaussianBlur(scene, (0, 0), 3)
    counts = np.rint(rawio.rgb_luma(scene) * 1000).astype(np.uint16)
    raw = BayerFrame(counts.astype(float))
    rgb = RgbImage(np.repeat(np.clip(counts / 1023.0, 0, 1)[..., None], 3, axis=2))
    pairs = alignkit.extract_patch_pairs(raw, rgb, cfg, workers=2)
    assert [p.window_index for p in pairs] == [(0, 0), (0, 448), (448, 0), (448, 448)]
    for p in pairs:
        y, x = p.window_index
        # RAW crops are copied verbatim, never resampled
        np.testing.assert_array_equal(p.raw_patch.data, raw.data[y: y + 448, x: x + 448])
        assert p.rgb_patch.data.shape == (448, 448, 3)
        assert p.shift == (0, 0) and p.rotation == 0.0


def test_extract_rejects_mismatched_rgb(rng):
    raw = BayerFrame(np.zeros((448, 448)))
    with pytest.raises(ContractError):
        alignkit.extract_patch_pairs(raw, RgbImage(np.zeros((440, 448, 3))))


def test_window_origins():
    assert alignkit.window_origins(900, 1000, 448) == [(0, 0), (0, 448), (448, 0), (448, 448)]
    assert alignkit.window_origins(400, 1000, 448) == []


# --- global registration -------------------------------------------------------------


def _map(h, x, y):
    v = h @ np.array([x, y, 1.0])
    return v[:2] / v[2]


def test_global_align_recovers_translation(rng):
    raw, dslr = global_capture(rng, 448, dx=10.0, dy=-7.0)
    hom, warped, inliers = alignkit.global_align(dslr, rawio.visualize_raw(raw))
    assert inliers >= 20
    for x, y in [(100, 100), (224, 224), (350, 80)]:
        u, v = _map(hom, x + 10.0, y - 7.0)
        assert math.hypot(u - x, v - y) < 0.5
    assert warped.data.shape == (448, 448, 3)


def test_global_align_identity(rng):
    raw, dslr = global_capture(rng, 448, dx=0.0, dy=0.0)
    hom, _, _ = alignkit.global_align(dslr, rawio.visualize_raw(raw))
    for x, y in [(50, 50), (224, 224), (400, 300)]:
        u, v = _map(hom, x, y)
        assert math.hypot(u - x, v - y) < 0.1


def test_global_align_featureless_fails():
    flat = np.full((128, 128, 3), 0.4)
    with pytest.raises(RegistrationError):
        alignkit.global_align(flat, flat)


def test_global_align_deterministic(rng):
    raw, dslr = global_capture(rng, 448, dx=4.0, dy=3.0, angle=0.5)
    fixed = rawio.visualize_raw(raw)
    a = alignkit.global_align(dslr, fixed, seed=7)[0]
    b = alignkit.global_align(dslr, fixed, seed=7)[0]
    np.testing.assert_array_equal(a, b)


def test_assign_splits_is_seeded_partition():
    names = [f"p{i}" for i in range(40)]
    s = alignkit.assign_splits(names, 3, 0.1, 0.1)
    assert s == alignkit.assign_splits(names, 3, 0.1, 0.1)
    assert sorted(s["train"] + s["val"] + s["test"]) == sorted(names)
    assert len(s["test"]) == 4 and len(s["val"]) == 4

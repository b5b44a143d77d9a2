"""Aligned RAW/RGB patch extraction from unsynchronized captures.

Pipeline per capture pair: SIFT + RANSAC homography brings the DSLR photo
onto the RAW grid, non-overlapping windows are cut from the RAW mosaic, and
each window's DSLR position is refined by exhaustive search over small
shifts and rotations maximizing normalized cross-correlation. Windows below
the acceptance threshold are dropped. RAW crops are never resampled.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from . import rawio
from .errors import ConfigError, ContractError, RegistrationError
from .rawio import BayerFrame, RgbImage

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("basename", "source_id", "dx", "dy", "rotation", "ncc")


@dataclass(frozen=True)
class AlignmentConfig:
    window: int = 448
    accept_threshold: float = 0.9
    max_shift: int = 8
    shift_step: int = 1
    max_rotation: float = 1.5
    rotation_step: float = 0.5

    def __post_init__(self):
        if self.window <= 0 or self.window % 2:
            raise ConfigError(f"window must be a positive even size, got {self.window}")
        if not 0 < self.accept_threshold <= 1:
            raise ConfigError(f"accept_threshold must be in (0, 1], got {self.accept_threshold}")
        if self.shift_step <= 0 or self.rotation_step <= 0:
            raise ConfigError("search steps must be positive")
        if self.max_shift < 0 or self.max_rotation < 0:
            raise ConfigError("search ranges must be non-negative")
        if int(self.shift_step) != self.shift_step or int(self.max_shift) != self.max_shift:
            raise ConfigError("shift range and step must be whole pixels")

    def shifts(self) -> np.ndarray:
        return np.arange(-self.max_shift, self.max_shift + 1, self.shift_step, dtype=int)

    def rotations(self) -> np.ndarray:
        n = int(math.floor(self.max_rotation / self.rotation_step + 1e-9))
        return np.arange(-n, n + 1) * self.rotation_step

    @property
    def margin(self) -> int:
        """Canvas padding needed so every candidate pose stays inside the canvas."""
        half = self.window / 2
        theta = math.radians(self.max_rotation)
        reach = (half + self.max_shift) * (math.cos(theta) + math.sin(theta))
        return int(math.ceil(reach - half)) + 1


@dataclass(frozen=True)
class PatchPair:
    raw_patch: BayerFrame
    rgb_patch: RgbImage
    ncc_score: float
    shift: tuple[int, int]
    rotation: float
    source_id: str = ""
    window_index: tuple[int, int] = (0, 0)


# ---------------------------------------------------------------------------
# global registration
# ---------------------------------------------------------------------------


def _gray_u8(img) -> np.ndarray:
    data = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if data.ndim == 3:
        data = rawio.rgb_luma(data)
    return rawio.to_uint8(data)


def global_align(moving, fixed, seed: int = 0, pad: int = 0, ratio: float = 0.75,
                 ransac_threshold: float = 3.0):
    """Register ``moving`` onto ``fixed`` with SIFT keypoints and RANSAC.

    Returns ``(homography, warped, inlier_count)``. The homography maps
    ``moving`` pixel coordinates to ``fixed`` ones (normalized so H[2, 2] = 1);
    ``warped`` is ``moving`` resampled onto ``fixed``'s grid, enlarged by
    ``pad`` pixels on every side.
    """
    mov, fix = _gray_u8(moving), _gray_u8(fixed)
    if mov.size == 0 or fix.size == 0:
        raise ContractError("cannot register empty images")
    sift = cv2.SIFT_create()
    kp_m, des_m = sift.detectAndCompute(mov, None)
    kp_f, des_f = sift.detectAndCompute(fix, None)
    if des_m is None or des_f is None or len(kp_m) < 4 or len(kp_f) < 4:
        raise RegistrationError("too few keypoints for registration")

    matches = cv2.BFMatcher(cv2.NORM_L2).knnMatch(des_m, des_f, k=2)
    good = [p[0] for p in matches if len(p) == 2 and p[0].distance < ratio * p[1].distance]
    if len(good) < 4:
        raise RegistrationError(f"only {len(good)} keypoint matches survive the ratio test")
    src = np.float32([kp_m[m.queryIdx].pt for m in good]).reshape(-1, 1, 2)
    dst = np.float32([kp_f[m.trainIdx].pt for m in good]).reshape(-1, 1, 2)

    cv2.setRNGSeed(int(seed))
    hom, mask = cv2.findHomography(src, dst, cv2.RANSAC, ransac_threshold)
    inliers = int(mask.sum()) if mask is not None else 0
    if hom is None or inliers < 4:
        raise RegistrationError(f"RANSAC found {inliers} inliers")
    hom = hom / hom[2, 2]

    shift = np.array([[1.0, 0.0, pad], [0.0, 1.0, pad], [0.0, 0.0, 1.0]])
    h, w = fix.shape
    data = np.asarray(getattr(moving, "data", moving), dtype=np.float32)
    warped = cv2.warpPerspective(
        data, shift @ hom, (w + 2 * pad, h + 2 * pad),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE,
    )
    return hom, RgbImage(warped.astype(np.float64)), inliers


# ---------------------------------------------------------------------------
# local refinement
# ---------------------------------------------------------------------------


def ncc(a, b) -> float:
    """Normalized cross-correlation in [-1, 1]; 0 if either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ncc shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


def _rotate(region: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0:
        return region
    side = region.shape[0]
    c = (side - 1) / 2.0
    m = cv2.getRotationMatrix2D((c, c), float(angle), 1.0)
    return cv2.warpAffine(region.astype(np.float32), m, (side, side),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT).astype(np.float64)


def _box2(img: np.ndarray) -> np.ndarray:
    """Mean over every 2x2 neighbourhood anchored at (i, j)."""
    return 0.25 * (img[:-1, :-1] + img[1:, :-1] + img[:-1, 1:] + img[1:, 1:])


def pose_scores(raw_luma: np.ndarray, rgb_region: np.ndarray, cfg: AlignmentConfig):
    """NCC for every (rotation, dy, dx) on the search grid, shape (R, S, S)."""
    half = cfg.window // 2
    raw_luma = np.asarray(raw_luma, dtype=np.float64)
    rgb_region = np.asarray(rgb_region, dtype=np.float64)
    if raw_luma.shape != (half, half):
        raise ContractError(f"raw_luma must be {half}x{half}, got {raw_luma.shape}")
    side = rgb_region.shape[0]
    margin = (side - cfg.window) // 2
    if rgb_region.shape != (side, side) or side != cfg.window + 2 * margin or margin < cfg.margin:
        raise ContractError(
            f"rgb_region must be square with >= {cfg.margin} px margin around the "
            f"{cfg.window} px window, got {rgb_region.shape}"
        )
    shifts, rotations = cfg.shifts(), cfg.rotations()
    ref = raw_luma - raw_luma.mean()
    ref_norm = math.sqrt(float(np.sum(ref * ref)))
    scores = np.zeros((len(rotations), len(shifts), len(shifts)))
    for r, angle in enumerate(rotations):
        box = _box2(_rotate(rgb_region, angle))
        for i, dy in enumerate(shifts):
            for j, dx in enumerate(shifts):
                y0, x0 = margin + dy, margin + dx
                cand = box[y0: y0 + cfg.window: 2, x0: x0 + cfg.window: 2]
                dc = cand - cand.mean()
                denom = ref_norm * math.sqrt(float(np.sum(dc * dc)))
                scores[r, i, j] = float(np.sum(ref * dc)) / denom if denom > 0 else 0.0
    return scores


def refine_local(raw_luma, rgb_region, cfg: AlignmentConfig):
    """Exhaustive pose search. Returns ``((dx, dy), rotation, best_ncc)``.

    ``raw_luma`` is the half-resolution green luma of a RAW window;
    ``rgb_region`` is the full-resolution DSLR luma of the same window padded
    by at least ``cfg.margin`` px on each side. A candidate pose rotates the
    region about its centre, crops the window offset by (dx, dy) and
    area-downsamples it 2x. Ties prefer the smallest shift, then the smallest
    rotation, then scan order.
    """
    scores = pose_scores(raw_luma, rgb_region, cfg)
    shifts, rotations = cfg.shifts(), cfg.rotations()
    best_val = scores.max()
    best_key = None
    for r, i, j in zip(*np.nonzero(scores == best_val)):
        key = (shifts[i] ** 2 + shifts[j] ** 2, abs(rotations[r]), r, i, j)
        if best_key is None or key < best_key:
            best_key = key
    _, _, r, i, j = best_key
    return (int(shifts[j]), int(shifts[i])), float(rotations[r]), float(np.clip(best_val, -1, 1))


def affine_at_pose(window: int, margin: int, dx: float, dy: float, rotation: float) -> np.ndarray:
    """2x3 map from canvas (window + 2*margin square) to window coordinates at a pose."""
    side = window + 2 * margin
    c = (side - 1) / 2.0
    m = cv2.getRotationMatrix2D((c, c), float(rotation), 1.0)
    m[0, 2] -= margin + dx
    m[1, 2] -= margin + dy
    return m


def sample_at_pose(region: np.ndarray, window: int, dx, dy, rotation) -> np.ndarray:
    """Bilinear resampling of a padded region at a refined pose -> (window, window, ...)."""
    margin = (region.shape[0] - window) // 2
    m = affine_at_pose(window, margin, dx, dy, rotation)
    out = cv2.warpAffine(region.astype(np.float32), m, (window, window),
                         flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
    return out.astype(np.float64)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


def window_origins(height: int, width: int, window: int) -> list[tuple[int, int]]:
    return [(y, x) for y in range(0, height - window + 1, window)
            for x in range(0, width - window + 1, window)]


def extract_patch_pairs(raw: BayerFrame, rgb_warped: RgbImage, cfg: AlignmentConfig | None = None,
                        pad: int = 0, source_id: str = "", workers: int = 0) -> list[PatchPair]:
    """Cut non-overlapping windows and keep those whose refined NCC passes the threshold.

    ``rgb_warped`` lies on the RAW grid enlarged by ``pad`` px per side
    (see :func:`global_align`); missing margin is filled by edge replication.
    """
    cfg = cfg or AlignmentConfig()
    h, w = raw.height, raw.width
    rgb = np.asarray(rgb_warped.data, dtype=np.float64)
    if rgb.shape[:2] != (h + 2 * pad, w + 2 * pad):
        raise ContractError(f"rgb_warped {rgb.shape[:2]} does not match RAW {h}x{w} + pad {pad}")
    extra = max(0, cfg.margin - pad)
    if extra:
        rgb = np.pad(rgb, ((extra, extra), (extra, extra), (0, 0)), mode="edge")
    total_pad = pad + extra
    luma = rawio.rgb_luma(rgb)
    m = cfg.margin
    win = cfg.window

    def process(origin):
        y, x = origin
        crop = raw.data[y: y + win, x: x + win].copy()
        patch = BayerFrame(crop, raw.cfa_layout, raw.bit_depth, raw.black_level,
                           raw.white_level, raw.normalized)
        ys, xs = y + total_pad - m, x + total_pad - m
        region = luma[ys: ys + win + 2 * m, xs: xs + win + 2 * m]
        (dx, dy), rot, score = refine_local(rawio.green_luma(patch), region, cfg)
        if score < cfg.accept_threshold:
            return None
        rgb_region = rgb[ys: ys + win + 2 * m, xs: xs + win + 2 * m]
        rgb_patch = np.clip(sample_at_pose(rgb_region, win, dx, dy, rot), 0.0, 1.0)
        return PatchPair(patch, RgbImage(rgb_patch), score, (dx, dy), rot, source_id, (y, x))

    origins = window_origins(h, w, win)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(process, origins))
    else:
        results = [process(o) for o in origins]
    return [r for r in results if r is not None]


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------


def match_captures(raw_dir, dslr_dir) -> list[tuple[str, Path, Path]]:
    raw_dir, dslr_dir = Path(raw_dir), Path(dslr_dir)
    raws = {p.stem: p for p in sorted(raw_dir.iterdir()) if rawio.is_image_file(p.name)}
    dslrs = {p.stem: p for p in sorted(dslr_dir.iterdir()) if rawio.is_image_file(p.name)}
    return [(k, raws[k], dslrs[k]) for k in sorted(raws.keys() & dslrs.keys())]


def assign_splits(names: list[str], seed: int, val_fraction: float, test_fraction: float):
    rng = np.random.default_rng(seed)
    order = [names[i] for i in rng.permutation(len(names))]
    n_test = int(round(test_fraction * len(order)))
    n_val = int(round(val_fraction * len(order)))
    return {
        "test": sorted(order[:n_test]),
        "val": sorted(order[n_test: n_test + n_val]),
        "train": sorted(order[n_test + n_val:]),
    }


def build_dataset(raw_dir, dslr_dir, out, cfg: AlignmentConfig | None = None, seed: int = 0,
                  workers: int = 0, meta: dict | None = None, val_fraction: float = 0.05,
                  test_fraction: float = 0.05) -> dict:
    """Align every matched capture pair and write the dataset layout plus manifest.csv."""
    cfg = cfg or AlignmentConfig()
    captures = match_captures(raw_dir, dslr_dir)
    if not captures:
        raise FileNotFoundError(f"no capture pairs with matching names in {raw_dir} and {dslr_dir}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows, names = [], []
    windows = failures = 0
    for source_id, raw_path, dslr_path in captures:
        frame = rawio.load_raw_mosaic(raw_path, meta)
        windows += len(window_origins(frame.height, frame.width, cfg.window))
        fixed = rawio.visualize_raw(frame)
        try:
            _, warped, inliers = global_align(rawio.read_rgb(dslr_path), fixed, seed=seed, pad=cfg.margin)
        except RegistrationError as exc:
            log.warning("skipping capture %s: %s", source_id, exc)
            failures += 1
            continue
        pairs = extract_patch_pairs(frame, warped, cfg, pad=cfg.margin, source_id=source_id,
                                    workers=workers)
        log.info("capture %s: %d inliers, %d patches admitted", source_id, inliers, len(pairs))
        for k, pair in enumerate(pairs):
            name = f"{source_id}_{k:04d}"
            rawio.write_pair(out, name, pair.raw_patch.data, pair.rgb_patch.data)
            rows.append((name, source_id, pair.shift[0], pair.shift[1], pair.rotation,
                         f"{pair.ncc_score:.6f}"))
            names.append(name)
    with (out / "manifest.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    rawio.write_splits(out, assign_splits(names, seed, val_fraction, test_fraction))
    admitted = len(rows)
    return {
        "captures": len(captures),
        "registration_failures": failures,
        "windows": windows,
        "admitted": admitted,
        "rejected": windows - admitted,
        "rejection_rate": (windows - admitted) / windows if windows else 0.0,
    }


def read_manifest(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))

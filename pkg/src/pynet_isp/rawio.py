"""Bayer RAW ingestion, normalization, RGGB packing and a crude preview ISP.

Also owns the on-disk dataset layout::

    <root>/raw/<name>.png     16-bit gray mosaic (10-bit values)
    <root>/dslr/<name>.png    8-bit RGB target
    <root>/splits/{train,val,test}.txt
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import ContractError, MetadataMismatchError, RawFormatError

DEFAULT_BIT_DEPTH = 10
DEFAULT_BLACK_LEVEL = 0
DEFAULT_WHITE_LEVEL = 1023

# Channel order of packed tensors. Fixed so checkpoints stay portable.
PACKED_CHANNELS = ("R", "G1", "B", "G2")

SPLITS = ("train", "val", "test")


class CFALayout(str, enum.Enum):
    RGGB = "RGGB"
    BGGR = "BGGR"
    GRBG = "GRBG"
    GBRG = "GBRG"


# (row, col) offsets inside the 2x2 cell for R, G1, B, G2. G1 shares a row with R.
_CELL_OFFSETS = {
    CFALayout.RGGB: ((0, 0), (0, 1), (1, 1), (1, 0)),
    CFALayout.BGGR: ((1, 1), (1, 0), (0, 0), (0, 1)),
    CFALayout.GRBG: ((0, 1), (0, 0), (1, 0), (1, 1)),
    CFALayout.GBRG: ((1, 0), (1, 1), (0, 1), (0, 0)),
}


@dataclass(frozen=True)
class BayerFrame:
    """Single-channel sensor mosaic plus the metadata needed to interpret it.

    ``data`` holds raw counts until :func:`normalize` is applied, after which
    it holds floats in [0, 1] with ``black_level=0`` and ``white_level=1``.
    """

    data: np.ndarray
    cfa_layout: CFALayout = CFALayout.RGGB
    bit_depth: int = DEFAULT_BIT_DEPTH
    black_level: float = DEFAULT_BLACK_LEVEL
    white_level: float = DEFAULT_WHITE_LEVEL
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cfa_layout", CFALayout(self.cfa_layout))
        if self.data.ndim != 2:
            raise RawFormatError(f"mosaic must be 2-D, got shape {self.data.shape}")
        h, w = self.data.shape
        if h % 2 or w % 2:
            raise RawFormatError(f"mosaic dimensions must be even, got {h}x{w}")
        if self.normalized:
            return
        max_code = 2**self.bit_depth - 1
        if not 0 <= self.black_level < self.white_level <= max_code:
            raise MetadataMismatchError(
                f"need 0 <= black ({self.black_level}) < white ({self.white_level}) <= {max_code}"
            )
        if self.data.size and (self.data.min() < 0 or self.data.max() > max_code):
            raise MetadataMismatchError(
                f"values in [{self.data.min()}, {self.data.max()}] exceed {self.bit_depth}-bit range"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PackedRaw:
    """Half-resolution 4-channel tensor (H/2, W/2, 4) in :data:`PACKED_CHANNELS` order."""

    data: np.ndarray
    channel_order: tuple = field(default=PACKED_CHANNELS)

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise ContractError(f"packed RAW must be (H, W, 4), got {self.data.shape}")


@dataclass(frozen=True)
class RgbImage:
    data: np.ndarray
    color_space: str = "sRGB"

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ContractError(f"RGB image must be (H, W, 3), got {self.data.shape}")


def _read_png16(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read image file {path}")
    if img.ndim != 2:
        raise RawFormatError(f"{path}: expected a single-channel image, got shape {img.shape}")
    return img


def load_raw_mosaic(path, meta: dict | None = None, defaults: dict | None = None) -> BayerFrame:
    """Read a mosaic from a 16-bit single-channel image or an ``.npz`` container.

    The ``.npz`` container holds ``data`` plus optional scalar entries
    ``cfa_layout``, ``bit_depth``, ``black_level`` and ``white_level``.
    Metadata precedence is ``meta`` > file metadata > ``defaults`` > built-in defaults.
    No value scaling is applied.
    """
    path = Path(path)
    if not path.is_file():
        raise OSError(f"no such RAW file: {path}")

    file_meta: dict = {}
    if path.suffix.lower() == ".npz":
        try:
            with np.load(path, allow_pickle=False) as npz:
                data = np.asarray(npz["data"])
                for key in ("cfa_layout", "bit_depth", "black_level", "white_level"):
                    if key in npz:
                        file_meta[key] = npz[key].item()
        except (ValueError, KeyError, OSError) as exc:
            raise OSError(f"cannot read RAW container {path}: {exc}") from exc
        if data.ndim != 2:
            raise RawFormatError(f"{path}: container data must be 2-D, got {data.shape}")
    else:
        data = _read_png16(path)

    resolved = {
        "cfa_layout": CFALayout.RGGB,
        "bit_depth": DEFAULT_BIT_DEPTH,
        "black_level": DEFAULT_BLACK_LEVEL,
        "white_level": None,
    }
    for source in (defaults or {}, file_meta, meta or {}):
        resolved.update({k: v for k, v in source.items() if k in resolved and v is not None})
    if resolved["white_level"] is None:
        resolved["white_level"] = 2 ** int(resolved["bit_depth"]) - 1

    return BayerFrame(
        data=data,
        cfa_layout=CFALayout(resolved["cfa_layout"]),
        bit_depth=int(resolved["bit_depth"]),
        black_level=resolved["black_level"],
        white_level=resolved["white_level"],
    )


def save_raw_mosaic(path, frame: BayerFrame) -> None:
    """Write raw counts as a 16-bit PNG (dataset format)."""
    if frame.normalized:
        raise ContractError("save_raw_mosaic expects raw counts, not a normalized frame")
    data = np.asarray(frame.data)
    if not np.issubdtype(data.dtype, np.integer):
        data = np.rint(data)
    if not cv2.imwrite(str(path), data.astype(np.uint16)):
        raise OSError(f"cannot write {path}")


def normalize(frame: BayerFrame) -> BayerFrame:
    if frame.normalized:
        return frame
    scale = float(frame.white_level - frame.black_level)
    data = (frame.data.astype(np.float64) - frame.black_level) / scale
    return replace(
        frame,
        data=np.clip(data, 0.0, 1.0),
        black_level=0.0,
        white_level=1.0,
        normalized=True,
    )


def mosaic_from_counts(counts: np.ndarray, bit_depth: int = DEFAULT_BIT_DEPTH) -> BayerFrame:
    """Convenience: wrap an integer count array with default metadata."""
    return BayerFrame(data=counts, bit_depth=bit_depth, white_level=2**bit_depth - 1)


def pack_rggb(frame: BayerFrame) -> PackedRaw:
    data = np.asarray(frame.data)
    if data.size and (data.max() > 1.0 or data.min() < 0.0):
        raise ContractError("pack_rggb expects a normalized frame with values in [0, 1]")
    planes = [data[r::2, c::2] for r, c in _CELL_OFFSETS[frame.cfa_layout]]
    return PackedRaw(np.stack(planes, axis=-1))


def unpack_rggb(packed: PackedRaw, cfa_layout=CFALayout.RGGB) -> BayerFrame:
    layout = CFALayout(cfa_layout)
    h, w, _ = packed.data.shape
    mosaic = np.empty((2 * h, 2 * w), dtype=packed.data.dtype)
    for ch, (r, c) in enumerate(_CELL_OFFSETS[layout]):
        mosaic[r::2, c::2] = packed.data[..., ch]
    return BayerFrame(
        data=mosaic, cfa_layout=layout, black_level=0.0, white_level=1.0, normalized=True
    )


def cfa_masks(shape: tuple[int, int], cfa_layout=CFALayout.RGGB) -> np.ndarray:
    """Boolean (3, H, W) masks selecting the R, G and B sample sites."""
    h, w = shape
    masks = np.zeros((3, h, w), dtype=bool)
    r_off, g1_off, b_off, g2_off = _CELL_OFFSETS[CFALayout(cfa_layout)]
    for plane, offsets in ((0, [r_off]), (1, [g1_off, g2_off]), (2, [b_off])):
        for r, c in offsets:
            masks[plane, r::2, c::2] = True
    return masks


_BILINEAR_KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0


def bilinear_demosaic(mosaic: np.ndarray, cfa_layout=CFALayout.RGGB) -> np.ndarray:
    """Bilinear demosaic as a normalized convolution.

    Each missing sample is the weighted mean of same-color neighbours in the
    3x3 cell (weights 1 diagonal, 2 edge); known samples pass through.
    Normalizing by the available weight keeps image borders unbiased.
    """
    mosaic = np.asarray(mosaic, dtype=np.float64)
    masks = cfa_masks(mosaic.shape, cfa_layout)
    out = np.empty(mosaic.shape + (3,))
    for plane in range(3):
        m = masks[plane].astype(np.float64)
        num = ndimage.convolve(mosaic * m, _BILINEAR_KERNEL, mode="constant")
        den = ndimage.convolve(m, _BILINEAR_KERNEL, mode="constant")
        out[..., plane] = np.where(masks[plane], mosaic, num / den)
    return out


def gray_world_gains(rgb: np.ndarray) -> np.ndarray:
    means = rgb.reshape(-1, 3).mean(axis=0)
    gains = np.ones(3)
    for c in (0, 2):
        if means[c] > 0:
            gains[c] = means[1] / means[c]
    return gains


def visualize_raw(frame: BayerFrame, gamma: float = 2.2) -> RgbImage:
    """Preview ISP: bilinear demosaic, gray-world white balance, 1/gamma encoding."""
    if not frame.normalized:
        frame = normalize(frame)
    rgb = bilinear_demosaic(frame.data, frame.cfa_layout)
    rgb = np.clip(rgb * gray_world_gains(rgb), 0.0, 1.0)
    return RgbImage(rgb ** (1.0 / gamma))


def green_luma(frame: BayerFrame) -> np.ndarray:
    """Half-resolution luminance proxy: mean of the two green sub-planes."""
    packed = pack_rggb(frame if frame.normalized else normalize(frame)).data
    return 0.5 * (packed[..., 1] + packed[..., 3])


def rgb_luma(rgb: np.ndarray) -> np.ndarray:
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def read_rgb(path) -> RgbImage:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image file {path}")
    return RgbImage(cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0)


def write_rgb(path, image) -> None:
    data = image.data if isinstance(image, RgbImage) else image
    if not cv2.imwrite(str(path), cv2.cvtColor(to_uint8(data), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write {path}")


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------


def dataset_dirs(root) -> dict[str, Path]:
    root = Path(root)
    return {"raw": root / "raw", "dslr": root / "dslr", "splits": root / "splits"}


def write_pair(root, basename: str, raw_counts: np.ndarray, rgb: np.ndarray) -> None:
    dirs = dataset_dirs(root)
    dirs["raw"].mkdir(parents=True, exist_ok=True)
    dirs["dslr"].mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(dirs["raw"] / f"{basename}.png"), np.asarray(raw_counts, dtype=np.uint16)):
        raise OSError(f"cannot write RAW patch {basename}")
    write_rgb(dirs["dslr"] / f"{basename}.png", rgb)


def write_splits(root, splits: dict[str, list[str]]) -> None:
    split_dir = dataset_dirs(root)["splits"]
    split_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        names = splits.get(name, [])
        (split_dir / f"{name}.txt").write_text("".join(f"{n}\n" for n in names))


def read_split(root, split: str) -> list[str]:
    """Basenames listed for ``split``; falls back to every matched pair if no split file."""
    dirs = dataset_dirs(root)
    split_file = dirs["splits"] / f"{split}.txt"
    if split_file.is_file():
        return [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
    return list_pairs(root)


def list_pairs(root) -> list[str]:
    dirs = dataset_dirs(root)
    if not dirs["raw"].is_dir() or not dirs["dslr"].is_dir():
        return []
    raws = {p.stem for p in dirs["raw"].glob("*.png")}
    dslrs = {p.stem for p in dirs["dslr"].glob("*.png")}
    return sorted(raws & dslrs)


def load_pair(root, basename: str, meta: dict | None = None) -> tuple[PackedRaw, RgbImage]:
    """Load one training pair as (packed normalized RAW, RGB in [0, 1])."""
    dirs = dataset_dirs(root)
    raw_path = dirs["raw"] / f"{basename}.png"
    rgb_path = dirs["dslr"] / f"{basename}.png"
    if raw_path.stem != rgb_path.stem:
        raise ContractError("RAW/RGB basename mismatch")
    frame = load_raw_mosaic(raw_path, meta)
    return pack_rggb(normalize(frame)), read_rgb(rgb_path)


def is_image_file(name: str) -> bool:
    return os.path.splitext(name)[1].lower() in {".png", ".tif", ".tiff", ".jpg", ".jpeg", ".npz"}

"""PyNET: an inverted pyramid over five scales for RAW-to-RGB mapping.

Layout (level 1 is the packed-input resolution, level l is 2**(l-1) times smaller)::

    input 4ch --enc1--> e1 --pool--> enc2 --> e2 ... --pool--> enc5 --> e5
    level 5:  f5 = residual blocks(e5)                     -> head5 (tanh)
    level l:  f_l = blocks(concat(e_l, tconv(f_{l+1})))    -> head_l (tanh)
    level 0:  tanh(tconv(f1))                              (2x the input size)

Every convolution inside a multi-kernel block runs 3x3 ... 9x9 kernels in
parallel and concatenates the branches. Levels listed in
``instance_norm_levels`` normalize each branch before its leaky ReLU.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError

NUM_LEVELS = 5
MIN_INPUT_SIDE = 2**NUM_LEVELS


@dataclass(frozen=True)
class PyNetConfig:
    base_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    kernel_sizes: tuple[int, ...] = (3, 5, 7, 9)
    leaky_slope: float = 0.2
    instance_norm_levels: tuple[int, ...] = (2, 3, 4, 5)
    instance_norm_epsilon: float = 1e-5
    blocks_per_level: tuple[int, ...] = (2, 2, 2, 3, 4)
    in_channels: int = 4

    def __post_init__(self):
        for name in ("base_channels", "kernel_sizes", "instance_norm_levels", "blocks_per_level"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        widths, blocks = self.base_channels, self.blocks_per_level
        if len(widths) != NUM_LEVELS or len(blocks) != NUM_LEVELS:
            raise ConfigError("base_channels and blocks_per_level need exactly five entries")
        if any(w <= 0 for w in widths) or any(a > b for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"widths must be positive and non-decreasing, got {widths}")
        if not self.kernel_sizes or any(k <= 0 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"kernel sizes must be odd and positive, got {self.kernel_sizes}")
        branches = len(self.kernel_sizes)
        for level, w in enumerate(widths, start=1):
            if w % branches:
                raise ConfigError(
                    f"level {level} width {w} not divisible by {branches} kernel branches"
                )
        # levels 1-4 need an encoder block plus a fusion block; level 5 needs one block
        if any(b < 2 for b in blocks[:-1]) or blocks[-1] < 1:
            raise ConfigError(f"blocks_per_level too small: {blocks}")
        if not set(self.instance_norm_levels) <= {1, 2, 3, 4, 5}:
            raise ConfigError(f"bad instance_norm_levels {self.instance_norm_levels}")
        if self.instance_norm_epsilon <= 0 or self.leaky_slope < 0:
            raise ConfigError("instance_norm_epsilon must be > 0 and leaky_slope >= 0")

    def width(self, level: int) -> int:
        return self.base_channels[level - 1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PyNetConfig":
        return cls(**d)


class MultiConvBlock(nn.Module):
    """Parallel convolutions of several kernel sizes, concatenated on channels."""

    def __init__(self, in_ch, out_ch, kernel_sizes, slope, norm, eps, residual=False):
        super().__init__()
        if out_ch % len(kernel_sizes):
            raise ConfigError(f"{out_ch} channels not divisible by {len(kernel_sizes)} branches")
        branch_ch = out_ch // len(kernel_sizes)
        self.convs = nn.ModuleList(
            nn.Conv2d(in_ch, branch_ch, k, padding=k // 2) for k in kernel_sizes
        )
        self.norm = norm
        self.eps = eps
        self.slope = slope
        self.residual = residual and in_ch == out_ch

    def forward(self, x):
        outs = []
        for conv in self.convs:
            y = conv(x)
            if self.norm:
                y = F.instance_norm(y, eps=self.eps)
            outs.append(F.leaky_relu(y, self.slope))
        out = torch.cat(outs, dim=1)
        return x + out if self.residual else out


class UpConv(nn.Module):
    """Stride-2 transposed convolution followed by activation."""

    def __init__(self, in_ch, out_ch, slope, norm, eps):
        super().__init__()
        self.conv = nn.ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1, output_padding=1)
        self.norm = norm
        self.eps = eps
        self.slope = slope

    def forward(self, x):
        y = self.conv(x)
        if self.norm:
            y = F.instance_norm(y, eps=self.eps)
        return F.leaky_relu(y, self.slope)


class PyNet(nn.Module):
    """The five-level network. ``trained_level`` tracks progressive training:
    6 = untouched, 5 = deepest level trained, ..., 0 = fully trained."""

    def __init__(self, config: PyNetConfig | None = None):
        super().__init__()
        self.config = config = config or PyNetConfig()
        self.trained_level = NUM_LEVELS + 1
        ks, slope, eps = config.kernel_sizes, config.leaky_slope, config.instance_norm_epsilon

        def block(level, cin, cout, residual=False):
            norm = level in config.instance_norm_levels
            return MultiConvBlock(cin, cout, ks, slope, norm, eps, residual)

        self.enc = nn.ModuleList()
        cin = config.in_channels
        for level in range(1, NUM_LEVELS + 1):
            self.enc.append(block(level, cin, config.width(level)))
            cin = config.width(level)

        # index l-1 holds the modules that run at level l on the way up
        self.up = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        for level in range(1, NUM_LEVELS + 1):
            w = config.width(level)
            n_blocks = config.blocks_per_level[level - 1]
            if level == NUM_LEVELS:
                self.up.append(nn.Identity())
                stack = [block(level, w, w, residual=True) for _ in range(n_blocks - 1)]
            else:
                # no normalization on the upsampler feeding level 1
                norm = level in config.instance_norm_levels and level > 1
                self.up.append(UpConv(config.width(level + 1), w, slope, norm, eps))
                stack = [block(level, 2 * w, w)]
                stack += [block(level, w, w, residual=True) for _ in range(n_blocks - 2)]
            self.blocks.append(nn.Sequential(*stack))
            self.heads.append(nn.Conv2d(w, 3, 3, padding=1))
        self.final = nn.ConvTranspose2d(
            config.width(1), 3, 3, stride=2, padding=1, output_padding=1
        )

    # -- parameter bookkeeping ---------------------------------------------

    def level_modules(self, level: int) -> list[nn.Module]:
        """Modules that participate in producing the output at ``level``."""
        _check_level(level)
        mods: list[nn.Module] = list(self.enc)
        for lv in range(NUM_LEVELS, max(level, 1) - 1, -1):
            mods += [self.up[lv - 1], self.blocks[lv - 1]]
        mods.append(self.final if level == 0 else self.heads[level - 1])
        return mods

    def level_parameters(self, level: int) -> list[nn.Parameter]:
        seen, params = set(), []
        for mod in self.level_modules(level):
            for p in mod.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def exclusive_parameter_names(self, below: int) -> list[str]:
        """Names of parameters used only by levels shallower than ``below``."""
        used = {id(p) for p in self.level_parameters(below)}
        return [n for n, p in self.named_parameters() if id(p) not in used]

    # -- forward pieces ------------------------------------------------------

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [self.enc[0](x)]
        for level in range(2, NUM_LEVELS + 1):
            feats.append(self.enc[level - 1](F.max_pool2d(feats[-1], 2)))
        return feats

    def level_step(self, level: int, skip: torch.Tensor, deeper: torch.Tensor | None):
        """Features of ``level`` given its encoder features and the level below's."""
        if level == NUM_LEVELS:
            return self.blocks[level - 1](skip)
        up = self.up[level - 1](deeper)
        return self.blocks[level - 1](torch.cat([skip, up], dim=1))

    def decode(self, enc: list[torch.Tensor], stop: int) -> torch.Tensor:
        """Run the upward path from level 5 to level ``stop`` (>= 1)."""
        feats = None
        for level in range(NUM_LEVELS, stop - 1, -1):
            feats = self.level_step(level, enc[level - 1], feats)
        return feats

    def head(self, level: int, feats: torch.Tensor) -> torch.Tensor:
        if level == 0:
            return torch.tanh(self.final(feats))
        return torch.tanh(self.heads[level - 1](feats))

    def forward(self, x: torch.Tensor, level: int = 0) -> torch.Tensor:
        _check_level(level)
        check_input_size(x.shape[-2:])
        h, w = x.shape[-2:]
        pad_h, pad_w = (-h) % MIN_INPUT_SIDE, (-w) % MIN_INPUT_SIDE
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        enc = self.encode(x)
        out = self.head(level, self.decode(enc, max(level, 1)))
        if pad_h or pad_w:
            scale = 2.0 ** (1 - level)
            out = out[..., : round(h * scale), : round(w * scale)]
        return out


def _check_level(level: int) -> None:
    if level not in range(NUM_LEVELS + 1):
        raise ContractError(f"level must be in 0..5, got {level}")


def check_input_size(hw) -> None:
    h, w = (int(v) for v in hw)
    if h < MIN_INPUT_SIDE or w < MIN_INPUT_SIDE:
        raise ContractError(f"input {h}x{w} too small: every side needs >= {MIN_INPUT_SIDE} px")


def output_size(input_side: int, level: int) -> int:
    """Output side length at ``level`` for a packed input of side ``input_side``."""
    _check_level(level)
    return input_side * 2 // 2**level


def _init_parameters(model: PyNet, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    slope = model.config.leaky_slope
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    heads = set(model.heads) | {model.final}
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.ConvTranspose2d):
                cin, _, kh, kw = mod.weight.shape
                fan_in = cin * kh * kw / (mod.stride[0] * mod.stride[1])
            elif isinstance(mod, nn.Conv2d):
                _, cin, kh, kw = mod.weight.shape
                fan_in = cin * kh * kw
            else:
                continue
            g = 1.0 if mod in heads else gain
            mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * (g / math.sqrt(fan_in)))
            mod.bias.zero_()


def build(config: PyNetConfig | None = None, seed: int = 0) -> PyNet:
    """Construct a PyNET with deterministic fan-in variance-scaled initialization."""
    model = PyNet(config)
    _init_parameters(model, seed)
    return model


def multi_conv_block(features: torch.Tensor, level: int, config: PyNetConfig, seed: int = 0):
    """Apply one freshly initialized multi-kernel block at ``level`` (width-preserving)."""
    width = config.width(level)
    if features.shape[1] != width:
        raise ContractError(f"level {level} expects {width} channels, got {features.shape[1]}")
    blk = MultiConvBlock(
        width, width, config.kernel_sizes, config.leaky_slope,
        level in config.instance_norm_levels, config.instance_norm_epsilon,
    )
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for conv in blk.convs:
            fan_in = conv.weight[0].numel()
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / math.sqrt(fan_in))
            conv.bias.zero_()
    return blk(features)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# layout helpers and full-resolution inference
# ---------------------------------------------------------------------------


def packed_to_tensor(packed) -> torch.Tensor:
    """(H, W, 4) or (N, H, W, 4) array -> float32 NCHW tensor."""
    arr = np.asarray(getattr(packed, "data", packed), dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) tanh-range tensor -> (H, W, 3) float array in [0, 1]."""
    img = t.detach()[0].permute(1, 2, 0).double().numpy()
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)


def _tile_starts(length: int, tile: int, overlap: int) -> list[int]:
    if length <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, length - tile, step))
    starts.append(length - tile)
    return starts


def _ramp(length: int, lead: int, trail: int) -> np.ndarray:
    """1-D blending weights: linear rise over ``lead`` and fall over ``trail``."""
    w = np.ones(length)
    if lead:
        w[:lead] = (np.arange(lead) + 0.5) / lead
    if trail:
        w[length - trail:] = np.minimum(w[length - trail:], (np.arange(trail)[::-1] + 0.5) / trail)
    return w


def _level1_context(config: PyNetConfig) -> int:
    """Receptive radius (packed px) of the level-1 stages; even so it halves cleanly."""
    radius = max(config.kernel_sizes) // 2
    margin = radius * (config.blocks_per_level[0] + 1) + 4
    return margin + margin % 2


def infer_full(model: PyNet, full_raw, tile: int = 512, overlap: int = 32):
    """Reconstruct a full-resolution RGB photo (values in [0, 1]) from packed RAW.

    Frames no larger than ``tile`` x ``tile`` packed pixels go through one
    forward pass. Larger frames are processed in two parts: the pyramid levels
    2-5 (at most a quarter of the input area) run over the whole frame, so
    their instance-norm statistics are global, while the level-1 encoder and
    the level-1/level-0 upward path run on overlapping tiles. Each tile carries
    enough context to cover its receptive field and tiles are cross-faded
    linearly across ``overlap`` pixels.
    """
    from .rawio import RgbImage

    if model.trained_level != 0:
        raise ContractError(
            f"infer_full needs a fully trained model (trained_level 0, got {model.trained_level})"
        )
    if overlap < 0 or tile <= 2 * overlap:
        raise ContractError(f"need 0 <= overlap < tile/2, got tile={tile} overlap={overlap}")
    if tile % 2 or overlap % 2:
        # level 2 runs at half the tile grid, so tile corners must land on even pixels
        raise ContractError(f"tile and overlap must be even, got tile={tile} overlap={overlap}")
    x = packed_to_tensor(full_raw)
    check_input_size(x.shape[-2:])
    h, w = x.shape[-2:]

    model.eval()
    with torch.no_grad():
        if h <= tile and w <= tile:
            return RgbImage(tensor_to_image(model(x, level=0)))

        pad_h, pad_w = (-h) % MIN_INPUT_SIDE, (-w) % MIN_INPUT_SIDE
        xp = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        ph, pw = xp.shape[-2:]
        ctx = _level1_context(model.config)

        def tiles():
            for y0 in _tile_starts(ph, tile, overlap):
                for x0 in _tile_starts(pw, tile, overlap):
                    yield y0, x0, min(tile, ph - y0), min(tile, pw - x0)

        def crop_ctx(t, y0, x0, th, tw, c, scale=1):
            """Crop a tile plus ``c`` context px (at the ``scale``-reduced grid)."""
            H, W = t.shape[-2:]
            y0, x0, th, tw = y0 // scale, x0 // scale, th // scale, tw // scale
            top, left = min(c, y0), min(c, x0)
            bottom, right = min(c, H - y0 - th), min(c, W - x0 - tw)
            return t[..., y0 - top: y0 + th + bottom, x0 - left: x0 + tw + right], top, left

        e1 = torch.empty(1, model.config.width(1), ph, pw)
        for y0, x0, th, tw in tiles():
            part, top, left = crop_ctx(xp, y0, x0, th, tw, ctx)
            feats = model.enc[0](part)
            e1[..., y0: y0 + th, x0: x0 + tw] = feats[..., top: top + th, left: left + tw]

        enc = [e1]
        for level in range(2, NUM_LEVELS + 1):
            enc.append(model.enc[level - 1](F.max_pool2d(enc[-1], 2)))
        f2 = model.decode(enc, 2)
        del enc[1:]

        acc = np.zeros((2 * ph, 2 * pw, 3))
        weight = np.zeros((2 * ph, 2 * pw, 1))
        for y0, x0, th, tw in tiles():
            e_part, top, left = crop_ctx(e1, y0, x0, th, tw, ctx)
            f_part, top2, left2 = crop_ctx(f2, y0, x0, th, tw, ctx // 2, scale=2)
            if (top, left) != (2 * top2, 2 * left2):
                raise AssertionError("tile context misaligned between levels")
            f_part = f_part[..., : e_part.shape[-2] // 2, : e_part.shape[-1] // 2]
            out = model.head(0, model.level_step(1, e_part, f_part))
            out = out[..., 2 * top: 2 * (top + th), 2 * left: 2 * (left + tw)]
            img = out[0].permute(1, 2, 0).double().numpy()
            ov = 2 * overlap
            wy = _ramp(2 * th, ov if y0 > 0 else 0, ov if y0 + th < ph else 0)
            wx = _ramp(2 * tw, ov if x0 > 0 else 0, ov if x0 + tw < pw else 0)
            wt = (wy[:, None] * wx[None, :])[..., None]
            acc[2 * y0: 2 * (y0 + th), 2 * x0: 2 * (x0 + tw)] += img * wt
            weight[2 * y0: 2 * (y0 + th), 2 * x0: 2 * (x0 + tw)] += wt

    rgb = (acc / weight)[: 2 * h, : 2 * w]
    return RgbImage(np.clip((rgb + 1.0) / 2.0, 0.0, 1.0))

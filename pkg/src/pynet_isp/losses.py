"""Training objectives and image quality metrics.

Tensors are NCHW. Metric helpers also accept HWC numpy arrays and then
return plain floats.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
VGG_WEIGHTS_ENV = "PYNET_VGG_WEIGHTS"


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_nchw(x) -> tuple[torch.Tensor, bool]:
    """Return (NCHW tensor, was_numpy)."""
    if isinstance(x, torch.Tensor):
        if x.ndim == 3:
            x = x[None]
        return x, False
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))), True


def _out(value: torch.Tensor, as_float: bool):
    return float(value) if as_float else value


def mse_loss(pred, target):
    _check_shapes(pred, target)
    if isinstance(pred, torch.Tensor):
        return torch.mean((pred - target) ** 2)
    return float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))


def psnr(pred, target, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    _check_shapes(p, t)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    """Separable 'valid' Gaussian filtering, channel-wise."""
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def _ssim_maps(x, y, data_range, win):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return lum * cs, cs


def _window_for(x: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    return torch.as_tensor(gaussian_window(size, sigma), dtype=x.dtype, device=x.device)


def ssim(pred, target, data_range: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    """Mean local SSIM over all valid window positions and channels, averaged over the batch."""
    _check_shapes(pred, target)
    x, as_float = _as_nchw(pred)
    y, _ = _as_nchw(target)
    if min(x.shape[-2:]) < window:
        raise ContractError(f"image side {min(x.shape[-2:])} smaller than SSIM window {window}")
    ssim_map, _ = _ssim_maps(x, y, data_range, _window_for(x, window, sigma))
    return _out(ssim_map.mean(dim=(1, 2, 3)).mean(), as_float)


def ms_ssim_scales(min_side: int, window: int = SSIM_WINDOW, max_scales: int = 5) -> int:
    if min_side < window:
        raise ContractError(f"image side {min_side} smaller than SSIM window {window}")
    return min(max_scales, int(math.floor(math.log2(min_side / window))) + 1)


def ms_ssim_weights(scales: int) -> tuple[float, ...]:
    """Standard weights; truncated sets are rescaled to sum to one."""
    if scales == len(MS_SSIM_WEIGHTS):
        return MS_SSIM_WEIGHTS
    w = MS_SSIM_WEIGHTS[:scales]
    total = sum(w)
    return tuple(v / total for v in w)


def ms_ssim(pred, target, data_range: float = 1.0, scale_weights=None, floor: float = 1e-8):
    """Multi-scale SSIM.

    Contrast-structure means of scales 1..M-1 and the full SSIM mean at
    scale M are combined as a weighted geometric product. Each factor is
    clamped below at ``floor`` so negative correlations cannot produce
    NaNs. The scale count shrinks automatically for small images; one scale
    reduces to :func:`ssim`.
    """
    _check_shapes(pred, target)
    x, as_float = _as_nchw(pred)
    y, _ = _as_nchw(target)
    if scale_weights is None:
        scale_weights = ms_ssim_weights(ms_ssim_scales(min(x.shape[-2:])))
    scales = len(scale_weights)
    if min(x.shape[-2:]) < SSIM_WINDOW * 2 ** (scales - 1):
        raise ContractError(f"{scales} scales need a side of at least {SSIM_WINDOW * 2 ** (scales - 1)}")
    win = _window_for(x, SSIM_WINDOW, SSIM_SIGMA)
    if scales == 1:
        return ssim(pred, target, data_range)
    result = torch.ones(x.shape[0], dtype=x.dtype, device=x.device)
    for j, weight in enumerate(scale_weights):
        ssim_map, cs_map = _ssim_maps(x, y, data_range, win)
        last = j == scales - 1
        term = (ssim_map if last else cs_map).mean(dim=(1, 2, 3))
        result = result * term.clamp_min(floor) ** weight
        if not last:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return _out(result.mean(), as_float)


# ---------------------------------------------------------------------------
# perceptual loss
# ---------------------------------------------------------------------------

# torchvision vgg19().features indices of the ReLU outputs
VGG19_LAYERS = {
    "relu1_2": 3, "relu2_2": 8, "relu3_4": 17, "relu4_4": 26, "relu5_4": 35,
}
_VGG19_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def vgg19_features(upto: int) -> nn.Sequential:
    """The convolutional trunk of a 19-layer VGG, truncated after index ``upto``.

    Module indices match ``torchvision.models.vgg19().features`` so published
    state dicts load directly.
    """
    layers: list[nn.Module] = []
    cin = 3
    for v in _VGG19_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(cin, v, 3, padding=1), nn.ReLU()]
            cin = v
    return nn.Sequential(*layers[: upto + 1])


class FeatureExtractor(nn.Module):
    """Frozen VGG-19 feature map. Inputs are images in [0, 1]."""

    def __init__(self, layer: str = "relu5_4"):
        super().__init__()
        if layer not in VGG19_LAYERS:
            raise ConfigError(f"unknown feature layer {layer!r}; choose from {sorted(VGG19_LAYERS)}")
        self.layer = layer
        self.features = vgg19_features(VGG19_LAYERS[layer])
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def _freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    @classmethod
    def from_weights(cls, path, layer: str = "relu5_4") -> "FeatureExtractor":
        """Load a torchvision-format VGG-19 state dict (``features.N.weight`` keys)."""
        if not path or not os.path.isfile(path):
            raise ConfigError(f"VGG-19 weight file not found: {path!r}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        fx = cls(layer)
        prefix = "features."
        sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        if not sub:
            sub = state
        own = fx.features.state_dict()
        missing = [k for k in own if k not in sub]
        if missing:
            raise ConfigError(f"weight file {path} lacks {missing[:3]}...")
        fx.features.load_state_dict({k: sub[k] for k in own})
        return fx._freeze()

    @classmethod
    def random(cls, seed: int = 0, layer: str = "relu5_4") -> "FeatureExtractor":
        """Fixed random-weight extractor (He-normal), for tests and offline runs."""
        fx = cls(layer)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in fx.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()
        return fx._freeze()

    @classmethod
    def from_env(cls, layer: str = "relu5_4") -> "FeatureExtractor":
        path = os.environ.get(VGG_WEIGHTS_ENV)
        if not path:
            raise ConfigError(f"perceptual loss needs VGG-19 weights; set {VGG_WEIGHTS_ENV}")
        return cls.from_weights(path, layer)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.mean) / self.std)


def perceptual_loss(pred, target, fx: FeatureExtractor | None):
    """Mean squared difference of feature maps; inputs in [0, 1]."""
    _check_shapes(pred, target)
    if fx is None:
        raise ConfigError("perceptual loss requested but no feature extractor is configured")
    return torch.mean((fx(pred) - fx(target)) ** 2)


# ---------------------------------------------------------------------------
# level-specific composite losses
# ---------------------------------------------------------------------------


class TermKind(str, enum.Enum):
    MSE = "MSE"
    PERCEPTUAL = "PERCEPTUAL"
    SSIM = "SSIM"


@dataclass(frozen=True)
class LossTerm:
    kind: TermKind
    weight: float
    norm_constant: float = 1.0


_LEVEL_WEIGHTS = {
    "deep": ((TermKind.MSE, 1.0),),
    "mid": ((TermKind.PERCEPTUAL, 4.0), (TermKind.MSE, 1.0)),
    "fine": ((TermKind.PERCEPTUAL, 1.0), (TermKind.SSIM, 0.75), (TermKind.MSE, 0.05)),
}


def _group(level: int) -> str:
    if level in (4, 5):
        return "deep"
    if level in (2, 3):
        return "mid"
    if level in (0, 1):
        return "fine"
    raise ContractError(f"no loss defined for level {level}")


@dataclass(frozen=True)
class LevelLossSpec:
    """Per-level loss composition: weights are fixed per level group, constants vary."""

    level: int
    terms: tuple[LossTerm, ...]
    multiscale_ssim: bool = True

    def __post_init__(self):
        expected = _LEVEL_WEIGHTS[_group(self.level)]
        got = tuple((t.kind, t.weight) for t in self.terms)
        if got != expected:
            raise ContractError(f"level {self.level} loss must be {expected}, got {got}")
        if any(t.norm_constant <= 0 for t in self.terms):
            raise ContractError("normalization constants must be positive")

    @classmethod
    def for_level(cls, level: int, norm_constants=None, multiscale_ssim: bool = True):
        weights = _LEVEL_WEIGHTS[_group(level)]
        consts = list(norm_constants) if norm_constants is not None else [1.0] * len(weights)
        terms = tuple(LossTerm(k, w, c) for (k, w), c in zip(weights, consts, strict=True))
        return cls(level, terms, multiscale_ssim)

    @property
    def needs_extractor(self) -> bool:
        return any(t.kind is TermKind.PERCEPTUAL for t in self.terms)

    def with_constants(self, constants) -> "LevelLossSpec":
        terms = tuple(replace(t, norm_constant=float(c)) for t, c in zip(self.terms, constants, strict=True))
        return replace(self, terms=terms)


def raw_terms(spec: LevelLossSpec, pred, target, fx=None) -> list[torch.Tensor]:
    """Unweighted term values for tanh-range ``pred``/``target``, in ``spec.terms`` order."""
    _check_shapes(pred, target)
    p01, t01 = (pred + 1.0) / 2.0, (target + 1.0) / 2.0
    values = []
    for term in spec.terms:
        if term.kind is TermKind.MSE:
            values.append(mse_loss(p01, t01))
        elif term.kind is TermKind.PERCEPTUAL:
            values.append(perceptual_loss(p01, t01, fx))
        elif spec.multiscale_ssim:
            values.append(1.0 - ms_ssim(p01, t01))
        else:
            values.append(1.0 - ssim(p01, t01))
    return values


def combine_terms(spec: LevelLossSpec, values) -> torch.Tensor:
    return sum(t.weight * v / t.norm_constant for t, v in zip(spec.terms, values))


def level_loss(spec: LevelLossSpec, pred, target, fx=None, level: int | None = None):
    """Weighted sum of normalized terms. ``pred``/``target`` are in [-1, 1]."""
    if level is not None and level != spec.level:
        raise ContractError(f"loss spec for level {spec.level} used at level {level}")
    if spec.needs_extractor and fx is None:
        raise ConfigError(f"level {spec.level} loss needs a feature extractor")
    return combine_terms(spec, raw_terms(spec, pred, target, fx))


@dataclass
class LossNormalizer:
    """Running mean of each raw term over the first ``warmup`` batches, then frozen.

    While warming up the constants include the current batch, so the very
    first step sees every term normalized to exactly one.
    """

    spec: LevelLossSpec
    warmup: int = 100
    count: int = 0
    sums: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.sums:
            self.sums = [0.0] * len(self.spec.terms)

    @property
    def frozen(self) -> bool:
        return self.count >= self.warmup

    def update(self, values) -> LevelLossSpec:
        if not self.frozen:
            self.count += 1
            self.sums = [s + float(v) for s, v in zip(self.sums, values)]
            consts = [max(s / self.count, 1e-12) for s in self.sums]
            self.spec = self.spec.with_constants(consts)
        return self.spec

    def state_dict(self) -> dict:
        return {
            "level": self.spec.level,
            "warmup": self.warmup,
            "count": self.count,
            "sums": list(self.sums),
            "constants": [t.norm_constant for t in self.spec.terms],
            "multiscale_ssim": self.spec.multiscale_ssim,
        }

    @classmethod
    def from_state(cls, state: dict) -> "LossNormalizer":
        spec = LevelLossSpec.for_level(state["level"], state["constants"], state["multiscale_ssim"])
        return cls(spec, state["warmup"], state["count"], list(state["sums"]))

import numpy as np
import pytest
import torch

from pynet_isp import model as M
from pynet_isp.errors import ConfigError, ContractError
from pynet_isp.model import PyNetConfig

SMALL = PyNetConfig(base_channels=(8, 16, 32, 64, 128))


@pytest.fixture(scope="module")
def small_model():
    return M.build(SMALL, seed=0)


def _block_params(cin, cout, kernels):
    branch = cout // len(kernels)
    return sum(cin * k * k * branch + branch for k in kernels)


def _count_by_hand(widths, kernels, blocks):
    """Parameter total written out level by level (4-channel input, RGB heads)."""
    total, cin = 0, 4
    for w in widths:
        total += _block_params(cin, w, kernels)  # encoder block
        cin = w
    for lv in range(1, 6):
        w = widths[lv - 1]
        n = blocks[lv - 1]
        if lv == 5:
            total += (n - 1) * _block_params(w, w, kernels)
        else:
            total += widths[lv] * w * 9 + w  # transposed 3x3 upsampler
            total += _block_params(2 * w, w, kernels)  # fuse skip + upsampled
            total += (n - 2) * _block_params(w, w, kernels)
        total += w * 3 * 9 + 3  # head
    total += widths[0] * 3 * 9 + 3  # final 2x transposed conv
    return total


def test_default_param_count():
    count = M.param_count(M.build())
    assert count == 50_808_626
    assert 40e6 <= count <= 55e6


def test_param_count_matches_hand_count():
    for cfg in (SMALL, PyNetConfig(base_channels=(4, 4, 4, 4, 4)),
                PyNetConfig(base_channels=(1, 1, 1, 1, 1), kernel_sizes=(3,))):
        assert M.param_count(M.PyNet(cfg)) == _count_by_hand(
            cfg.base_channels, cfg.kernel_sizes, cfg.blocks_per_level)


def test_doubling_widths_scales_params_by_four():
    base = M.param_count(M.PyNet(SMALL))
    double = M.param_count(M.PyNet(PyNetConfig(base_channels=(16, 32, 64, 128, 256))))
    assert double / base == pytest.approx(4.0, rel=0.01)


def test_config_validation():
    with pytest.raises(ConfigError):
        PyNetConfig(base_channels=(1, 1, 1, 1, 1))  # four kernel branches cannot split width 1
    with pytest.raises(ConfigError):
        PyNetConfig(base_channels=(8, 16, 32))
    with pytest.raises(ConfigError):
        PyNetConfig(leaky_slope=-0.1)
    assert PyNetConfig.from_dict(SMALL.to_dict()) == SMALL


@pytest.mark.parametrize("level,side", [(5, 14), (4, 28), (3, 56), (2, 112), (1, 224), (0, 448)])
def test_shape_ladder_224(small_model, level, side):
    x = torch.rand(1, 4, 224, 224)
    with torch.no_grad():
        assert small_model(x, level).shape == (1, 3, side, side)
    assert M.output_size(224, level) == side


def test_output_size_64():
    m = M.build(SMALL)
    with torch.no_grad():
        assert m(torch.rand(2, 4, 64, 64), 0).shape == (2, 3, 128, 128)
        # non-multiples of 32 are reflect-padded and cropped back
        assert m(torch.rand(1, 4, 40, 72), 0).shape == (1, 3, 80, 144)


def test_too_small_input_and_bad_level(small_model):
    with pytest.raises(ContractError):
        small_model(torch.rand(1, 4, 16, 64), 0)
    with pytest.raises(ContractError):
        small_model(torch.rand(1, 4, 64, 64), 6)


def test_outputs_in_tanh_range(small_model):
    x = torch.rand(1, 4, 64, 64) * 50  # large inputs saturate but never leave (-1, 1)
    with torch.no_grad():
        for level in range(6):
            out = small_model(x, level)
            assert out.abs().max() <= 1.0


def test_build_is_deterministic():
    a, b = M.build(SMALL, seed=3), M.build(SMALL, seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = M.build(SMALL, seed=4)
    assert not torch.equal(a.enc[0].convs[0].weight, c.enc[0].convs[0].weight)
    x = torch.rand(1, 4, 64, 64)
    with torch.no_grad():
        assert torch.equal(a(x, 2), b(x, 2))


def test_multi_conv_block_preserves_shape_and_checks_width():
    feats = torch.rand(1, 16, 10, 12)
    out = M.multi_conv_block(feats, 2, SMALL)
    assert out.shape == feats.shape
    with pytest.raises(ContractError):
        M.multi_conv_block(torch.rand(1, 15, 10, 12), 2, SMALL)


def test_instance_norm_only_on_configured_levels():
    m = M.PyNet(SMALL)
    assert not m.enc[0].norm and all(m.enc[i].norm for i in range(1, 5))
    assert m.up[0].norm is False and all(m.up[i].norm for i in range(1, 4))
    unnormed = M.PyNet(PyNetConfig(base_channels=(8, 16, 32, 64, 128), instance_norm_levels=()))
    assert not any(block.norm for block in unnormed.enc)


def test_level_subgraph_isolation(small_model):
    """Level-5 loss must not reach parameters exclusive to shallower levels."""
    small_model.zero_grad(set_to_none=True)
    out = small_model(torch.rand(1, 4, 64, 64), 5)
    out.square().mean().backward()
    exclusive = set(small_model.exclusive_parameter_names(5))
    assert exclusive  # up/blocks/heads of levels 1-4 and the final layer
    for name, p in small_model.named_parameters():
        if name in exclusive:
            assert p.grad is None, name
        else:
            assert p.grad is not None, name
    small_model.zero_grad(set_to_none=True)


def test_level_outputs_independent_of_shallower_modules():
    m = M.build(SMALL, seed=0)
    x = torch.rand(1, 4, 64, 64)
    with torch.no_grad():
        before = m(x, 3)
        for mod in (m.up[1], m.blocks[1], m.heads[1], m.up[0], m.blocks[0], m.final):
            for p in mod.parameters():
                p.add_(1.0)
        assert torch.equal(before, m(x, 3))


def test_infer_full_requires_trained_model():
    m = M.build(SMALL)
    with pytest.raises(ContractError):
        M.infer_full(m, np.zeros((64, 64, 4)))
    m.trained_level = 0
    with pytest.raises(ContractError):
        M.infer_full(m, np.zeros((64, 64, 4)), tile=64, overlap=32)
    with pytest.raises(ContractError):
        M.infer_full(m, np.zeros((64, 64, 4)), tile=63, overlap=8)


def test_infer_full_tiled_matches_untiled():
    m = M.build(SMALL, seed=1)
    m.trained_level = 0
    x = np.random.default_rng(0).random((256, 200, 4)).astype(np.float32)
    whole = M.infer_full(m, x, tile=512, overlap=32).data
    tiled = M.infer_full(m, x, tile=96, overlap=16).data
    assert whole.shape == tiled.shape == (512, 400, 3)
    assert np.abs(whole - tiled).max() < 1e-2
    assert whole.min() >= 0 and whole.max() <= 1


def test_tile_starts_cover_length():
    for length, tile, overlap in [(100, 32, 8), (64, 64, 8), (257, 96, 16)]:
        starts = M._tile_starts(length, tile, overlap)
        covered = np.zeros(length, bool)
        for s in starts:
            covered[s: s + tile] = True
        assert covered.all()
        assert starts[-1] + min(tile, length) == length

import json
import math
import zipfile

import numpy as np
import pytest
import torch

from pynet_isp import checkpoint as C
from pynet_isp import model as M
from pynet_isp import synthetic, trainer as T
from pynet_isp.errors import (
    CheckpointFormatError,
    ConfigError,
    ConfigMismatchError,
    ScheduleError,
    TrainingDivergedError,
)
from pynet_isp.model import PyNetConfig

TINY = PyNetConfig(base_channels=(4, 8, 8, 16, 16))


@pytest.fixture(scope="module")
def pairs():
    packed, rgb = synthetic.isp_pairs(12, size=64, seed=0)
    return T.TensorPairDataset(packed.transpose(0, 3, 1, 2), rgb.transpose(0, 3, 1, 2))


def _cfg(tmp_path=None, **kw):
    base = dict(learning_rate=1e-3, batch_size_per_level=4, epochs_per_level=100,
                max_steps_per_level=3, perceptual_weights="random", feature_layer="relu2_2",
                norm_warmup=5)
    base.update(kw)
    if tmp_path is not None:
        base.setdefault("checkpoint_dir", str(tmp_path))
    return T.TrainConfig(**base)


# --- targets ---------------------------------------------------------------------------


def test_level_targets_are_block_means(rng):
    img = rng.random((448, 448, 3))
    targets = T.make_level_targets(img)
    sides = {5: 14, 4: 28, 3: 56, 2: 112, 1: 224, 0: 448}
    for level, side in sides.items():
        f = 2**level
        expected = img.reshape(side, f, side, f, 3).mean(axis=(1, 3)) * 2 - 1
        assert targets[level].shape == (side, side, 3)
        np.testing.assert_allclose(targets[level], expected, atol=1e-12)
    with pytest.raises(Exception):
        T.make_level_targets(img[:400])


def test_batch_order_is_pure_and_complete():
    a = T.batch_order(10, 4, seed=1, level=3, epoch=2)
    assert a == T.batch_order(10, 4, seed=1, level=3, epoch=2)
    assert [len(b) for b in a] == [4, 4, 2]
    assert sorted(sum(a, [])) == list(range(10))
    assert a != T.batch_order(10, 4, seed=1, level=3, epoch=3)


# --- configuration -------------------------------------------------------------------


def test_train_config_defaults_and_validation(tmp_path):
    cfg = T.TrainConfig()
    assert cfg.batch_size_per_level == {5: 50, 4: 50, 3: 32, 2: 16, 1: 10, 0: 10}
    assert cfg.learning_rate == 5e-5
    assert T.TrainConfig(epochs_per_level=7).epochs_per_level == {lv: 7 for lv in T.LEVELS}
    with pytest.raises(ConfigError):
        T.TrainConfig(batch_size_per_level=65)
    with pytest.raises(ConfigError):
        T.TrainConfig(epochs_per_level=0)
    with pytest.raises(ConfigError):
        T.TrainConfig(learning_rate=0)
    per_level = T.TrainConfig(learning_rate={"5": 3e-4, 4: 3e-4, 3: 3e-4, 2: 3e-4, 1: 1e-3, 0: 1e-3})
    assert per_level.lr(5) == 3e-4 and per_level.lr(0) == 1e-3
    assert T.TrainConfig(learning_rate=1e-4).lr(2) == 1e-4
    with pytest.raises(ConfigError):
        T.TrainConfig(learning_rate={5: 1e-4})
    path = tmp_path / "cfg.yaml"
    path.write_text("learning_rate: 0.001\nepochs_per_level: 2\n")
    cfg = T.TrainConfig.from_file(path, seed=5)
    assert cfg.learning_rate == 0.001 and cfg.seed == 5 and cfg.epochs_per_level[0] == 2
    path.write_text("learning_rte: 0.001\n")
    with pytest.raises(ConfigError):
        T.TrainConfig.from_file(path)


# --- schedule ----------------------------------------------------------------------------


def test_schedule_order_enforced(pairs):
    m = M.build(TINY)
    with pytest.raises(ScheduleError):
        T.train_level(m, pairs, 3, _cfg())
    T.train_level(m, pairs, 5, _cfg(max_steps_per_level=1))
    assert m.trained_level == 5
    with pytest.raises(ScheduleError):
        T.train_level(m, pairs, 5, _cfg())
    with pytest.raises(ScheduleError):
        T.train_level(m, pairs, 3, _cfg())


def test_progressive_levels_transition_strictly(pairs):
    m = M.build(TINY)
    seen = []
    history = T.TrainHistory()
    for level in T.LEVELS:
        T.train_level(m, pairs, level, _cfg(max_steps_per_level=1), history=history)
        seen.append(m.trained_level)
    assert seen == [5, 4, 3, 2, 1, 0]
    assert [r["level"] for r in history.steps] == [5, 4, 3, 2, 1, 0]
    assert [r["step"] for r in history.steps] == list(range(6))


def test_level5_training_leaves_shallow_parameters_untouched(pairs):
    m = M.build(TINY)
    exclusive = set(m.exclusive_parameter_names(5))
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    grads = set()

    def seen(name):
        def hook(grad):
            grads.add(name)
        return hook

    hooks = [p.register_hook(seen(n)) for n, p in m.named_parameters()]
    T.train_level(m, pairs, 5, _cfg(max_steps_per_level=2))
    for h in hooks:
        h.remove()
    assert exclusive and not exclusive & grads
    for n, p in m.named_parameters():
        if n in exclusive:
            assert torch.equal(p, before[n]), n
    assert any(not torch.equal(p, before[n]) for n, p in m.named_parameters() if n not in exclusive)


def test_level5_loss_decreases(pairs):
    torch.manual_seed(0)
    m = M.build(PyNetConfig(base_channels=(8, 16, 32, 64, 128)))
    history = T.TrainHistory()
    T.train_level(m, pairs, 5, _cfg(max_steps_per_level=200, learning_rate=3e-4), history=history)
    # raw MSE term: the normalized loss changes scale during the warm-up
    losses = [r["terms"]["MSE"] for r in history.steps]
    assert len(losses) == 200
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_divergence_saves_checkpoint(pairs, tmp_path):
    m = M.build(TINY)
    with torch.no_grad():
        m.enc[0].convs[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        T.train_level(m, pairs, 5, _cfg(tmp_path))
    assert (tmp_path / "diverged-level5.ckpt").is_file()


# --- resume ----------------------------------------------------------------------------


class _Crashing:
    """Dataset wrapper that fails once ``limit`` items have been served."""

    def __init__(self, inner, limit):
        self.inner, self.limit, self.served = inner, limit, 0

    def __len__(self):
        return len(self.inner)

    def __getitem__(self, i):
        if self.served >= self.limit:
            raise RuntimeError("simulated crash")
        self.served += 1
        return self.inner[i]


@pytest.mark.parametrize("level", [5, 3])
def test_resume_reproduces_next_loss(pairs, tmp_path, level):
    def fresh():
        m = M.build(TINY, seed=2)
        for lv in range(5, level, -1):
            m.trained_level = lv  # pretend the deeper levels are finished
        m.trained_level = level + 1
        return m

    cfg = _cfg(tmp_path / "a", max_steps_per_level=6, checkpoint_every=2)
    full = T.TrainHistory()
    T.train_level(fresh(), pairs, level, cfg, history=full)

    # crash while loading the batch for step 6 (index 5); the last checkpoint is after step 4
    cfg_b = _cfg(tmp_path / "b", max_steps_per_level=6, checkpoint_every=2)
    with pytest.raises(RuntimeError):
        T.train_level(fresh(), _Crashing(pairs, 5 * 4), level, cfg_b)
    data = C.read_checkpoint(tmp_path / "b" / "latest.ckpt")
    assert data.train_state["steps_done"] == 4
    history = T.TrainHistory.from_dict(data.history)
    T.train_level(data.model, pairs, level, cfg_b, history=history, resume=data)
    resumed = history.losses(level)
    assert len(resumed) == 6
    for a, b in zip(full.losses(level), resumed):
        assert a == pytest.approx(b, abs=1e-6)


# --- checkpoints -------------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = M.build(TINY, seed=9)
    m.trained_level = 3
    history = T.TrainHistory([{"step": 0, "level": 5, "loss": 0.5}], [])
    path = C.save_checkpoint(m, history, tmp_path / "m.ckpt")
    loaded, hist = C.load_checkpoint(path)
    assert C.checkpoint_bytes(loaded) == C.checkpoint_bytes(m)
    assert loaded.trained_level == 3
    assert loaded.config == TINY
    assert hist["steps"] == history.steps
    x = torch.rand(1, 4, 32, 32)
    with torch.no_grad():
        assert torch.equal(m(x, 3), loaded(x, 3))


def test_checkpoint_rejects_corruption(tmp_path):
    m = M.build(TINY)
    path = C.save_checkpoint(m, T.TrainHistory(), tmp_path / "m.ckpt")
    data = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointFormatError):
        C.read_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError):
        C.read_checkpoint(tmp_path / "junk.ckpt")

    # wrong format tag
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    manifest = json.loads(entries["manifest.json"])
    manifest["format"] = "something-else"
    with zipfile.ZipFile(tmp_path / "tag.ckpt", "w") as zf:
        for n, b in entries.items():
            zf.writestr(n, json.dumps(manifest) if n == "manifest.json" else b)
    with pytest.raises(CheckpointFormatError):
        C.read_checkpoint(tmp_path / "tag.ckpt")

    # a tensor blob with the wrong length
    name = next(n for n in entries if n.startswith("tensors/"))
    with zipfile.ZipFile(tmp_path / "short.ckpt", "w") as zf:
        for n, b in entries.items():
            zf.writestr(n, b[:-4] if n == name else b)
    with pytest.raises(CheckpointFormatError):
        C.read_checkpoint(tmp_path / "short.ckpt")
    with pytest.raises(FileNotFoundError):
        C.read_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_config_mismatch(tmp_path):
    path = C.save_checkpoint(M.build(TINY), T.TrainHistory(), tmp_path / "m.ckpt")
    with pytest.raises(ConfigMismatchError):
        C.load_checkpoint(path, expected_config=PyNetConfig())
    model, _ = C.load_checkpoint(path, expected_config=TINY)
    assert model.config == TINY


def test_mid_level_checkpoint_keeps_optimizer_state(pairs, tmp_path):
    m = M.build(TINY)
    cfg = _cfg(tmp_path, max_steps_per_level=3, checkpoint_every=1)
    with pytest.raises(RuntimeError):
        T.train_level(m, _Crashing(pairs, 4), 5, cfg)
    data = C.read_checkpoint(tmp_path / "latest.ckpt")
    level5 = {n for n, p in m.named_parameters() if n not in set(m.exclusive_parameter_names(5))}
    assert set(data.optimizer["state"]) == level5
    assert all(st["step"] == 1.0 for st in data.optimizer["state"].values())
    assert data.train_state["level"] == 5 and data.train_state["steps_done"] == 1


def test_validate_level_reports_metrics(pairs):
    m = M.build(TINY)
    scores = T.validate_level(m, pairs, 5)
    assert math.isfinite(scores["val_psnr"]) and math.isnan(scores["val_msssim"])
    scores = T.validate_level(m, pairs, 2)
    assert 0 <= scores["val_msssim"] <= 1

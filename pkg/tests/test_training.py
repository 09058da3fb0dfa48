import dataclasses

import numpy as np
import pytest
import torch

from mangastyle import checkpoint as ckpt
from mangastyle.dataset import TripletFolder, collate, preprocess
from mangastyle.errors import CorruptCheckpoint, MissingCheckpoint, NonFiniteLoss, RoleMismatch
from mangastyle.networks import build_discriminator, build_generator_A, build_generator_B, init_weights, parameter_digest
from mangastyle.synthgen import StyleParams, generate_scene, scene_spec
from mangastyle.training import (
    LossReport,
    TrainConfig,
    build_baseline,
    freeze,
    load_history,
    loss_l1,
    make_optimizers,
    stage1_step,
    stage2_step,
    train,
)

MICRO = TrainConfig(width=8, depth=5, crop=32, working_size=(32, 32), epochs=2, seed=3)


@pytest.fixture(scope="module")
def data(synth_dir):
    return list(TripletFolder(synth_dir))


def _batch(data, cfg=MICRO):
    return collate([preprocess(data[0], cfg.working_size, cfg.crop, np.random.default_rng(0))])


def _nets(cfg=MICRO):
    torch.manual_seed(0)
    gA = init_weights(build_generator_A(cfg.width, cfg.depth), 0)
    dA = init_weights(build_discriminator(4, cfg.width), 1)
    gB = init_weights(build_generator_B(cfg.width, cfg.depth), 2)
    dB = init_weights(build_discriminator(7, cfg.width), 3)
    return gA, dA, gB, dB


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lr) == (100.0, 50.0, 50.0, 0.001)
    assert cfg.adam_betas == (0.5, 0.999) and cfg.batch_size == 1 and cfg.crop == 256
    for bad in ({"lambda2": -1}, {"lr": 0}, {"epochs": 0}, {"crop": 100}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_stage1_report_arithmetic(data):
    gA, dA, _, _ = _nets()
    cfg = dataclasses.replace(MICRO, lambda1=100.0)
    r = stage1_step(_batch(data), gA, dA, make_optimizers(gA, dA, cfg), cfg)
    assert r.l1_cycle == 0.0
    assert r.total_g == pytest.approx(r.gan_g + 100 * r.l1_direct, rel=1e-6)
    assert r.l1_direct >= 0 and r.gan_g >= 0 and r.gan_d >= 0


def test_stage1_zero_lambda(data):
    gA, dA, _, _ = _nets()
    cfg = dataclasses.replace(MICRO, lambda1=0.0)
    r = stage1_step(_batch(data), gA, dA, make_optimizers(gA, dA, cfg), cfg)
    assert r.total_g == r.gan_g


def test_stage2_report_decomposition(data):
    gA, _, gB, dB = _nets()
    freeze(gA)
    r = stage2_step(_batch(data), gB, dB, gA, make_optimizers(gB, dB, MICRO), MICRO)
    assert r.l1_cycle > 0
    assert r.total_g == pytest.approx(r.gan_g + 50 * r.l1_cycle + 50 * r.l1_direct, rel=1e-6)


def test_stage2_without_cycle_term(data):
    _, _, gB, dB = _nets()
    cfg = dataclasses.replace(MICRO, lambda2=0.0, lambda3=7.0)
    r = stage2_step(_batch(data), gB, dB, None, make_optimizers(gB, dB, cfg), cfg)
    assert r.l1_cycle == 0.0
    assert r.total_g == pytest.approx(r.gan_g + 7.0 * r.l1_direct, rel=1e-6)


def test_stage2_needs_gA_when_cycle_on(data):
    _, _, gB, dB = _nets()
    with pytest.raises(MissingCheckpoint):
        stage2_step(_batch(data), gB, dB, None, make_optimizers(gB, dB, MICRO), MICRO)


class _Oracle(torch.nn.Module):
    """Stand-in G_B that returns the ground truth through a trainable no-op."""

    def __init__(self, x):
        super().__init__()
        self.x = x
        self.zero = torch.nn.Parameter(torch.zeros(()))

    def forward(self, y, z):
        return self.x + self.zero


def test_stage2_with_perfect_generator(data):
    gA, _, _, dB = _nets()
    freeze(gA)
    batch = _batch(data)
    g = _Oracle(batch.colorized)
    r = stage2_step(batch, g, dB, gA, make_optimizers(g, dB, MICRO), MICRO)
    assert r.l1_direct == 0.0
    with torch.no_grad():
        assert r.l1_cycle == pytest.approx(loss_l1(gA(batch.colorized), batch.screentone).item(), rel=1e-6)


def test_stage2_leaves_gA_untouched(data):
    gA, _, gB, dB = _nets()
    freeze(gA)
    before = parameter_digest(gA)
    opts = make_optimizers(gB, dB, MICRO)
    batch = _batch(data)
    for i in range(5):
        stage2_step(batch, gB, dB, gA, opts, MICRO, step=i)
    assert parameter_digest(gA) == before


def test_non_finite_loss_aborts(data):
    gA, dA, _, _ = _nets()
    batch = _batch(data)
    batch.colorized[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLoss, match="step 0"):
        stage1_step(batch, gA, dA, make_optimizers(gA, dA, MICRO), MICRO)


def test_history_length(data):
    # five pages at 150 epochs and batch 1 is 750 steps
    cfg = dataclasses.replace(MICRO, width=2, depth=4, crop=16, working_size=(16, 16), epochs=150)
    result = train(1, cfg, data[:5])
    assert len(result.history) == 750
    assert [r.step for r in result.history] == list(range(750))


def test_batches_round_up(data):
    cfg = dataclasses.replace(MICRO, batch_size=4, epochs=3)
    assert len(train(1, cfg, data[:5]).history) == 6


def test_train_is_deterministic(data, tmp_path):
    a = train(1, MICRO, data[:3], out_dir=tmp_path / "a")
    b = train(1, MICRO, data[:3], out_dir=tmp_path / "b")
    for name in ("G_A.ckpt", "D_A.ckpt", "history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert parameter_digest(a.networks["G_A"]) == parameter_digest(b.networks["G_A"])


def test_history_csv_round_trip(data, tmp_path):
    result = train(1, MICRO, data[:2], out_dir=tmp_path)
    assert load_history(result.paths["history"]) == result.history
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header == "step,gan_g,gan_d,l1_direct,l1_cycle,total_g"


def test_stage2_requires_stage1(data):
    with pytest.raises(MissingCheckpoint, match="stage-1"):
        train(2, MICRO, data[:2])


def test_stage2_from_checkpoint_path(data, tmp_path):
    s1 = train(1, MICRO, data[:2], out_dir=tmp_path / "s1")
    s2 = train(2, MICRO, data[:2], stage1=s1.paths["G_A"], out_dir=tmp_path / "s2")
    assert s2.used_stage1
    assert ckpt.load_checkpoint(s1.paths["G_A"]).parameters.keys() == s1.checkpoints["G_A"].parameters.keys()
    assert all(r.l1_cycle > 0 for r in s2.history)


def test_stage2_without_cycle_never_loads_gA(data, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("G_A loaded")

    monkeypatch.setattr(ckpt, "load_network", boom)
    result = train(2, dataclasses.replace(MICRO, lambda2=0.0), data[:2], stage1="unused")
    assert not result.used_stage1


@pytest.mark.parametrize("kind,in_ch", [("tone_only", 1), ("flat_only", 3)])
def test_baselines(kind, in_ch, data):
    g, step = build_baseline(kind, MICRO)
    with torch.no_grad():
        assert g(torch.randn(1, in_ch, 32, 32)).shape == (1, 3, 32, 32)
    result = train(kind, MICRO, data[:2])
    assert len(result.history) == 4
    assert result.generator.role == f"P2P_{kind}"


def test_baseline_full_size_shape():
    g, _ = build_baseline("tone_only")
    with torch.no_grad():
        assert g.eval()(torch.randn(1, 1, 256, 256)).shape == (1, 3, 256, 256)


def test_baseline_rejects_unknown_kind():
    with pytest.raises(ValueError):
        build_baseline("sketch_only")


def test_checkpoint_round_trip(data, tmp_path):
    result = train(1, MICRO, data[:2])
    c = result.checkpoints["G_A"]
    path = ckpt.save_checkpoint(c, tmp_path / "g.ckpt")
    loaded = ckpt.load_checkpoint(path)
    assert loaded.role == "G_A" and loaded.step == 4 and loaded.config_digest == MICRO.digest()
    assert loaded.parameters.keys() == c.parameters.keys()
    for k in c.parameters:
        assert loaded.parameters[k].dtype == c.parameters[k].dtype
        assert loaded.parameters[k].tobytes() == c.parameters[k].tobytes()
    for k in c.optimizer_state:
        assert loaded.optimizer_state[k].tobytes() == c.optimizer_state[k].tobytes()
    net = ckpt.restore(loaded, "G_A")
    assert parameter_digest(net) == parameter_digest(result.networks["G_A"])


def test_optimizer_state_restores(data):
    result = train(1, MICRO, data[:2])
    c = result.checkpoints["G_A"]
    net = ckpt.restore(c)
    opt = torch.optim.Adam(net.parameters(), lr=MICRO.lr, betas=MICRO.adam_betas)
    ckpt.restore_optimizer(c, net, opt)
    again = ckpt.capture(net, opt)
    assert again.optimizer_state.keys() == c.optimizer_state.keys()
    for k in c.optimizer_state:
        np.testing.assert_array_equal(again.optimizer_state[k], c.optimizer_state[k])


def test_truncated_checkpoint(data, tmp_path):
    path = ckpt.save_checkpoint(train(1, MICRO, data[:1]).checkpoints["D_A"], tmp_path / "d.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(CorruptCheckpoint):
        ckpt.load_checkpoint(path)
    path.write_bytes(raw[:10])
    with pytest.raises(CorruptCheckpoint):
        ckpt.load_checkpoint(path)
    path.write_bytes(b"not a checkpoint at all, definitely not")
    with pytest.raises(CorruptCheckpoint):
        ckpt.load_checkpoint(path)


def test_role_mismatch(data, tmp_path):
    path = ckpt.save_checkpoint(train(1, MICRO, data[:1]).checkpoints["G_A"], tmp_path / "g.ckpt")
    with pytest.raises(RoleMismatch):
        ckpt.load_checkpoint(path, role="G_B")
    with pytest.raises(RoleMismatch):
        ckpt.load_network(path, role="G_B")


def test_digest_mismatch_only_warns(data, tmp_path, caplog):
    path = ckpt.save_checkpoint(train(1, MICRO, data[:1]).checkpoints["G_A"], tmp_path / "g.ckpt")
    c = ckpt.load_checkpoint(path, config_digest="0000")
    assert c.role == "G_A"
    assert "written under config" in caplog.text


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpoint):
        ckpt.load_checkpoint(tmp_path / "nope.ckpt")


def test_flat_only_learns_identity_on_unstyled_data():
    style = StyleParams(shade_strength=0.0, highlight_strength=0.0)
    t = generate_scene(scene_spec(1, canvas=(32, 32), style=style))
    cfg = TrainConfig(width=16, depth=5, crop=32, working_size=(32, 32), epochs=600, seed=0)
    result = train("flat_only", cfg, [t], stop_when=lambda r: r.l1_direct < 0.05)
    assert result.history[-1].l1_direct < 0.05

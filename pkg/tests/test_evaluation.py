import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mangastyle import checkpoint as ckpt
from mangastyle.dataset import TripletFolder
from mangastyle.errors import DimensionMismatch, EmptyDataset, MissingCheckpoint, RoleMismatch
from mangastyle.evaluation import (
    EvalReport,
    ablation,
    colorize,
    evaluate,
    format_table,
    generator_inference,
    model_fn,
    psnr,
)
from mangastyle.networks import build_generator_A, build_generator_B, init_weights
from mangastyle.training import TrainConfig

from conftest import make_triplet


def test_psnr_identical_is_capped():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert psnr(img, img) == 99.0


def test_psnr_uniform_offset():
    a = np.full((10, 10, 3), 100, np.uint8)
    b = a + 16
    assert psnr(a, b) == pytest.approx(20 * math.log10(255 / 16), rel=1e-9)
    assert round(psnr(a, b), 2) == 24.05


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        psnr(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5, 3), np.uint8))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 256, (2, 6, 7, 3), dtype=np.uint8)
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(1)
    img = rng.integers(64, 192, (32, 32, 3)).astype(np.int64)
    noise = rng.uniform(-1, 1, img.shape)
    values = [psnr(img.astype(np.uint8), np.clip(img + a * noise, 0, 255).round().astype(np.uint8))
              for a in (2, 4, 8, 16, 32, 60)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_report_aggregates():
    r = EvalReport("m", [("a", 20.0), ("b", 30.0)])
    assert (r.avg, r.max, r.min) == (25.0, 30.0, 20.0)
    with pytest.raises(EmptyDataset):
        EvalReport("m", [])


def test_report_csv_round_trip(tmp_path):
    r = EvalReport("m", [("a", 21.123456789), ("b", 30.5)])
    back = EvalReport.from_csv(r.to_csv(tmp_path / "r.csv"), "m")
    assert back == r
    assert (tmp_path / "r.csv").read_text().splitlines()[-3].startswith("__avg__")


def test_evaluate_identity_model():
    t = make_triplet()
    r = evaluate(lambda trip: trip.colorized, [t])
    assert r.avg == r.max == r.min == 99.0
    with pytest.raises(EmptyDataset):
        evaluate(lambda trip: trip.colorized, [])


def test_format_table():
    text = format_table([EvalReport("tone_only", [("a", 12.99)]), EvalReport("ours", [("a", 26.71)])])
    assert "Ave." in text and "26.71" in text and "12.99" in text


@pytest.fixture(scope="module")
def gB():
    torch.manual_seed(0)
    return init_weights(build_generator_B(width=8), 0).eval()


def test_colorize_pads_and_crops(gB):
    t = make_triplet(h=453, w=640)
    out = colorize(gB, t.screentone, t.flat)
    assert out.shape == (453, 640, 3) and out.dtype == np.uint8


def test_colorize_aligned_input_needs_no_padding(gB, monkeypatch):
    import mangastyle.evaluation as ev

    seen = []
    monkeypatch.setattr(ev.F, "pad", lambda *a, **k: seen.append(a) or a[0])
    t = make_triplet(h=256, w=256)
    assert colorize(gB, t.screentone, t.flat).shape == (256, 256, 3)
    assert seen == []


def test_colorize_deterministic_from_checkpoint(gB, tmp_path):
    path = ckpt.save_checkpoint(ckpt.capture(gB), tmp_path / "G_B.ckpt")
    t = make_triplet(h=130, w=70)
    a = colorize(path, t.screentone, t.flat)
    b = colorize(path, t.screentone, t.flat)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, colorize(gB, t.screentone, t.flat))


def test_colorize_errors(gB, tmp_path):
    t = make_triplet(h=64, w=64)
    with pytest.raises(DimensionMismatch):
        colorize(gB, t.screentone[:32], t.flat)
    with pytest.raises(MissingCheckpoint):
        colorize(tmp_path / "missing.ckpt", t.screentone, t.flat)
    with pytest.raises(MissingCheckpoint):
        colorize(None, t.screentone, t.flat)
    gA = build_generator_A(width=8)
    with pytest.raises(RoleMismatch):
        colorize(ckpt.capture(gA), t.screentone, t.flat)


def test_inference_restores_training_mode(gB):
    gB.train()
    t = make_triplet(h=128, w=128)
    generator_inference(gB, t.screentone, t.flat)
    assert gB.training
    gB.eval()


def test_model_fn_rejects_non_colorizer():
    with pytest.raises(ValueError):
        model_fn(build_generator_A(width=8))


def test_ablation_harness(synth_dir, tmp_path):
    from mangastyle.training import train

    data = list(TripletFolder(synth_dir))
    cfg = TrainConfig(width=8, depth=5, crop=32, working_size=(32, 32), epochs=2, seed=1)
    s1 = train(1, cfg, data[:2])
    result = ablation(cfg, data[:2], s1.networks["G_A"], data[2:4], out_dir=tmp_path)
    assert result.initial_digests[0] == result.initial_digests[1]
    assert not result.ablated_used_stage1
    assert [i for i, _ in result.full.per_image_psnr] == [t.id for t in data[2:4]]
    assert result.grids[0].shape == (32, 5 * 32 + 4 * 4, 3)
    assert (tmp_path / "full.csv").exists() and (tmp_path / "no_cycle.csv").exists()
    assert len(list(tmp_path.glob("*_ablation.png"))) == 2

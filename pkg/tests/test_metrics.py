import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvksr.imageio import read_image, write_image
from mvksr.losses import ssim
from mvksr.metrics import MetricReport, eval_batch, parse_records, psnr, ssim_metric
from mvksr.physics import gen_clean_scene


def test_psnr_cap_for_identical(rng):
    x = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(x, x) == 99.0


@pytest.mark.parametrize("diff,expected", [(0.1, 20.0), (1.0, 0.0)])
def test_psnr_uniform_difference(diff, expected):
    x = np.zeros((5, 5, 3))
    assert psnr(x, x + diff) == pytest.approx(expected, abs=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_psnr_symmetric(seed):
    x, y = np.random.default_rng(seed).uniform(0, 1, (2, 6, 6, 3))
    assert psnr(x, y) == psnr(y, x)


def test_psnr_strictly_decreasing_in_error():
    x = np.full((4, 4, 3), 0.2)
    vals = [psnr(x, x + e) for e in (0.01, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_metric_identity_and_consistency(rng):
    x = gen_clean_scene(24, 24, 0)
    assert ssim_metric(x, x) == pytest.approx(1.0, abs=1e-12)
    for _ in range(5):
        a, b = rng.uniform(0, 1, (2, 20, 20, 3))
        assert abs(ssim_metric(a, b) - float(ssim(a, b).data)) < 1e-12


def test_ssim_metric_noise_probe(rng):
    x = gen_clean_scene(32, 32, 1)
    n = rng.normal(size=x.shape)
    assert ssim_metric(x, x + 0.1 * n) < ssim_metric(x, x + 0.02 * n)


def test_report_mean_and_population_std():
    rep = MetricReport(psnr={"a": 20.0, "b": 30.0}, ssim={"a": 0.5, "b": 0.7})
    assert rep.stats("psnr") == (25.0, 5.0)
    rec = parse_records("\n".join(rep.records()))
    assert float(rec["psnr.mean"]) == 25.0 and float(rec["psnr.std"]) == 5.0
    assert rec["count"] == "2"
    assert "FSIM" in rep.table()


def _write_pair(d_rest, d_gt, name, rest, gt):
    write_image(d_rest / name, rest)
    write_image(d_gt / name, gt)


def test_eval_batch_identical(tmp_path):
    r, g = tmp_path / "r", tmp_path / "g"
    r.mkdir(), g.mkdir()
    for i in range(3):
        img = gen_clean_scene(24, 24, i)
        _write_pair(r, g, f"{i}.png", img, img)
    rep = eval_batch(r, g)
    assert rep.count == 3
    assert rep.stats("psnr") == (99.0, 0.0)
    assert rep.stats("ssim")[0] == pytest.approx(1.0, abs=1e-12)


def test_eval_batch_matches_single_image_ops(tmp_path, rng):
    r, g = tmp_path / "r", tmp_path / "g"
    r.mkdir(), g.mkdir()
    for i in range(3):
        img = gen_clean_scene(24, 24, i)
        _write_pair(r, g, f"{i}.png", np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1), img)
    rep = eval_batch(r, g)
    for i in range(3):
        a, b = read_image(r / f"{i}.png"), read_image(g / f"{i}.png")
        assert rep.psnr[f"{i}.png"] == psnr(a, b)
        assert rep.ssim[f"{i}.png"] == ssim_metric(a, b)


def test_eval_batch_skips_unmatched(tmp_path, caplog):
    r, g = tmp_path / "r", tmp_path / "g"
    r.mkdir(), g.mkdir()
    img = gen_clean_scene(16, 16, 0)
    _write_pair(r, g, "both.png", img, img)
    write_image(r / "only_r.png", img)
    write_image(g / "only_g.png", img)
    with caplog.at_level(logging.WARNING):
        rep = eval_batch(r, g)
    assert rep.count == 1 and rep.skipped == ["only_g.png", "only_r.png"]
    assert "only_r.png" in caplog.text


def test_eval_batch_empty_intersection(tmp_path):
    r, g = tmp_path / "r", tmp_path / "g"
    r.mkdir(), g.mkdir()
    img = gen_clean_scene(16, 16, 0)
    write_image(r / "a.png", img)
    write_image(g / "b.png", img)
    with pytest.raises(ValueError):
        eval_batch(r, g)

import numpy as np
import pytest

from mvksr.checkpoint import save_checkpoint
from mvksr.cli import build_parser, main
from mvksr.data import load_manifest, make_clean_scenes
from mvksr.imageio import read_image, write_image
from mvksr.net import NetworkConfig, init_params
from mvksr.physics import gen_clean_scene

SUBCOMMANDS = ("synth", "decompose", "train", "restore", "eval", "gradcheck", "bench")


def test_top_level_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "restore" in capsys.readouterr().out


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_subcommand_help_documents_every_flag(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_unknown_flag_is_usage_error(capsys):
    assert main(["restore", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_no_subcommand_is_usage_error():
    assert main([]) == 1


def test_restore_missing_checkpoint(tmp_path):
    img = tmp_path / "in.png"
    write_image(img, gen_clean_scene(16, 16, 0))
    assert main(["restore", "--ckpt", str(tmp_path / "none.ckpt"), "--in", str(img), "--out", str(tmp_path / "o.png")]) == 2
    assert not (tmp_path / "o.png").exists()


def test_restore_corrupt_checkpoint(tmp_path):
    img = tmp_path / "in.png"
    write_image(img, gen_clean_scene(16, 16, 0))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["restore", "--ckpt", str(bad), "--in", str(img), "--out", str(tmp_path / "o.png")]) == 4


def test_restore_odd_size_roundtrip(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(init_params(NetworkConfig(blocks_per_level=1), seed=0), ckpt)
    img = tmp_path / "in.png"
    write_image(img, gen_clean_scene(30, 22, 1))
    out = tmp_path / "out.png"
    assert main(["restore", "--ckpt", str(ckpt), "--in", str(img), "--out", str(out)]) == 0
    assert read_image(out).shape == (30, 22, 3)


def test_decompose_complement_mode_sums_to_one(tmp_path):
    img = tmp_path / "scene.png"
    write_image(img, gen_clean_scene(40, 40, 3))
    out = tmp_path / "layers"
    assert main(["decompose", "--in", str(img), "--out", str(out), "--mode", "complement"]) == 0
    for k in (5, 13, 25):
        lo = np.asarray(read_image(out / f"scene_lo{k}.png")) * 255
        hi = np.asarray(read_image(out / f"scene_hi{k}.png")) * 255
        np.testing.assert_allclose(lo + hi, 255.0, atol=1e-9)


def test_decompose_is_idempotent(tmp_path):
    img = tmp_path / "scene.png"
    write_image(img, gen_clean_scene(24, 24, 4))
    for d in ("a", "b"):
        assert main(["decompose", "--in", str(img), "--out", str(tmp_path / d)]) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_synth_and_eval_folder_mode(tmp_path):
    make_clean_scenes(tmp_path / "clean", 3, 24, 24, seed=0)
    assert main(["synth", "--clean", str(tmp_path / "clean"), "--out", str(tmp_path / "ds"), "--seed", "5"]) == 0
    m = load_manifest(tmp_path / "ds" / "manifest.txt")
    assert len(m.records) == 9
    report = tmp_path / "rep.txt"
    assert main(["eval", "--restored", str(tmp_path / "clean"), "--gt", str(tmp_path / "clean"), "--report", str(report)]) == 0
    assert "psnr.mean=99.0" in report.read_text()


def test_synth_missing_folder(tmp_path):
    assert main(["synth", "--clean", str(tmp_path / "nowhere"), "--out", str(tmp_path / "ds")]) == 2


def test_synth_idempotent(tmp_path):
    make_clean_scenes(tmp_path / "clean", 2, 24, 24, seed=0)
    for d in ("a", "b"):
        assert main(["synth", "--clean", str(tmp_path / "clean"), "--out", str(tmp_path / d), "--seed", "3"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_bad_manifest(tmp_path):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(init_params(NetworkConfig(blocks_per_level=1), seed=0), ckpt)
    man = tmp_path / "manifest.txt"
    man.write_text("format=something-else\n")
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(man)]) == 4


def test_config_file_overrides(tmp_path, capsys):
    cfg = tmp_path / "bench.cfg"
    cfg.write_text("# tiny run\nsize=64x48\nrepeats=1\nk=3\n")
    assert main(["bench", "--config", str(cfg)]) == 0
    assert "64x48" in capsys.readouterr().out


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("frobnicate=1\n")
    assert main(["bench", "--config", str(cfg)]) == 1


def test_gradcheck_ops_suite_passes(capsys):
    assert main(["gradcheck", "--suites", "ops"]) == 0
    assert "worst" in capsys.readouterr().out.lower()

"""CLI contracts: subcommands, config merging, montage bytes, exit codes."""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from divsynth import cli
from divsynth import data as dd
from divsynth.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny synth+train pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cliwork")
    data = root / "data"
    run = root / "run"
    cfgfile = root / "tiny.cfg"
    cfgfile.write_text(
        "# tiny desk config\n"
        "image_size = 16\n"
        "train_count = 4\n"
        "test_count = 2\n"
        "epochs = 2\n"
        "crn_width = 8\n"
        "phi_width = 4\n"
        "checkpoint_every = 1\n",
        encoding="utf-8")
    assert main(["synth", "--config", str(cfgfile), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfgfile), "--data", str(data),
                 "--out", str(run)]) == 0
    return {"root": root, "data": data, "run": run, "cfg": cfgfile}


class TestSynth:
    def test_outputs_exist(self, workdir):
        data = workdir["data"]
        assert (data / "train.tsv").exists()
        assert (data / "test.tsv").exists()
        assert (data / "world.json").exists()
        world = json.loads((data / "world.json").read_text())
        assert world["classes"] == 4 and world["image_size"] == 16

    def test_idempotent_bytes(self, workdir, tmp_path):
        out2 = tmp_path / "data2"
        assert main(["synth", "--config", str(workdir["cfg"]), "--out", str(out2)]) == 0
        a = (workdir["data"] / "train.tsv").read_text()
        b = (out2 / "train.tsv").read_text()
        assert a == b
        for line in a.strip().splitlines():
            lp, ip = line.split("\t")
            assert (workdir["data"] / lp).read_bytes() == (out2 / lp).read_bytes()
            assert (workdir["data"] / ip).read_bytes() == (out2 / ip).read_bytes()

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("no_such_key = 3\n")
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
        assert "no_such_key" in capsys.readouterr().err

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DIVSYNTH_SEED", "99")
        out = tmp_path / "env"
        assert main(["synth", "--set", "image_size=16", "--set", "train_count=2",
                     "--set", "test_count=1", "--out", str(out)]) == 0
        echo = (out / "config_resolved.txt").read_text()
        assert "seed = 99" in echo


class TestTrainEval:
    def test_train_artifacts(self, workdir):
        run = workdir["run"]
        assert (run / "model.dsyn").exists()
        assert (run / "ckpt_epoch001.dsyn").exists()
        assert (run / "metrics.csv").read_text().startswith("epoch,loss_base")
        assert (run / "metrics.png").exists()
        assert (run / "config_resolved.txt").exists()

    def test_eval_writes_report_and_figure(self, workdir, tmp_path):
        out = tmp_path / "report"
        assert main(["eval", "--checkpoint", str(workdir["run"] / "model.dsyn"),
                     "--data", str(workdir["data"]), "--samples", "2",
                     "--out", str(out), "--seed", "5"]) == 0
        assert (out / "report.csv").read_text().startswith("metric,value")
        assert "palette-angle oracle" in (out / "report.txt").read_text()
        assert (out / "report.png").exists()

    def test_missing_checkpoint_exit_1(self, workdir, capsys):
        rc = main(["eval", "--checkpoint", str(workdir["root"] / "nope.dsyn"),
                   "--data", str(workdir["data"])])
        assert rc == 1
        assert "not found" in capsys.readouterr().err


class TestMontages:
    def test_sweep_dimensions(self, workdir, tmp_path):
        layout_path = next((workdir["data"] / "layouts").glob("test_*.pgm"))
        out = tmp_path / "sweep.ppm"
        assert main(["sweep", "--checkpoint", str(workdir["run"] / "model.dsyn"),
                     "--layout", str(layout_path), "--class", "1",
                     "--steps=-1,-0.5,0,0.5,1", "--out", str(out)]) == 0
        img = dd.io_read_image(out)
        # five 16-wide panels + four 2px separators
        assert img.width == 5 * 16 + 4 * 2
        assert img.height == 16

    def test_sweep_montage_separator_is_white(self, workdir, tmp_path):
        layout_path = next((workdir["data"] / "layouts").glob("test_*.pgm"))
        out = tmp_path / "sweep2.ppm"
        main(["sweep", "--checkpoint", str(workdir["run"] / "model.dsyn"),
              "--layout", str(layout_path), "--class", "0",
              "--steps", "0,1", "--out", str(out)])
        img = dd.io_read_image(out)
        np.testing.assert_array_equal(img.values[:, 16:18], 1.0)

    def test_grid_dimensions_and_determinism(self, workdir, tmp_path):
        layout_path = next((workdir["data"] / "layouts").glob("test_*.pgm"))
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        for out in (a, b):
            assert main(["grid", "--checkpoint", str(workdir["run"] / "model.dsyn"),
                         "--layout", str(layout_path), "--rows", "2", "--cols", "3",
                         "--seed", "7", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        img = dd.io_read_image(a)
        assert img.width == 3 * 16 + 2 * 2
        assert img.height == 2 * 16 + 1 * 2

    def test_montage_golden_bytes(self):
        # bit-exact layout: [black][2px white sep][mid gray], 1px tall
        black = dd.ImageRGB(np.zeros((1, 1, 3), dtype=np.float32))
        gray = dd.ImageRGB(np.full((1, 1, 3), 0.5, dtype=np.float32))
        ppm = dd.encode_ppm(cli.montage_row([black, gray]))
        assert ppm == b"P6\n4 1\n255\n" + bytes([0, 0, 0, 255, 255, 255,
                                                 255, 255, 255, 128, 128, 128])

    def test_inputs_not_mutated(self, workdir, tmp_path):
        layout_path = next((workdir["data"] / "layouts").glob("test_*.pgm"))
        before = layout_path.read_bytes()
        ckpt_before = (workdir["run"] / "model.dsyn").read_bytes()
        main(["sweep", "--checkpoint", str(workdir["run"] / "model.dsyn"),
              "--layout", str(layout_path), "--class", "0",
              "--steps", "0,1", "--out", str(tmp_path / "s.ppm")])
        assert layout_path.read_bytes() == before
        assert (workdir["run"] / "model.dsyn").read_bytes() == ckpt_before


class TestCompositions:
    def test_prints_product(self, capsys):
        assert main(["compositions", "--k-per-class", "2,2,2"]) == 0
        assert capsys.readouterr().out.strip() == "8"

    def test_larger_product(self, capsys):
        assert main(["compositions", "--k-per-class", "3,4"]) == 0
        assert capsys.readouterr().out.strip() == "12"

    def test_invalid_usage(self, capsys):
        assert main(["compositions"]) == 1

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

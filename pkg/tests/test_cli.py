"""End-to-end CLI coverage through click's test runner."""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from solidtex import imageio
from solidtex.cli import main
from solidtex.descriptor import write_random_descriptor_weights
from solidtex.generator import GeneratorModel


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    model_path = ws / "model.stxg"
    GeneratorModel.build(init_seed=0).save(model_path)
    vgg_path = ws / "vgg.stxw"
    write_random_descriptor_weights(vgg_path, seed=0)
    arr = np.random.default_rng(0).integers(0, 255, (32, 32, 3), np.uint8)
    png_path = ws / "exemplar.png"
    Image.fromarray(arr, "RGB").save(png_path)
    return {"dir": ws, "model": str(model_path), "vgg": str(vgg_path),
            "png": str(png_path)}


@pytest.fixture
def runner():
    return CliRunner()


class TestInfo:
    def test_reports_architecture(self, runner, workspace):
        res = runner.invoke(main, ["info", workspace["model"]])
        assert res.exit_code == 0
        assert "9380" in res.output
        assert "[4, 5, 6, 6, 6, 4]" in res.output

    def test_missing_model_exits_2(self, runner, workspace):
        res = runner.invoke(main, ["info", str(workspace["dir"] / "no.stxg")])
        assert res.exit_code == 2


class TestGenerate:
    def test_raw_export_with_sidecar(self, runner, workspace, tmp_path):
        out = str(tmp_path / "vol.raw")
        res = runner.invoke(main, [
            "generate", workspace["model"], "--origin", "3,-4,5",
            "--size", "8,9,10", "--block", "8", "--seed", "11",
            "--out", out])
        assert res.exit_code == 0, res.output
        vol, sidecar = imageio.import_raw(out)
        assert vol.shape == (3, 8, 9, 10)
        assert sidecar["origin"] == [3, -4, 5]
        assert sidecar["seed"] == 11
        assert "model_checksum" in sidecar
        # the sidecar reproduces the volume
        model = GeneratorModel.load(workspace["model"])
        from solidtex.noise import Region
        ref = model.generate_region(
            Region(tuple(sidecar["origin"]), tuple(sidecar["size"])),
            sidecar["seed"]).data
        assert (vol == ref).all()

    def test_png_stack_export(self, runner, workspace, tmp_path):
        out = str(tmp_path / "stack.png")
        res = runner.invoke(main, [
            "generate", workspace["model"], "--size", "8,8,5",
            "--out", out, "--format", "png-stack"])
        assert res.exit_code == 0, res.output
        slices = sorted(p for p in os.listdir(tmp_path) if p.endswith(".png"))
        assert len(slices) == 5
        assert (tmp_path / "stack.json").exists()

    def test_bad_size_exits_2(self, runner, workspace, tmp_path):
        res = runner.invoke(main, [
            "generate", workspace["model"], "--size", "8,0,8",
            "--out", str(tmp_path / "x.raw")])
        assert res.exit_code == 2

    def test_workers_match_serial(self, runner, workspace, tmp_path):
        outs = []
        for workers in ("1", "4"):
            out = str(tmp_path / f"w{workers}.raw")
            res = runner.invoke(main, [
                "generate", workspace["model"], "--size", "12,12,12",
                "--block", "8", "--workers", workers, "--out", out])
            assert res.exit_code == 0, res.output
            outs.append(imageio.import_raw(out)[0])
        assert (outs[0] == outs[1]).all()


class TestVerifyTiling:
    def test_pass_case(self, runner, workspace):
        res = runner.invoke(main, [
            "verify-tiling", workspace["model"], "--size", "16,16,16",
            "--block", "8"])
        assert res.exit_code == 0, res.output
        assert "PASS" in res.output
        assert "max abs diff" in res.output

    def test_fault_injection_reports_failure(self, runner, workspace):
        res = runner.invoke(main, [
            "verify-tiling", workspace["model"], "--size", "16,16,16",
            "--block", "8", "--corrupt-shift"])
        assert res.exit_code == 0, res.output
        assert "FAIL" in res.output

    def test_genuine_mismatch_exits_3(self, runner, workspace, monkeypatch):
        from solidtex import generator

        original = generator.GeneratorModel.verify_tiling

        def broken(self, region, block_size, global_seed=0, **kw):
            rep = original(self, region, block_size, global_seed, **kw)
            rep["max_abs_diff"] = 1.0
            rep["passed"] = False
            return rep

        monkeypatch.setattr(generator.GeneratorModel, "verify_tiling", broken)
        res = runner.invoke(main, [
            "verify-tiling", workspace["model"], "--size", "8,8,8",
            "--block", "8"])
        assert res.exit_code == 3


class TestBench:
    def test_bench_outputs_csv_and_figure(self, runner, workspace, tmp_path):
        prefix = str(tmp_path / "bench")
        res = runner.invoke(main, [
            "bench", workspace["model"], "--block", "8", "--block", "12",
            "--repeats", "2", "--out", prefix])
        assert res.exit_code == 0, res.output
        assert "12 ms" in res.output and "not reproduced" in res.output
        assert os.path.exists(prefix + ".csv")
        assert os.path.exists(prefix + ".png")
        with open(prefix + ".csv") as f:
            lines = f.read().strip().splitlines()
        assert lines[0].startswith("block,repeats,median_seconds")
        assert len(lines) == 3


class TestTrain:
    def test_train_writes_artifacts(self, runner, workspace, tmp_path):
        cfg = tmp_path / "train.yaml"
        cfg.write_text(f"""
version: 1
exemplars:
  - path: {workspace['png']}
    direction: 0
iterations: 2
batch_size: 1
output:
  model: trained.stxg
  loss_log: loss.csv
""")
        res = runner.invoke(main, ["train", str(cfg), "--vgg",
                                   workspace["vgg"], "--quiet"])
        assert res.exit_code == 0, res.output
        assert (tmp_path / "trained.stxg").exists()
        assert (tmp_path / "loss.csv").exists()
        assert (tmp_path / "loss.png").exists()
        with open(tmp_path / "loss.csv") as f:
            assert len(f.read().strip().splitlines()) == 3
        GeneratorModel.load(tmp_path / "trained.stxg")

    def test_vgg_env_fallback(self, runner, workspace, tmp_path, monkeypatch):
        cfg = tmp_path / "train.yaml"
        cfg.write_text(f"""
exemplars:
  - path: {workspace['png']}
    direction: 0
iterations: 1
batch_size: 1
""")
        monkeypatch.setenv("SOLIDTEX_VGG", workspace["vgg"])
        res = runner.invoke(main, ["train", str(cfg), "--quiet"])
        assert res.exit_code == 0, res.output

    def test_missing_vgg_exits_2(self, runner, workspace, tmp_path,
                                 monkeypatch):
        monkeypatch.delenv("SOLIDTEX_VGG", raising=False)
        cfg = tmp_path / "train.yaml"
        cfg.write_text(f"""
exemplars:
  - path: {workspace['png']}
    direction: 0
""")
        res = runner.invoke(main, ["train", str(cfg)])
        assert res.exit_code == 2
        assert "SOLIDTEX_VGG" in res.output

    def test_config_error_exits_2(self, runner, workspace, tmp_path):
        cfg = tmp_path / "train.yaml"
        cfg.write_text("exemplars: []")
        res = runner.invoke(main, ["train", str(cfg), "--vgg",
                                   workspace["vgg"]])
        assert res.exit_code == 2


class TestEval:
    def test_eval_reports_layers(self, runner, workspace):
        res = runner.invoke(main, [
            "eval", workspace["model"], "--vgg", workspace["vgg"],
            "--exemplar", f"0:{workspace['png']}",
            "--size", "2,32,32"])
        assert res.exit_code == 0, res.output
        assert "direction 0" in res.output
        assert "relu5_1" in res.output
        assert "total" in res.output

    def test_bad_direction_exits_2(self, runner, workspace):
        res = runner.invoke(main, [
            "eval", workspace["model"], "--vgg", workspace["vgg"],
            "--exemplar", f"7:{workspace['png']}"])
        assert res.exit_code == 2


class TestCorrmap:
    def test_self_map(self, runner, workspace, tmp_path):
        out = str(tmp_path / "map.png")
        res = runner.invoke(main, ["corrmap", workspace["png"],
                                   "--out", out])
        assert res.exit_code == 0, res.output
        assert "identity fraction 1.000" in res.output
        assert os.path.exists(out)

    def test_pair_map(self, runner, workspace, tmp_path):
        arr = np.random.default_rng(5).integers(0, 255, (32, 32, 3), np.uint8)
        other = tmp_path / "other.png"
        Image.fromarray(arr, "RGB").save(other)
        res = runner.invoke(main, ["corrmap", workspace["png"], str(other)])
        assert res.exit_code == 0, res.output
        assert "longest identical-displacement run" in res.output

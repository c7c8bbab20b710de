import json

import pytest
import torch
from click.testing import CliRunner

from mtcolor.cli import main
from mtcolor.data import load_dataset, read_annotations
from mtcolor.denoiser import Denoiser, save_checkpoint

from test_denoiser import TINY

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared CLI fixture: a small dataset and a tiny untrained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(main, ["gen-data", "--out", str(root / "data"),
                               "--count", "6", "--seed", "11"])
    assert res.exit_code == 0, res.output
    torch.manual_seed(0)
    model = Denoiser(TINY)
    with torch.no_grad():
        model.out_conv.weight.normal_(std=0.05)
        model.out_conv.bias.normal_(std=0.05)
    save_checkpoint(root / "tiny.ckpt", model, meta={"stage": 1})

    small = root / "data16"
    from mtcolor.data import SynthConfig, generate_synthetic, save_dataset
    save_dataset(generate_synthetic(SynthConfig(count=4, size=16, seed=3)), small)
    return root


def test_gen_data_outputs(workspace):
    data = workspace / "data"
    assert (data / "annotations.jsonl").exists()
    pngs = list((data / "images").glob("*.png"))
    assert len(pngs) == 6
    records = read_annotations(data / "annotations.jsonl")
    assert len(records) == 6


def test_gen_data_config_file(workspace, tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("count = 2\nsize = 16\nseed = 5\nbackground_range = 0.3, 0.6\n")
    runner = CliRunner()
    res = runner.invoke(main, ["gen-data", "--config", str(cfg),
                               "--out", str(tmp_path / "ds")])
    assert res.exit_code == 0, res.output
    samples = load_dataset(tmp_path / "ds")
    assert len(samples) == 2
    assert samples[0].image.shape == (16, 16, 3)


def test_annotate_command(workspace, tmp_path):
    runner = CliRunner()
    out = tmp_path / "ann.jsonl"
    res = runner.invoke(main, ["annotate", "--images", str(workspace / "data" / "images"),
                               "--detector", "synthetic", "--primary", "mean-color",
                               "--fallback", "mean-color", "--out", str(out)])
    assert res.exit_code == 0, res.output
    records = read_annotations(out)
    assert len(records) == 6
    assert all(inst.source == "primary" for r in records for inst in r.instances)
    assert "fallback 0" in res.output


def test_annotate_unknown_detector(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["annotate", "--images", str(workspace / "data" / "images"),
                               "--detector", "sam", "--out", str(tmp_path / "x.jsonl")])
    assert res.exit_code != 0
    assert "unknown detector" in res.output


def test_train_stage2_requires_stage1(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["train", "--stage", "2",
                               "--data", str(workspace / "data16"),
                               "--out", str(tmp_path / "ckpt2")])
    assert res.exit_code != 0
    assert "stage-1 checkpoint" in res.output


def test_train_smoke(workspace, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("iterations = 2\nbatch_size = 2\nwarmup = 1\nseed = 1\n")
    runner = CliRunner()
    out1 = tmp_path / "s1.ckpt"
    res = runner.invoke(main, ["train", "--stage", "1", "--config", str(cfg),
                               "--data", str(workspace / "data"),
                               "--out", str(out1)])
    assert res.exit_code == 0, res.output
    assert out1.exists()
    out2 = tmp_path / "s2.ckpt"
    res = runner.invoke(main, ["train", "--stage", "2", "--config", str(cfg),
                               "--data", str(workspace / "data"),
                               "--out", str(out2), "--resume", str(out1)])
    assert res.exit_code == 0, res.output
    assert out2.exists()


def test_sample_defaults_echo_alpha_beta(workspace, tmp_path):
    runner = CliRunner()
    gray_png = sorted((workspace / "data16" / "images").glob("*.png"))[0]
    out = tmp_path / "out.png"
    res = runner.invoke(main, ["sample", "--ckpt", str(workspace / "tiny.ckpt"),
                               "--gray", str(gray_png), "--steps", "4",
                               "--seed", "5", "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert out.exists()
    prov = json.loads(out.with_suffix(".provenance.json").read_text())
    assert prov["sampler"]["alpha"] == 0.2
    assert prov["sampler"]["beta"] == 0.2
    assert prov["seed"] == 5


def test_sample_with_annotations(workspace, tmp_path):
    runner = CliRunner()
    data = workspace / "data16"
    records = read_annotations(data / "annotations.jsonl")
    first = records[0]
    gray_png = data / "images" / f"{first.image_id}.png"
    from mtcolor.data import write_annotations
    ann_file = tmp_path / "one.jsonl"
    write_annotations([first], ann_file)
    out = tmp_path / "cond.png"
    res = runner.invoke(main, ["sample", "--ckpt", str(workspace / "tiny.ckpt"),
                               "--gray", str(gray_png), "--ann", str(ann_file),
                               "--steps", "4", "--alpha", "0.5", "--out", str(out)])
    assert res.exit_code == 0, res.output
    prov = json.loads(out.with_suffix(".provenance.json").read_text())
    assert prov["n_instances"] == len(first.instances)
    assert prov["phase_steps"]["instance"] == 2


def test_eval_ground_truth_fidelity_one(workspace, tmp_path):
    runner = CliRunner()
    out = tmp_path / "report"
    res = runner.invoke(main, ["eval", "--data", str(workspace / "data"),
                               "--ground-truth", "--out", str(out)])
    assert res.exit_code == 0, res.output
    summary = json.loads((out / "summary.json").read_text())["summary"]
    assert summary["fidelity"]["mean"] == 1.0
    assert summary["psnr"]["mean"] == 100.0
    assert summary["ssim"]["mean"] == 1.0
    assert (out / "report.csv").exists()
    assert (out / "fig_fidelity.png").exists()


def test_eval_with_model(workspace, tmp_path):
    runner = CliRunner()
    out = tmp_path / "report"
    res = runner.invoke(main, ["eval", "--ckpt", str(workspace / "tiny.ckpt"),
                               "--data", str(workspace / "data16"),
                               "--steps", "2", "--limit", "2",
                               "--metrics", "colorfulness,psnr",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert (out / "report.csv").exists()
    assert "colorfulness" in res.output


def test_eval_unknown_metric(workspace, tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["eval", "--data", str(workspace / "data"),
                               "--ground-truth", "--metrics", "fid",
                               "--out", str(tmp_path / "r")])
    assert res.exit_code != 0
    assert "unknown metrics" in res.output


def test_ablate_smoke(workspace, tmp_path):
    runner = CliRunner()
    out = tmp_path / "ablation"
    res = runner.invoke(main, ["ablate", "--ckpt", str(workspace / "tiny.ckpt"),
                               "--data", str(workspace / "data16"),
                               "--variants", "full,ddim", "--steps", "2",
                               "--limit", "2", "--leakage-probes", "1",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert (out / "ablation.csv").exists()
    assert (out / "ablation.json").exists()
    payload = json.loads((out / "ablation.json").read_text())
    assert set(payload["variants"]) == {"full", "ddim"}


def test_serve_rejects_bad_addr(workspace):
    runner = CliRunner()
    res = runner.invoke(main, ["serve", "--ckpt", str(workspace / "tiny.ckpt"),
                               "--addr", "nonsense"])
    assert res.exit_code != 0
    assert "HOST:PORT" in res.output

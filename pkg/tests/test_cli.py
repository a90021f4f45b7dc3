import csv
import json

import pytest
import torch

from lfstego import cli, imaging, synth, training
from lfstego.errors import NumericError
from lfstego.training import LOG_COLUMNS

TINY = {"side": 16, "batch_size": 4, "epochs": 1, "steps_per_epoch": 2,
        "embedder": {"side": 16, "base_channels": 4, "max_channels": 8},
        "retriever": {"width": 4, "res_blocks": 1}}


def run(*argv):
    return cli.main([str(a) for a in argv])


def header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert run("make-dataset", "--n-train", 8, "--n-eval", 4, "--side", 16, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--config", cfg, "--out", root / "run") == 0
    return root


def test_make_dataset_layout(workspace):
    assert len(imaging.list_images(workspace / "data" / "train")) == 8
    assert len(imaging.list_images(workspace / "data" / "eval")) == 4
    assert json.loads((workspace / "data" / "manifest.json").read_text())["command"] == "make-dataset"


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "final.ckpt").exists()
    assert header(run_dir / "train_log.csv") == LOG_COLUMNS
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert set(manifest) >= {"command", "argv", "version", "seed", "config", "config_sha256"}
    cfg = training.TrainConfig.from_dict(manifest["config"])
    assert cfg.digest() == training.TrainConfig.load(run_dir / "config.json").digest()
    assert not list(workspace.glob(".run.partial-*"))


def test_train_epochs_zero(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--config", workspace / "tiny.json",
               "--epochs", 0, "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "final.ckpt").exists()


def test_train_missing_dataset_is_config_error(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r") == 2
    assert "dataset directory not found" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_bad_config_exit_code(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "lr": -1}))
    assert run("train", "--data", workspace / "data", "--config", bad, "--out", tmp_path / "r") == 2
    assert run("train", "--data", workspace / "data", "--config", tmp_path / "missing.json", "--out", tmp_path / "r") == 2


def test_numeric_failure_exit_code(workspace, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--data", workspace / "data", "--config", workspace / "tiny.json", "--out", tmp_path / "r") == 4


def test_missing_image_exit_code(workspace, tmp_path):
    assert run("extract", "--checkpoint", workspace / "run" / "final.ckpt", "--image", tmp_path / "x.png",
               "--out", tmp_path / "r") == 3


def test_env_default_output_root(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    img = workspace / "data" / "eval" / "00000.png"
    assert run("residue", img, img) == 0
    assert (tmp_path / "root" / "residue" / "residue.png").exists()


def test_embed_and_extract(workspace, tmp_path, capsys):
    ev = workspace / "data" / "eval"
    ckpt = workspace / "run" / "final.ckpt"
    assert run("embed", "--checkpoint", ckpt, "--cover", ev / "00000.png", "--secret", ev / "00001.png",
               "--out", tmp_path / "e") == 0
    assert header(tmp_path / "e" / "report.csv") == ["psnr_db", "ssim", "out_of_band"]
    assert header(tmp_path / "e" / "container_spectrum.csv") == ["radius", "cover", "container", "rel_dev_container"]
    container = imaging.load_image(tmp_path / "e" / "container.png")
    assert container.shape == (3, 16, 16)
    assert torch.load(tmp_path / "e" / "feature_map.pt").shape == (3, 16, 16)

    assert run("extract", "--checkpoint", ckpt, "--image", tmp_path / "e" / "container.png",
               "--reference", ev / "00001.png", "--out", tmp_path / "x") == 0
    out = capsys.readouterr().out
    assert "ncc=" in out and "valid=" in out
    assert header(tmp_path / "x" / "report.csv") == ["mean_intensity", "ncc", "valid"]
    assert run("extract", "--checkpoint", ckpt, "--image", ev / "00002.png", "--out", tmp_path / "y",
               "--format", "json") == 0
    assert list(json.loads((tmp_path / "y" / "report.json").read_text())[0]) == ["mean_intensity"]


def test_attack_and_replay(workspace, tmp_path):
    img = workspace / "data" / "eval" / "00000.png"
    assert run("attack", "--image", img, "--type", "blur", "--param", "sigma=1.5", "--out", tmp_path / "a") == 0
    plan = json.loads((tmp_path / "a" / "plan.jsonl").read_text())
    assert plan["steps"][0]["params"]["sigma"] == 1.5
    assert run("attack", "--image", img, "--plan", tmp_path / "a" / "plan.jsonl", "--out", tmp_path / "b") == 0
    a = imaging.load_image(tmp_path / "a" / "attacked.png")
    b = imaging.load_image(tmp_path / "b" / "attacked.png")
    assert torch.equal(a, b)


@pytest.mark.parametrize("kind", ["lowpass", "blur", "noise", "jitter", "crop", "jpeg"])
def test_attack_types_with_sampled_params(workspace, tmp_path, kind):
    img = workspace / "data" / "eval" / "00000.png"
    assert run("attack", "--image", img, "--type", kind, "--seed", 3, "--out", tmp_path / kind) == 0
    assert (tmp_path / kind / "attacked.png").exists()


def test_attack_missing_param_is_config_error(workspace, tmp_path):
    img = workspace / "data" / "eval" / "00000.png"
    assert run("attack", "--image", img, "--type", "highpass", "--out", tmp_path / "h") == 2
    assert run("attack", "--image", img, "--type", "highpass", "--param", "d=3", "--out", tmp_path / "h") == 0


def test_evaluate_csv_schema(workspace, tmp_path):
    assert run("evaluate", "--checkpoint", workspace / "run" / "final.ckpt", "--eval-dir", workspace / "data" / "eval",
               "--out", tmp_path / "ev", "--save-images") == 0
    out = tmp_path / "ev"
    assert header(out / "summary.csv") == cli.SUMMARY_COLUMNS
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    groups = [(r["protocol"], r["group"]) for r in rows]
    assert groups == [("fidelity", "container"), ("fidelity", "secret")] + \
        [("robustness", a) for a in ("jpeg", "lowpass", "blur", "jitter", "crop")] + \
        [("specificity", "clean"), ("specificity", "damaged_clean")]
    assert header(out / "robustness_jpeg.csv") == ["id", "psnr_db", "ssim", "ncc", "valid"]
    assert len(imaging.list_images(out / "containers")) == 4


def test_evaluate_json_and_params(workspace, tmp_path):
    assert run("evaluate", "--checkpoint", workspace / "run" / "final.ckpt", "--eval-dir", workspace / "data" / "eval",
               "--protocol", "robustness", "--jpeg-quality", 70, "--format", "json", "--out", tmp_path / "ev") == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["attack_params"]["jpeg_quality"] == 70
    assert list(report["protocols"]["robustness"]) == ["jpeg", "lowpass", "blur", "jitter", "crop"]
    assert set(report["protocols"]["robustness"]["jpeg"]) == {"threshold", "rows", "aggregate"}


def test_evaluate_identical_fixture(tmp_path):
    from lfstego import evaluation
    x = torch.stack([synth.natural_image(i, 16) for i in range(3)])
    rep = evaluation.compare(x, x.clone())
    agg = rep.aggregate()
    assert agg["mean_psnr"] == float("inf") and agg["mean_ssim"] == pytest.approx(1.0)


def test_evaluate_empty_dir_is_contract_error(workspace, tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("evaluate", "--checkpoint", workspace / "run" / "final.ckpt", "--eval-dir", tmp_path / "empty",
               "--out", tmp_path / "ev") == 2


def test_freq_analysis(workspace, tmp_path, capsys):
    ev = workspace / "data" / "eval"
    assert run("freq-analysis", ev, ev, "--out", tmp_path / "f") == 2  # duplicate names
    other = tmp_path / "copy"
    other.mkdir()
    for p in imaging.list_images(ev):
        (other / p.name).write_bytes(p.read_bytes())
    assert run("freq-analysis", ev, other, "--out", tmp_path / "f") == 0
    assert header(tmp_path / "f" / "spectrum.csv") == ["radius", "eval", "copy", "rel_dev_copy"]
    assert (tmp_path / "f" / "spectrum.svg").read_text().startswith("<svg")
    dev = json.loads((tmp_path / "f" / "band_deviation.json").read_text())
    assert dev["band_deviation"]["copy"] == 0.0


def test_freq_analysis_single_image_and_constant(tmp_path):
    from lfstego import spectral
    one = tmp_path / "one"
    img = synth.natural_image(5, 16)
    imaging.save_image(img, one / "a.png")
    assert run("freq-analysis", one, "--out", tmp_path / "f") == 0
    with open(tmp_path / "f" / "spectrum.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["radius", "energy"]
    expected = spectral.azimuthal_integral(imaging.load_image(one / "a.png")).values
    assert [float(r[1]) for r in rows[1:]] == pytest.approx(list(expected), rel=1e-12)

    flat = tmp_path / "flat"
    for i in range(2):
        imaging.save_image(torch.full((3, 16, 16), 0.25 * (i + 1)), flat / f"{i}.png")
    assert run("freq-analysis", flat, "--out", tmp_path / "g") == 0
    with open(tmp_path / "g" / "spectrum.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert float(rows[0][1]) > 0
    assert all(abs(float(r[1])) < 1e-9 for r in rows[1:])


def test_sweep_filters(workspace, tmp_path):
    assert run("sweep-filters", "--checkpoint", workspace / "run" / "final.ckpt", "--eval-dir",
               workspace / "data" / "eval", "--out", tmp_path / "s") == 0
    assert header(tmp_path / "s" / "sweep.csv") == cli.SWEEP_COLUMNS
    with open(tmp_path / "s" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert [float(r["d"]) for r in rows[:5]] == pytest.approx([d * 16 / 256 for d in cli.TABLE4_D])
    assert (tmp_path / "s" / "sweep.svg").exists()


def test_residue(workspace, tmp_path):
    img = workspace / "data" / "eval" / "00000.png"
    assert run("residue", img, img, "--out", tmp_path / "r") == 0
    assert imaging.load_image(tmp_path / "r" / "residue.png").max() == 0
    other = workspace / "data" / "eval" / "00001.png"
    assert run("residue", img, other, "--gain", 1, "--out", tmp_path / "g1") == 0
    assert run("residue", img, other, "--gain", 10, "--out", tmp_path / "g10") == 0
    g1 = imaging.load_image(tmp_path / "g1" / "residue.png")
    g10 = imaging.load_image(tmp_path / "g10" / "residue.png")
    assert g10.sum() > g1.sum()


def test_ablate(workspace, tmp_path):
    assert run("ablate", "--data", workspace / "data", "--config", workspace / "tiny.json", "--knockout",
               "clean_loss", "--baseline", workspace / "run" / "final.ckpt", "--out", tmp_path / "ab") == 0
    assert header(tmp_path / "ab" / "ablation.csv") == cli.ABLATION_COLUMNS
    assert (tmp_path / "ab" / "no_clean_loss" / "final.ckpt").exists()


def test_ablate_without_knockout_matches_train(workspace, tmp_path):
    assert run("ablate", "--data", workspace / "data", "--config", workspace / "tiny.json", "--out", tmp_path / "ab") == 0
    from lfstego.models import load_checkpoint
    a, _ = load_checkpoint(tmp_path / "ab" / "final.ckpt")
    b, _ = load_checkpoint(workspace / "run" / "final.ckpt")
    sa, sb = a.state_dict(), b.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    with open(tmp_path / "ab" / "train_log.csv") as fa, open(workspace / "run" / "train_log.csv") as fb:
        assert fa.read() == fb.read()


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "lfstego" in capsys.readouterr().out

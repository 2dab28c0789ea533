import json

from detco.cli import main
from detco.config import write_config

from conftest import tiny_config


def test_no_command_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_exits_nonzero(tmp_path, capsys):
    code = main(["pretrain", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)])
    assert code == 1
    assert "FileNotFoundError" in capsys.readouterr().err


def test_bad_key_is_reported(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("contrast.tua_gg = 0.2\n")
    assert main(["pretrain", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "did you mean 'contrast.tau_gg'" in capsys.readouterr().err


def test_pipeline(tmp_path, capsys):
    cfg = tiny_config(**{"trainer.total_steps": 3, "data.num_classes": 2, "data.samples_per_class": 6, "data.image_side": 64})
    cfg.eval.epochs = 10
    conf = write_config(cfg, tmp_path / "c.toml")
    data = tmp_path / "data"
    assert main(["synth-data", "--spec", str(conf), "--out", str(data)]) == 0
    assert len(list(data.rglob("*.png"))) == 12
    assert main(["pretrain", "--config", str(conf), "--data", str(data), "--out", str(tmp_path / "runs")]) == 0
    run_dir = next((tmp_path / "runs").iterdir())
    ckpt = run_dir / "checkpoints" / "step_000003.npz"
    assert ckpt.exists()
    assert main(["probe", "--checkpoint", str(ckpt), "--data", str(data), "--stages", "2,5", "--out", str(tmp_path / "p")]) == 0
    report = json.loads((tmp_path / "p" / "probe.json").read_text())
    assert set(report["accuracy"]) == {"2", "5"}
    img = next(data.rglob("*.png"))
    assert main(["attention", "--checkpoint", str(ckpt), "--image", str(img), "--out", str(tmp_path / "att.png")]) == 0
    assert (tmp_path / "att.png").exists() and (tmp_path / "att.npy").exists()
    assert main(["plot", "--log", str(run_dir / "metrics.jsonl"), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "total.png").exists()

import json
import subprocess
import sys

import pytest

from atebm.cli import EXIT_CONFIG, gradient_checks, main, resolve_config

SHORT = ["-o", "train.schedule=[[2, 3]]", "-o", "train.batch_size=8",
         "-o", "eval=[{op: support_probe, resolution: 11}]"]


def test_gradient_checks_within_tolerance():
    for name, err, tol in gradient_checks(seed=1, instances=6):
        assert err <= tol, name


def test_gradcheck_command_exit_zero(capsys):
    assert main(["gradcheck", "--instances", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["train", "fig2_uniform", "--no-such-flag"])
    assert exc.value.code != 0


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "atebm.cli", "gradcheck", "--instances", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_override_reaches_the_resolved_spec():
    spec = resolve_config("fig2_uniform", ["train.learning_rate=0.005"], seed=4)
    assert spec.train.learning_rate == 0.005 and spec.train.seed == 4


def test_nonexistent_key_is_config_error(capsys, tmp_path):
    code = main(["train", "fig2_uniform", "-o", "train.nonexistent=1",
                 "--output-dir", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert "nonexistent" in capsys.readouterr().err


def test_multi_arm_recipe_needs_arm():
    from atebm.experiments import ConfigError
    with pytest.raises(ConfigError, match="pick one"):
        resolve_config("fig2")
    assert resolve_config("fig2/fig2_corner").id == "fig2_corner"


def test_experiment_with_config_flag_writes_run(tmp_path, capsys):
    code = main(["experiment", "--config", "fig2_uniform", *SHORT, "--output-dir", str(tmp_path)])
    assert code == 0
    run_dir = tmp_path / "fig2_uniform"
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert str(run_dir) in capsys.readouterr().out


def test_train_eval_plot_and_compare(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ATEBM_OUTPUT_DIR", str(tmp_path / "runs"))
    assert main(["train", "fig2_uniform", *SHORT]) == 0
    ckpt = tmp_path / "runs" / "fig2_uniform" / "model_final.ckpt"
    assert ckpt.exists()
    capsys.readouterr()
    assert main(["eval", "fig2_uniform", *SHORT, "--checkpoint", str(ckpt)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert "mean_abs_dev_on_support" in report
    svg = tmp_path / "f.svg"
    assert main(["plot", "fig2_uniform", "--checkpoint", str(ckpt), "--out", str(svg),
                 "--resolution", "21"]) == 0
    assert svg.read_text().startswith("<?xml")
    assert main(["ood", "ood", "--checkpoint", str(ckpt), "--eps", "0.25",
                 "-o", "eval.0.n=20", "-o", "eval.0.steps=3", "-o", "eval.0.restarts=1"]) == 0
    assert "adv_auroc_eps0.25" in capsys.readouterr().out
    for name in ("first", "second"):
        assert main(["experiment", "fig2_uniform", *SHORT, "-o", f"id={name}"]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "runs" / "first"), str(tmp_path / "runs" / "second")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("run\t") and len(lines) == 3


def test_missing_checkpoint_is_config_error(tmp_path):
    assert main(["eval", "fig2_uniform", "--checkpoint", str(tmp_path / "none.ckpt")]) != 0

import yaml

from fedvar.cli import main

CFG = {
    "algorithm": "sfvi",
    "seed": 4,
    "model": {"id": "conjugate"},
    "data": {"generator": "conjugate", "params": {"N": 10, "J": 2}},
    "optim": {"n_iter": 20, "lr": 0.05},
}


def test_run_command(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(CFG))
    assert main(["run", str(cfg), "--seed", "7", "--out", str(tmp_path / "o")]) == 0
    assert "kl_to_exact" in capsys.readouterr().out
    assert (tmp_path / "o" / "metrics.csv").exists()
    assert '"seed": 7' in (tmp_path / "o" / "manifest.json").read_text()


def test_run_command_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({**CFG, "model": {"id": "mnist"}}))
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_seed_is_usage_error(tmp_path):
    assert main(["run", "x.yaml", "--seed", str(2**64)]) == 2


def test_check_grads(capsys):
    assert main(["check-grads", "conjugate", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert main(["check-grads", "resnet"]) == 2
    assert main(["check-grads", "glmm", "--trials", "0"]) == 2


def test_barycenter_demo(capsys):
    assert main(["barycenter-demo"]) == 0
    out = capsys.readouterr().out
    assert "variance 4" in out
    assert main(["barycenter-demo", "--mode", "full"]) == 0
    assert "fixed point" in capsys.readouterr().out

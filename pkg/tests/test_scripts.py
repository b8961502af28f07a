"""Smoke tests: the experiment scripts run end to end at micro scale."""

import importlib.util
import pathlib

SCRIPTS = pathlib.Path(__file__).resolve().parent.parent / "scripts"

MICRO = [
    "--num-classes", "3", "--samples-per-class", "5",
    "--test-samples-per-class", "4", "--num-joints", "5", "--window", "12",
    "--coords", "2", "--channels", "4,4", "--temporal-half-window", "2",
    "--batch-size", "8", "--epochs", "2", "--warmup-epochs", "1",
]


def load_script(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_generator_experiment_micro(tmp_path, capsys):
    script = load_script("run_generator_experiment")
    code = script.main(
        ["--out", str(tmp_path), "--seeds", "0", "--sparsities", "0.8"] + MICRO
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "dense" in out and "S=0.8" in out
    summary = (tmp_path / "summary.csv").read_text().strip().split("\n")
    assert summary[0] == "mode,sparsity,seed,final_test_acc,kept_fraction"
    assert len(summary) == 3  # header + dense + one generator arm
    assert (tmp_path / "gen_s0.8_seed0" / "final.stgw").exists()


def test_ensemble_experiment_micro(tmp_path, capsys):
    script = load_script("run_ensemble_experiment")
    code = script.main(
        ["--out", str(tmp_path), "--sparsities", "0.5,0.75"] + MICRO
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "ensemble top1" in out
    assert "param_fraction 0.75" in out  # (0.5 + 0.25) kept
    assert (tmp_path / "assembly.ens").exists()
    assert (tmp_path / "ensemble_confidence.csv").exists()

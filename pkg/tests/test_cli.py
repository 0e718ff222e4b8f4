from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from sagnet.cli import main
from sagnet.shapes import load_dataset


def run(argv) -> int:
    return main([str(a) for a in argv])


def dir_digest(path: Path, skip_run_json: bool = True) -> dict[str, bytes]:
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            if skip_run_json and p.name == "run.json":
                continue
            out[str(p.relative_to(path))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_dataset(workdir) -> Path:
    out = workdir / "data"
    assert run(["gen-data", "--class", "joint", "--count", "12", "--seed", "7",
                "--res", "16", "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_ckpt(workdir, tiny_dataset) -> Path:
    out = workdir / "ckpt"
    code = run([
        "train", "--data", tiny_dataset, "--out", out, "--iters", "12", "--phase1", "6",
        "--seed", "1", "--batch-size", "4", "--hidden-dim", "16", "--latent-dim", "8",
        "--checkpoint-every", "6", "--ramp", "12",
    ])
    assert code == 0
    return out


class TestGenData:
    def test_outputs_and_labels(self, tiny_dataset):
        samples = load_dataset(tiny_dataset)
        assert len(samples) == 12
        labels = json.loads((tiny_dataset / "labels.json").read_text())
        assert len(labels) == 12 and all(0 <= m < 8 for m in labels)
        run_info = json.loads((tiny_dataset / "run.json").read_text())
        assert run_info["command"] == "gen-data"
        assert "timestamp" in run_info

    def test_deterministic_rerun(self, workdir, tiny_dataset):
        other = workdir / "data2"
        assert run(["gen-data", "--class", "joint", "--count", "12", "--seed", "7",
                    "--res", "16", "--out", other]) == 0
        assert dir_digest(tiny_dataset) == dir_digest(other)

    def test_threads_do_not_change_output(self, workdir, tiny_dataset):
        other = workdir / "data3"
        assert run(["gen-data", "--class", "joint", "--count", "12", "--seed", "7",
                    "--res", "16", "--threads", "2", "--out", other]) == 0
        assert dir_digest(tiny_dataset) == dir_digest(other)

    def test_stratified(self, workdir):
        out = workdir / "strat"
        assert run(["gen-data", "--class", "joint", "--count", "8", "--seed", "0",
                    "--res", "16", "--stratified", "--out", out]) == 0
        assert sorted(json.loads((out / "labels.json").read_text())) == list(range(8))


class TestTrain:
    def test_artifacts_exist(self, tiny_ckpt):
        for name in ("checkpoint.sagw", "config.json", "loss_log.csv", "run.json"):
            assert (tiny_ckpt / name).exists()

    def test_loss_log_schema_and_decrease(self, tiny_ckpt):
        lines = (tiny_ckpt / "loss_log.csv").read_text().splitlines()
        assert lines[0] == "iter,l_f,l_kl,r_reg,total,lambda,eta"
        first = float(lines[1].split(",")[1])
        last = float(lines[-1].split(",")[1])
        assert last < first

    def test_deterministic_rerun(self, workdir, tiny_dataset, tiny_ckpt):
        other = workdir / "ckpt2"
        assert run([
            "train", "--data", tiny_dataset, "--out", other, "--iters", "12", "--phase1", "6",
            "--seed", "1", "--batch-size", "4", "--hidden-dim", "16", "--latent-dim", "8",
            "--checkpoint-every", "6", "--ramp", "12",
        ]) == 0
        assert dir_digest(tiny_ckpt) == dir_digest(other)


class TestSample:
    def test_deterministic(self, workdir, tiny_ckpt, tiny_dataset):
        a, b = workdir / "sample_a", workdir / "sample_b"
        for out in (a, b):
            assert run(["sample", "--ckpt", tiny_ckpt, "--count", "5", "--seed", "3",
                        "--data", tiny_dataset, "--mask-policy", "empirical", "--out", out]) == 0
        assert dir_digest(a) == dir_digest(b)
        assert len(load_dataset(a)) == 5
        assert (a / "shape_00000.obj").exists()


class TestPipelineCommands:
    def test_interpolate(self, workdir, tiny_ckpt, tiny_dataset):
        out = workdir / "interp"
        assert run(["interpolate", "--ckpt", tiny_ckpt, "--data", tiny_dataset,
                    "--index-a", "0", "--index-b", "1", "--steps", "4", "--out", out]) == 0
        assert len(load_dataset(out)) == 4

    def test_complete(self, workdir, tiny_ckpt, tiny_dataset):
        out = workdir / "completed"
        assert run(["complete", "--ckpt", tiny_ckpt, "--data", tiny_dataset, "--index", "0",
                    "--missing", "1", "--iterations", "3", "--out", out]) == 0
        completed = load_dataset(out)[0]
        original = load_dataset(tiny_dataset)[0]
        assert np.array_equal(completed.parts[0].occupancy, original.parts[0].occupancy)

    def test_map(self, workdir, tiny_ckpt, tiny_dataset):
        out = workdir / "mapped"
        assert run(["map", "--ckpt", tiny_ckpt, "--data", tiny_dataset, "--direction", "g2s",
                    "--iterations", "2", "--limit", "3", "--out", out]) == 0
        report = json.loads((out / "map_report.json").read_text())
        assert report["direction"] == "g2s" and "mean_box_error" in report
        assert len(load_dataset(out)) == 3

    def test_eval_schema(self, workdir, tiny_ckpt, tiny_dataset):
        out = workdir / "eval"
        assert run(["eval", "--ckpt", tiny_ckpt, "--data", tiny_dataset,
                    "--metrics", "cavity,mmd,cov", "--count", "4", "--seed", "2",
                    "--train-limit", "6", "--curves", "--out", out]) == 0
        report = json.loads((out / "eval_report.json").read_text())
        for key in ("cavity", "mmd", "cov", "cavity_per_sample"):
            assert key in report
        assert len(report["cavity_per_sample"]["r"]) == 4
        assert (out / "cavity_curve.csv").read_text().startswith("threshold,percent_below")


class TestErrorPaths:
    def test_usage_error_exit_2(self, capsys):
        assert run(["train"]) == 2  # missing required flags
        assert run(["no-such-command"]) == 2

    def test_runtime_error_exit_1_and_cleanup(self, workdir, tiny_ckpt, tiny_dataset, capsys):
        out = workdir / "failing"
        code = run(["complete", "--ckpt", tiny_ckpt, "--data", tiny_dataset, "--index", "99",
                    "--missing", "1", "--iterations", "1", "--out", out])
        assert code == 1
        assert "error:" in capsys.readouterr().err
        assert not out.exists()  # partial outputs removed

    def test_cleanup_preserves_preexisting(self, workdir, tiny_ckpt, tiny_dataset):
        out = workdir / "precious"
        out.mkdir()
        (out / "keep.txt").write_text("keep me")
        code = run(["complete", "--ckpt", tiny_ckpt, "--data", tiny_dataset, "--index", "99",
                    "--missing", "1", "--iterations", "1", "--out", out])
        assert code == 1
        assert (out / "keep.txt").read_text() == "keep me"

    def test_unknown_eval_metric(self, workdir, tiny_ckpt, tiny_dataset, capsys):
        assert run(["eval", "--ckpt", tiny_ckpt, "--data", tiny_dataset,
                    "--metrics", "sparkle", "--count", "2", "--out", workdir / "bad_eval"]) == 1
        capsys.readouterr()

    def test_gen_data_rejects_unknown_class(self):
        assert run(["gen-data", "--class", "chair", "--count", "1", "--out", "/tmp/x"]) == 2

    @pytest.mark.parametrize("cmd", ["gen-data", "train", "sample", "interpolate",
                                     "complete", "map", "eval", "grad-check"])
    def test_help_works(self, cmd, capsys):
        assert run([cmd, "--help"]) == 0
        assert "--" in capsys.readouterr().out


class TestEnvThreads:
    def test_env_overrides_flag(self, monkeypatch):
        from sagnet.parallel import resolve_threads

        monkeypatch.setenv("SAGNET_THREADS", "3")
        assert resolve_threads(8) == 3
        monkeypatch.delenv("SAGNET_THREADS")
        assert resolve_threads(8) == 8

from pathlib import Path

import numpy as np
import pytest

from dtir.cli import main
from dtir.config import parse_config_text
from dtir.degrade import read_pnm
from dtir.engine.framework import run_framework

SMOKE = """
pretrain_steps = 20
importance_steps = 2
n_clean = 16
lr = 1e-3
steps = 4
eval_every = 2
n_train = 16
n_eval = 4
match_pairs = 4
n_samples = 2
"""


def _cfg(tmp_path, tasks, name="c.cfg"):
    path = tmp_path / name
    path.write_text(SMOKE + f"tasks = {tasks}\n")
    return path


def _manifest(out: Path) -> list[str]:
    return (out / "manifest.txt").read_text().splitlines()


@pytest.fixture(scope="module")
def unified_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("unified")
    cfg = _cfg(tmp, "noise:0.1; mask:0.25; blur:3")
    assert main(["unified", "--config", str(cfg), "--out", str(tmp / "run")]) == 0
    return cfg, tmp / "run"


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("frobnicate = 3\n")
        assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "frobnicate" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("lambda = -1\n")
        assert main(["pretrain", "--config", str(bad)]) == 1

    def test_finetune_needs_one_task(self, tmp_path):
        assert main(["finetune", "--config", str(_cfg(tmp_path, "noise:0.1; blur:3")),
                     "--out", str(tmp_path / "o")]) == 1

    def test_runtime_error(self, tmp_path, capsys):
        # eval without any trained checkpoint in the output directory
        out = tmp_path / "empty"
        assert main(["eval", "--config", str(_cfg(tmp_path, "noise:0.1")), "--out", str(out)]) == 2
        assert "error" in capsys.readouterr().err
        assert (out / "manifest.txt").exists()


class TestSample:
    def test_seeded_and_deterministic(self, tmp_path):
        cfg = _cfg(tmp_path, "noise:0.1")
        outs = []
        for name, seed in (("a", "7"), ("b", "7"), ("c", "8")):
            assert main(["sample", "--config", str(cfg), "--seed", seed, "--out", str(tmp_path / name)]) == 0
            outs.append(tmp_path / name)
        assert _manifest(outs[0]) == ["pretrained.ckpt", "importance.ckpt", "sample_0.pgm", "sample_1.pgm"]
        for f in ("sample_0.pgm", "sample_1.pgm"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        assert (outs[0] / "sample_0.pgm").read_bytes() != (outs[2] / "sample_0.pgm").read_bytes()
        img = read_pnm(outs[0] / "sample_0.pgm")
        assert img.shape == (1, 32, 32) and 0 <= img.min() and img.max() <= 1


class TestUnified:
    def test_manifest(self, unified_run):
        _, out = unified_run
        names = _manifest(out)
        assert {"stage1.ckpt", "stage2.ckpt", "stage3.ckpt"} <= set(names)
        assert sorted(n for n in names if n.startswith("match_")) == \
            ["match_blur3.csv", "match_mask0.25.csv", "match_noise0.1.csv"]
        assert {"pretrained.ckpt", "importance.ckpt", "metrics.csv", "final.csv"} <= set(names)
        assert all((out / n).exists() for n in names)

    def test_metrics_csv(self, unified_run):
        _, out = unified_run
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,task,loss_content,loss_reg,loss_orthog,s,d,psnr,ssim"
        assert [int(line.split(",")[0]) for line in lines[1:]] == [2, 4, 6, 8, 10, 12]

    def test_eval_and_match_after_run(self, unified_run):
        cfg, out = unified_run
        assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
        rows = (out / "eval.csv").read_text().splitlines()
        assert rows[0].startswith("task,psnr") and len(rows) == 4
        assert "stage3.ckpt" in _manifest(out)

    def test_match_only(self, unified_run, tmp_path):
        cfg, out = unified_run
        before = (out / "match_blur3.csv").read_text()
        assert main(["match", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "match_blur3.csv").read_text() == before


class TestFramework:
    def test_single_task_manifest_is_exact(self, tmp_path):
        cfg = parse_config_text(SMOKE + "tasks = noise:0.1\n")
        res = run_framework(cfg, tmp_path / "one")
        assert sorted(res.artifacts) == sorted(["pretrained.ckpt", "importance.ckpt", "match_noise0.1.csv",
                                                "finetuned.ckpt", "metrics.csv"])
        assert sorted(_manifest(tmp_path / "one")) == sorted(res.artifacts)

    def test_rerun_identical_metrics(self, tmp_path):
        cfg = parse_config_text(SMOKE + "tasks = mask:0.25\n")
        run_framework(cfg, tmp_path / "a")
        run_framework(cfg, tmp_path / "b")
        for f in ("metrics.csv", "finetuned.ckpt", "match_mask0.25.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_reuses_supplied_pretrained_model(self, tmp_path):
        from dtir.checkpoint import load_state
        cfg = parse_config_text(SMOKE + "tasks = noise:0.1\n")
        first = run_framework(cfg, tmp_path / "a")
        second = run_framework(cfg.with_overrides(seed=3), tmp_path / "b",
                               pretrained=(first.params, first.importance))
        a, b = load_state(tmp_path / "a" / "pretrained.ckpt"), load_state(tmp_path / "b" / "pretrained.ckpt")
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert second.train is not None

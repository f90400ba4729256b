"""Command-line entry point: ``dtir <mode> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_state
from .config import MODES, RunConfig, parse_config
from .degrade import from_net, make_dataset, write_pnm
from .diffusion import sample
from .engine.framework import Pipeline, final_csv, write_text_atomic, run_framework, tasks_from
from .errors import ConfigError, DTIRError, StageError
from .matching import MatchReport
from .metrics import baseline, evaluate
from .model import predictor
from .seeding import derive_seed

log = logging.getLogger("dtir")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtir", description="Diffusion-training-enhanced image restoration (desk scale).")
    p.add_argument("mode", choices=MODES, help="pipeline stage to run")
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config)")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _cmd_pretrain(pipe: Pipeline) -> None:
    pipe.pretrain()


def _cmd_match(pipe: Pipeline) -> None:
    params, _ = pipe.load_pretrained()
    pipe.match(params, tasks_from(pipe.cfg))


def _cmd_sample(pipe: Pipeline) -> None:
    params, _ = pipe.load_pretrained()
    cfg = pipe.cfg
    shape = (cfg.n_samples,) + cfg.shape
    x = sample(predictor(params, use_moe=False), pipe.sched, derive_seed(cfg.seed, "sample"), shape)
    ext = "pgm" if cfg.channels == 1 else "ppm"
    for i, img in enumerate(np.clip(from_net(x), 0.0, 1.0)):
        write_pnm(pipe._emit(f"sample_{i}.{ext}"), img)


def _trained_params(pipe: Pipeline):
    out = pipe.out
    stages = sorted(out.glob("stage*.ckpt"), key=lambda p: int(p.stem[5:]) if p.stem[5:].isdigit() else -1)
    path = out / "finetuned.ckpt" if (out / "finetuned.ckpt").exists() else (stages[-1] if stages else None)
    if path is None:
        raise FileNotFoundError(f"no finetuned.ckpt or stage*.ckpt in {out}")
    params = pipe.template()
    params.load_state(load_state(path))
    return params, path.name


def _cmd_eval(pipe: Pipeline) -> None:
    params, name = _trained_params(pipe)
    pipe._emit(name)
    pred = predictor(params, pipe.cfg.use_moe)
    rows, base = [], []
    for task in tasks_from(pipe.cfg):
        report = pipe.out / f"match_{task.name}.csv"
        if not report.exists():
            raise FileNotFoundError(f"missing {report.name}; run 'match' first")
        pipe._emit(report.name)
        task = task.with_t_mat(MatchReport.load(report).t_mat, pipe.sched.T)
        _, ev = make_dataset(task, pipe.cfg.shape)
        rows.append(evaluate(pred, ev, task.t_mat, task.name))
        base.append(baseline(ev, task.name))
    write_text_atomic(pipe._emit("eval.csv"), final_csv(rows, base))


def run(mode: str, cfg: RunConfig) -> Path:
    """Run one subcommand; returns the manifest path."""
    if mode in ("finetune", "unified"):
        if mode == "finetune" and len(cfg.tasks) != 1:
            raise ConfigError(f"finetune needs exactly one task, config has {len(cfg.tasks)}")
        if not cfg.tasks:
            raise ConfigError("unified needs at least one task")
        res = run_framework(cfg, single=(mode == "finetune"))
        return res.out_dir / "manifest.txt"
    if mode in ("match", "eval") and not cfg.tasks:
        raise ConfigError(f"{mode} needs at least one task")
    pipe = Pipeline(cfg)
    try:
        {"pretrain": _cmd_pretrain, "match": _cmd_match, "sample": _cmd_sample, "eval": _cmd_eval}[mode](pipe)
    except (StageError, ConfigError):
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError(mode, exc) from exc
    finally:
        pipe.result.write_manifest()
    return pipe.out / "manifest.txt"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config).with_overrides(
            mode=args.mode, seed=args.seed, out_dir=None if args.out is None else str(args.out))
        manifest = run(args.mode, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DTIRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

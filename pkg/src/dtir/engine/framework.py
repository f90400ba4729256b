"""End-to-end pipeline: pretrain -> importance -> match -> rank -> fine-tune / unified training."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import load_state, save_checkpoint
from ..config import RunConfig
from ..degrade import TaskSpec, format_kind, make_clean, make_dataset, to_net
from ..diffusion import build_schedule
from ..errors import ContractError, StageError
from ..matching import MatchReport, match_timestep, rank_tasks
from ..metrics import MetricRow, baseline
from ..model import ParamStore, build_model
from ..seeding import derive_seed
from .importance import ImportanceState, accumulate_importance
from .train import METRIC_FIELDS, TrainResult, finetune, pretrain, unified_train

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"


@contextmanager
def stage(name: str):
    """Re-raise any failure inside the block as a StageError tagged ``name``."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure gets the stage tag
        raise StageError(name, exc) from exc


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def tasks_from(cfg: RunConfig) -> list[TaskSpec]:
    out = []
    for kind in cfg.kinds:
        seed = derive_seed(cfg.dataset_seed, f"task/{format_kind(kind)}") % (2 ** 31)
        out.append(TaskSpec(kind, None, seed, cfg.n_train, cfg.n_eval))
    return out


def save_importance(imp: ImportanceState, path) -> None:
    state = {f"grad/{k}": v for k, v in imp.grad_accum.items()}
    state.update({f"theta0/{k}": v for k, v in imp.theta0.items()})
    save_checkpoint(state, path)


def load_importance(path) -> ImportanceState:
    state = load_state(path)
    grad = {k[5:]: v for k, v in state.items() if k.startswith("grad/")}
    theta = {k[7:]: v for k, v in state.items() if k.startswith("theta0/")}
    return ImportanceState(grad, theta)


@dataclass
class FrameworkResult:
    out_dir: Path
    artifacts: list[str] = field(default_factory=list)
    params: ParamStore | None = None
    importance: ImportanceState | None = None
    reports: dict[str, MatchReport] = field(default_factory=dict)
    tasks: list[TaskSpec] = field(default_factory=list)
    train: TrainResult | None = None
    baselines: list[MetricRow] = field(default_factory=list)

    def write_manifest(self) -> Path:
        path = self.out_dir / MANIFEST
        write_text_atomic(path, "".join(a + "\n" for a in self.artifacts))
        return path


class Pipeline:
    """Stage-by-stage driver around one output directory."""

    def __init__(self, cfg: RunConfig, out_dir: str | os.PathLike | None = None):
        self.cfg = cfg
        self.sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.out = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.result = FrameworkResult(self.out)

    def _emit(self, name: str) -> Path:
        if name not in self.result.artifacts:
            self.result.artifacts.append(name)
        return self.out / name

    def template(self) -> ParamStore:
        return build_model(self.cfg.model_spec(), derive_seed(self.cfg.seed, "init"))

    def pretrain(self) -> tuple[ParamStore, ImportanceState]:
        cfg = self.cfg
        with stage("pretrain"):
            params = self.template()
            clean = to_net(make_clean(derive_seed(cfg.dataset_seed, "pretrain/clean"), cfg.n_clean, cfg.shape))
            losses = pretrain(params, clean, self.sched, cfg.pretrain_steps, cfg.pretrain_batch,
                              cfg.pretrain_lr, cfg.seed)
            if losses:
                log.info("pretrain: loss %.3f -> %.3f", losses[0], losses[-1])
            save_checkpoint(params, self._emit("pretrained.ckpt"))
        with stage("importance"):
            imp = accumulate_importance(params, self.sched, clean, cfg.importance_steps,
                                        cfg.pretrain_batch, cfg.seed)
            save_importance(imp, self._emit("importance.ckpt"))
        self.result.params, self.result.importance = params, imp
        return params, imp

    def load_pretrained(self) -> tuple[ParamStore, ImportanceState]:
        """Reuse pretrained/importance checkpoints in the output directory if present."""
        p_path, i_path = self.out / "pretrained.ckpt", self.out / "importance.ckpt"
        if not (p_path.exists() and i_path.exists()):
            return self.pretrain()
        with stage("load"):
            params = self.template()
            params.load_state(load_state(p_path))
            imp = load_importance(i_path)
        self._emit("pretrained.ckpt")
        self._emit("importance.ckpt")
        self.result.params, self.result.importance = params, imp
        return params, imp

    def match(self, params: ParamStore, tasks: list[TaskSpec]) -> list[TaskSpec]:
        out = []
        for task in tasks:
            with stage(f"match:{task.name}"):
                train, _ = make_dataset(task, self.cfg.shape)
                pairs = train.subset(np.arange(min(self.cfg.match_pairs, len(train))))
                rep = match_timestep(params, pairs, self.sched, self.cfg.seed,
                                     pretrained=self.cfg.pretrain_steps > 0)
                rep.save(self._emit(f"match_{task.name}.csv"))
                self.result.reports[task.name] = rep
                out.append(task.with_t_mat(rep.t_mat, self.sched.T))
        return out

    def train(self, params: ParamStore, imp: ImportanceState, tasks: list[TaskSpec],
              single: bool) -> TrainResult:
        cfg = self.cfg
        ft = cfg.finetune_config()
        with stage("rank"):
            ordered = rank_tasks(tasks)
        self.result.tasks = ordered
        data = [make_dataset(t, cfg.shape) for t in ordered]
        self.result.baselines = [baseline(ev, t.name) for t, (_, ev) in zip(ordered, data)]
        with stage("finetune" if single else "unified"):
            if single:
                res = finetune(params, imp, ordered[0], ft, self.sched, cfg.seed, cfg.shape, data[0])
                save_checkpoint(res.params, self._emit("finetuned.ckpt"))
            else:
                res = unified_train(params, imp, ordered, ft, self.sched, cfg.seed, cfg.shape, data)
                for i, st in enumerate(res.stages, start=1):
                    save_checkpoint(st, self._emit(f"stage{i}.ckpt"))
            write_text_atomic(self._emit("metrics.csv"), metrics_csv(res.rows))
            if not single:
                write_text_atomic(self._emit("final.csv"), final_csv(res.final, self.result.baselines))
        self.result.train = res
        return res


def final_csv(rows: list[MetricRow], base: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "psnr", "ssim", "baseline_psnr", "baseline_ssim", "n"])
    for r, b in zip(rows, base):
        w.writerow([r.task, _fmt(r.psnr), _fmt(r.ssim), _fmt(b.psnr), _fmt(b.ssim), r.n])
    return buf.getvalue()


def run_framework(cfg: RunConfig, out_dir: str | os.PathLike | None = None, *,
                  single: bool | None = None,
                  pretrained: tuple[ParamStore, ImportanceState] | None = None) -> FrameworkResult:
    """Run the full pipeline and write its artifacts plus a manifest.

    ``single`` selects single-task fine-tuning (default: exactly one task
    configured). ``pretrained`` supplies an already pre-trained model and its
    importance state; they are still written out as checkpoints.
    """
    if not cfg.tasks:
        raise StageError("config", ContractError("no tasks configured"))
    single = len(cfg.tasks) == 1 if single is None else single
    if single and len(cfg.tasks) != 1:
        raise StageError("config", ContractError("single-task mode needs exactly one task"))
    pipe = Pipeline(cfg, out_dir)
    if pretrained is None:
        params, imp = pipe.pretrain()
    else:
        params, imp = pretrained
        save_checkpoint(params, pipe._emit("pretrained.ckpt"))
        save_importance(imp, pipe._emit("importance.ckpt"))
        pipe.result.params, pipe.result.importance = params, imp
    try:
        tasks = pipe.match(params, tasks_from(cfg))
        pipe.train(params, imp, tasks, single)
    finally:
        pipe.result.write_manifest()
    return pipe.result


__all__ = ["run_framework", "Pipeline", "FrameworkResult", "stage", "metrics_csv", "tasks_from",
           "save_importance", "load_importance", "MANIFEST"]

"""Degradation profiling: which diffusion timestep does a degradation look like?

For every t the pre-trained noise predictor is asked to undo t steps of
diffusion starting from the degraded image itself. The residual it removes,
y - x0_hat(t), is compared with the true degradation residual y - x. The t
with the smallest mean-centered squared error is the matched timestep.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .degrade import PairedSet, TaskSpec, to_net
from .diffusion import NoiseSchedule
from .errors import ContractError
from .model import ParamStore, predictor

log = logging.getLogger(__name__)

MIN_PAIRS = 16


@dataclass
class MatchReport:
    t_mat: int
    per_t_error: np.ndarray   # entry i belongs to t = i + 1
    n_images: int
    pretrained: bool = True

    def __post_init__(self):
        if int(np.argmin(self.per_t_error)) + 1 != self.t_mat:
            raise ContractError("t_mat does not index the minimum match error")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "error"])
        for t, e in enumerate(self.per_t_error, start=1):
            w.writerow([t, repr(float(e))])
        w.writerow(["t_mat", self.t_mat])
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv(), encoding="utf-8", newline="\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MatchReport":
        rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
        if not rows or rows[0] != ["t", "error"] or rows[-1][0] != "t_mat":
            raise ContractError(f"{path}: not a match report")
        err = np.array([float(r[1]) for r in rows[1:-1]])
        return cls(int(rows[-1][1]), err, 0)


def _centered(r: np.ndarray) -> np.ndarray:
    return r - r.mean(axis=(1, 2, 3), keepdims=True)


def residual_errors(predict, clean: np.ndarray, degraded: np.ndarray, sched: NoiseSchedule,
                    batch: int = 16) -> np.ndarray:
    """Mean over images of ||c(y - x0_hat(t)) - c(y - x)||^2 for t = 1..T (c = mean-centering)."""
    x = to_net(clean).astype(np.float64)
    y = to_net(degraded)
    target = _centered(y.astype(np.float64) - x)
    errs = np.zeros(sched.T)
    for t in range(1, sched.T + 1):
        ab = sched.alpha_bar[t]
        total = 0.0
        for i in range(0, len(y), batch):
            yb = y[i:i + batch]
            eps = predict(yb, np.full(len(yb), t)).astype(np.float64)
            x0 = np.clip((yb - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
            diff = _centered(yb - x0) - target[i:i + batch]
            total += float(np.sum(diff * diff))
        errs[t - 1] = total / len(y)
    return errs


def match_timestep(model_pre: ParamStore, pairs: PairedSet, sched: NoiseSchedule, seed: int = 0,
                   *, pretrained: bool = True, use_moe: bool = False) -> MatchReport:
    """Matched timestep for the degradation in ``pairs`` (argmin, ties to the smallest t).

    The procedure is deterministic; ``seed`` is accepted for interface
    symmetry with the other stages and does not affect the result.
    """
    n = len(pairs)
    if n == 0:
        raise ContractError("match_timestep needs at least one pair")
    if n < MIN_PAIRS:
        log.warning("matching over %d pairs (< %d); t_mat may be noisy", n, MIN_PAIRS)
    if not pretrained:
        log.warning("matching with a model that was not generatively pre-trained")
    errs = residual_errors(predictor(model_pre, use_moe), pairs.clean, pairs.degraded, sched)
    return MatchReport(int(np.argmin(errs)) + 1, errs, n, pretrained)


def rank_tasks(tasks: Sequence[TaskSpec]) -> list[TaskSpec]:
    """Ascending by t_mat; ties keep input order."""
    for task in tasks:
        if task.t_mat is None:
            raise ContractError(f"task {task.name!r} has no t_mat")
    return sorted(tasks, key=lambda task: task.t_mat)

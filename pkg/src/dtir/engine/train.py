"""Generative pre-training, fine-tuning and time-sequential incremental training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .. import tensor as tc
from ..degrade import PairedSet, TaskSpec, make_dataset, to_net
from ..diffusion import LossWeights, NoiseSchedule, draw_timesteps, forward_diffuse, pretrain_loss
from ..errors import ContractError, NumericsError
from ..metrics import MetricRow, evaluate
from ..model import ParamStore, forward, predictor, shallow_mask
from ..seeding import rng_for
from ..tensor import AdamState, Tensor, adam_step
from .importance import ImportanceState, reg_value_and_grad
from .orthog import (BatchItem, GradSet, flatten, item_grad, orthog_param_grad,
                     orthog_value_and_vec_grads, scope_names)
from .settings import FineTuneConfig

METRIC_FIELDS = ("step", "task", "loss_content", "loss_reg", "loss_orthog", "s", "d", "psnr", "ssim")


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def pretrain(params: ParamStore, data: np.ndarray, sched: NoiseSchedule, steps: int,
             batch: int = 8, lr: float = 1e-3, seed: int = 0,
             weights: LossWeights | None = None) -> list[float]:
    """Noise-prediction training on clean images (network space). Returns per-step losses."""
    weights = weights or LossWeights.uniform(sched.T)
    rng = rng_for(seed, "pretrain")
    state = AdamState(lr, steps)
    model = lambda x, t: forward(params, x, t, use_moe=False)  # noqa: E731
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(data), size=batch)
        params.zero_grad()
        loss = pretrain_loss(model, data[idx], sched, weights, rng)
        tc.backward(loss)
        adam_step(params, state)
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def item_loss(use_moe: bool):
    """Per-item loss: per-pixel MSE on noise (gen) or mean L1 of the restoration (rec)."""

    def fn(params: ParamStore, item: BatchItem) -> Tensor:
        pred = forward(params, Tensor(item.x), np.asarray([item.t] * item.x.shape[0]), use_moe)
        if item.group == "gen":
            return tc.mean(tc.square(tc.sub(Tensor(item.target), pred)))
        return tc.l1_distance(tc.sub(Tensor(item.x), pred), Tensor(item.target))

    return fn


def _crop(rng, arrays: Sequence[np.ndarray], patch: int) -> list[np.ndarray]:
    H, W = arrays[0].shape[-2:]
    if patch >= H and patch >= W:
        return list(arrays)
    r = rng.integers(0, H - patch + 1)
    c = rng.integers(0, W - patch + 1)
    return [a[..., r:r + patch, c:c + patch] for a in arrays]


@dataclass
class _Stage:
    task: TaskSpec
    train: PairedSet
    eval: PairedSet


@dataclass
class TrainResult:
    params: ParamStore
    rows: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    final: list[MetricRow] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)


def _assemble(rng, cfg: FineTuneConfig, sched: NoiseSchedule, current: _Stage,
              source: _Stage) -> list[BatchItem]:
    B = cfg.batch
    n_gen = math.ceil(cfg.mix_ratio * B) if cfg.mix_ratio > 0 else 0
    if B > 1:
        n_gen = min(n_gen, B - 1)
    n_rec = B - n_gen
    items = []
    for i in rng.integers(0, len(source.train), size=n_rec):
        clean, deg = _crop(rng, [source.train.clean[i], source.train.degraded[i]], cfg.patch)
        items.append(BatchItem("rec", to_net(deg)[None], to_net(clean)[None], int(source.task.t_mat)))
    for i in rng.integers(0, len(current.train), size=n_gen):
        (clean,) = _crop(rng, [current.train.clean[i]], cfg.patch)
        t = int(draw_timesteps(rng, 1, sched.T)[0])
        eps = rng.standard_normal(clean.shape).astype(np.float32)[None]
        xt = forward_diffuse(to_net(clean)[None], t, eps, sched)
        items.append(BatchItem("gen", xt, eps, t))
    return items


def _batched_grads(params: ParamStore, items: list[BatchItem], use_moe: bool):
    """Group-mean gradients from one stacked pass per group."""
    out = {}
    for group in ("rec", "gen"):
        grp = [it for it in items if it.group == group]
        if not grp:
            out[group] = (float("nan"), None)
            continue
        x = np.concatenate([it.x for it in grp])
        tgt = np.concatenate([it.target for it in grp])
        t = np.array([it.t for it in grp])
        params.zero_grad()
        pred = forward(params, Tensor(x), t, use_moe)
        if group == "gen":
            loss = tc.mean(tc.square(tc.sub(Tensor(tgt), pred)))
        else:
            loss = tc.l1_distance(tc.sub(Tensor(x), pred), Tensor(tgt))
        tc.backward(loss)
        out[group] = (loss.item(), {k: params[k].grad.copy() for k in params})
    params.zero_grad()
    return out


def _mean_grads(gs: list[dict]) -> dict | None:
    if not gs:
        return None
    return {k: (sum(g[k].astype(np.float64) for g in gs) / len(gs)).astype(np.float32) for k in gs[0]}


def _norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))


def _cap_norm(grads: dict, limit: float) -> dict:
    """Rescale ``grads`` so its global L2 norm is at most ``limit``."""
    n = _norm(grads)
    if not math.isfinite(limit) or n <= limit or n == 0.0:
        return grads
    f = np.float32(limit / n)
    return {k: g * f for k, g in grads.items()}


def _train_stage(params: ParamStore, imp: ImportanceState | None, stages: list[_Stage], idx: int,
                 cfg: FineTuneConfig, sched: NoiseSchedule, rng: np.random.Generator,
                 result: TrainResult, step0: int) -> None:
    current = stages[idx]
    scfg = replace(cfg, t_mat=int(current.task.t_mat))
    state = AdamState(cfg.lr, cfg.steps)
    mask = shallow_mask(params, scfg.t_mat, scfg, sched.T)
    names = scope_names(params, cfg.orthog_param_scope)
    loss_fn = item_loss(cfg.use_moe)
    acc: dict[str, list[float]] = {}

    for step in range(1, cfg.steps + 1):
        source = current
        if idx > 0 and cfg.rehearsal > 0 and rng.random() < cfg.rehearsal:
            source = stages[int(rng.integers(0, idx))]
        items = _assemble(rng, cfg, sched, current, source)
        has_gen = any(it.group == "gen" for it in items)
        has_rec = any(it.group == "rec" for it in items)
        s = d = l_orth = float("nan")
        og = None
        if has_gen and has_rec and (cfg.use_orthog or cfg.track_cosine):
            losses, full = [], []
            for it in items:
                lv, g = item_grad(params, loss_fn, it)
                losses.append(lv)
                full.append(g)
            rec_i = [i for i, it in enumerate(items) if it.group == "rec"]
            gen_i = [i for i, it in enumerate(items) if it.group == "gen"]
            l_content = float(np.mean([losses[i] for i in rec_i]))
            l_gen = float(np.mean([losses[i] for i in gen_i]))
            rec_grad = _mean_grads([full[i] for i in rec_i])
            gen_grad = _mean_grads([full[i] for i in gen_i])
            gs = GradSet([flatten(full[i], names) for i in gen_i], [flatten(full[i], names) for i in rec_i])
            l_orth, s, d, u_gen, u_rec = orthog_value_and_vec_grads(gs)
            if cfg.use_orthog:
                order = gen_i + rec_i
                og = orthog_param_grad(params, loss_fn, [items[i] for i in order],
                                       [full[i] for i in order], u_gen + u_rec, names, cfg.hvp_eps)
                og = _cap_norm(og, cfg.orthog_max_ratio * _norm(rec_grad))
        else:
            bg = _batched_grads(params, items, cfg.use_moe)
            l_content, rec_grad = bg["rec"]
            l_gen, gen_grad = bg["gen"]
        l_reg, reg_grad = reg_value_and_grad(params, imp, scfg) if imp is not None and cfg.lam > 0 else (0.0, {})
        total = l_content + (l_gen if has_gen else 0.0) + l_reg
        if cfg.use_orthog and not math.isnan(l_orth):
            total += l_orth
        if not math.isfinite(total):
            raise NumericsError(f"non-finite fine-tuning loss at step {step}")

        for k in params:
            g = np.zeros(params[k].shape, dtype=np.float32)
            if rec_grad is not None:
                g += rec_grad[k]
            if gen_grad is not None and mask[k] != 0.0:
                g += np.float32(mask[k]) * gen_grad[k]
            if k in reg_grad:
                g += reg_grad[k]
            if og is not None:
                g += og[k]
            params[k].grad = g
        adam_step(params, state)

        gstep = step0 + step
        rec = {"step": gstep, "task": current.task.name, "source": source.task.name,
               "loss_content": l_content, "loss_gen": l_gen if has_gen else float("nan"),
               "loss_reg": l_reg, "loss_orthog": l_orth if cfg.use_orthog else float("nan"),
               "s": s, "d": d}
        result.history.append(rec)
        for key in ("loss_content", "loss_reg", "loss_orthog", "s", "d"):
            acc.setdefault(key, []).append(rec[key])
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row = evaluate(predictor(params, cfg.use_moe), current.eval, scfg.t_mat, current.task.name)
            out = {"step": gstep, "task": current.task.name}
            for key, vals in acc.items():
                live = [v for v in vals if not math.isnan(v)]
                out[key] = float(np.mean(live)) if live else float("nan")
            out["psnr"], out["ssim"] = row.psnr, row.ssim
            result.rows.append(out)
            acc = {}


def _stages_for(tasks: Sequence[TaskSpec], shape, data=None) -> list[_Stage]:
    out = []
    for i, task in enumerate(tasks):
        if task.t_mat is None:
            raise ContractError(f"task {task.name!r} has no matched timestep")
        tr, ev = data[i] if data is not None else make_dataset(task, shape)
        out.append(_Stage(task, tr, ev))
    return out


def unified_train(model_pre: ParamStore, imp: ImportanceState | None, tasks: Sequence[TaskSpec],
                  cfg: FineTuneConfig, sched: NoiseSchedule, seed: int, shape=(1, 32, 32),
                  data=None) -> TrainResult:
    """Train tasks one after another in ascending t_mat order.

    Stage i starts from stage i-1's parameters; the drift regularizer stays
    anchored to the pre-trained snapshot. With ``cfg.rehearsal`` > 0 that
    fraction of batches in stage i > 1 is drawn from earlier tasks.
    """
    tmats = [t.t_mat for t in tasks]
    if any(t is None for t in tmats):
        raise ContractError("every task needs t_mat before unified training")
    if any(a > b for a, b in zip(tmats, tmats[1:])):
        raise ContractError(f"tasks must be ordered by t_mat, got {tmats}")
    stages = _stages_for(tasks, shape, data)
    params = model_pre.copy()
    result = TrainResult(params)
    for i in range(len(stages)):
        rng = rng_for(seed, f"stage{i + 1}")
        _train_stage(params, imp, stages, i, cfg, sched, rng, result, step0=i * cfg.steps)
        result.stages.append(params.state())
    pred = predictor(params, cfg.use_moe)
    result.final = [evaluate(pred, st.eval, st.task.t_mat, st.task.name) for st in stages]
    return result


def finetune(model_pre: ParamStore, imp: ImportanceState | None, task: TaskSpec, cfg: FineTuneConfig,
             sched: NoiseSchedule, seed: int, shape=(1, 32, 32), data=None) -> TrainResult:
    """Single-task fine-tuning; identical to a one-stage :func:`unified_train`."""
    return unified_train(model_pre, imp, [task], cfg, sched, seed, shape,
                         None if data is None else [data])

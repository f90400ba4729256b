"""Per-sample gradients and the cross-objective cosine loss.

The loss is (1 - s) + |d| where s is the mean cosine between generative and
reconstruction gradients and d the mean cosine between distinct pairs
inside each group. Its gradient w.r.t. the parameters needs Hessian-vector
products; :func:`orthog_param_grad` gets them by differencing per-sample
gradients at perturbed parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .. import tensor as tc
from ..model import ParamStore
from ..tensor import Tensor

log = logging.getLogger(__name__)

LossFn = Callable[[ParamStore, "BatchItem"], Tensor]


@dataclass
class BatchItem:
    group: str              # "gen" or "rec"
    x: np.ndarray           # [1, C, H, W] network space: clean (gen) or degraded (rec)
    target: np.ndarray      # clean image (rec) or injected noise (gen)
    t: int


@dataclass
class GradSet:
    gen: list[np.ndarray] = field(default_factory=list)
    rec: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        lens = {v.size for v in self.gen + self.rec}
        if len(lens) > 1:
            raise ValueError(f"gradient vectors differ in length: {sorted(lens)}")


def scope_names(params: ParamStore, scope: str) -> list[str]:
    """Parameters whose gradients enter the cosine terms."""
    if scope == "all":
        return params.names()
    depth = params.spec.depth if params.spec is not None else params.max_layer_index // 2 + 1
    return [n for n in params.names()
            if params.meta[n].group in ("backbone", "embedding") and params.meta[n].layer_index < depth]


def item_grad(params: ParamStore, loss_fn: LossFn, item: BatchItem) -> tuple[float, dict[str, np.ndarray]]:
    params.zero_grad()
    loss = loss_fn(params, item)
    tc.backward(loss)
    return loss.item(), {k: params[k].grad.copy() for k in params}


def flatten(grads: dict[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([grads[n].reshape(-1) for n in names]).astype(np.float32)


def per_sample_grads(params: ParamStore, loss_fn: LossFn, batch: Sequence[BatchItem],
                     scope: str | Sequence[str] = "shallow") -> GradSet:
    """One flattened gradient per item, restricted to ``scope``."""
    names = scope_names(params, scope) if isinstance(scope, str) else list(scope)
    gs = GradSet()
    for item in batch:
        _, g = item_grad(params, loss_fn, item)
        getattr(gs, item.group).append(flatten(g, names))
    params.zero_grad()
    return gs


def _cos(a: Tensor, b: Tensor, na: Tensor, nb: Tensor) -> Tensor | None:
    if na.item() == 0.0 or nb.item() == 0.0:
        return None  # zero vector: cosine counts as 0
    return tc.div(tc.sum_(tc.mul(a, b)), tc.mul(na, nb))


def _mean(terms: list[Tensor | None]) -> Tensor:
    live = [t for t in terms if t is not None]
    if not terms or not live:
        return Tensor(0.0)
    total = live[0]
    for t in live[1:]:
        total = tc.add(total, t)
    return tc.scale(total, 1.0 / len(terms))


def orthog_graph(gen: Sequence[Tensor], rec: Sequence[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """(L, s, d) as taped scalars over the given gradient vectors."""
    vecs = list(gen) + list(rec)
    norms = [tc.l2_norm(v) for v in vecs]
    ng = len(gen)
    cross = [_cos(vecs[i], vecs[j], norms[i], norms[j])
             for i in range(ng) for j in range(ng, len(vecs))]
    within = [_cos(vecs[i], vecs[k], norms[i], norms[k]) for i, k in combinations(range(ng), 2)]
    within += [_cos(vecs[i], vecs[k], norms[i], norms[k]) for i, k in combinations(range(ng, len(vecs)), 2)]
    s = _mean(cross)
    d = _mean(within)
    loss = tc.add(tc.add_scalar(tc.scale(s, -1.0), 1.0), tc.abs_(d))
    return loss, s, d


def orthog_terms(gs: GradSet) -> tuple[float, float, bool]:
    """(s, d, active); ``active`` is False when either group is empty."""
    if not gs.gen or not gs.rec:
        return float("nan"), float("nan"), False
    _, s, d = orthog_graph([Tensor(v) for v in gs.gen], [Tensor(v) for v in gs.rec])
    return s.item(), d.item(), True


def orthog_loss(gs: GradSet) -> Tensor:
    if not gs.gen or not gs.rec:
        log.debug("orthog_loss inactive: mixed batch absent (gen=%d, rec=%d)", len(gs.gen), len(gs.rec))
        return Tensor(0.0)
    loss, _, _ = orthog_graph([Tensor(v) for v in gs.gen], [Tensor(v) for v in gs.rec])
    return loss


def orthog_value_and_vec_grads(gs: GradSet) -> tuple[float, float, float, list[np.ndarray], list[np.ndarray]]:
    """Loss, s, d and dL/dg_i for every vector (gen list, rec list)."""
    gen = [Tensor(v, requires_grad=True) for v in gs.gen]
    rec = [Tensor(v, requires_grad=True) for v in gs.rec]
    loss, s, d = orthog_graph(gen, rec)
    tc.backward(loss)
    grad = lambda t: t.grad if t.grad is not None else np.zeros_like(t.data)  # noqa: E731
    return loss.item(), s.item(), d.item(), [grad(t) for t in gen], [grad(t) for t in rec]


def orthog_param_grad(params: ParamStore, loss_fn: LossFn, items: Sequence[BatchItem],
                      base_grads: Sequence[dict[str, np.ndarray]], vec_grads: Sequence[np.ndarray],
                      names: Sequence[str], eps: float = 1e-3,
                      central: bool = False) -> dict[str, np.ndarray]:
    """sum_i H_i u_i with H_i the Hessian of item i's loss and u_i = dL/dg_i.

    Each product is a directional difference of item i's gradient along
    u_i, with step length ``eps`` in parameter space.
    """
    out = {k: np.zeros(params[k].shape, dtype=np.float64) for k in params}
    sizes = [params[n].size for n in names]
    for item, g0, u in zip(items, base_grads, vec_grads):
        nu = float(np.linalg.norm(u))
        if nu == 0.0:
            continue
        r = eps / nu
        pieces = np.split(u, np.cumsum(sizes)[:-1])
        saved = {n: params[n].data.copy() for n in names}

        def shifted(sign):
            for n, p in zip(names, pieces):
                params[n].data = (saved[n] + sign * r * p.reshape(saved[n].shape)).astype(np.float32)
            try:
                return item_grad(params, loss_fn, item)[1]
            finally:
                for n in names:
                    params[n].data = saved[n]

        gp = shifted(+1.0)
        if central:
            gm = shifted(-1.0)
            for k in out:
                out[k] += (gp[k].astype(np.float64) - gm[k]) / (2.0 * r)
        else:
            for k in out:
                out[k] += (gp[k].astype(np.float64) - g0[k]) / r
    params.zero_grad()
    return {k: v.astype(np.float32) for k, v in out.items()}

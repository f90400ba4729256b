"""Parameter importance from pre-training and the drift regularizer built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as tc
from ..diffusion import LossWeights, NoiseSchedule, pretrain_loss
from ..errors import ContractError
from ..model import ParamStore, forward
from ..seeding import rng_for
from ..tensor import Tensor
from .decay import layer_decay_factor


@dataclass
class ImportanceState:
    grad_accum: dict[str, np.ndarray]  # mean |dL/dtheta| per backbone entry
    theta0: dict[str, np.ndarray]      # pre-trained snapshot

    def __post_init__(self):
        if set(self.grad_accum) != set(self.theta0):
            raise ContractError("grad_accum and theta0 keys differ")
        for k, g in self.grad_accum.items():
            if (g < 0).any():
                raise ContractError(f"negative importance in {k!r}")


def accumulate_importance(params: ParamStore, sched: NoiseSchedule, data: np.ndarray,
                          steps: int, batch: int = 8, seed: int = 0,
                          weights: LossWeights | None = None, per_element: bool = False,
                          use_moe: bool = False) -> ImportanceState:
    """Mean absolute gradient of the generative loss over ``steps`` batches.

    Parameters are not updated. ``data`` holds clean images in network space.
    The loss is the pre-training loss itself (squared L2 per image);
    ``per_element`` divides it by the pixel count instead.
    """
    if steps < 1:
        raise ContractError("accumulate_importance needs steps >= 1")
    weights = weights or LossWeights.uniform(sched.T)
    rng = rng_for(seed, "importance")
    keys = params.names("backbone")
    acc = {k: np.zeros(params[k].shape, dtype=np.float64) for k in keys}
    model = lambda x, t: forward(params, x, t, use_moe)  # noqa: E731
    for _ in range(steps):
        idx = rng.integers(0, len(data), size=min(batch, len(data)))
        params.zero_grad()
        loss = pretrain_loss(model, data[idx], sched, weights, rng, per_element=per_element)
        tc.backward(loss)
        for k in keys:
            acc[k] += np.abs(params[k].grad)
    params.zero_grad()
    return ImportanceState(
        {k: (v / steps).astype(np.float32) for k, v in acc.items()},
        {k: params[k].data.copy() for k in keys},
    )


def _factors(params: ParamStore, keys, cfg, t_mat) -> dict[str, float]:
    lmax = params.max_layer_index
    return {k: layer_decay_factor(params.meta[k].layer_index, t_mat, cfg, lmax) for k in keys}


def reg_loss(params: ParamStore, imp: ImportanceState, cfg, t_mat: int | None = None) -> Tensor:
    """lam * sum_k decay_k * sum(G |d| + 0.5 * (2 G^2) |d|^2), d = theta - theta0.

    The second derivative is the Gauss-Newton estimate 2 G^2 from the
    accumulated mean absolute gradient G.
    """
    t_mat = cfg.t_mat if t_mat is None else t_mat
    missing = [k for k in imp.grad_accum if k not in params]
    if missing:
        raise ContractError(f"importance keys missing from params: {missing[:3]}")
    fac = _factors(params, imp.grad_accum, cfg, t_mat)
    terms = []
    for k, G in imp.grad_accum.items():
        d = tc.sub(params[k], Tensor(imp.theta0[k]))
        first = tc.sum_(tc.mul(Tensor(G), tc.abs_(d)))
        second = tc.sum_(tc.mul(Tensor(G * G), tc.square(d)))
        terms.append(tc.scale(tc.add(first, second), fac[k]))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return tc.scale(total, cfg.lam)


def reg_value_and_grad(params: ParamStore, imp: ImportanceState, cfg,
                       t_mat: int | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Closed-form value and gradient of :func:`reg_loss` (training fast path)."""
    t_mat = cfg.t_mat if t_mat is None else t_mat
    fac = _factors(params, imp.grad_accum, cfg, t_mat)
    val = 0.0
    grads = {}
    for k, G in imp.grad_accum.items():
        d = params[k].data.astype(np.float64) - imp.theta0[k]
        G = G.astype(np.float64)
        c = cfg.lam * fac[k]
        val += c * float((G * np.abs(d)).sum() + (G * G * d * d).sum())
        grads[k] = (c * (G * np.sign(d) + 2.0 * G * G * d)).astype(np.float32)
    return val, grads

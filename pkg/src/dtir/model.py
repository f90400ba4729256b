"""Timestep-conditioned encoder/decoder with MoE adapters.

Parameters live in a flat :class:`ParamStore`. Every entry carries a
``layer_index`` (0 = shallowest) and a ``group`` so the regularizers can
treat shallow and deep layers differently:

    encoder block i  -> layer i            (shallow, i < depth)
    decoder block j  -> layer depth + j    (deep)

The input stem and the shared time MLP sit on layer 0, the output head on
the deepest layer.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ContractError, ShapeError
from .tensor import Tensor

GROUPS = ("backbone", "adapter", "gate", "embedding")


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 3
    embed_dim: int = 32
    n_experts: int = 10
    adapter_dim: int = 4

    def __post_init__(self):
        if self.depth < 2:
            raise ContractError("depth must be >= 2")
        if self.n_experts < 1:
            raise ContractError("n_experts must be >= 1")
        if self.embed_dim % 2:
            raise ContractError("embed_dim must be even")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * min(2 ** i, 2) for i in range(self.depth)]

    @property
    def max_layer_index(self) -> int:
        return 2 * self.depth - 1


@dataclass(frozen=True)
class ParamMeta:
    layer_index: int
    group: str


class ParamStore(Mapping):
    """Ordered name -> Tensor map with per-entry layer metadata."""

    def __init__(self, spec: ModelSpec | None = None):
        self.spec = spec
        self._tensors: dict[str, Tensor] = {}
        self.meta: dict[str, ParamMeta] = {}

    def add(self, name: str, value, layer_index: int, group: str = "backbone") -> Tensor:
        if name in self._tensors:
            raise ContractError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._tensors[name] = t
        self.meta[name] = ParamMeta(int(layer_index), group)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self._tensors)
        return [n for n in self._tensors if self.meta[n].group == group]

    @property
    def max_layer_index(self) -> int:
        if self.spec is not None:
            return self.spec.max_layer_index
        return max((m.layer_index for m in self.meta.values()), default=0)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._tensors):
            missing = set(self._tensors) ^ set(state)
            raise ContractError(f"state keys differ from store: {sorted(missing)[:5]}")
        for k, v in state.items():
            if k not in self._tensors:
                continue
            v = np.asarray(v, dtype=np.float32)
            if v.shape != self._tensors[k].shape:
                raise ShapeError(f"{k}: stored shape {v.shape} != {self._tensors[k].shape}")
            self._tensors[k].data = v.copy()
            self._tensors[k].grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore(self.spec)
        for k, t in self._tensors.items():
            m = self.meta[k]
            out.add(k, Tensor(t.data.copy()), m.layer_index, m.group)
        return out

    def flat(self, names=None) -> np.ndarray:
        names = self.names() if names is None else names
        return np.concatenate([self._tensors[n].data.reshape(-1) for n in names])

    def n_params(self, group: str | None = None) -> int:
        return sum(self._tensors[n].size for n in self.names(group))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(spec: ModelSpec, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    ps = ParamStore(spec)
    E, D, W = spec.embed_dim, spec.depth, spec.widths

    def conv(name, cin, cout, k, layer, group="backbone", zero=False):
        shape = (cout, cin, k, k)
        w = np.zeros(shape, np.float32) if zero else _he_uniform(rng, shape, cin * k * k)
        ps.add(f"{name}.w", w, layer, group)
        ps.add(f"{name}.b", np.zeros(cout, np.float32), layer, group)

    def linear(name, din, dout, layer, group="backbone", zero=False):
        w = np.zeros((din, dout), np.float32) if zero else _he_uniform(rng, (din, dout), din)
        ps.add(f"{name}.w", w, layer, group)
        ps.add(f"{name}.b", np.zeros(dout, np.float32), layer, group)

    linear("time", E, E, 0, group="embedding")
    conv("stem", spec.in_channels, spec.base_channels, 3, 0)
    cin = spec.base_channels
    for i in range(D):
        c = W[i]
        conv(f"enc{i}.conv1", cin, c, 3, i)
        linear(f"enc{i}.temb", E, c, i)
        conv(f"enc{i}.conv2", c, c, 3, i)
        cin = c
    for j in range(D):
        level = D - 1 - j
        layer = D + j
        c = W[level]
        conv(f"dec{j}.conv1", cin + c, c, 3, layer)
        linear(f"dec{j}.temb", E, c, layer)
        conv(f"dec{j}.conv2", c, c, 3, layer)
        hid = spec.n_experts * spec.adapter_dim
        conv(f"dec{j}.adapter.down", c, hid, 1, layer, group="adapter")
        conv(f"dec{j}.adapter.up", hid, c, 1, layer, group="adapter", zero=True)
        linear(f"dec{j}.gate", E, spec.n_experts, layer, group="gate", zero=True)
        cin = c
    conv("head", cin, spec.in_channels, 1, spec.max_layer_index)
    return ps


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape [len(t), dim]; the time-based prompt."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


@dataclass(frozen=True)
class TimePrompt:
    t: int
    embedding: np.ndarray

    @classmethod
    def at(cls, t: int, dim: int = 32) -> "TimePrompt":
        return cls(int(t), timestep_embedding([t], dim)[0])


def _linear(x: Tensor, params, name: str) -> Tensor:
    y = tc.matmul(x, params[f"{name}.w"])
    b = params[f"{name}.b"]
    return y + tc.broadcast_to(b, y.shape)


def _conv(x: Tensor, params, name: str) -> Tensor:
    return tc.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


def gate_params_of(params: ParamStore, block: int) -> dict[str, Tensor]:
    return {"w": params[f"dec{block}.gate.w"], "b": params[f"dec{block}.gate.b"]}


def _gate(prompt_emb: Tensor, gate: Mapping[str, Tensor]) -> Tensor:
    logits = tc.matmul(prompt_emb, gate["w"])
    return tc.softmax(logits + tc.broadcast_to(gate["b"], logits.shape))


def gate_weights(prompt: TimePrompt, gate_params: Mapping[str, Tensor]) -> Tensor:
    """Expert weights for one prompt: softmax(emb @ w + b), length n_experts."""
    emb = Tensor(np.asarray(prompt.embedding, dtype=np.float32)[None, :])
    w = _gate(emb, gate_params)
    return tc.reshape(w, (w.shape[1],))


def _block(h: Tensor, temb: Tensor, params, name: str) -> Tensor:
    h = _conv(h, params, f"{name}.conv1")
    proj = _linear(temb, params, f"{name}.temb")
    B, C = proj.shape
    h = h + tc.broadcast_to(tc.reshape(proj, (B, C, 1, 1)), h.shape)
    h = tc.silu(h)
    return tc.silu(_conv(h, params, f"{name}.conv2"))


def _adapter(h: Tensor, prompt: Tensor, params, name: str, spec: ModelSpec) -> Tensor:
    B, C, H, W = h.shape
    NE, A = spec.n_experts, spec.adapter_dim
    z = tc.silu(_conv(h, params, f"{name}.adapter.down"))
    gw = _gate(prompt, {"w": params[f"{name}.gate.w"], "b": params[f"{name}.gate.b"]})
    gw = tc.broadcast_to(tc.reshape(gw, (B, NE, 1)), (B, NE, A))
    gw = tc.broadcast_to(tc.reshape(gw, (B, NE * A, 1, 1)), z.shape)
    return _conv(z * gw, params, f"{name}.adapter.up")


def forward(params: ParamStore, x, t, use_moe: bool = True) -> Tensor:
    """Predict noise (generative use) or the degradation residual (restoration).

    x: [B, C, H, W] in network space [-1, 1]; t: int or length-B ints.
    """
    spec = params.spec
    if spec is None:
        raise ContractError("forward needs a ParamStore built from a ModelSpec")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"expected [B,{spec.in_channels},H,W], got {x.shape}")
    B, _, H, W = x.shape
    f = 2 ** spec.depth
    if H % f or W % f:
        raise ShapeError(f"H, W must be divisible by {f}; got {H}x{W}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    prompt = Tensor(timestep_embedding(t, spec.embed_dim))
    temb = tc.silu(_linear(prompt, params, "time"))

    h = _conv(x, params, "stem")
    skips = []
    for i in range(spec.depth):
        h = _block(h, temb, params, f"enc{i}")
        skips.append(h)
        h = tc.avgpool2x(h)
    for j in range(spec.depth):
        h = tc.upsample2x(h)
        h = tc.concat([h, skips[spec.depth - 1 - j]], axis=1)
        h = _block(h, temb, params, f"dec{j}")
        if use_moe:
            h = h + _adapter(h, prompt, params, f"dec{j}", spec)
    return _conv(h, params, "head")


def predictor(params: ParamStore, use_moe: bool = True):
    """Wrap ``forward`` as ``fn(x: ndarray, t) -> ndarray`` with taping off."""

    def fn(x, t):
        with tc.no_grad():
            return forward(params, Tensor(x), t, use_moe).data

    return fn


def shallow_mask(params: ParamStore, t_mat: int, cfg, T: int = 50) -> dict[str, float]:
    """Per-entry gradient factor for generative updates during fine-tuning.

    Backbone and embedding entries follow the layer decay; adapter and gate
    entries get 0 so generative items never train the task-specific experts.
    """
    from .engine.decay import layer_decay_factor

    if not 0 <= t_mat <= T:
        raise ContractError(f"t_mat={t_mat} outside [0, {T}]")
    lmax = params.max_layer_index
    out = {}
    for name in params:
        m = params.meta[name]
        if m.group in ("adapter", "gate"):
            out[name] = 0.0
        else:
            out[name] = layer_decay_factor(m.layer_index, t_mat, cfg, lmax)
    return out

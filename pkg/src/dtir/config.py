"""Run configuration: line-oriented ``key = value`` files with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .degrade import DegradationKind, parse_kind
from .errors import ConfigError, ContractError, RangeError, UnknownKey
from .engine.settings import FineTuneConfig
from .model import ModelSpec

MODES = ("pretrain", "match", "finetune", "unified", "eval", "sample")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "unified"
    seed: int = 0
    out_dir: str = "runs/default"
    # diffusion
    T: int = 50
    beta_start: float = 0.02
    beta_end: float = 0.30
    # network
    n_experts: int = 10
    depth: int = 3
    base_channels: int = 16
    channels: int = 1
    image_size: int = 32
    # pre-training and importance
    pretrain_steps: int = 3000
    pretrain_batch: int = 8
    pretrain_lr: float = 1e-3
    importance_steps: int = 32
    n_clean: int = 256
    # matching
    match_pairs: int = 16
    # fine-tuning
    lr: float = 5e-5
    batch: int = 4
    patch: int = 32
    steps: int = 2000
    mix_ratio: float = 0.1
    lam: float = 0.2
    a: float = 0.05
    rehearsal: float = 0.25
    eval_every: int = 250
    use_orthog: bool = True
    use_moe: bool = True
    orthog_param_scope: str = "shallow"
    hvp_eps: float = 1e-3
    orthog_max_ratio: float = 1.0
    # data
    tasks: tuple = field(default_factory=tuple)
    dataset_seed: int = 0
    n_train: int = 256
    n_eval: int = 32
    n_samples: int = 4

    def __post_init__(self):
        _validate(self)

    @property
    def kinds(self) -> list[DegradationKind]:
        return [parse_kind(t) for t in self.tasks]

    def model_spec(self) -> ModelSpec:
        return ModelSpec(in_channels=self.channels, base_channels=self.base_channels,
                         depth=self.depth, n_experts=self.n_experts)

    def finetune_config(self) -> FineTuneConfig:
        return FineTuneConfig(lam=self.lam, a=self.a, mix_ratio=self.mix_ratio, steps=self.steps,
                              batch=self.batch, patch=self.patch, lr=self.lr,
                              orthog_param_scope=self.orthog_param_scope, use_orthog=self.use_orthog,
                              use_moe=self.use_moe, rehearsal=self.rehearsal,
                              eval_every=self.eval_every, hvp_eps=self.hvp_eps,
                              orthog_max_ratio=self.orthog_max_ratio)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


# file key -> field name, where they differ
ALIASES = {"lambda": "lam"}
_FIELDS = {f.name: f for f in fields(RunConfig)}


def _check(key: str, value, ok: bool, constraint: str) -> None:
    if not ok:
        raise RangeError(key, value, constraint)


def _validate(c: RunConfig) -> None:
    _check("mode", c.mode, c.mode in MODES, f"one of {', '.join(MODES)}")
    _check("seed", c.seed, c.seed >= 0, ">= 0")
    _check("T", c.T, c.T >= 1, ">= 1")
    _check("beta_start", c.beta_start, 0 < c.beta_start < 1, "in (0, 1)")
    _check("beta_end", c.beta_end, c.beta_start <= c.beta_end < 1, "in [beta_start, 1)")
    _check("lr", c.lr, c.lr > 0, "> 0")
    _check("pretrain_lr", c.pretrain_lr, c.pretrain_lr > 0, "> 0")
    for key in ("batch", "steps", "n_experts", "depth", "base_channels", "pretrain_batch",
                "importance_steps", "n_clean", "match_pairs", "eval_every", "n_train", "n_eval",
                "n_samples"):
        v = getattr(c, key)
        _check(key, v, v >= 1, ">= 1")
    _check("pretrain_steps", c.pretrain_steps, c.pretrain_steps >= 0, ">= 0")
    _check("channels", c.channels, c.channels in (1, 3), "1 or 3")
    mult = 2 ** c.depth
    _check("image_size", c.image_size, c.image_size >= 8 and c.image_size % mult == 0,
           f">= 8 and a multiple of {mult}")
    _check("patch", c.patch, 8 <= c.patch <= c.image_size and c.patch % mult == 0,
           f"in [8, image_size] and a multiple of {mult}")
    _check("mix_ratio", c.mix_ratio, 0 <= c.mix_ratio < 1, "in [0, 1)")
    _check("lambda", c.lam, c.lam >= 0, ">= 0")
    _check("a", c.a, c.a >= 0, ">= 0")
    _check("rehearsal", c.rehearsal, 0 <= c.rehearsal < 1, "in [0, 1)")
    _check("hvp_eps", c.hvp_eps, c.hvp_eps > 0, "> 0")
    _check("orthog_max_ratio", c.orthog_max_ratio, c.orthog_max_ratio > 0, "> 0 (inf = uncapped)")
    _check("orthog_param_scope", c.orthog_param_scope, c.orthog_param_scope in ("shallow", "all"),
           "shallow or all")
    for t in c.tasks:
        try:
            parse_kind(t)
        except ContractError as exc:
            raise RangeError("tasks", t, str(exc)) from exc


def _convert(key: str, name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if name == "tasks":
            return tuple(p.strip() for p in raw.split(";") if p.strip())
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise RangeError(key, raw, f"expected {kind}") from exc


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in ALIASES:
            name = ALIASES[key]
        elif key in _FIELDS and key not in ALIASES.values():
            name = key
        else:
            raise UnknownKey(key, lineno)
        values[name] = _convert(key, name, raw.strip())
    return RunConfig(**values)


def parse_config(path: str | Path | None) -> RunConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def dump_config(cfg: RunConfig) -> str:
    inverse = {v: k for k, v in ALIASES.items()}
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "tasks":
            v = "; ".join(v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{inverse.get(f.name, f.name)} = {v}")
    return "\n".join(lines) + "\n"


__all__ = ["MODES", "RunConfig", "parse_config", "parse_config_text", "dump_config"]

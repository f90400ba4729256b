from dataclasses import dataclass

from ..errors import ContractError


@dataclass(frozen=True)
class FineTuneConfig:
    """Knobs for generalization-enhanced fine-tuning and incremental training."""

    lam: float = 0.2
    a: float = 0.05
    mix_ratio: float = 0.1
    t_mat: int = 0
    steps: int = 2000
    batch: int = 4
    patch: int = 32
    orthog_param_scope: str = "shallow"
    lr: float = 1e-3
    use_orthog: bool = True
    track_cosine: bool = True
    use_moe: bool = True
    rehearsal: float = 0.25
    eval_every: int = 250
    hvp_eps: float = 1e-3
    orthog_max_ratio: float = 1.0  # cap on |orthog grad| / |content grad|; inf = uncapped

    def __post_init__(self):
        if not 0 <= self.mix_ratio < 1:
            raise ContractError("mix_ratio must lie in [0, 1)")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.a < 0:
            raise ContractError("decay rate a must be >= 0")
        if self.orthog_param_scope not in ("shallow", "all"):
            raise ContractError("orthog_param_scope must be 'shallow' or 'all'")
        if not 0 <= self.rehearsal < 1:
            raise ContractError("rehearsal must lie in [0, 1)")
        if not self.orthog_max_ratio > 0:
            raise ContractError("orthog_max_ratio must be > 0")
        if self.steps < 1 or self.batch < 1:
            raise ContractError("steps and batch must be >= 1")

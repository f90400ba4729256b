import math


def layer_decay_factor(layer_index: int, t_mat: float, cfg, max_layer_index: int) -> float:
    """exp(-a * t_mat * layer / max_layer): 1 at the shallowest layer, e^{-a t} at the deepest.

    ``cfg`` is anything with an ``a`` attribute, or the decay rate itself.
    """
    a = float(getattr(cfg, "a", cfg))
    if a < 0:
        raise ValueError("decay rate a must be >= 0")
    if max_layer_index <= 0:
        return 1.0
    return math.exp(-a * float(t_mat) * layer_index / max_layer_index)

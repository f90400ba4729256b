"""Named, order-independent RNG streams derived from one run seed."""
import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    h = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))

"""Procedural clean images, seeded degradation operators and paired datasets.

Images are float32 arrays in [0, 1], laid out [C, H, W] (single image) or
[N, C, H, W] (batch).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ContractError, ShapeError
from .seeding import derive_seed

DEFAULT_SHAPE = (1, 32, 32)


# ---------------------------------------------------------------------------
# degradation kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianNoise:
    sigma: float
    tag = "noise"

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("sigma must be >= 0")

    @property
    def name(self) -> str:
        return f"noise{self.sigma:g}"

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.sigma == 0:
            return x.copy()
        return x + self.sigma * rng.standard_normal(x.shape)


@dataclass(frozen=True)
class Mask:
    ratio: float
    tag = "mask"

    def __post_init__(self):
        if not 0 <= self.ratio <= 1:
            raise ContractError("mask ratio must be in [0, 1]")

    @property
    def name(self) -> str:
        return f"mask{self.ratio:g}"

    def apply(self, x, rng):
        # one keep/drop decision per pixel, shared across channels
        keep = rng.random(x.shape[-2:]) >= self.ratio
        return x * keep


@dataclass(frozen=True)
class Darken:
    gain: float
    gamma: float = 1.0
    tag = "darken"

    def __post_init__(self):
        if not 0 < self.gain <= 1:
            raise ContractError("gain must be in (0, 1]")
        if self.gamma <= 0:
            raise ContractError("gamma must be > 0")

    @property
    def name(self) -> str:
        return f"darken{self.gain:g}_{self.gamma:g}"

    def apply(self, x, rng):
        return self.gain * np.power(np.clip(x, 0.0, 1.0), self.gamma)


@dataclass(frozen=True)
class Blur:
    kernel: int
    tag = "blur"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError("blur kernel must be a positive odd integer")

    @property
    def name(self) -> str:
        return f"blur{self.kernel}"

    def apply(self, x, rng):
        size = (1,) * (x.ndim - 2) + (self.kernel, self.kernel)
        return uniform_filter(x.astype(np.float64), size=size, mode="reflect")


@dataclass(frozen=True)
class Streaks:
    count: int
    intensity: float = 0.5
    tag = "streaks"

    def __post_init__(self):
        if self.count < 0:
            raise ContractError("streak count must be >= 0")

    @property
    def name(self) -> str:
        return f"streaks{self.count}_{self.intensity:g}"

    def apply(self, x, rng):
        H, W = x.shape[-2:]
        layer = np.zeros((H, W))
        for _ in range(self.count):
            x0 = rng.uniform(0, W)
            slope = rng.uniform(-0.3, 0.3)
            y0 = rng.integers(0, H)
            length = rng.integers(H // 4, H)
            for k in range(length):
                r = (y0 + k) % H
                c = int(round(x0 + slope * k)) % W
                layer[r, c] = 1.0
        return x + self.intensity * layer


DegradationKind = GaussianNoise | Mask | Darken | Blur | Streaks

_PARSERS = {
    "noise": lambda a: GaussianNoise(float(a[0])),
    "mask": lambda a: Mask(float(a[0])),
    "darken": lambda a: Darken(float(a[0]), float(a[1]) if len(a) > 1 else 1.0),
    "blur": lambda a: Blur(int(a[0])),
    "streaks": lambda a: Streaks(int(a[0]), float(a[1]) if len(a) > 1 else 0.5),
}


def parse_kind(text: str) -> DegradationKind:
    """Parse descriptors such as ``noise:0.1``, ``darken:0.5,1``, ``blur:3``."""
    tag, _, args = text.strip().partition(":")
    tag = tag.strip().lower()
    if tag not in _PARSERS:
        raise ContractError(f"unknown degradation {tag!r}")
    parts = [a.strip() for a in args.split(",") if a.strip()]
    if not parts:
        raise ContractError(f"degradation {tag!r} needs parameters")
    try:
        return _PARSERS[tag](parts)
    except (ValueError, IndexError) as exc:
        raise ContractError(f"bad parameters for {tag!r}: {args!r}") from exc


def format_kind(kind: DegradationKind) -> str:
    if isinstance(kind, GaussianNoise):
        return f"noise:{kind.sigma:g}"
    if isinstance(kind, Mask):
        return f"mask:{kind.ratio:g}"
    if isinstance(kind, Darken):
        return f"darken:{kind.gain:g},{kind.gamma:g}"
    if isinstance(kind, Blur):
        return f"blur:{kind.kernel}"
    return f"streaks:{kind.count},{kind.intensity:g}"


def degrade(clean: np.ndarray, kind: DegradationKind, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = kind.apply(np.asarray(clean, dtype=np.float64), rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# clean images
# ---------------------------------------------------------------------------

def _one_clean(rng: np.random.Generator, shape) -> np.ndarray:
    C, H, W = shape
    yy, xx = np.mgrid[0:H, 0:W] / np.array([max(H - 1, 1), max(W - 1, 1)])[:, None, None]
    img = np.empty((C, H, W))
    base = rng.uniform(0.2, 0.8)
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    tint = rng.uniform(-0.1, 0.1, size=C)
    for c in range(C):
        img[c] = base + tint[c] + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(rng.integers(1, 4)):
        h, w = rng.integers(H // 6, H // 2 + 1), rng.integers(W // 6, W // 2 + 1)
        r, q = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        val = rng.uniform(0.0, 1.0, size=C)
        img[:, r:r + h, q:q + w] = val[:, None, None]
    fx, fy = rng.uniform(1.0, 4.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.03, 0.12)
    img += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return np.clip(img, 0.0, 1.0)


def make_clean(seed: int, n: int, shape=DEFAULT_SHAPE) -> np.ndarray:
    """``n`` procedural images ([n, C, H, W]); image i depends only on (seed, i)."""
    if n < 1:
        raise ContractError("make_clean needs n >= 1")
    out = np.empty((n,) + tuple(shape), dtype=np.float32)
    for i in range(n):
        out[i] = _one_clean(np.random.default_rng(derive_seed(seed, f"clean/{i}")), shape)
    return out


# ---------------------------------------------------------------------------
# paired datasets
# ---------------------------------------------------------------------------

@dataclass
class TaskSpec:
    kind: DegradationKind
    t_mat: int | None = None
    dataset_seed: int = 0
    n_train: int = 256
    n_eval: int = 32
    name: str = ""

    def __post_init__(self):
        if not self.name:
            self.name = self.kind.name

    def with_t_mat(self, t: int, T: int = 50) -> "TaskSpec":
        if not 0 <= t <= T:
            raise ContractError(f"t_mat={t} outside [0, {T}]")
        return TaskSpec(self.kind, int(t), self.dataset_seed, self.n_train, self.n_eval, self.name)


@dataclass(frozen=True)
class PairedSample:
    clean: np.ndarray
    degraded: np.ndarray


@dataclass
class PairedSet:
    clean: np.ndarray
    degraded: np.ndarray
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise ShapeError("clean and degraded stacks differ in shape")

    def __len__(self) -> int:
        return self.clean.shape[0]

    def __getitem__(self, i: int) -> PairedSample:
        return PairedSample(self.clean[i], self.degraded[i])

    def subset(self, idx) -> "PairedSet":
        idx = np.asarray(idx)
        return PairedSet(self.clean[idx], self.degraded[idx], [self.seeds[i] for i in idx])


def _paired(task: TaskSpec, split: str, n: int, shape) -> PairedSet:
    clean_seed = derive_seed(task.dataset_seed, f"{split}/clean")
    clean = make_clean(clean_seed, n, shape)
    degraded = np.empty_like(clean)
    for i in range(n):
        degraded[i] = degrade(clean[i], task.kind, derive_seed(task.dataset_seed, f"{split}/degrade/{i}"))
    return PairedSet(clean, degraded, [(clean_seed, i) for i in range(n)])


def make_dataset(task: TaskSpec, shape=DEFAULT_SHAPE) -> tuple[PairedSet, PairedSet]:
    """Train and eval splits drawn from disjoint seed streams."""
    if task.n_train < 1 or task.n_eval < 1:
        raise ContractError("n_train and n_eval must be >= 1")
    return _paired(task, "train", task.n_train, shape), _paired(task, "eval", task.n_eval, shape)


def to_net(x: np.ndarray) -> np.ndarray:
    """[0, 1] image -> network space [-1, 1]."""
    return (np.asarray(x, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def from_net(x: np.ndarray) -> np.ndarray:
    return ((np.asarray(x, dtype=np.float32) + 1.0) * 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# Netpbm I/O
# ---------------------------------------------------------------------------

def write_pnm(path: str | os.PathLike, img: np.ndarray) -> None:
    """8-bit binary PGM (1 channel) or PPM (3 channels); img is [C, H, W]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"write_pnm expects [1|3, H, W], got {img.shape}")
    C, H, W = img.shape
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if C == 1 else b"P6"
    payload = q[0].tobytes() if C == 1 else q.transpose(1, 2, 0).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (W, H) + payload)
    os.replace(tmp, path)


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        toks.append(buf[start:pos])
    return toks, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ContractError(f"unsupported netpbm header in {path}")
    W, H = int(w), int(h)
    C = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, count=W * H * C, offset=pos)
    img = data.reshape(H, W, C).transpose(2, 0, 1)
    return (img.astype(np.float32) / 255.0)

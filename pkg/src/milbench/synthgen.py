"""Shifted Mean MIL data-generating process.

Positive bags hide one contiguous block of ``r`` instances whose first
``k`` features have their mean shifted by ``delta``. Segment starts are
0-based here: ``u`` ranges over ``{0, ..., S - r}``.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataMismatchError, ParameterError
from .numerics import SeededRng


@dataclass(frozen=True)
class GeneratorParams:
    q_pos: float = 0.5
    s_low: int = 20
    s_high: int = 60
    r: int = 12
    delta: float = 0.5
    mu: float = 0.0
    sigma: float = 1.0
    m: int = 768
    k: int = 1

    def __post_init__(self):
        if not 0.0 <= self.q_pos <= 1.0:
            raise ParameterError(f"q_pos={self.q_pos} outside [0, 1]")
        if not 1 <= self.s_low <= self.s_high:
            raise ParameterError("need 1 <= s_low <= s_high")
        if not 1 <= self.r <= self.s_low:
            raise ParameterError("need 1 <= r <= s_low")
        if not self.sigma > 0:
            raise ParameterError("sigma must be positive")
        if not 1 <= self.k <= self.m:
            raise ParameterError("need 1 <= k <= m")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorParams:
        return cls(**d)


@dataclass
class Bag:
    embeddings: np.ndarray
    label: int
    segment_start: Optional[int] = None
    instance_labels: np.ndarray = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def build(cls, embeddings: np.ndarray, label: int, segment_start: Optional[int], r: int) -> Bag:
        s = embeddings.shape[0]
        inst = np.zeros(s, dtype=np.int8)
        if label:
            if segment_start is None or not 0 <= segment_start <= s - r:
                raise ParameterError(f"bad segment start {segment_start} for S={s}, r={r}")
            inst[segment_start:segment_start + r] = 1
        elif segment_start is not None:
            raise ParameterError("negative bag cannot carry a segment")
        return cls(embeddings, int(label), segment_start, inst)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    test_size: int = 1000

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ParameterError("train_fraction must lie in (0, 1)")


def sample_bag(params: GeneratorParams, rng: SeededRng) -> Bag:
    y = rng.bernoulli(params.q_pos)
    s = int(rng.integers(params.s_low, params.s_high))
    u = int(rng.integers(0, s - params.r)) if y else None
    h = params.mu + params.sigma * rng.normal((s, params.m))
    if y:
        h[u:u + params.r, :params.k] += params.delta
    return Bag.build(h, y, u, params.r)


def sample_dataset(params: GeneratorParams, n_bags: int, rng: SeededRng) -> list[Bag]:
    """``n_bags`` i.i.d. bags, bag ``i`` drawn from its own child stream.

    Child streams make datasets prefix-stable: the first ``n`` bags of a
    larger draw with the same ``rng`` are the ``n``-bag dataset.
    """
    if n_bags < 1:
        raise ParameterError("n_bags must be >= 1")
    return [sample_bag(params, child) for child in rng.spawn(n_bags)]


def split(dataset: Sequence[Bag], spec: SplitSpec, rng: SeededRng | None = None):
    """Random (train, val) partition with ``round(n * train_fraction)`` train bags."""
    n = len(dataset)
    if n == 0:
        raise ParameterError("cannot split an empty dataset")
    n_train = int(round(n * spec.train_fraction))
    if n_train == 0 or n_train == n:
        raise ParameterError(f"train_fraction={spec.train_fraction} on {n} bags leaves a split empty")
    rng = rng if rng is not None else SeededRng(spec.seed, stream=1)
    perm = rng.permutation(n)
    return [dataset[i] for i in perm[:n_train]], [dataset[i] for i in perm[n_train:]]


def check_consistent(bags: Sequence[Bag], params: GeneratorParams) -> None:
    for i, bag in enumerate(bags):
        s, m = bag.embeddings.shape
        if m != params.m:
            raise DataMismatchError(f"bag {i} has {m} features, params say {params.m}")
        if bag.label and s < params.r:
            raise DataMismatchError(f"bag {i} has S={s} < r={params.r}")
        if bag.label and int(bag.instance_labels.sum()) != params.r:
            raise DataMismatchError(f"bag {i} segment length differs from r={params.r}")


# --- file formats ----------------------------------------------------------
#
# text:   "# milbench-bags version=1 n=<n> r=<r>"
#         then per bag a header "S M y u" (u = -1 for negatives) and S rows
#         of M space-separated floats (%.17g).
# binary: b"MILBAGS\0", <u32 version> <u32 r> <u64 n>, then per bag
#         <u32 S> <u32 M> <i8 y> <i32 u> followed by S*M little-endian f64.

BIN_MAGIC = b"MILBAGS\0"
BIN_VERSION = 1
_BIN_HEAD = struct.Struct("<IIQ")
_BIN_BAG = struct.Struct("<IIbi")


def _is_binary(path: Path) -> bool:
    return Path(path).suffix in (".bin", ".mil")


def write_bags(path, bags: Sequence[Bag], r: int) -> None:
    path = Path(path)
    if _is_binary(path):
        with open(path, "wb") as f:
            f.write(BIN_MAGIC + _BIN_HEAD.pack(BIN_VERSION, r, len(bags)))
            for bag in bags:
                s, m = bag.embeddings.shape
                u = -1 if bag.segment_start is None else bag.segment_start
                f.write(_BIN_BAG.pack(s, m, bag.label, u))
                f.write(np.ascontiguousarray(bag.embeddings, dtype="<f8").tobytes())
        return
    with open(path, "w") as f:
        f.write(f"# milbench-bags version=1 n={len(bags)} r={r}\n")
        for bag in bags:
            s, m = bag.embeddings.shape
            u = -1 if bag.segment_start is None else bag.segment_start
            f.write(f"{s} {m} {bag.label} {u}\n")
            for row in bag.embeddings:
                f.write(" ".join("%.17g" % v for v in row))
                f.write("\n")


def read_bags(path) -> tuple[list[Bag], int]:
    """Returns ``(bags, r)``."""
    path = Path(path)
    if _is_binary(path):
        return _read_binary(path)
    bags = []
    with open(path) as f:
        head = f.readline().split()
        if not head or head[0] != "#" or head[1] != "milbench-bags":
            raise ParameterError(f"{path}: not a milbench bag file")
        meta = dict(tok.split("=") for tok in head[2:])
        r, n = int(meta["r"]), int(meta["n"])
        for _ in range(n):
            s, m, y, u = (int(t) for t in f.readline().split())
            h = np.array([[float(v) for v in f.readline().split()] for _ in range(s)], dtype=float).reshape(s, m)
            bags.append(Bag.build(h, y, None if u < 0 else u, r))
    return bags, r


def _read_binary(path: Path) -> tuple[list[Bag], int]:
    with open(path, "rb") as f:
        if f.read(len(BIN_MAGIC)) != BIN_MAGIC:
            raise ParameterError(f"{path}: bad magic")
        version, r, n = _BIN_HEAD.unpack(f.read(_BIN_HEAD.size))
        if version != BIN_VERSION:
            raise ParameterError(f"{path}: unsupported version {version}")
        bags = []
        for _ in range(n):
            s, m, y, u = _BIN_BAG.unpack(f.read(_BIN_BAG.size))
            h = np.frombuffer(f.read(8 * s * m), dtype="<f8").astype(float).reshape(s, m)
            bags.append(Bag.build(h, y, None if u < 0 else u, r))
    return bags, r

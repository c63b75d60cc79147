"""Seeded synthetic Q/K/V workloads.

``vertical_lines`` is the workload that shows what key permutation buys. All
queries share a direction ``u``. Each key carries a salience ``z ~ N(0, 1)``
along ``u`` (``k = noise + salience * z * u``), so some keys are attended by
nearly every query, and ``line_count`` planted keys
(``k = noise + line_strength * u``) stand out as sharp vertical lines. Lines go
into complete segments round-robin (line ``l`` lands in segment
``l * G // line_count``). With ``scatter="scattered"`` the lines inside a
segment sit in evenly spaced slots, so they land in different blocks. With
``"clustered"`` they are contiguous.

Without permutation, the salient keys are spread evenly over every key block,
so mean-pooled block scores come out nearly flat and selection has to keep
most blocks. Sorting each segment by importance gathers the salient half into
the segment's leading blocks, which lets selection drop the rest.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .tensor_core import resolve_dtype

KINDS = ("gaussian", "vertical_lines", "block_diag", "mixed")


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "gaussian"
    n: int = 1024
    d: int = 64
    heads: int = 1
    seed: int = 0
    line_count: int = 8
    line_strength: float = 8.0
    scatter: str = "scattered"
    segment_size: int = 256
    block_size: int = 128
    query_bias: float = 3.0
    salience: float = 2.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"workload kind must be one of {', '.join(KINDS)}")
        if self.n < 1 or self.d < 1 or self.heads < 1:
            raise ConfigError("n, d and heads must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.scatter not in ("scattered", "clustered"):
            raise ConfigError("scatter must be 'scattered' or 'clustered'")
        if self.line_count < 0 or self.segment_size < 1 or self.block_size < 1:
            raise ConfigError("line_count must be >= 0; segment and block sizes >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown workload keys: {sorted(unknown)}")
        return cls(**d)


def line_positions(spec, rng):
    """Planted line key positions for one head (sorted)."""
    s = spec.segment_size
    g = spec.n // s
    if g == 0 or spec.line_count == 0:
        return np.zeros(0, dtype=np.int64)
    segs = (np.arange(spec.line_count) * g) // spec.line_count
    pos = []
    for seg in range(g):
        k = int((segs == seg).sum())
        if k == 0:
            continue
        if k > s:
            raise ConfigError(f"{k} lines do not fit in a segment of {s} tokens")
        if spec.scatter == "scattered":
            edges = (np.arange(k + 1) * s) // k
            offs = [int(rng.integers(edges[r], edges[r + 1])) for r in range(k)]
        else:
            start = int(rng.integers(0, s - k + 1))
            offs = list(range(start, start + k))
        pos.extend(seg * s + o for o in offs)
    return np.array(sorted(pos), dtype=np.int64)


def _unit(rng, d):
    u = rng.standard_normal(d)
    return u / np.linalg.norm(u)


def _vertical_lines(spec, rng):
    n, d = spec.n, spec.d
    u = _unit(rng, d)
    q = rng.standard_normal((n, d)) + spec.query_bias * u
    k = rng.standard_normal((n, d)) + spec.salience * rng.standard_normal((n, 1)) * u
    lines = line_positions(spec, rng)
    k[lines] = rng.standard_normal((lines.size, d)) + spec.line_strength * u
    v = rng.standard_normal((n, d))
    return q, k, v


def _block_diag(spec, rng, strength=6.0):
    n, d, b = spec.n, spec.d, spec.block_size
    t = -(-n // b)
    dirs = rng.standard_normal((t, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    owner = np.arange(n) // b
    q = rng.standard_normal((n, d)) + strength * dirs[owner]
    k = rng.standard_normal((n, d)) + strength * dirs[owner]
    v = rng.standard_normal((n, d))
    return q, k, v


def _one_head(spec, rng):
    if spec.kind == "gaussian":
        return tuple(rng.standard_normal((spec.n, spec.d)) for _ in range(3))
    if spec.kind == "vertical_lines":
        return _vertical_lines(spec, rng)
    if spec.kind == "block_diag":
        return _block_diag(spec, rng)
    # mixed: local block structure plus planted vertical lines
    q1, k1, v = _block_diag(spec, rng, strength=2.0)
    q2, k2, _ = _vertical_lines(spec, rng)
    return (q1 + q2) / np.sqrt(2), (k1 + k2) / np.sqrt(2), v


def generate(spec, precision="f64"):
    """Return ``(Q, K, V)`` stacks of shape ``(heads, n, d)``.

    Values are drawn in float64 from a PCG64 stream seeded by ``spec.seed``
    and cast afterwards, so every precision sees the same underlying draw.
    """
    dtype = resolve_dtype(precision)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    heads = [_one_head(spec, rng) for _ in range(spec.heads)]
    return tuple(np.stack([h[i] for h in heads]).astype(dtype) for i in range(3))

"""Index-vector permutations and the segmented token orderings built from them.

A :class:`Permutation` stores ``map[new_pos] = old_pos``; applying it to a
matrix gathers rows, so ``apply_rows(p, m)[i] == m[p.map[i]]``. Dense
permutation matrices are never formed.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig
from .errors import ConfigError, ShapeError
from .tensor_core import as_matrix, softmax_rows

__all__ = [
    "Permutation", "SegmentedPermutation", "ImportanceScores",
    "apply_rows", "inverse", "compose", "identity",
    "estimate_key_importance", "build_key_permutation", "build_query_permutation",
]


class Permutation:
    __slots__ = ("map",)

    def __init__(self, mapping):
        arr = np.array(mapping, dtype=np.int64).ravel()
        seen = np.zeros(arr.size, dtype=bool)
        if arr.size and (arr.min() < 0 or arr.max() >= arr.size):
            raise ConfigError(f"permutation entries must lie in 0..{arr.size - 1}")
        seen[arr] = True
        if not seen.all():
            raise ConfigError("permutation map is not a bijection")
        arr.setflags(write=False)
        self.map = arr

    def __len__(self):
        return self.map.size

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.map, other.map)

    def __hash__(self):
        return hash(self.map.tobytes())

    def __repr__(self):
        return f"Permutation({self.map.tolist()})"

    def is_identity(self):
        return bool(np.array_equal(self.map, np.arange(self.map.size)))


def identity(n):
    return Permutation(np.arange(n))


def inverse(p):
    inv = np.empty_like(p.map)
    inv[p.map] = np.arange(p.map.size)
    return Permutation(inv)


def compose(p, q):
    """The permutation equal to applying ``q`` first, then ``p``."""
    if len(p) != len(q):
        raise ShapeError(f"cannot compose permutations of length {len(p)} and {len(q)}")
    return Permutation(q.map[p.map])


def apply_rows(p, m):
    m = np.asarray(m)
    if m.shape[0] != len(p):
        raise ShapeError(f"permutation of length {len(p)} applied to {m.shape[0]} rows")
    return m[p.map]


@dataclass(frozen=True)
class SegmentedPermutation:
    """Block-diagonal permutation: one local ordering per complete segment.

    Tokens past the last complete segment (``total_len mod segment_size`` of
    them) keep their positions.
    """

    segment_size: int
    locals: tuple
    total_len: int
    _flat: Permutation = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s, n = self.segment_size, self.total_len
        if s < 1:
            raise ConfigError(f"segment_size must be >= 1, got {s}")
        g = n // s
        locs = tuple(p if isinstance(p, Permutation) else Permutation(p) for p in self.locals)
        if len(locs) != g or any(len(p) != s for p in locs):
            raise ConfigError(f"expected {g} local permutations of length {s}")
        object.__setattr__(self, "locals", locs)
        flat = np.arange(n, dtype=np.int64)
        for i, p in enumerate(locs):
            flat[i * s:(i + 1) * s] = i * s + p.map
        object.__setattr__(self, "_flat", Permutation(flat))

    @property
    def num_segments(self):
        return len(self.locals)

    def flatten(self):
        return self._flat

    @classmethod
    def identity(cls, n, segment_size):
        g = n // segment_size
        return cls(segment_size, tuple(identity(segment_size) for _ in range(g)), n)


@dataclass(frozen=True)
class ImportanceScores:
    s: np.ndarray
    source_query_block: int


def estimate_key_importance(q, k, cfg=AttentionConfig()):
    """Mean softmax attention each key receives from the last query block.

    No causal mask is applied. When there are fewer than ``block_size``
    queries, all of them form the last block.
    """
    q = as_matrix(q, name="Q")
    k = as_matrix(k, q.dtype, name="K")
    if k.shape[0] == 0:
        raise ShapeError("cannot estimate importance over an empty key set")
    if k.shape[1] != q.shape[1]:
        raise ShapeError(f"Q has {q.shape[1]} columns but K has {k.shape[1]}")
    b = cfg.block_size
    n = q.shape[0]
    q_last = q[max(0, n - b):]
    scale = cfg.scale_for(q.shape[1])
    probs = softmax_rows((q_last.astype(np.float64) @ k.T.astype(np.float64)) * scale)
    return ImportanceScores(probs.mean(axis=0), source_query_block=(n - 1) // b)


def build_key_permutation(scores, segment_size):
    """Sort keys by descending importance inside every complete segment.

    Ties keep ascending original order.
    """
    s = np.asarray(getattr(scores, "s", scores), dtype=np.float64)
    seg = int(segment_size)
    if seg < 1:
        raise ConfigError(f"segment_size must be >= 1, got {seg}")
    g = s.size // seg
    locs = tuple(Permutation(np.argsort(-s[i * seg:(i + 1) * seg], kind="stable"))
                 for i in range(g))
    return SegmentedPermutation(seg, locs, s.size)


def _block_means(x, block_size):
    starts = np.arange(0, x.shape[0], block_size)
    counts = np.diff(np.append(starts, x.shape[0]))
    return np.add.reduceat(x.astype(np.float64), starts, axis=0) / counts[:, None]


def build_query_permutation(q, k, cfg, segment_size):
    """Group queries in each segment by their closest key-block centroid.

    Centroids are the mean key of every key block. A query's group is the
    centroid with the highest cosine similarity (lowest index on ties);
    zero-norm queries form a trailing group. Groups are laid out in centroid
    order and keep original order internally.
    """
    q = as_matrix(q, name="Q")
    k = as_matrix(k, q.dtype, name="K")
    if k.shape[1] != q.shape[1]:
        raise ShapeError(f"Q has {q.shape[1]} columns but K has {k.shape[1]}")
    seg = int(segment_size)
    if seg < 1:
        raise ConfigError(f"segment_size must be >= 1, got {seg}")
    n = q.shape[0]
    g = n // seg
    centroids = _block_means(k, cfg.block_size)
    qf = q[:g * seg].astype(np.float64)
    q_norm = np.linalg.norm(qf, axis=1)
    c_norm = np.linalg.norm(centroids, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = (qf @ centroids.T) / (q_norm[:, None] * c_norm[None, :])
    sim[:, c_norm == 0] = -1.0
    group = np.argmax(sim, axis=1) if sim.size else np.zeros(0, dtype=np.int64)
    group[q_norm == 0] = centroids.shape[0]
    locs = []
    for i in range(g):
        locs.append(Permutation(np.argsort(group[i * seg:(i + 1) * seg], kind="stable")))
    return SegmentedPermutation(seg, tuple(locs), n)

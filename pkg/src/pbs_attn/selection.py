"""Block masks: segment-aware causal structure and mean-pooling selection."""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import as_matrix, softmax_rows, write_tensor

__all__ = [
    "BlockMask", "BlockScoreMatrix", "ForcedPolicy",
    "segment_of_blocks", "build_block_causal_mask", "meanpool_block_scores",
    "select_blocks", "causal_block_density",
]


def _check_segment(block_size, segment_size):
    if block_size < 1:
        raise ConfigError(f"block_size must be >= 1, got {block_size}")
    if segment_size < 0:
        raise ConfigError(f"segment_size must be >= 0, got {segment_size}")
    if segment_size and segment_size % block_size:
        raise ConfigError(
            f"segment_size {segment_size} must be a multiple of block_size {block_size}")


def segment_of_blocks(t, block_size, segment_size):
    """Segment index of each of ``t`` consecutive blocks (``S == 0``: one per block)."""
    _check_segment(block_size, segment_size)
    idx = np.arange(t)
    if segment_size == 0:
        return idx
    return idx // (segment_size // block_size)


@dataclass(frozen=True)
class BlockMask:
    grid: np.ndarray
    block_size: int
    segment_size: int = 0

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2:
            raise ShapeError(f"block mask grid must be 2-D, got {grid.shape}")
        _check_segment(self.block_size, self.segment_size)
        grid = grid.copy()
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self):
        return self.grid.shape

    @property
    def selected(self):
        return int(self.grid.sum())

    @property
    def density(self):
        return self.selected / self.grid.size

    def union(self, other):
        return BlockMask(self.grid | np.asarray(getattr(other, "grid", other)),
                         self.block_size, self.segment_size)

    def save(self, path):
        """Write the grid as a float32 tensor file of 0.0 / 1.0."""
        write_tensor(path, self.grid.astype(np.float32))


@dataclass(frozen=True)
class BlockScoreMatrix:
    scores: np.ndarray
    causal_mask: np.ndarray

    @property
    def admissible(self):
        return np.isfinite(self.causal_mask)


@dataclass(frozen=True)
class ForcedPolicy:
    """Blocks added to every row regardless of score."""

    first_block: bool = True
    segment_band: bool = True


def build_block_causal_mask(t_r, t_c, block_size, segment_size):
    """Additive ``0 / -inf`` mask; a key block is admissible for a query block
    when its segment is not later than the query block's segment."""
    if t_r != t_c:
        raise ShapeError(f"block causal mask needs a square grid, got {t_r}x{t_c}")
    seg = segment_of_blocks(t_r, block_size, segment_size)
    ok = seg[None, :] <= seg[:, None]
    return np.where(ok, 0.0, -np.inf)


def meanpool_block_scores(qp, kp, block_size, causal_mask, scale=None):
    """softmax(mean-pooled Q . mean-pooled K^T * scale + C), scale defaults to 1/sqrt(d)."""
    qp = as_matrix(qp, np.float64, name="Q")
    kp = as_matrix(kp, np.float64, name="K")
    if qp.shape[1] != kp.shape[1]:
        raise ShapeError(f"Q has {qp.shape[1]} columns but K has {kp.shape[1]}")
    q_bar = _pool(qp, block_size)
    k_bar = _pool(kp, block_size)
    c = np.asarray(causal_mask, dtype=np.float64)
    if c.shape != (q_bar.shape[0], k_bar.shape[0]):
        raise ShapeError(f"causal mask is {c.shape}, pooled grid is "
                         f"{(q_bar.shape[0], k_bar.shape[0])}")
    if scale is None:
        scale = 1.0 / np.sqrt(qp.shape[1])
    return BlockScoreMatrix(softmax_rows((q_bar @ k_bar.T) * scale, c), c)


def _pool(x, block_size):
    starts = np.arange(0, x.shape[0], block_size)
    counts = np.diff(np.append(starts, x.shape[0]))
    return np.add.reduceat(x, starts, axis=0) / counts[:, None]


def select_blocks(scores, tau, forced=ForcedPolicy(), *, block_size=1, segment_size=0):
    """Per query-block row, keep the smallest set of highest-scoring admissible
    blocks whose scores sum to at least ``tau``, then add the forced blocks.

    If the running sum never reaches ``tau`` (and always for ``tau >= 1``)
    every admissible block is kept.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    s = np.asarray(scores.scores, dtype=np.float64)
    admissible = scores.admissible
    t_r, t_c = s.shape
    grid = np.zeros((t_r, t_c), dtype=bool)
    for i in range(t_r):
        cols = np.flatnonzero(admissible[i])
        if cols.size == 0:
            continue
        order = cols[np.argsort(-s[i, cols], kind="stable")]
        if tau >= 1.0:
            k = order.size
        else:
            hit = np.flatnonzero(np.cumsum(s[i, order]) >= tau)
            k = int(hit[0]) + 1 if hit.size else order.size
        grid[i, order[:k]] = True
    if forced.first_block:
        grid[:, 0] |= admissible[:, 0]
    if forced.segment_band and t_r == t_c:
        seg = segment_of_blocks(t_r, block_size, segment_size)
        grid |= seg[None, :] == seg[:, None]
    return BlockMask(grid, block_size, segment_size)


def causal_block_density(t_c):
    """Fraction of a ``t_c x t_c`` block grid on or below the diagonal."""
    if t_c < 1:
        raise ConfigError(f"T_c must be >= 1, got {t_c}")
    return float(Fraction(t_c + 1, 2 * t_c))

"""Exact, tiled and block-sparse attention.

All three paths share the masking semantics: with ``causal=True`` query ``i``
sees key ``j`` iff ``j <= i``; with an :class:`ElementMask` the comparison is
made on the tokens' original positions instead, which is what keeps causality
intact after queries and keys have been reordered.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from ._kernels_py import FULL, PARTIAL, SKIP, OnlineSoftmaxState
from .errors import ConfigError, DegenerateRowError, ShapeError
from .tensor_core import as_matrix, softmax_rows

__all__ = [
    "AttentionConfig", "ElementMask", "OnlineSoftmaxState",
    "attention_oracle", "attention_tiled", "attention_block_sparse",
    "block_plan",
]


@dataclass(frozen=True)
class AttentionConfig:
    block_size: int = 128
    head_dim: int | None = None
    causal: bool = False
    scale: float | None = None

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.head_dim is not None and self.head_dim < 1:
            raise ConfigError(f"head_dim must be >= 1, got {self.head_dim}")
        if self.scale is not None and not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    def scale_for(self, d):
        return self.scale if self.scale is not None else 1.0 / math.sqrt(d)

    def grid_shape(self, n, m):
        b = self.block_size
        return -(-n // b), -(-m // b)


@dataclass(frozen=True)
class ElementMask:
    """Original positions of the (possibly permuted) query and key rows.

    Entry ``(i, j)`` is admissible iff ``k_orig[j] <= q_orig[i]``.
    """

    q_orig: np.ndarray
    k_orig: np.ndarray

    def __post_init__(self):
        for name in ("q_orig", "k_orig"):
            v = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            if v.ndim != 1 or not np.array_equal(np.sort(v), np.arange(v.size)):
                raise ConfigError(f"{name} must be a permutation of 0..{v.size - 1}")
            object.__setattr__(self, name, v)

    @classmethod
    def identity(cls, n, m):
        return cls(np.arange(n), np.arange(m))

    def additive(self, dtype=np.float64):
        """Dense ``0 / -inf`` mask; O(N*M), oracle use only."""
        bad = self.k_orig[None, :] > self.q_orig[:, None]
        return np.where(bad, -np.inf, 0).astype(dtype)


def _check_inputs(q, k, v, cfg):
    q = as_matrix(q, name="Q")
    k = as_matrix(k, q.dtype, name="K")
    v = as_matrix(v, q.dtype, name="V")
    d = q.shape[1]
    if k.shape[1] != d:
        raise ShapeError(f"Q has {d} columns but K has {k.shape[1]}")
    if cfg.head_dim is not None and cfg.head_dim != d:
        raise ShapeError(f"config head_dim={cfg.head_dim} but inputs have d={d}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
    if k.shape[0] == 0 or q.shape[0] == 0:
        raise ShapeError("empty query or key set")
    return q, k, v


def _resolve_elem_mask(cfg, elem_mask, n, m):
    if elem_mask is not None:
        if elem_mask.q_orig.size != n or elem_mask.k_orig.size != m:
            raise ShapeError(
                f"element mask covers {elem_mask.q_orig.size}x{elem_mask.k_orig.size}, "
                f"inputs are {n}x{m}")
        return elem_mask
    if cfg.causal:
        return ElementMask.identity(n, m)
    return None


def attention_oracle(q, k, v, cfg=AttentionConfig(), elem_mask=None):
    """softmax(scale * Q K^T + mask) V with the full score matrix materialized."""
    q, k, v = _check_inputs(q, k, v, cfg)
    n, m = q.shape[0], k.shape[0]
    em = _resolve_elem_mask(cfg, elem_mask, n, m)
    scores = (q @ k.T) * q.dtype.type(cfg.scale_for(q.shape[1]))
    probs = softmax_rows(scores, None if em is None else em.additive(q.dtype))
    return probs @ v


def block_plan(grid, elem_mask, block_size, n, m):
    """Classify each block as skipped, fully admissible or partially masked.

    Selected blocks that the element mask rules out entirely are demoted to
    skipped; they would contribute exactly nothing to the online softmax.
    """
    grid = np.asarray(grid, dtype=bool)
    if elem_mask is None:
        return np.where(grid, FULL, SKIP).astype(np.int8)
    q_starts = np.arange(0, n, block_size)
    k_starts = np.arange(0, m, block_size)
    q_lo = np.minimum.reduceat(elem_mask.q_orig, q_starts)
    q_hi = np.maximum.reduceat(elem_mask.q_orig, q_starts)
    k_lo = np.minimum.reduceat(elem_mask.k_orig, k_starts)
    k_hi = np.maximum.reduceat(elem_mask.k_orig, k_starts)
    full = k_hi[None, :] <= q_lo[:, None]
    dead = k_lo[None, :] > q_hi[:, None]
    plan = np.where(full, FULL, np.where(dead, SKIP, PARTIAL)).astype(np.int8)
    plan[~grid] = SKIP
    return plan


def _run(q, k, v, cfg, grid, elem_mask, backend):
    n, m = q.shape[0], k.shape[0]
    em = _resolve_elem_mask(cfg, elem_mask, n, m)
    plan = block_plan(grid, em, cfg.block_size, n, m)
    empty = np.flatnonzero(~plan.any(axis=1))
    if empty.size:
        raise DegenerateRowError(
            f"query block {int(empty[0])} has no selected block with admissible keys",
            row_block=int(empty[0]))
    if em is None:
        q_pos = np.zeros(n, dtype=np.int64)
        k_pos = np.zeros(m, dtype=np.int64)
    else:
        q_pos, k_pos = em.q_orig, em.k_orig
    forward = _backend.get_forward(backend)
    out, bad = forward(q, k, v, plan, q_pos, k_pos, cfg.block_size,
                       cfg.scale_for(q.shape[1]))
    if bad >= 0:
        rb = bad // cfg.block_size
        raise DegenerateRowError(
            f"row {bad} (query block {rb}) has no admissible key among the selected blocks",
            row_block=rb)
    return out


def attention_tiled(q, k, v, cfg=AttentionConfig(), elem_mask=None, *, backend=None):
    """Streaming online-softmax attention over every key block."""
    q, k, v = _check_inputs(q, k, v, cfg)
    grid = np.ones(cfg.grid_shape(q.shape[0], k.shape[0]), dtype=bool)
    return _run(q, k, v, cfg, grid, elem_mask, backend)


def attention_block_sparse(q, k, v, cfg, mask, elem_mask=None, *, backend=None):
    """Tiled attention restricted to the blocks selected by ``mask``.

    ``mask`` is a ``BlockMask`` or a boolean ``T_r x T_c`` array.
    """
    q, k, v = _check_inputs(q, k, v, cfg)
    grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
    expected = cfg.grid_shape(q.shape[0], k.shape[0])
    if grid.shape != expected:
        raise ShapeError(f"block mask is {grid.shape}, inputs need {expected}")
    return _run(q, k, v, cfg, grid, elem_mask, backend)

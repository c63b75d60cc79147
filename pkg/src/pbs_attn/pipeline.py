"""End-to-end permuted block-sparse attention plus density and coverage metrics.

Pipeline for one head (self-attention prefill, ``N == M``):

1. build the query ordering ``sigma`` and key ordering ``pi`` per strategy,
2. gather ``Q' = Q[sigma]``, ``K' = K[pi]``, ``V' = V[pi]``,
3. select blocks on ``(Q', K')`` with mean pooling under the segment band mask,
4. run block-sparse attention, masking elements by original position,
5. scatter the output back to the original query order.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, ElementMask, attention_block_sparse, attention_oracle
from .errors import ConfigError, ResourceLimitError, ShapeError
from .permutation import (
    apply_rows, build_key_permutation, build_query_permutation,
    estimate_key_importance, identity, inverse,
)
from .selection import (
    ForcedPolicy, build_block_causal_mask, causal_block_density,
    meanpool_block_scores, select_blocks,
)
from .tensor_core import as_matrix, resolve_dtype, softmax_rows

STRATEGIES = ("none", "key_permute", "query_permute", "both")
STAGES = ("estimate", "permute", "select", "attention", "unpermute")

# 16384^2 score entries; the coverage pass streams rows so this bounds time, not memory
MAX_DENSE_ENTRIES = 1 << 28


@dataclass(frozen=True)
class PipelineConfig:
    block_size: int = 128
    segment_size: int = 256
    tau: float = 0.9
    strategy: str = "key_permute"
    precision: str = "f64"
    forced: ForcedPolicy = ForcedPolicy()
    scale: float | None = None

    def __post_init__(self):
        b, s = self.block_size, self.segment_size
        if b < 1:
            raise ConfigError(f"block_size must be >= 1, got {b}")
        if s != 0 and (s < b or s % b):
            raise ConfigError(f"segment_size must be 0 or a multiple of block_size {b}, got {s}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}")
        if self.strategy != "none" and s == 0:
            raise ConfigError(f"strategy {self.strategy!r} needs segment_size > 0")
        resolve_dtype(self.precision)

    @property
    def dtype(self):
        return resolve_dtype(self.precision)

    def attention_config(self, causal=True):
        return AttentionConfig(block_size=self.block_size, causal=causal, scale=self.scale)

    def to_dict(self):
        return {
            "block_size": self.block_size, "segment_size": self.segment_size,
            "tau": self.tau, "strategy": self.strategy, "precision": self.precision,
            "forced": {"first_block": self.forced.first_block,
                       "segment_band": self.forced.segment_band},
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        forced = d.pop("forced", None)
        if forced is not None:
            d["forced"] = ForcedPolicy(**forced)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PipelineReport:
    block_density: float
    causal_density_baseline: float
    attention_coverage: float | None
    selected_blocks: int
    total_admissible_blocks: int
    timings_us: dict
    pooled_coverage: float = float("nan")
    grid_shape: tuple = (0, 0)
    mask: object = field(default=None, repr=False)
    q_perm: object = field(default=None, repr=False)
    k_perm: object = field(default=None, repr=False)

    def to_dict(self):
        return {
            "block_density": self.block_density,
            "causal_density_baseline": self.causal_density_baseline,
            "attention_coverage": self.attention_coverage,
            "selected_blocks": self.selected_blocks,
            "total_admissible_blocks": self.total_admissible_blocks,
            "timings_us": {k: self.timings_us[k] for k in STAGES},
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @property
    def skipped_fraction(self):
        t_r, t_c = self.grid_shape
        return (t_r * t_c - self.selected_blocks) / (t_r * t_c)


class _Clock:
    def __init__(self):
        self.us = dict.fromkeys(STAGES, 0.0)

    def stage(self, name):
        clock = self

        class _Span:
            def __enter__(self):
                self.t0 = time.perf_counter_ns()

            def __exit__(self, *exc):
                clock.us[name] += (time.perf_counter_ns() - self.t0) / 1e3

        return _Span()


def _orderings(q, k, cfg, clock):
    n = q.shape[0]
    sigma = pi = identity(n)
    if cfg.strategy in ("key_permute", "both"):
        with clock.stage("estimate"):
            scores = estimate_key_importance(q, k, cfg.attention_config())
        with clock.stage("permute"):
            pi = build_key_permutation(scores, cfg.segment_size).flatten()
    if cfg.strategy in ("query_permute", "both"):
        with clock.stage("permute"):
            k_for_q = k if pi.is_identity() else apply_rows(pi, k)
            sigma = build_query_permutation(q, k_for_q, cfg.attention_config(),
                                            cfg.segment_size).flatten()
    return sigma, pi


def pbs_attention(q, k, v, cfg=PipelineConfig(), *, coverage=None, backend=None):
    """Permuted block-sparse causal attention for one head.

    Returns ``(output, PipelineReport)``. ``coverage`` controls the O(N^2)
    true-attention coverage pass: ``None`` runs it when ``N^2`` is within
    :data:`MAX_DENSE_ENTRIES`, ``True`` forces it, ``False`` skips it.
    """
    dtype = cfg.dtype
    q = as_matrix(q, dtype, name="Q")
    k = as_matrix(k, dtype, name="K")
    v = as_matrix(v, dtype, name="V")
    n = q.shape[0]
    if k.shape[0] != n or v.shape[0] != n:
        raise ShapeError(f"prefill needs N == M, got Q {q.shape}, K {k.shape}, V {v.shape}")
    if k.shape[1] != q.shape[1]:
        raise ShapeError(f"Q has {q.shape[1]} columns but K has {k.shape[1]}")
    b, s = cfg.block_size, cfg.segment_size
    clock = _Clock()

    sigma, pi = _orderings(q, k, cfg, clock)
    with clock.stage("permute"):
        qp = q if sigma.is_identity() else apply_rows(sigma, q)
        kp = k if pi.is_identity() else apply_rows(pi, k)
        vp = v if pi.is_identity() else apply_rows(pi, v)

    t = -(-n // b)
    with clock.stage("select"):
        c = build_block_causal_mask(t, t, b, s)
        block_scores = meanpool_block_scores(qp, kp, b, c, cfg.scale)
        mask = select_blocks(block_scores, cfg.tau, cfg.forced, block_size=b, segment_size=s)

    with clock.stage("attention"):
        em = ElementMask(sigma.map, pi.map)
        out_p = attention_block_sparse(qp, kp, vp, cfg.attention_config(), mask, em,
                                       backend=backend)

    with clock.stage("unpermute"):
        out = out_p if sigma.is_identity() else apply_rows(inverse(sigma), out_p)

    pooled = float((block_scores.scores * mask.grid).sum(axis=1).mean())
    if coverage is None:
        coverage = n * n <= MAX_DENSE_ENTRIES
    cov = attention_coverage(q, k, mask, cfg, sigma, pi) if coverage else None
    report = PipelineReport(
        block_density=mask.selected / mask.grid.size,
        causal_density_baseline=causal_block_density(t),
        attention_coverage=cov,
        selected_blocks=mask.selected,
        total_admissible_blocks=int(np.isfinite(c).sum()),
        timings_us=clock.us,
        pooled_coverage=pooled,
        grid_shape=mask.grid.shape,
        mask=mask, q_perm=sigma, k_perm=pi,
    )
    return out, report


def attention_coverage(q, k, mask, cfg=None, q_perm=None, k_perm=None, *,
                       max_entries=MAX_DENSE_ENTRIES, chunk_rows=512):
    """Share of the exact causal attention mass inside the selected blocks.

    ``q`` and ``k`` are in original order; ``q_perm``/``k_perm`` give the
    ordering the block mask was built in (identity when omitted).
    """
    q = as_matrix(q, np.float64, name="Q")
    k = as_matrix(k, np.float64, name="K")
    n, m = q.shape[0], k.shape[0]
    if n * m > max_entries:
        raise ResourceLimitError(
            f"coverage needs {n}x{m} attention entries, limit is {max_entries}")
    grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
    b = getattr(mask, "block_size", None) or cfg.block_size
    t_r, t_c = -(-n // b), -(-m // b)
    if grid.shape != (t_r, t_c):
        raise ShapeError(f"mask is {grid.shape}, inputs need {(t_r, t_c)}")
    scale = getattr(cfg, "scale", None)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    q_perm = identity(n) if q_perm is None else q_perm
    k_perm = identity(m) if k_perm is None else k_perm
    # block row/column of each original token in permuted space
    q_block = inverse(q_perm).map // b
    k_cols = k_perm.map
    pad = t_c * b - m
    mass = np.zeros((t_r, t_c))
    for r0 in range(0, n, chunk_rows):
        r1 = min(n, r0 + chunk_rows)
        scores = (q[r0:r1] @ k.T) * scale
        scores[np.arange(m)[None, :] > np.arange(r0, r1)[:, None]] = -np.inf
        probs = softmax_rows(scores)[:, k_cols]
        if pad:
            probs = np.pad(probs, ((0, 0), (0, pad)))
        per_block = probs.reshape(r1 - r0, t_c, b).sum(axis=2)
        np.add.at(mass, q_block[r0:r1], per_block)
    total = mass.sum()
    return float(min(1.0, (mass * grid).sum() / total)) if total > 0 else 0.0


def causal_reference(q, k, v, cfg):
    dtype = cfg.dtype
    return attention_oracle(as_matrix(q, dtype), as_matrix(k, dtype), as_matrix(v, dtype),
                            cfg.attention_config(causal=True))


def output_error(out, ref):
    diff = np.abs(np.asarray(out, dtype=np.float64) - np.asarray(ref, dtype=np.float64))
    return float(diff.max()), float(diff.mean())


@dataclass(frozen=True)
class SweepRow:
    tau: float
    segment_size: int
    strategy: str
    density: float
    coverage: float | None
    max_err: float
    mean_err: float
    time_us: float


def density_sweep(q, k, v, cfg, tau_list, s_list, strategies=None, *, backend=None):
    """Run the pipeline over every ``(strategy, S, tau)`` and compare each output
    with the causal oracle. Rows come back sorted by ``(strategy, S, tau)``."""
    strategies = strategies or [cfg.strategy]
    ref = causal_reference(q, k, v, cfg)
    rows = []
    for strategy in sorted(set(strategies)):
        for s in sorted(set(int(x) for x in s_list)):
            for tau in sorted(set(float(x) for x in tau_list)):
                run_cfg = PipelineConfig(
                    block_size=cfg.block_size, segment_size=s, tau=tau, strategy=strategy,
                    precision=cfg.precision, forced=cfg.forced, scale=cfg.scale)
                out, rep = pbs_attention(q, k, v, run_cfg, backend=backend)
                max_err, mean_err = output_error(out, ref)
                rows.append(SweepRow(tau, s, strategy, rep.block_density,
                                     rep.attention_coverage, max_err, mean_err,
                                     sum(rep.timings_us.values())))
    return rows


def pbs_attention_heads(q, k, v, cfg=PipelineConfig(), *, threads=1, coverage=None,
                        backend=None):
    """Apply :func:`pbs_attention` to each head of ``(H, N, d)`` stacks independently."""
    q, k, v = (np.asarray(x) for x in (q, k, v))
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("multi-head inputs must be 3-D (heads, rows, cols)")
    if not q.shape[0] == k.shape[0] == v.shape[0]:
        raise ShapeError(f"head counts differ: Q {q.shape[0]}, K {k.shape[0]}, V {v.shape[0]}")

    def one(h):
        return pbs_attention(q[h], k[h], v[h], cfg, coverage=coverage, backend=backend)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, range(q.shape[0])))
    out = np.stack([r[0] for r in results])
    return out, [r[1] for r in results]

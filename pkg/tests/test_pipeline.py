import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import PRECISIONS, TOL, max_abs, qkv
from pbs_attn.attention import attention_block_sparse
from pbs_attn.errors import ConfigError, ResourceLimitError, ShapeError
from pbs_attn.pipeline import (
    STAGES, STRATEGIES, PipelineConfig, attention_coverage, causal_reference,
    density_sweep, output_error, pbs_attention, pbs_attention_heads,
)
from pbs_attn.selection import BlockMask, causal_block_density
from pbs_attn.workloads import WorkloadSpec, generate

GOLDEN = json.loads((Path(__file__).parent / "golden" / "pipeline_seed13.json").read_text())


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("mult", [1, 2, 4])
@pytest.mark.parametrize("dtype", PRECISIONS)
def test_tau_one_is_exact(strategy, mult, dtype, backend):
    n, b = 200, 16
    q, k, v = qkv(np.random.default_rng(mult), n, n, 8, dtype)
    cfg = PipelineConfig(block_size=b, segment_size=mult * b, tau=1.0, strategy=strategy,
                         precision="f32" if dtype == np.float32 else "f64")
    out, rep = pbs_attention(q, k, v, cfg, backend=backend)
    assert out.dtype == dtype
    assert max_abs(out, causal_reference(q, k, v, cfg)) <= TOL[dtype]
    assert rep.selected_blocks == rep.total_admissible_blocks
    assert rep.attention_coverage == pytest.approx(1.0, abs=1e-12)


def test_unpermuted_full_path_is_plain_block_sparse(backend):
    q, k, v = qkv(np.random.default_rng(0), 96, 96, 8)
    cfg = PipelineConfig(block_size=32, segment_size=0, tau=1.0, strategy="none")
    out, rep = pbs_attention(q, k, v, cfg, backend=backend)
    direct = attention_block_sparse(q, k, v, cfg.attention_config(), np.tril(np.ones((3, 3), bool)),
                                    backend=backend)
    np.testing.assert_array_equal(out, direct)
    assert rep.block_density == causal_block_density(3)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_golden_seed13(strategy):
    rng = np.random.default_rng(13)
    q, k, v = (rng.standard_normal((256, 16)) for _ in range(3))
    want = GOLDEN["runs"][strategy]
    cfg = PipelineConfig(block_size=32, segment_size=64, tau=0.9, strategy=strategy)
    out, rep = pbs_attention(q, k, v, cfg)
    max_err, mean_err = output_error(out, causal_reference(q, k, v, cfg))
    assert rep.block_density == want["block_density"]
    assert rep.selected_blocks == want["selected_blocks"]
    assert rep.attention_coverage == pytest.approx(want["attention_coverage"], abs=1e-12)
    # the recorded errors are rounding noise; hold them to the same order
    assert max_err <= max(4 * want["max_abs_err"], 1e-14)
    assert mean_err <= max(4 * want["mean_abs_err"], 1e-15)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(STRATEGIES), st.floats(0, 1))
def test_causality_bitwise(seed, strategy, tau):
    rng = np.random.default_rng(seed)
    n = 160
    q, k, v = qkv(rng, n, n, 8)
    cfg = PipelineConfig(block_size=16, segment_size=32, tau=tau, strategy=strategy)
    out, _ = pbs_attention(q, k, v, cfg, coverage=False)
    j = int(rng.integers(0, n))
    v2 = v.copy()
    v2[j] += rng.standard_normal(8) * 10
    out2, _ = pbs_attention(q, k, v2, cfg, coverage=False)
    np.testing.assert_array_equal(out[:j], out2[:j])


def test_density_accounting():
    q, k, v = qkv(np.random.default_rng(9), 300, 300, 8)
    cfg = PipelineConfig(block_size=32, segment_size=64, tau=0.5)
    _, rep = pbs_attention(q, k, v, cfg)
    t = 10
    assert rep.grid_shape == (t, t)
    assert rep.block_density == rep.selected_blocks / t ** 2
    assert rep.causal_density_baseline == causal_block_density(t)
    ok = (np.arange(t)[None] // 2) <= (np.arange(t)[:, None] // 2)
    assert rep.total_admissible_blocks == ok.sum()
    assert not (rep.mask.grid & ~ok).any()
    assert 0 < rep.skipped_fraction < 1


def test_report_schema():
    q, k, v = qkv(np.random.default_rng(1), 64, 64, 4)
    _, rep = pbs_attention(q, k, v, PipelineConfig(block_size=16, segment_size=32))
    d = json.loads(rep.to_json())
    assert list(d) == ["block_density", "causal_density_baseline", "attention_coverage",
                       "selected_blocks", "total_admissible_blocks", "timings_us"]
    assert list(d["timings_us"]) == list(STAGES)
    assert all(x >= 0 for x in d["timings_us"].values())
    _, rep = pbs_attention(q, k, v, PipelineConfig(block_size=16, segment_size=32), coverage=False)
    assert rep.to_dict()["attention_coverage"] is None


def test_full_mask_coverage_is_one():
    q, k, _ = qkv(np.random.default_rng(2), 100, 100, 8)
    assert attention_coverage(q, k, BlockMask(np.ones((4, 4), bool), 32)) == pytest.approx(1, abs=1e-12)


def test_band_coverage_with_uniform_attention():
    n, b, s = 128, 16, 32
    q = np.zeros((n, 4))
    k = np.random.default_rng(3).standard_normal((n, 4))
    seg = np.arange(n // b) // (s // b)
    band = BlockMask(seg[:, None] == seg[None, :], b, s)
    # uniform causal attention: row i spreads 1/(i+1) over keys 0..i
    want = sum(sum(1 for j in range(i + 1) if j // s == i // s) / (i + 1) for i in range(n)) / n
    assert attention_coverage(q, k, band) == pytest.approx(want, abs=1e-12)


def test_coverage_in_permuted_coordinates():
    q, k, v = qkv(np.random.default_rng(4), 128, 128, 8)
    cfg = PipelineConfig(block_size=16, segment_size=64, tau=0.6, strategy="both")
    _, rep = pbs_attention(q, k, v, cfg)
    # independent recount: mass of each (q, k) pair landing in a selected permuted block
    p = np.exp(q @ k.T / np.sqrt(8))
    p[np.triu_indices(128, 1)] = 0
    p /= p.sum(1, keepdims=True)
    qb = np.argsort(rep.q_perm.map) // 16
    kb = np.argsort(rep.k_perm.map) // 16
    inside = rep.mask.grid[qb[:, None], kb[None, :]]
    assert rep.attention_coverage == pytest.approx((p * inside).sum() / 128, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coverage_monotone_in_mask(seed):
    rng = np.random.default_rng(seed)
    q, k, _ = qkv(rng, 96, 96, 4)
    a = rng.random((6, 6)) < 0.4
    extra = rng.random((6, 6)) < 0.3
    lo = attention_coverage(q, k, BlockMask(a, 16))
    hi = attention_coverage(q, k, BlockMask(a | extra, 16))
    assert lo <= hi + 1e-15


def test_coverage_resource_limit():
    q, k, _ = qkv(np.random.default_rng(0), 64, 64, 4)
    with pytest.raises(ResourceLimitError) as exc:
        attention_coverage(q, k, BlockMask(np.ones((4, 4), bool), 16), max_entries=1000)
    assert exc.value.exit_code == 4


def test_key_permutation_lowers_density_on_vertical_lines():
    spec = WorkloadSpec(kind="vertical_lines", n=1024, d=64, seed=0, segment_size=256)
    q, k, v = (x[0] for x in generate(spec))
    dens = {}
    for strategy in ("none", "key_permute"):
        cfg = PipelineConfig(block_size=64, segment_size=256, tau=0.9, strategy=strategy)
        _, rep = pbs_attention(q, k, v, cfg)
        dens[strategy] = rep.block_density
    assert dens["key_permute"] < dens["none"]


def test_heads_are_deterministic_across_threads():
    spec = WorkloadSpec(kind="mixed", n=256, d=16, heads=4, seed=5, segment_size=64,
                        block_size=32)
    q, k, v = generate(spec)
    cfg = PipelineConfig(block_size=32, segment_size=64, tau=0.8)
    o1, r1 = pbs_attention_heads(q, k, v, cfg, threads=1)
    o4, r4 = pbs_attention_heads(q, k, v, cfg, threads=4)
    np.testing.assert_array_equal(o1, o4)
    assert [r.block_density for r in r1] == [r.block_density for r in r4]
    with pytest.raises(ShapeError):
        pbs_attention_heads(q[0], k[0], v[0], cfg)


def test_sweep_rows():
    q, k, v = qkv(np.random.default_rng(6), 256, 256, 8)
    cfg = PipelineConfig(block_size=32, segment_size=64)
    rows = density_sweep(q, k, v, cfg, [1.0, 0.3, 0.7], [64, 32],
                         ["key_permute", "none"])
    keys = [(r.strategy, r.segment_size, r.tau) for r in rows]
    assert keys == sorted(keys) and len(rows) == 12
    for r in rows:
        if r.tau == 1.0:
            assert r.max_err <= 1e-10
    for strat in ("key_permute", "none"):
        for s in (32, 64):
            d = [r.density for r in rows if r.strategy == strat and r.segment_size == s]
            assert d == sorted(d)


def test_config_validation_and_round_trip():
    for bad in [dict(block_size=0), dict(segment_size=100), dict(segment_size=64, block_size=128),
                dict(tau=1.5), dict(strategy="x"), dict(segment_size=0),
                dict(precision="f16")]:
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)
    cfg = PipelineConfig(block_size=64, segment_size=128, tau=0.5, strategy="both")
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": 1})


def test_shape_checks():
    q, k, v = qkv(np.random.default_rng(0), 32, 16, 4)
    with pytest.raises(ShapeError):
        pbs_attention(q, k, v, PipelineConfig(block_size=8, segment_size=16))

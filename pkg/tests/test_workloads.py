import numpy as np
import pytest

from pbs_attn.errors import ConfigError
from pbs_attn.pipeline import PipelineConfig, attention_coverage, pbs_attention
from pbs_attn.selection import BlockMask
from pbs_attn.workloads import KINDS, WorkloadSpec, generate, line_positions


@pytest.mark.parametrize("kind", KINDS)
def test_generation_is_deterministic(kind):
    spec = WorkloadSpec(kind=kind, n=256, d=8, heads=2, seed=77, segment_size=64, block_size=32)
    a = generate(spec, "f32")
    b = generate(spec, "f32")
    for x, y in zip(a, b):
        assert x.shape == (2, 256, 8) and x.dtype == np.float32
        assert x.tobytes() == y.tobytes()
    c = generate(WorkloadSpec(**{**spec.to_dict(), "seed": 78}), "f32")
    assert a[0].tobytes() != c[0].tobytes()


def test_precisions_share_the_draw():
    spec = WorkloadSpec(n=64, d=4)
    q32, _, _ = generate(spec, "f32")
    q64, _, _ = generate(spec, "f64")
    np.testing.assert_array_equal(q32, q64.astype(np.float32))


def test_two_lines_per_segment():
    spec = WorkloadSpec(kind="vertical_lines", n=1024, segment_size=256, line_count=8)
    pos = line_positions(spec, np.random.default_rng(0))
    assert np.bincount(pos // 256, minlength=4).tolist() == [2, 2, 2, 2]
    # scattered: each line sits in its own half of the segment
    assert np.bincount(pos // 128, minlength=8).tolist() == [1] * 8


def test_clustered_lines_are_contiguous():
    spec = WorkloadSpec(kind="vertical_lines", n=1024, segment_size=256, line_count=12,
                        scatter="clustered")
    pos = line_positions(spec, np.random.default_rng(1))
    assert pos.size == 12
    for seg in range(4):
        p = pos[pos // 256 == seg]
        assert (np.diff(p) == 1).all()


def test_planted_lines_are_boosted():
    spec = WorkloadSpec(kind="vertical_lines", n=1024, d=64, seed=3)
    q, k, _ = (x[0] for x in generate(spec, "f64"))
    # the shared query direction is recoverable from the query mean
    u = q.mean(axis=0)
    u /= np.linalg.norm(u)
    proj = k @ u
    top = np.sort(np.argsort(-proj)[:8])
    pos = line_positions(spec, np.random.default_rng(0))
    assert pos.size == 8
    assert np.median(proj[top]) > 3 * np.median(np.abs(proj))


def test_block_diag_selection_is_near_minimal():
    spec = WorkloadSpec(kind="block_diag", n=512, d=32, seed=2, block_size=64)
    q, k, v = (x[0] for x in generate(spec, "f64"))
    cfg = PipelineConfig(block_size=64, segment_size=0, tau=0.9, strategy="none")
    _, rep = pbs_attention(q, k, v, cfg)
    t = 8
    minimal = np.eye(t, dtype=bool)
    minimal[:, 0] = True
    assert rep.selected_blocks <= minimal.sum() + 2
    assert attention_coverage(q, k, BlockMask(minimal, 64)) >= 0.9
    assert rep.attention_coverage >= 0.9


def test_spec_validation():
    for bad in [dict(kind="x"), dict(n=0), dict(scatter="x"), dict(seed=-1), dict(line_count=-1)]:
        with pytest.raises(ConfigError):
            WorkloadSpec(**bad)
    with pytest.raises(ConfigError):
        WorkloadSpec.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        line_positions(WorkloadSpec(n=8, segment_size=4, line_count=20), np.random.default_rng(0))
    assert line_positions(WorkloadSpec(n=100, segment_size=256), np.random.default_rng(0)).size == 0

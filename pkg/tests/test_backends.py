import os
import subprocess
import sys

import numpy as np
import pytest

from helpers import PRECISIONS, TOL, max_abs, qkv
from pbs_attn import _backend
from pbs_attn.attention import AttentionConfig, ElementMask, attention_block_sparse

needs_compiled = pytest.mark.skipif("compiled" not in _backend.available(),
                                    reason="compiled extension not built")


def _active(env_value):
    env = {**os.environ, "PBS_BACKEND": env_value}
    return subprocess.run([sys.executable, "-c", "import pbs_attn; print(pbs_attn.BACKEND)"],
                          capture_output=True, text=True, env=env)


def test_env_forces_python_fallback():
    r = _active("python")
    assert r.returncode == 0 and r.stdout.strip() == "python"


def test_env_rejects_unknown_backend():
    r = _active("gpu")
    assert r.returncode != 0 and "PBS_BACKEND" in r.stderr


@needs_compiled
def test_auto_prefers_compiled():
    assert _active("auto").stdout.strip() == "compiled"


@needs_compiled
@pytest.mark.parametrize("dtype", PRECISIONS)
@pytest.mark.parametrize("n, b", [(300, 64), (97, 16), (40, 1), (130, 128)])
def test_backends_agree(dtype, n, b):
    rng = np.random.default_rng(n)
    q, k, v = qkv(rng, n, n, 12, dtype, dv=7)
    em = ElementMask(rng.permutation(n), rng.permutation(n))
    cfg = AttentionConfig(block_size=b)
    t = -(-n // b)
    grid = rng.random((t, t)) < 0.6
    grid[np.arange(t), np.arange(t)] = True
    grid[:, 0] = True
    try:
        py = attention_block_sparse(q, k, v, cfg, grid, em, backend="python")
    except Exception as exc:  # degenerate random masks must fail the same way
        with pytest.raises(type(exc)):
            attention_block_sparse(q, k, v, cfg, grid, em, backend="compiled")
        return
    c = attention_block_sparse(q, k, v, cfg, grid, em, backend="compiled")
    assert c.dtype == dtype
    assert max_abs(py, c) <= TOL[dtype]


@needs_compiled
def test_compiled_is_deterministic():
    q, k, v = qkv(np.random.default_rng(0), 257, 257, 32, np.float32)
    cfg = AttentionConfig(block_size=32, causal=True)
    grid = np.tril(np.ones((9, 9), bool))
    a = attention_block_sparse(q, k, v, cfg, grid, backend="compiled")
    b = attention_block_sparse(q, k, v, cfg, grid, backend="compiled")
    assert a.tobytes() == b.tobytes()


@needs_compiled
def test_compiled_accepts_readonly_and_strided_inputs():
    q, k, v = qkv(np.random.default_rng(1), 64, 64, 8)
    for x in (q, k, v):
        x.setflags(write=False)
    cfg = AttentionConfig(block_size=16, causal=True)
    grid = np.tril(np.ones((4, 4), bool))
    want = attention_block_sparse(q, k, v, cfg, grid, backend="python")
    got = attention_block_sparse(q[:, :], k.T.copy().T, v, cfg, grid, backend="compiled")
    assert max_abs(want, got) <= 1e-12

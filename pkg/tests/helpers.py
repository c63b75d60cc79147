import numpy as np

TOL = {np.float32: 1e-5, np.float64: 1e-10}
PRECISIONS = [np.float32, np.float64]


def qkv(rng, n, m, d, dtype=np.float64, dv=None):
    q = rng.standard_normal((n, d)).astype(dtype)
    k = rng.standard_normal((m, d)).astype(dtype)
    v = rng.standard_normal((m, dv or d)).astype(dtype)
    return q, k, v


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))

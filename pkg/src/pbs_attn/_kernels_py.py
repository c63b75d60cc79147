"""Pure numpy block-sparse forward pass.

Used when the compiled ``_ckernels`` extension is missing, or when
``PBS_BACKEND=python`` is set. Mirrors the compiled kernel's contract exactly.
"""

import numpy as np

SKIP, FULL, PARTIAL = 0, 1, 2


class OnlineSoftmaxState:
    """Running ``(O, m, l)`` for one query block.

    ``O`` is the unnormalized output accumulator, ``m`` the running row max of
    the scaled scores and ``l`` the running denominator relative to ``m``.
    """

    def __init__(self, rows, dim, dtype=np.float64):
        self.o = np.zeros((rows, dim), dtype=dtype)
        self.m = np.full(rows, -np.inf, dtype=dtype)
        self.l = np.zeros(rows, dtype=dtype)

    def update(self, scores, v):
        """Fold one score block ``scores`` (rows x bk) and its values ``v``."""
        m_new = np.maximum(self.m, scores.max(axis=1))
        live = np.isfinite(m_new)
        # rows with nothing admissible so far keep m=-inf; exp(-inf - -inf) is NaN
        shift = np.where(live, m_new, 0)
        p = np.exp(scores - shift[:, None])
        alpha = np.where(live, np.exp(self.m - shift), 1)
        self.l = self.l * alpha + p.sum(axis=1)
        self.o *= alpha[:, None]
        self.o += p @ v
        self.m = m_new

    def finalize(self):
        """Return ``(normalized output, index of first row with l == 0 or -1)``."""
        dead = self.l == 0
        bad = int(np.argmax(dead)) if dead.any() else -1
        return self.o / np.where(dead, 1, self.l)[:, None], bad


def block_sparse_forward(q, k, v, plan, q_pos, k_pos, block_size, scale):
    n, d = q.shape
    m = k.shape[0]
    out = np.empty((n, v.shape[1]), dtype=q.dtype)
    scale = q.dtype.type(scale)
    for i in range(plan.shape[0]):
        r0, r1 = i * block_size, min((i + 1) * block_size, n)
        qi = q[r0:r1]
        state = OnlineSoftmaxState(r1 - r0, v.shape[1], q.dtype)
        for j in np.flatnonzero(plan[i]):
            c0, c1 = j * block_size, min((j + 1) * block_size, m)
            s = (qi @ k[c0:c1].T) * scale
            if plan[i, j] == PARTIAL:
                s[k_pos[None, c0:c1] > q_pos[r0:r1, None]] = -np.inf
            state.update(s, v[c0:c1])
        out[r0:r1], bad = state.finalize()
        if bad >= 0:
            return out, r0 + bad
    return out, -1

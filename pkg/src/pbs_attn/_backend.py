"""Kernel backend selection.

The compiled extension is used when importable; ``PBS_BACKEND=python`` forces
the numpy fallback and ``PBS_BACKEND=compiled`` makes a missing extension an
import-time error instead of a silent downgrade.
"""

import os

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels


def _select(name):
    if name == "auto":
        return "compiled" if "compiled" in BACKENDS else "python"
    if name not in ("python", "compiled"):
        raise ValueError(f"PBS_BACKEND must be auto, python or compiled, not {name!r}")
    if name not in BACKENDS:
        raise ImportError("PBS_BACKEND=compiled but pbs_attn._ckernels is not built")
    return name


ACTIVE = _select(os.environ.get("PBS_BACKEND", "auto"))


def get_forward(name=None):
    """Return the ``block_sparse_forward`` of backend ``name`` (default: active)."""
    return BACKENDS[_select(name or ACTIVE)].block_sparse_forward


def available():
    return sorted(BACKENDS)

"""Permuted block-sparse attention: a CPU reference engine.

Reorders keys (and optionally queries) inside fixed-size segments so that
the keys most queries attend to share a few blocks, then runs causal
block-sparse attention on the permuted tensors and restores the original
query order.
"""

from ._backend import ACTIVE as BACKEND
from .attention import (
    AttentionConfig, ElementMask, attention_block_sparse, attention_oracle, attention_tiled,
)
from .errors import (
    ConfigError, DegenerateRowError, FormatError, PBSError, ResourceLimitError, ShapeError,
)
from .permutation import (
    Permutation, SegmentedPermutation, apply_rows, build_key_permutation,
    build_query_permutation, compose, estimate_key_importance, identity, inverse,
)
from .pipeline import (
    PipelineConfig, PipelineReport, attention_coverage, density_sweep, pbs_attention,
    pbs_attention_heads,
)
from .selection import (
    BlockMask, ForcedPolicy, build_block_causal_mask, causal_block_density,
    meanpool_block_scores, select_blocks,
)
from .tensor_core import read_tensor, write_tensor

__version__ = "0.1.0"

"""Tree-structured discrete action spaces with conditional masking, plus the
training stack that exercises them: a pushable-box grid game, masked
factored policies, and a v-trace actor-critic trainer."""

from .masking import FactoredSample, MaskedCategorical, MaskingMode, sample_factored
from .trees import (
    ActionTree,
    ComponentSpec,
    Mask,
    TreePath,
    ValidActionTree,
    build_tree,
    collapse_masks,
    count_logits,
    derive_mask,
    deserialize_valid_tree,
    flatten_to_depth2,
    serialize_valid_tree,
)

__version__ = "0.1.0"

__all__ = [
    "ActionTree",
    "ComponentSpec",
    "FactoredSample",
    "Mask",
    "MaskedCategorical",
    "MaskingMode",
    "TreePath",
    "ValidActionTree",
    "build_tree",
    "collapse_masks",
    "count_logits",
    "derive_mask",
    "deserialize_valid_tree",
    "flatten_to_depth2",
    "sample_factored",
    "serialize_valid_tree",
    "__version__",
]

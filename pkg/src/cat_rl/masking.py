"""Masked categorical distributions and factored action sampling.

A policy over a tree-structured action space is a product of per-component
categorical distributions.  Masking removes values a component cannot take
in the current state.  Probability mass on masked-out values is exactly
zero, not merely small: normalisation runs over the allowed set only, so
"never samples an invalid value" is a hard invariant rather than a
statistical one.

For consumers that need dense logits (e.g. a loss evaluated on whole logit
rows), `mask_logits` provides the standard equivalent formulation: add a
large negative constant to the suppressed entries.  With `M_NEG = -1e9`
the suppressed probabilities underflow to exact zeros in both float32 and
float64 for any sanely scaled logits.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trees import Mask, TreeError, TreePath, ValidActionTree, collapse_masks, derive_mask

__all__ = [
    "M_NEG",
    "MaskingMode",
    "MaskedCategorical",
    "FactoredSample",
    "mask_logits",
    "sample_factored",
    "log_prob_of",
    "entropy_of",
]

M_NEG = -1e9


class MaskingMode(enum.Enum):
    """How per-component masks are built from the state's valid tree.

    CONDITIONAL re-derives the mask after every selection by walking the
    valid tree (full tree-structured masking).  COLLAPSED uses the
    breadth-wise union mask at each depth, ignoring what was selected above.
    NONE disables masking entirely; components are sampled independently.
    """

    CONDITIONAL = "cd"
    COLLAPSED = "cl"
    NONE = "none"

    @classmethod
    def parse(cls, text: str) -> "MaskingMode":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(
                f"unknown masking mode {text!r}; expected one of "
                f"{[m.value for m in cls]}"
            ) from None


def mask_logits(logits: np.ndarray, mask: Mask) -> np.ndarray:
    """Dense masked logits: unchanged where allowed, shifted by M_NEG where not."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or len(logits) != len(mask):
        raise TreeError(f"logits length {logits.shape} does not match mask length {len(mask)}")
    out = logits.copy()
    out[mask.as_array() == 0] += M_NEG
    return out


class MaskedCategorical:
    """Categorical distribution over the values a mask allows.

    Probabilities are computed with max-subtracted softmax restricted to the
    allowed indices; masked-out indices carry exactly zero probability.
    """

    def __init__(self, logits: np.ndarray, mask: Mask):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 1 or len(logits) != len(mask):
            raise TreeError(
                f"logits length {logits.shape} does not match mask length {len(mask)}"
            )
        if not np.all(np.isfinite(logits)):
            raise TreeError("logits must be finite")
        self.logits = logits
        self.mask = mask
        allowed = np.fromiter(mask.allowed_indices, dtype=np.int64)
        shifted = logits[allowed] - logits[allowed].max()
        exp = np.exp(shifted)
        z = exp.sum()
        self._allowed = allowed
        self._allowed_probs = exp / z
        self._allowed_log_probs = shifted - math.log(z)

    @property
    def probs(self) -> np.ndarray:
        """Full-width probability vector; exact zeros outside the mask."""
        p = np.zeros_like(self.logits)
        p[self._allowed] = self._allowed_probs
        return p

    def log_prob(self, index: int) -> float:
        pos = np.nonzero(self._allowed == index)[0]
        if pos.size == 0:
            raise TreeError(f"index {index} is masked out; it has probability zero")
        return float(self._allowed_log_probs[pos[0]])

    def sample(self, rng: np.random.Generator) -> tuple[int, float]:
        """Draw one value by inverse CDF over the allowed indices.

        Consumes exactly one uniform variate, so a seeded generator replays
        bit-identically.
        """
        u = rng.random()
        cdf = np.cumsum(self._allowed_probs)
        pos = int(np.searchsorted(cdf, u, side="right"))
        pos = min(pos, len(self._allowed) - 1)  # guard u == 1.0 edge
        return int(self._allowed[pos]), float(self._allowed_log_probs[pos])

    def entropy(self) -> float:
        p = self._allowed_probs
        nz = p > 0.0
        return float(-(p[nz] * np.log(p[nz])).sum())


@dataclass(frozen=True)
class FactoredSample:
    """One action drawn from a factored masked policy.

    Carries everything the learner needs to replay the behaviour
    distribution: the selections, the masks they were drawn under, and the
    per-component behaviour log-probabilities and entropies.
    """

    path: TreePath
    log_probs: np.ndarray
    entropies: np.ndarray

    @property
    def selections(self) -> tuple[int, ...]:
        return self.path.selections

    @property
    def masks(self) -> tuple[Mask, ...]:
        return self.path.masks_used

    @property
    def total_log_prob(self) -> float:
        return float(self.log_probs.sum())


def _masks_for_mode(logit_groups: Sequence[np.ndarray], valid: ValidActionTree,
                    mode: MaskingMode) -> list[Mask] | None:
    """Pre-computable masks for COLLAPSED / NONE; CONDITIONAL masks depend on the walk."""
    if mode is MaskingMode.NONE:
        return [Mask.all_ones(len(l)) for l in logit_groups]
    if mode is MaskingMode.COLLAPSED:
        return collapse_masks(valid)
    return None


def sample_factored(logit_groups: Sequence[np.ndarray], valid: ValidActionTree,
                    mode: MaskingMode, rng: np.random.Generator) -> FactoredSample | None:
    """Sample one complete action, one component at a time.

    CONDITIONAL mode walks the valid tree: the mask for component k+1 is read
    from the node reached by the selections so far.  COLLAPSED and NONE
    sample every component independently under union / all-ones masks.

    Returns None when the valid tree is empty -- the state admits no action
    at all, and the caller should emit an environment-level no-op.
    """
    if valid.is_empty:
        return None
    if valid.arities is not None and len(logit_groups) != len(valid.arities):
        raise TreeError(
            f"{len(logit_groups)} logit groups for a {len(valid.arities)}-component tree"
        )

    fixed = _masks_for_mode(logit_groups, valid, mode)
    selections: list[int] = []
    masks: list[Mask] = []
    log_probs = np.empty(len(logit_groups))
    entropies = np.empty(len(logit_groups))

    for k, logits in enumerate(logit_groups):
        mask = fixed[k] if fixed is not None else derive_mask(valid, selections)
        dist = MaskedCategorical(logits, mask)
        value, lp = dist.sample(rng)
        selections.append(value)
        masks.append(mask)
        log_probs[k] = lp
        entropies[k] = dist.entropy()

    return FactoredSample(
        path=TreePath(tuple(selections), tuple(masks)),
        log_probs=log_probs,
        entropies=entropies,
    )


def log_prob_of(selections: Sequence[int], logit_groups: Sequence[np.ndarray],
                masks: Sequence[Mask]) -> np.ndarray:
    """Per-component log-probabilities of stored selections under stored masks.

    This is the replay path for importance ratios: the masks are the ones
    recorded at behaviour time, the logits are whatever policy is being
    evaluated now.  A selection outside its stored mask means the trajectory
    is corrupt and raises.
    """
    if not len(selections) == len(logit_groups) == len(masks):
        raise TreeError("selections, logit groups, and masks must have equal length")
    out = np.empty(len(selections))
    for k, (sel, logits, mask) in enumerate(zip(selections, logit_groups, masks)):
        if not mask.allows(sel):
            raise TreeError(
                f"corrupt trajectory: selection {sel} at component {k} "
                f"is outside its stored mask"
            )
        out[k] = MaskedCategorical(logits, mask).log_prob(sel)
    return out


def entropy_of(logit_groups: Sequence[np.ndarray], masks: Sequence[Mask]) -> np.ndarray:
    """Per-component entropies under the given masks."""
    if len(logit_groups) != len(masks):
        raise TreeError("logit groups and masks must have equal length")
    return np.array([
        MaskedCategorical(l, m).entropy() for l, m in zip(logit_groups, masks)
    ])


def masked_log_probs_batch(logits: np.ndarray, masks: np.ndarray,
                           selections: np.ndarray) -> np.ndarray:
    """Row-wise masked log-probabilities of one component over a batch.

    `logits` and `masks` are (N, arity); `selections` is (N,).  Matches
    :class:`MaskedCategorical` row by row (up to summation rounding) but
    runs vectorised; used on the learner's replay path.
    """
    logits = np.asarray(logits, dtype=np.float64)
    masks = np.asarray(masks)
    if logits.shape != masks.shape or logits.ndim != 2:
        raise TreeError(f"logits {logits.shape} and masks {masks.shape} must both be (N, arity)")
    rows = np.arange(logits.shape[0])
    if not np.all(masks[rows, selections] == 1):
        bad = int(np.argmin(masks[rows, selections]))
        raise TreeError(
            f"corrupt trajectory: row {bad} selection {selections[bad]} is outside its mask"
        )
    allowed = masks == 1
    neg_inf = np.full_like(logits, -np.inf)
    shifted = np.where(allowed, logits, neg_inf)
    mx = shifted.max(axis=1, keepdims=True)
    z = np.where(allowed, np.exp(shifted - mx), 0.0).sum(axis=1)
    return logits[rows, selections] - mx[:, 0] - np.log(z)

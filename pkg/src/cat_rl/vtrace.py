"""Off-policy value targets and losses for factored masked policies.

The value target follows the standard truncated-importance-sampling
recursion

    v_t = V(s_t) + delta_t + gamma_t * u_t * (v_{t+1} - V(s_{t+1}))
    delta_t = rho_t * (r_t + gamma_t * V(s_{t+1}) - V(s_t))

which is the backward-recursive form of the n-step corrected target (the
double sum over future TD terms weighted by products of u).  With a
multi-component action, each component carries its own truncated ratio
rho_k = min(rho_clip, pi_k / mu_k); the recursion uses the joint ratio
(product of per-component ratios, re-truncated at the clip), while the
policy-gradient term keeps the per-component rho_k exactly.

Terminal steps zero gamma at the boundary instead of truncating unrolls,
so fixed-length trajectories may span episode resets.

Targets are computed in float64 with no gradient; `losses` is the
differentiable part, evaluated with torch on whatever dtype the logits
carry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .masking import M_NEG
from .trees import TreeError

__all__ = [
    "VTraceConfig",
    "Trajectory",
    "ImportanceWeights",
    "VTraceOutput",
    "importance_weights",
    "vtrace_targets",
    "losses",
]


@dataclass
class VTraceConfig:
    gamma: float = 0.99
    rho_clip: float = 1.0
    u_clip: float = 1.0
    baseline_cost: float = 0.5
    entropy_cost: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.rho_clip < 0 or self.u_clip < 0:
            raise ValueError("clips must be nonnegative")
        if self.baseline_cost < 0 or self.entropy_cost < 0:
            raise ValueError("loss costs must be nonnegative")
        if self.rho_clip < self.u_clip:
            warnings.warn(
                f"rho_clip ({self.rho_clip}) < u_clip ({self.u_clip}); "
                "the target-selection clip is usually at least the trace clip",
                stacklevel=2,
            )


@dataclass
class Trajectory:
    """Fixed-length unroll collected by one actor.

    observations has T+1 entries (the last one bootstraps the value);
    selections, behaviour log-probs and masks are per step and per
    component; masks[k] is a (T, arity_k) 0/1 array.  `terminals[t]` marks
    that the step ended its episode (the environment was reset inline, so
    observations[t + 1] already belongs to the next episode).
    """

    observations: np.ndarray            # (T+1, ...) observation stack
    selections: np.ndarray              # (T, K) int64
    behaviour_log_probs: np.ndarray     # (T, K) float64
    masks: list[np.ndarray]             # per component: (T, arity_k) uint8
    rewards: np.ndarray                 # (T,) float64
    terminals: np.ndarray               # (T,) bool
    bootstrap: bool = True
    snapshot_version: int = 0

    def __post_init__(self):
        t, k = self.selections.shape
        if self.observations.shape[0] != t + 1:
            raise TreeError(f"need {t + 1} observations for {t} steps, "
                            f"got {self.observations.shape[0]}")
        if self.behaviour_log_probs.shape != (t, k):
            raise TreeError("behaviour log-prob shape mismatch")
        if self.rewards.shape != (t,) or self.terminals.shape != (t,):
            raise TreeError("reward/terminal length mismatch")
        if len(self.masks) != k:
            raise TreeError(f"expected {k} mask arrays, got {len(self.masks)}")
        if np.any(self.behaviour_log_probs > 1e-9):
            raise TreeError("behaviour log-probs must be <= 0")
        for ck, mask in enumerate(self.masks):
            if mask.shape[0] != t:
                raise TreeError(f"mask array for component {ck} has wrong length")
            chosen = mask[np.arange(t), self.selections[:, ck]]
            if not np.all(chosen == 1):
                bad = int(np.argmin(chosen))
                raise TreeError(
                    f"corrupt trajectory: step {bad} selection "
                    f"{self.selections[bad, ck]} of component {ck} is outside its mask"
                )

    @property
    def num_steps(self) -> int:
        return self.selections.shape[0]

    @property
    def num_components(self) -> int:
        return self.selections.shape[1]


@dataclass(frozen=True)
class ImportanceWeights:
    rho: np.ndarray            # (T, K) truncated target-selection ratios
    u: np.ndarray              # (T, K) truncated trace ratios
    clipped_fraction: np.ndarray   # (K,) share of steps whose rho hit the clip


def importance_weights(target_log_probs: np.ndarray, behaviour_log_probs: np.ndarray,
                       config: VTraceConfig) -> ImportanceWeights:
    """Per-component truncated ratios min(clip, pi_k / mu_k)."""
    target_log_probs = np.asarray(target_log_probs, dtype=np.float64)
    behaviour_log_probs = np.asarray(behaviour_log_probs, dtype=np.float64)
    if target_log_probs.shape != behaviour_log_probs.shape:
        raise TreeError("target/behaviour log-prob shapes differ")
    ratios = np.exp(target_log_probs - behaviour_log_probs)
    if not np.all(np.isfinite(ratios)):
        raise TreeError("non-finite importance ratios")
    rho = np.minimum(config.rho_clip, ratios)
    u = np.minimum(config.u_clip, ratios)
    clipped = (ratios > config.rho_clip).mean(axis=0)
    return ImportanceWeights(rho=rho, u=u, clipped_fraction=clipped)


@dataclass
class VTraceOutput:
    v_targets: np.ndarray       # (T,)
    pg_advantages: np.ndarray   # (T, K)
    clipped_fraction: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _joint(ratios: np.ndarray, clip: float) -> np.ndarray:
    """Product of per-component (already truncated) ratios, re-truncated."""
    return np.minimum(clip, ratios.prod(axis=1))


def vtrace_targets(values: np.ndarray, rewards: np.ndarray, terminals: np.ndarray,
                   weights: ImportanceWeights, config: VTraceConfig,
                   bootstrap: bool = True) -> VTraceOutput:
    """Value targets and per-component policy-gradient advantages.

    `values` has T+1 entries: V under the current parameters at every
    observation including the bootstrap one.  A terminal at step t zeroes
    gamma_t, cutting both the bootstrap into t and the trace past t.
    """
    values = np.asarray(values, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    t_steps = rewards.shape[0]
    if values.shape != (t_steps + 1,):
        raise TreeError(f"need {t_steps + 1} values for {t_steps} rewards")
    if weights.rho.shape[0] != t_steps:
        raise TreeError("importance weight length mismatch")

    v_next = values.copy()
    if not bootstrap:
        v_next[t_steps] = 0.0
    gammas = config.gamma * (~terminals)
    rho_joint = _joint(weights.rho, config.rho_clip)
    u_joint = _joint(weights.u, config.u_clip)

    v_targets = np.empty(t_steps)
    carry = v_next[t_steps]  # v_{t+1} for the step under construction
    for t in range(t_steps - 1, -1, -1):
        delta = rho_joint[t] * (rewards[t] + gammas[t] * v_next[t + 1] - values[t])
        v_t = values[t] + delta + gammas[t] * u_joint[t] * (carry - v_next[t + 1])
        v_targets[t] = v_t
        carry = v_t

    v_next_targets = np.append(v_targets[1:], v_next[t_steps])
    td = rewards + gammas * v_next_targets - values[:t_steps]
    pg_advantages = weights.rho * td[:, None]
    if not (np.all(np.isfinite(v_targets)) and np.all(np.isfinite(pg_advantages))):
        raise TreeError("non-finite v-trace outputs")
    return VTraceOutput(
        v_targets=v_targets,
        pg_advantages=pg_advantages,
        clipped_fraction=weights.clipped_fraction,
    )


def _masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Dense masked log-softmax: suppressed entries get M_NEG added, which
    underflows their probability to an exact zero."""
    shifted = logits + M_NEG * (1.0 - mask)
    return shifted - torch.logsumexp(shifted, dim=-1, keepdim=True)


def losses(logit_groups: Sequence[torch.Tensor], values: torch.Tensor,
           selections: np.ndarray, masks: Sequence[np.ndarray],
           vtrace_out: VTraceOutput, config: VTraceConfig,
           ) -> tuple[torch.Tensor, dict[str, float]]:
    """Scalar training loss from recomputed logits and frozen v-trace targets.

        loss = sum_k -adv_k . log pi(c_k | m_k, s)
             + baseline_cost * 0.5 * sum (v_t - V(s_t))^2
             - entropy_cost * sum_k H(pi_k)

    Masks are the behaviour-time ones, so gradients flow through exactly the
    distributions the actor sampled from.  Returns the loss plus detached
    per-term diagnostics (including mean per-component entropies).
    """
    dtype = values.dtype
    t_steps, k_comp = selections.shape
    device = values.device
    adv = torch.as_tensor(vtrace_out.pg_advantages, dtype=dtype, device=device)
    v_targets = torch.as_tensor(vtrace_out.v_targets, dtype=dtype, device=device)

    pg_loss = values.new_zeros(())
    entropy_sum = values.new_zeros(())
    entropy_means: list[float] = []
    rows = torch.arange(t_steps, device=device)
    for k in range(k_comp):
        logits = logit_groups[k]
        if logits.shape != (t_steps, int(masks[k].shape[1])):
            raise TreeError(
                f"logit group {k} has shape {tuple(logits.shape)}, "
                f"expected ({t_steps}, {masks[k].shape[1]})"
            )
        mask = torch.as_tensor(masks[k], dtype=dtype, device=device)
        sel = torch.as_tensor(selections[:, k], dtype=torch.long, device=device)
        if not torch.all(mask[rows, sel] > 0):
            raise TreeError(f"corrupt trajectory: component {k} has selections "
                            "outside their stored masks")
        logp = _masked_log_softmax(logits, mask)
        chosen = logp[rows, sel]
        pg_loss = pg_loss - (adv[:, k] * chosen).sum()
        p = torch.exp(logp) * mask
        ent = -(p * logp * mask).sum(dim=-1)
        entropy_sum = entropy_sum + ent.sum()
        entropy_means.append(float(ent.detach().mean()))

    baseline_loss = 0.5 * ((v_targets - values) ** 2).sum()
    total = pg_loss + config.baseline_cost * baseline_loss - config.entropy_cost * entropy_sum
    parts = {
        "policy_loss": float(pg_loss.detach()),
        "value_loss": float(baseline_loss.detach()),
        "entropy": float(entropy_sum.detach()),
        "entropy_per_component": entropy_means,
    }
    return total, parts

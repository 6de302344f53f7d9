"""Decoupled actor/learner training loop over the box-clustering game.

Actors roll out the behaviour policy (a recent parameter snapshot) and push
fixed-length trajectories into a bounded queue; the learner consumes
batches, recomputes log-probabilities under the stored masks, applies
v-trace corrected losses, and publishes fresh snapshots.  A single-threaded
synchronous mode interleaves one actor with the learner for bit-reproducible
runs (same seed, same metrics bytes).

Episode boundaries are handled inside unrolls: the environment resets
inline and the terminal flag tells the value recursion to zero gamma there.
"""

from __future__ import annotations

import json
import queue
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import nn as catnn
from .clusters import ClustersEnv, VariantId, build_depth2_flattening, load_level_text
from .masking import MaskingMode, masked_log_probs_batch, sample_factored
from .trees import ActionTree, Depth2Flattening, ValidActionTree, derive_mask
from .vtrace import (
    ImportanceWeights,
    Trajectory,
    VTraceConfig,
    VTraceOutput,
    importance_weights,
    losses,
    vtrace_targets,
)

__all__ = [
    "ExperimentConfig",
    "Snapshot",
    "SnapshotBus",
    "ActorOutput",
    "ActionSpaceView",
    "TrainResult",
    "run_actor",
    "run_learner",
    "run_synchronous",
    "run_threaded",
    "train",
]


@dataclass
class ExperimentConfig:
    variant: VariantId = VariantId.M
    masking: MaskingMode = MaskingMode.CONDITIONAL
    depth2: bool = False
    level: str = "0"
    seed: int = 1
    num_actors: int = 2
    unroll_length: int = 20
    batch_size: int = 16
    total_env_steps: int = 200_000
    sync: bool = False
    vtrace: VTraceConfig = field(default_factory=VTraceConfig)
    lr: float = 5e-4
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-5
    snapshot_interval: int = 1
    max_episode_steps: int = 512
    queue_capacity: int | None = None
    target_reward: float | None = None
    reward_window: int = 50
    out_dir: str | None = None
    archive_snapshots: bool = False
    keep_trajectories: bool = False

    def __post_init__(self):
        if self.unroll_length < 2:
            raise ValueError(f"unroll_length must be >= 2, got {self.unroll_length}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_actors < 1:
            raise ValueError(f"num_actors must be >= 1, got {self.num_actors}")
        if self.sync and self.num_actors != 1:
            raise ValueError("synchronous mode interleaves exactly one actor; "
                             f"num_actors={self.num_actors} is not allowed")
        if self.snapshot_interval < 1:
            raise ValueError("snapshot_interval must be >= 1")
        if self.reward_window < 1:
            raise ValueError("reward_window must be >= 1")

    @property
    def effective_queue_capacity(self) -> int:
        return self.queue_capacity or 4 * self.batch_size

    def to_flat_dict(self) -> dict[str, object]:
        flat: dict[str, object] = {
            "variant": self.variant.value,
            "masking": self.masking.value,
            "depth2": self.depth2,
            "level": self.level,
            "seed": self.seed,
            "num_actors": self.num_actors,
            "unroll_length": self.unroll_length,
            "batch_size": self.batch_size,
            "total_env_steps": self.total_env_steps,
            "sync": self.sync,
            "gamma": self.vtrace.gamma,
            "rho_clip": self.vtrace.rho_clip,
            "u_clip": self.vtrace.u_clip,
            "baseline_cost": self.vtrace.baseline_cost,
            "entropy_cost": self.vtrace.entropy_cost,
            "lr": self.lr,
            "rmsprop_decay": self.rmsprop_decay,
            "rmsprop_eps": self.rmsprop_eps,
            "snapshot_interval": self.snapshot_interval,
            "max_episode_steps": self.max_episode_steps,
            "queue_capacity": self.effective_queue_capacity,
            "target_reward": self.target_reward,
            "reward_window": self.reward_window,
            "out_dir": self.out_dir,
        }
        return flat


@dataclass(frozen=True)
class Snapshot:
    """Immutable parameter copy actors run with; versions only move forward."""

    version: int
    state: dict[str, torch.Tensor]


class SnapshotBus:
    """Single-writer, many-reader snapshot exchange."""

    def __init__(self, archive: bool = False):
        self._lock = threading.Lock()
        self._latest: Snapshot | None = None
        self._archive: dict[int, Snapshot] | None = {} if archive else None

    def publish(self, snapshot: Snapshot) -> None:
        with self._lock:
            if self._latest is not None and snapshot.version <= self._latest.version:
                raise ValueError("snapshot versions must increase")
            self._latest = snapshot
            if self._archive is not None:
                self._archive[snapshot.version] = snapshot

    def latest(self) -> Snapshot:
        with self._lock:
            if self._latest is None:
                raise RuntimeError("no snapshot published yet")
            return self._latest

    def archived(self, version: int) -> Snapshot:
        if self._archive is None:
            raise RuntimeError("snapshot archiving is disabled")
        with self._lock:
            return self._archive[version]


class ActionSpaceView:
    """The policy-facing action space: the variant tree, optionally flattened.

    Bridges between environment selections (full component tuples) and
    policy selections (flattened ones in depth-2 mode).
    """

    def __init__(self, env: ClustersEnv, depth2: bool):
        self.depth2 = depth2
        self.flattening: Depth2Flattening | None = None
        if depth2:
            self.flattening = build_depth2_flattening(env.variant, env.width, env.height)
            self.tree: ActionTree = self.flattening.tree
        else:
            self.tree = env.tree
        self.arities = self.tree.arities

    def policy_tree(self, env_tree: ValidActionTree) -> ValidActionTree:
        if self.flattening is None:
            return env_tree
        return self.flattening.flatten_valid(env_tree)

    def env_selections(self, policy_selections: Sequence[int]) -> tuple[int, ...]:
        if self.flattening is None:
            return tuple(policy_selections)
        return self.flattening.decode_path(policy_selections)


@dataclass
class ActorOutput:
    trajectory: Trajectory
    episodes: list[tuple[float, int]]   # (return, length) finished in this unroll


class _Rollout:
    """Rollout state for one environment: current observation, valid tree,
    and running episode accumulators."""

    def __init__(self, env: ClustersEnv, view: ActionSpaceView, mode: MaskingMode,
                 rng: np.random.Generator):
        self.env = env
        self.view = view
        self.mode = mode
        self.rng = rng
        self.ep_reward = 0.0
        self.ep_length = 0
        first = env.reset()
        if first.done:
            raise ValueError("level is terminal at reset; nothing to train on")
        self.obs = first.observation
        self.tree = view.policy_tree(first.valid_tree)

    def unroll(self, model: catnn.PolicyValueNet, length: int,
               snapshot_version: int) -> ActorOutput:
        view = self.view
        k_comp = len(view.arities)
        obs_stack = np.empty((length + 1,) + self.obs.shape, dtype=np.float32)
        selections = np.zeros((length, k_comp), dtype=np.int64)
        log_probs = np.zeros((length, k_comp), dtype=np.float64)
        masks = [np.zeros((length, a), dtype=np.uint8) for a in view.arities]
        rewards = np.zeros(length, dtype=np.float64)
        terminals = np.zeros(length, dtype=bool)
        episodes: list[tuple[float, int]] = []

        for t in range(length):
            obs_stack[t] = self.obs
            logit_groups, _ = model.act_logits(self.obs)
            sample = sample_factored(logit_groups, self.tree, self.mode, self.rng)
            if sample is None:
                # no valid action in this state: forced environment no-op
                result = self.env.step_noop()
                for k in range(k_comp):
                    masks[k][t, 0] = 1
            else:
                result = self.env.step(view.env_selections(sample.selections))
                selections[t] = sample.selections
                log_probs[t] = sample.log_probs
                for k, m in enumerate(sample.masks):
                    masks[k][t] = m.as_array()
            rewards[t] = result.reward
            terminals[t] = result.done
            self.ep_reward += result.reward
            self.ep_length += 1
            if result.done:
                episodes.append((self.ep_reward, self.ep_length))
                self.ep_reward = 0.0
                self.ep_length = 0
                result = self.env.reset()
            self.obs = result.observation
            self.tree = self.view.policy_tree(result.valid_tree)
        obs_stack[length] = self.obs

        trajectory = Trajectory(
            observations=obs_stack,
            selections=selections,
            behaviour_log_probs=log_probs,
            masks=masks,
            rewards=rewards,
            terminals=terminals,
            snapshot_version=snapshot_version,
        )
        return ActorOutput(trajectory=trajectory, episodes=episodes)


def _make_env(config: ExperimentConfig) -> ClustersEnv:
    text = load_level_text(config.level, config.variant)
    return ClustersEnv(text, config.variant, max_steps=config.max_episode_steps)


def _make_model(config: ExperimentConfig, view: ActionSpaceView,
                env: ClustersEnv, seed: int) -> catnn.PolicyValueNet:
    obs_shape = tuple(env.observe().shape)
    return catnn.PolicyValueNet(obs_shape, view.arities, seed=seed)


def run_actor(config: ExperimentConfig, bus: SnapshotBus, sink: "queue.Queue[ActorOutput]",
              rng: np.random.Generator, stop: threading.Event) -> None:
    """Actor thread body: refresh the snapshot, unroll, push, repeat."""
    env = _make_env(config)
    view = ActionSpaceView(env, config.depth2)
    model = _make_model(config, view, env, seed=0)
    version = -1
    rollout = _Rollout(env, view, config.masking, rng)
    while not stop.is_set():
        latest = bus.latest()
        if latest.version != version:
            model.load_state_dict(latest.state)
            version = latest.version
        out = rollout.unroll(model, config.unroll_length, snapshot_version=version)
        while not stop.is_set():
            try:
                sink.put(out, timeout=0.05)
                break
            except queue.Full:
                continue


class _MetricsWriter:
    """Append-only CSV + JSONL mirror with a variant-dependent header."""

    def __init__(self, num_components: int, out_dir: Path | None):
        self.columns = (
            ["env_steps", "updates", "episode_reward_mean", "episode_length_mean",
             "policy_loss", "value_loss"]
            + [f"entropy_c{k}" for k in range(num_components)]
            + ["clip_frac", "snapshot_lag"]
        )
        self.rows: list[dict[str, float]] = []
        self._csv = self._jsonl = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self._csv = open(out_dir / "metrics.csv", "w", encoding="utf-8")
            self._csv.write(",".join(self.columns) + "\n")
            self._jsonl = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")

    @staticmethod
    def _fmt(value: float) -> str:
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        return format(float(value), ".8g")

    def write(self, row: dict[str, float]) -> None:
        self.rows.append(row)
        if self._csv is not None:
            self._csv.write(",".join(self._fmt(row[c]) for c in self.columns) + "\n")
            self._csv.flush()
        if self._jsonl is not None:
            json.dump({c: row[c] for c in self.columns}, self._jsonl)
            self._jsonl.write("\n")
            self._jsonl.flush()

    def close(self) -> None:
        for fh in (self._csv, self._jsonl):
            if fh is not None:
                fh.close()


class Learner:
    """Owns the master model and performs v-trace updates on trajectory batches."""

    def __init__(self, config: ExperimentConfig, model: catnn.PolicyValueNet,
                 view: ActionSpaceView, bus: SnapshotBus, out_dir: Path | None):
        self.config = config
        self.model = model
        self.view = view
        self.bus = bus
        self.opt_state = catnn.RMSPropState(model)
        self.version = 0
        self.updates = 0
        self.env_steps = 0
        self.episode_rewards: deque[float] = deque(maxlen=config.reward_window)
        self.episode_lengths: deque[int] = deque(maxlen=config.reward_window)
        self.episodes_total = 0
        self.metrics = _MetricsWriter(len(view.arities), out_dir)
        self.trajectories: list[Trajectory] = []
        bus.publish(Snapshot(version=0, state=model.clone_state()))

    def consume(self, batch: list[ActorOutput]) -> dict[str, float]:
        config = self.config
        t_len = config.unroll_length
        k_comp = len(self.view.arities)
        b = len(batch)

        for out in batch:
            for reward, length in out.episodes:
                self.episode_rewards.append(reward)
                self.episode_lengths.append(length)
                self.episodes_total += 1
        if config.keep_trajectories:
            self.trajectories.extend(out.trajectory for out in batch)

        obs = np.concatenate([out.trajectory.observations for out in batch], axis=0)
        logit_groups, values = self.model.forward(obs)

        # rows are trajectory-major: trajectory i occupies i*(T+1) .. i*(T+1)+T
        step_rows = np.concatenate(
            [np.arange(t_len) + i * (t_len + 1) for i in range(b)])
        step_rows_t = torch.as_tensor(step_rows)

        selections = np.concatenate([out.trajectory.selections for out in batch], axis=0)
        behaviour_lp = np.concatenate(
            [out.trajectory.behaviour_log_probs for out in batch], axis=0)
        masks = [
            np.concatenate([out.trajectory.masks[k] for out in batch], axis=0)
            for k in range(k_comp)
        ]

        # ratios and targets are constants: float64, no gradients
        values_np = values.detach().numpy().astype(np.float64)
        target_lp = np.stack(
            [
                masked_log_probs_batch(
                    logit_groups[k].detach().numpy().astype(np.float64)[step_rows],
                    masks[k], selections[:, k])
                for k in range(k_comp)
            ],
            axis=1,
        )

        v_targets = np.empty(b * t_len)
        pg_adv = np.empty((b * t_len, k_comp))
        clip_fracs = np.empty((b, k_comp))
        lag = 0.0
        for i, out in enumerate(batch):
            tr = out.trajectory
            rows = slice(i * t_len, (i + 1) * t_len)
            weights = importance_weights(
                target_lp[rows], tr.behaviour_log_probs, config.vtrace)
            traj_values = values_np[i * (t_len + 1): (i + 1) * (t_len + 1)]
            vt = vtrace_targets(traj_values, tr.rewards, tr.terminals,
                                weights, config.vtrace, bootstrap=tr.bootstrap)
            v_targets[rows] = vt.v_targets
            pg_adv[rows] = vt.pg_advantages
            clip_fracs[i] = weights.clipped_fraction
            lag += self.version - tr.snapshot_version

        vtrace_out = VTraceOutput(
            v_targets=v_targets, pg_advantages=pg_adv,
            clipped_fraction=clip_fracs.mean(axis=0))
        step_logits = [logit_groups[k][step_rows_t] for k in range(k_comp)]
        total, parts = losses(step_logits, values[step_rows_t], selections, masks,
                              vtrace_out, config.vtrace)
        grads = catnn.backward(self.model, total)
        catnn.rmsprop_step(self.model, grads, self.opt_state,
                           lr=config.lr, decay=config.rmsprop_decay,
                           eps=config.rmsprop_eps)

        self.updates += 1
        self.env_steps += b * t_len
        if self.updates % config.snapshot_interval == 0:
            self.version += 1
            self.bus.publish(Snapshot(version=self.version, state=self.model.clone_state()))

        row: dict[str, float] = {
            "env_steps": self.env_steps,
            "updates": self.updates,
            "episode_reward_mean": float(np.mean(self.episode_rewards))
            if self.episode_rewards else 0.0,
            "episode_length_mean": float(np.mean(self.episode_lengths))
            if self.episode_lengths else 0.0,
            "policy_loss": parts["policy_loss"],
            "value_loss": parts["value_loss"],
            "clip_frac": float(clip_fracs.mean()),
            "snapshot_lag": lag / b,
        }
        for k, ent in enumerate(parts["entropy_per_component"]):
            row[f"entropy_c{k}"] = ent
        self.metrics.write(row)
        return row

    def reached_target(self) -> bool:
        target = self.config.target_reward
        if target is None or len(self.episode_rewards) < self.config.reward_window:
            return False
        return float(np.mean(self.episode_rewards)) >= target


@dataclass
class TrainResult:
    config: ExperimentConfig
    rows: list[dict[str, float]]
    env_steps: int
    updates: int
    episodes_total: int
    stopped_early: bool
    final_state: dict[str, torch.Tensor]
    trajectories: list[Trajectory] = field(default_factory=list)
    bus: SnapshotBus | None = None

    @property
    def final_reward_mean(self) -> float:
        return self.rows[-1]["episode_reward_mean"] if self.rows else 0.0


def _finalize(config: ExperimentConfig, learner: Learner, out_dir: Path | None,
              stopped_early: bool) -> TrainResult:
    learner.metrics.close()
    if out_dir is not None:
        tensors = dict(learner.model.clone_state())
        tensors.update(learner.opt_state.named_tensors())
        with open(out_dir / "checkpoint.ckpt", "wb") as fh:
            catnn.save_checkpoint(fh, tensors)
    return TrainResult(
        config=config,
        rows=learner.metrics.rows,
        env_steps=learner.env_steps,
        updates=learner.updates,
        episodes_total=learner.episodes_total,
        stopped_early=stopped_early,
        final_state=learner.model.clone_state(),
        trajectories=learner.trajectories,
        bus=learner.bus,
    )


def run_synchronous(config: ExperimentConfig) -> TrainResult:
    """One actor and the learner interleaved in a single thread.

    Fully deterministic for a fixed seed: same build, same metric bytes.
    """
    if not config.sync:
        config = replace(config, sync=True)
    torch.set_num_threads(1)
    out_dir = Path(config.out_dir) if config.out_dir else None

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    model_seed = int(seeds[0].generate_state(1)[0])
    env = _make_env(config)
    view = ActionSpaceView(env, config.depth2)
    model = _make_model(config, view, env, seed=model_seed)
    bus = SnapshotBus(archive=config.archive_snapshots)
    learner = Learner(config, model, view, bus, out_dir)
    rollout = _Rollout(env, view, config.masking, np.random.default_rng(seeds[1]))

    stopped_early = False
    while learner.env_steps < config.total_env_steps:
        batch = [
            rollout.unroll(model, config.unroll_length, snapshot_version=learner.version)
            for _ in range(config.batch_size)
        ]
        learner.consume(batch)
        if learner.reached_target():
            stopped_early = True
            break
    return _finalize(config, learner, out_dir, stopped_early)


def run_learner(config: ExperimentConfig, source: "queue.Queue[ActorOutput]",
                learner: Learner, stop: threading.Event) -> bool:
    """Consume batches until the step budget (or the reward target) is hit."""
    stopped_early = False
    while learner.env_steps < config.total_env_steps:
        batch: list[ActorOutput] = []
        while len(batch) < config.batch_size:
            try:
                batch.append(source.get(timeout=0.05))
            except queue.Empty:
                if stop.is_set():
                    return stopped_early
        learner.consume(batch)
        if learner.reached_target():
            stopped_early = True
            break
    return stopped_early


def run_threaded(config: ExperimentConfig) -> TrainResult:
    """num_actors actor threads feeding one learner through a bounded queue."""
    torch.set_num_threads(1)
    out_dir = Path(config.out_dir) if config.out_dir else None
    seeds = np.random.SeedSequence(config.seed).spawn(config.num_actors + 1)
    model_seed = int(seeds[0].generate_state(1)[0])

    env = _make_env(config)
    view = ActionSpaceView(env, config.depth2)
    model = _make_model(config, view, env, seed=model_seed)
    bus = SnapshotBus(archive=config.archive_snapshots)
    learner = Learner(config, model, view, bus, out_dir)

    sink: "queue.Queue[ActorOutput]" = queue.Queue(maxsize=config.effective_queue_capacity)
    stop = threading.Event()
    threads = [
        threading.Thread(
            target=run_actor,
            args=(config, bus, sink, np.random.default_rng(seeds[1 + i]), stop),
            name=f"actor-{i}",
            daemon=True,
        )
        for i in range(config.num_actors)
    ]
    for t in threads:
        t.start()
    try:
        stopped_early = run_learner(config, sink, learner, stop)
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=5.0)
    return _finalize(config, learner, out_dir, stopped_early)


def train(config: ExperimentConfig) -> TrainResult:
    return run_synchronous(config) if config.sync else run_threaded(config)


def evaluate(state: dict[str, torch.Tensor], config: ExperimentConfig,
             episodes: int, rng: np.random.Generator,
             greedy: bool = False) -> dict[str, float]:
    """Play full episodes with a fixed policy; returns reward/length means."""
    env = _make_env(config)
    view = ActionSpaceView(env, config.depth2)
    model = _make_model(config, view, env, seed=0)
    model.load_state_dict(state)

    rewards, lengths = [], []
    for _ in range(episodes):
        result = env.reset()
        ep_reward, ep_len = 0.0, 0
        while not result.done:
            logit_groups, _ = model.act_logits(result.observation)
            if greedy:
                # greedy conditional walk: argmax within each mask
                tree = view.policy_tree(result.valid_tree)
                if tree.is_empty:
                    result = env.step_noop()
                    ep_len += 1
                    continue
                prefix: list[int] = []
                for logits in logit_groups:
                    mask = derive_mask(tree, prefix)
                    allowed = np.array(mask.allowed_indices)
                    prefix.append(int(allowed[np.argmax(logits[allowed])]))
                result = env.step(view.env_selections(prefix))
            else:
                sample = sample_factored(
                    logit_groups, view.policy_tree(result.valid_tree),
                    config.masking, rng)
                if sample is None:
                    result = env.step_noop()
                    ep_len += 1
                    continue
                result = env.step(view.env_selections(sample.selections))
            ep_reward += result.reward
            ep_len += 1
        rewards.append(ep_reward)
        lengths.append(ep_len)
    return {
        "episodes": episodes,
        "reward_mean": float(np.mean(rewards)),
        "reward_min": float(np.min(rewards)),
        "reward_max": float(np.max(rewards)),
        "length_mean": float(np.mean(lengths)),
    }

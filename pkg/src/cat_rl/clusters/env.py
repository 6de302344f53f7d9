"""Game mechanics, per-state valid action trees, and observations.

Reward scheme: +1 each time a box is pushed against a fixed block of its
own colour (the box becomes a block); -1 and episode loss when the agent
or a box lands on spikes (the box is replaced by a broken box).  Converting
every box wins the episode.

Pushing resolution: a box moves one cell if its destination is floor
(spikes included -- legality is mechanics, not desirability); it converts
in place if the destination holds a same-colour block; anything else jams
the push.  Valid trees enumerate exactly the selections that have an
effect, so a jammed push is absent from them, and under no-masking it
resolves to a reward-free no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..trees import ActionTree, ValidActionTree
from .state import (
    CH_AGENT,
    Cell,
    GridState,
    LevelError,
    Status,
    load_level,
)
from .variants import DIRECTION_VECTORS, VariantId, build_action_tree

__all__ = ["StepResult", "EpisodeOver", "ClustersEnv"]

EGO_SIZE = 5
EGO_AGENT_POS = (4, 2)  # (row, col): center-bottom of the window

# facing -> forward vector (dx, dy); y grows downward
FACING_VECTORS = ((0, -1), (1, 0), (0, 1), (-1, 0))  # up, right, down, left

_BOX_COLOUR = {Cell.BOX_RED: 0, Cell.BOX_GREEN: 1, Cell.BOX_BLUE: 2}
_BLOCK_FOR_COLOUR = (Cell.BLOCK_RED, Cell.BLOCK_GREEN, Cell.BLOCK_BLUE)

# M-variant action values
ROTATE_LEFT, ROTATE_RIGHT, FORWARD = 0, 1, 2
# MP/MPS first-component value for plain movement
KIND_MOVE = 0


def _ego_offsets() -> tuple[np.ndarray, np.ndarray]:
    """Per-facing (dx, dy) world offsets for each ego-window cell.

    Window rows run from farthest-ahead (0) down to the agent's own row (4);
    window columns run left to right in the agent's frame.
    """
    offs_x = np.zeros((4, EGO_SIZE, EGO_SIZE), dtype=np.int64)
    offs_y = np.zeros((4, EGO_SIZE, EGO_SIZE), dtype=np.int64)
    for facing, (fx, fy) in enumerate(FACING_VECTORS):
        rx, ry = -fy, fx  # right-hand vector
        for wr in range(EGO_SIZE):
            ahead = EGO_AGENT_POS[0] - wr
            for wc in range(EGO_SIZE):
                lateral = wc - EGO_AGENT_POS[1]
                offs_x[facing, wr, wc] = ahead * fx + lateral * rx
                offs_y[facing, wr, wc] = ahead * fy + lateral * ry
    return offs_x, offs_y


_EGO_OFF_X, _EGO_OFF_Y = _ego_offsets()


class EpisodeOver(RuntimeError):
    """An action was applied to (or a tree requested from) a finished episode."""


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    valid_tree: ValidActionTree


class ClustersEnv:
    """One playable instance of the game under a fixed variant.

    The environment is deterministic after reset: identical states and
    selections always produce identical results.
    """

    def __init__(self, level_text: str, variant: VariantId, max_steps: int = 512):
        if max_steps < 1:
            raise LevelError(f"max_steps must be >= 1, got {max_steps}")
        self.variant = variant
        self.max_steps = max_steps
        self._template = load_level(level_text, variant)
        self.width = self._template.width
        self.height = self._template.height
        self.tree: ActionTree = build_action_tree(variant, self.width, self.height)
        self.state: GridState = self._template.copy()

    # -- lifecycle ---------------------------------------------------------

    def reset(self, rng: np.random.Generator | None = None) -> StepResult:
        """Restore the level's initial state.  `rng` is accepted for interface
        symmetry; the shipped levels are fixed layouts."""
        del rng
        self.state = self._template.copy()
        return StepResult(
            observation=self.observe(),
            reward=0.0,
            done=self.state.status is not Status.RUNNING,
            valid_tree=self._tree_or_empty(),
        )

    def step(self, selections: tuple[int, ...]) -> StepResult:
        """Apply one action given as full-tree component values.

        Any in-arity combination is accepted; combinations with no
        mechanical effect (possible under collapsed or disabled masking)
        are no-ops with reward 0.
        """
        state = self.state
        if state.status is not Status.RUNNING:
            raise EpisodeOver(f"episode already {state.status.value}; reset() first")
        selections = tuple(int(v) for v in selections)
        arities = self.tree.arities
        if len(selections) != len(arities):
            raise ValueError(f"expected {len(arities)} components, got {len(selections)}")
        for k, (v, a) in enumerate(zip(selections, arities)):
            if not 0 <= v < a:
                raise ValueError(f"component {k} value {v} out of range (arity {a})")

        reward = self._apply(selections)
        return self._finish_step(reward)

    def step_noop(self) -> StepResult:
        """Advance time without acting; used when no valid action exists."""
        if self.state.status is not Status.RUNNING:
            raise EpisodeOver(f"episode already {self.state.status.value}; reset() first")
        return self._finish_step(0.0)

    def _finish_step(self, reward: float) -> StepResult:
        state = self.state
        state.step_count += 1
        if state.status is Status.RUNNING and state.step_count >= self.max_steps:
            state.status = Status.LOST  # out of time
        return StepResult(
            observation=self.observe(),
            reward=reward,
            done=state.status is not Status.RUNNING,
            valid_tree=self._tree_or_empty(),
        )

    def _tree_or_empty(self) -> ValidActionTree:
        if self.state.status is not Status.RUNNING:
            return ValidActionTree({}, arities=self.tree.arities)
        return self.valid_action_tree()

    # -- mechanics ---------------------------------------------------------

    def _apply(self, sel: tuple[int, ...]) -> float:
        v = self.variant
        if v is VariantId.M:
            (action,) = sel
            if action == ROTATE_LEFT:
                self.state.agent_facing = (self.state.agent_facing - 1) % 4
                return 0.0
            if action == ROTATE_RIGHT:
                self.state.agent_facing = (self.state.agent_facing + 1) % 4
                return 0.0
            return self._agent_forward(can_push=True)

        if v in (VariantId.MP, VariantId.MPS):
            kind, param = sel
            if kind == KIND_MOVE:
                if param in (ROTATE_LEFT, ROTATE_RIGHT):
                    delta = -1 if param == ROTATE_LEFT else 1
                    self.state.agent_facing = (self.state.agent_facing + delta) % 4
                    return 0.0
                return self._agent_forward(can_push=False)
            # push branch; its single parameter shares index 0
            if param != 0:
                return 0.0
            want_colour = None if v is VariantId.MP else kind - 1
            return self._push_ahead(want_colour)

        if v is VariantId.MA:
            x, y, d = sel
            return self._move_box_at(x, y, d, want_colour=None)

        x, y, d, colour = sel
        return self._move_box_at(x, y, d, want_colour=colour)

    def _in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def _agent_forward(self, can_push: bool) -> float:
        state = self.state
        ax, ay = state.agent_pos
        fx, fy = FACING_VECTORS[state.agent_facing]
        nx, ny = ax + fx, ay + fy
        if not self._in_bounds(nx, ny):
            return 0.0
        dest = Cell(state.objects[ny, nx])
        if dest == Cell.EMPTY:
            state.agent_pos = (nx, ny)
            if state.spikes[ny, nx]:
                state.status = Status.LOST
                return -1.0
            return 0.0
        if can_push and dest in _BOX_COLOUR:
            reward, effect = self._push_box(nx, ny, fx, fy)
            if effect and state.objects[ny, nx] == Cell.EMPTY:
                # box vacated its cell (moved or broke); the agent follows
                state.agent_pos = (nx, ny)
            return reward
        return 0.0  # wall, block, unpushable box, or push disabled

    def _push_ahead(self, want_colour: int | None) -> float:
        state = self.state
        ax, ay = state.agent_pos
        fx, fy = FACING_VECTORS[state.agent_facing]
        bx, by = ax + fx, ay + fy
        if not self._in_bounds(bx, by):
            return 0.0
        cell = Cell(state.objects[by, bx])
        if cell not in _BOX_COLOUR:
            return 0.0
        if want_colour is not None and _BOX_COLOUR[cell] != want_colour:
            return 0.0
        reward, _ = self._push_box(bx, by, fx, fy)
        return reward

    def _move_box_at(self, x: int, y: int, d: int, want_colour: int | None) -> float:
        state = self.state
        cell = Cell(state.objects[y, x])
        if cell not in _BOX_COLOUR:
            return 0.0
        if want_colour is not None and _BOX_COLOUR[cell] != want_colour:
            return 0.0
        dx, dy = DIRECTION_VECTORS[d]
        reward, _ = self._push_box(x, y, dx, dy)
        return reward

    def _push_box(self, bx: int, by: int, dx: int, dy: int) -> tuple[float, bool]:
        """Push the box at (bx, by) one cell along (dx, dy).

        Returns (reward, had_effect).  Destination resolution: floor moves
        the box, spikes break it and lose the episode, a same-colour block
        converts the box in place and may win the episode; anything else
        jams (no effect).
        """
        state = self.state
        cell = Cell(state.objects[by, bx])
        colour = _BOX_COLOUR[cell]
        tx, ty = bx + dx, by + dy
        if not self._in_bounds(tx, ty):
            return 0.0, False
        target = Cell(state.objects[ty, tx])
        if target == Cell.EMPTY:
            state.objects[by, bx] = Cell.EMPTY
            if state.spikes[ty, tx]:
                state.objects[ty, tx] = Cell.BROKEN
                state.broken += 1
                state.status = Status.LOST
                return -1.0, True
            state.objects[ty, tx] = cell
            return 0.0, True
        if target == _BLOCK_FOR_COLOUR[colour]:
            state.objects[by, bx] = _BLOCK_FOR_COLOUR[colour]
            state.converted += 1
            if state.converted == state.initial_boxes:
                state.status = Status.WON
            return 1.0, True
        return 0.0, False

    def _box_pushable(self, bx: int, by: int, dx: int, dy: int) -> bool:
        """Whether pushing the box at (bx, by) along (dx, dy) has an effect."""
        state = self.state
        tx, ty = bx + dx, by + dy
        if not self._in_bounds(tx, ty):
            return False
        target = Cell(state.objects[ty, tx])
        if target == Cell.EMPTY:
            return True
        colour = _BOX_COLOUR[Cell(state.objects[by, bx])]
        return target == _BLOCK_FOR_COLOUR[colour]

    # -- valid trees -------------------------------------------------------

    def valid_action_tree(self) -> ValidActionTree:
        """Subtree of the static action tree with an effect in this state.

        Spike destinations are included: masks encode what is mechanically
        possible, not what is wise.
        """
        state = self.state
        if state.status is not Status.RUNNING:
            raise EpisodeOver(f"episode already {state.status.value}; no actions remain")
        v = self.variant

        if v is VariantId.M:
            root: dict = {ROTATE_LEFT: {}, ROTATE_RIGHT: {}}
            if self._forward_effect(can_push=True):
                root[FORWARD] = {}
            return ValidActionTree(root, arities=self.tree.arities)

        if v in (VariantId.MP, VariantId.MPS):
            move_params: dict = {ROTATE_LEFT: {}, ROTATE_RIGHT: {}}
            if self._forward_effect(can_push=False):
                move_params[FORWARD] = {}
            root = {KIND_MOVE: move_params}
            box_colour = self._pushable_box_ahead_colour()
            if box_colour is not None:
                kind = 1 if v is VariantId.MP else 1 + box_colour
                root[kind] = {0: {}}
            return ValidActionTree(root, arities=self.tree.arities)

        root = {}
        for by, bx in np.argwhere(np.isin(state.objects, tuple(_BOX_COLOUR))):
            bx, by = int(bx), int(by)
            dirs = {
                d: {} for d, (dx, dy) in enumerate(DIRECTION_VECTORS)
                if self._box_pushable(bx, by, dx, dy)
            }
            if not dirs:
                continue  # jammed boxes are not selectable
            if v is VariantId.MSA:
                colour = _BOX_COLOUR[Cell(state.objects[by, bx])]
                dirs = {d: {colour: {}} for d in dirs}
            root.setdefault(bx, {})[by] = dirs
        return ValidActionTree(root, arities=self.tree.arities)

    def _forward_effect(self, can_push: bool) -> bool:
        state = self.state
        ax, ay = state.agent_pos
        fx, fy = FACING_VECTORS[state.agent_facing]
        nx, ny = ax + fx, ay + fy
        if not self._in_bounds(nx, ny):
            return False
        dest = Cell(state.objects[ny, nx])
        if dest == Cell.EMPTY:
            return True
        if can_push and dest in _BOX_COLOUR:
            return self._box_pushable(nx, ny, fx, fy)
        return False

    def _pushable_box_ahead_colour(self) -> int | None:
        state = self.state
        ax, ay = state.agent_pos
        fx, fy = FACING_VECTORS[state.agent_facing]
        bx, by = ax + fx, ay + fy
        if not self._in_bounds(bx, by):
            return None
        cell = Cell(state.objects[by, bx])
        if cell not in _BOX_COLOUR or not self._box_pushable(bx, by, fx, fy):
            return None
        return _BOX_COLOUR[cell]

    # -- observations ------------------------------------------------------

    def observe(self) -> np.ndarray:
        """Egocentric (5, 5, 10) window, or the (width, height, 10) global grid."""
        state = self.state
        channels = state.channel_grid()
        if self.variant.global_observation:
            return np.ascontiguousarray(np.transpose(channels, (1, 0, 2)))

        ax, ay = state.agent_pos
        wx = ax + _EGO_OFF_X[state.agent_facing]
        wy = ay + _EGO_OFF_Y[state.agent_facing]
        inside = (wx >= 0) & (wx < self.width) & (wy >= 0) & (wy < self.height)
        obs = np.zeros((EGO_SIZE, EGO_SIZE, channels.shape[2]), dtype=np.float32)
        obs[inside] = channels[wy[inside], wx[inside]]
        # the agent channel is already set at the agent's own window cell
        assert obs[EGO_AGENT_POS[0], EGO_AGENT_POS[1], CH_AGENT] == 1.0
        return obs

"""Grid state and level parsing for the box-clustering game.

Levels are plain text, one glyph per cell:

    ``W`` wall, ``.`` floor, ``A`` agent, ``r``/``g``/``b`` coloured boxes,
    ``R``/``G``/``B`` coloured fixed blocks, ``s`` spikes.

The first line may be a comment starting with ``;``.  All rows must have
equal length and the border must be wall.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .variants import VariantId

__all__ = ["CHANNELS", "Cell", "Status", "GridState", "LevelError", "load_level"]

# observation channel order
CHANNELS = (
    "box_red", "box_green", "box_blue",
    "block_red", "block_green", "block_blue",
    "wall", "spikes", "agent", "broken_box",
)
CH_WALL = 6
CH_SPIKES = 7
CH_AGENT = 8
CH_BROKEN = 9


class Cell(enum.IntEnum):
    """Solid occupant of one grid cell.  Spikes live on a separate layer."""

    EMPTY = 0
    BOX_RED = 1
    BOX_GREEN = 2
    BOX_BLUE = 3
    BLOCK_RED = 4
    BLOCK_GREEN = 5
    BLOCK_BLUE = 6
    WALL = 7
    BROKEN = 8


BOX_CELLS = (Cell.BOX_RED, Cell.BOX_GREEN, Cell.BOX_BLUE)
BLOCK_CELLS = (Cell.BLOCK_RED, Cell.BLOCK_GREEN, Cell.BLOCK_BLUE)

_GLYPHS = {
    "W": (Cell.WALL, False),
    ".": (Cell.EMPTY, False),
    "s": (Cell.EMPTY, True),
    "r": (Cell.BOX_RED, False),
    "g": (Cell.BOX_GREEN, False),
    "b": (Cell.BOX_BLUE, False),
    "R": (Cell.BLOCK_RED, False),
    "G": (Cell.BLOCK_GREEN, False),
    "B": (Cell.BLOCK_BLUE, False),
}


class Status(enum.Enum):
    RUNNING = "running"
    WON = "won"
    LOST = "lost"


class LevelError(ValueError):
    """The level text violates the format or the variant's requirements."""


@dataclass
class GridState:
    """Full world state: solid objects, spike layer, agent pose, episode status."""

    width: int
    height: int
    objects: np.ndarray          # (height, width) of Cell codes
    spikes: np.ndarray           # (height, width) bool
    agent_pos: tuple[int, int] | None   # (x, y); None in avatar-less variants
    agent_facing: int | None            # direction index; None without avatar
    status: Status = Status.RUNNING
    step_count: int = 0
    initial_boxes: int = 0
    converted: int = 0
    broken: int = 0

    def copy(self) -> "GridState":
        return GridState(
            width=self.width,
            height=self.height,
            objects=self.objects.copy(),
            spikes=self.spikes.copy(),
            agent_pos=self.agent_pos,
            agent_facing=self.agent_facing,
            status=self.status,
            step_count=self.step_count,
            initial_boxes=self.initial_boxes,
            converted=self.converted,
            broken=self.broken,
        )

    @property
    def boxes_remaining(self) -> int:
        return int(np.isin(self.objects, BOX_CELLS).sum())

    def census(self) -> dict[str, int]:
        """Object counts by kind; useful for conservation checks."""
        obj = self.objects
        return {
            "boxes": int(np.isin(obj, BOX_CELLS).sum()),
            "blocks": int(np.isin(obj, BLOCK_CELLS).sum()),
            "walls": int((obj == Cell.WALL).sum()),
            "broken": int((obj == Cell.BROKEN).sum()),
            "spikes": int(self.spikes.sum()),
        }

    def channel_grid(self) -> np.ndarray:
        """Binary (height, width, 10) tensor over the observation channels."""
        ch = np.zeros((self.height, self.width, len(CHANNELS)), dtype=np.float32)
        obj = self.objects
        for i, code in enumerate(BOX_CELLS):
            ch[:, :, i] = obj == code
        for i, code in enumerate(BLOCK_CELLS):
            ch[:, :, 3 + i] = obj == code
        ch[:, :, CH_WALL] = obj == Cell.WALL
        ch[:, :, CH_SPIKES] = self.spikes
        ch[:, :, CH_BROKEN] = obj == Cell.BROKEN
        if self.agent_pos is not None:
            ax, ay = self.agent_pos
            ch[ay, ax, CH_AGENT] = 1.0
        return ch

    def to_text(self) -> str:
        """Render back to the level glyph format (agent facing not preserved)."""
        rev = {cell: glyph for glyph, (cell, spike) in _GLYPHS.items() if not spike}
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                cell = Cell(self.objects[y, x])
                if self.agent_pos == (x, y):
                    row.append("A")
                elif cell == Cell.EMPTY and self.spikes[y, x]:
                    row.append("s")
                elif cell == Cell.BROKEN:
                    row.append("x")
                else:
                    row.append(rev[cell])
            rows.append("".join(row))
        return "\n".join(rows)


def load_level(text: str, variant: VariantId) -> GridState:
    """Parse level text into a fresh :class:`GridState` for `variant`.

    Avatar variants require exactly one ``A``; avatar-less variants require
    none.  A level with zero boxes is already won.
    """
    lines = text.splitlines()
    if lines and lines[0].startswith(";"):
        lines = lines[1:]
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise LevelError("level is empty")

    width = len(lines[0])
    height = len(lines)
    for y, ln in enumerate(lines):
        if len(ln) != width:
            raise LevelError(f"row {y} has length {len(ln)}, expected {width}")
    if width < 3 or height < 3:
        raise LevelError(f"level must be at least 3x3, got {width}x{height}")

    objects = np.zeros((height, width), dtype=np.int8)
    spikes = np.zeros((height, width), dtype=bool)
    agents: list[tuple[int, int]] = []
    for y, ln in enumerate(lines):
        for x, glyph in enumerate(ln):
            if glyph == "A":
                agents.append((x, y))
                continue
            if glyph not in _GLYPHS:
                raise LevelError(f"unknown glyph {glyph!r} at row {y}, column {x}")
            cell, spike = _GLYPHS[glyph]
            objects[y, x] = cell
            spikes[y, x] = spike

    for x in range(width):
        if objects[0, x] != Cell.WALL or objects[height - 1, x] != Cell.WALL:
            raise LevelError(f"border must be wall; column {x} is open")
    for y in range(height):
        if objects[y, 0] != Cell.WALL or objects[y, width - 1] != Cell.WALL:
            raise LevelError(f"border must be wall; row {y} is open")

    if variant.uses_avatar:
        if len(agents) != 1:
            raise LevelError(
                f"variant {variant.value!r} needs exactly one agent, found {len(agents)}"
            )
        agent_pos, agent_facing = agents[0], 0
    else:
        if agents:
            raise LevelError(f"variant {variant.value!r} is avatar-less but level has an agent")
        agent_pos, agent_facing = None, None

    state = GridState(
        width=width,
        height=height,
        objects=objects,
        spikes=spikes,
        agent_pos=agent_pos,
        agent_facing=agent_facing,
    )
    state.initial_boxes = state.boxes_remaining
    state.status = Status.WON if state.initial_boxes == 0 else Status.RUNNING
    return state

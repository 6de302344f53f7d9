"""The box-clustering grid game: levels, mechanics, valid action trees."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .env import ClustersEnv, EpisodeOver, StepResult
from .state import CHANNELS, Cell, GridState, LevelError, Status, load_level
from .variants import (
    VariantId,
    build_action_tree,
    build_depth2_flattening,
    depth2_groups,
)

__all__ = [
    "CHANNELS",
    "Cell",
    "ClustersEnv",
    "EpisodeOver",
    "GridState",
    "LevelError",
    "Status",
    "StepResult",
    "VariantId",
    "build_action_tree",
    "build_depth2_flattening",
    "depth2_groups",
    "load_level",
    "builtin_level_names",
    "load_level_text",
]

_NUMBERED = {str(i) for i in range(5)}


def builtin_level_names() -> list[str]:
    files = resources.files(__package__).joinpath("levels")
    return sorted(p.name[: -len(".lvl")] for p in files.iterdir() if p.name.endswith(".lvl"))


def load_level_text(level: str, variant: VariantId | None = None) -> str:
    """Fetch level text by builtin name, builtin id, or filesystem path.

    Numbered ids ("0".."4") resolve variant-sensitively: avatar-less
    variants get the agent-free twin of the level.
    """
    name = level
    if level in _NUMBERED:
        suffix = "" if variant is None or variant.uses_avatar else "_ma"
        name = f"clusters_{level}{suffix}"
    candidate = resources.files(__package__).joinpath("levels", f"{name}.lvl")
    if candidate.is_file():
        return candidate.read_text(encoding="utf-8")
    path = Path(level)
    if path.is_file():
        return path.read_text(encoding="utf-8")
    raise LevelError(
        f"no such level {level!r}: not a builtin ({', '.join(builtin_level_names())}) "
        f"and not a file"
    )

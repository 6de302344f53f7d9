"""The five action-space variants of the box-clustering game.

Mechanics, observations and rewards stay fixed; only the shape of the
action space changes:

* M    -- avatar with rotate-left / rotate-right / forward; forward pushes.
* MP   -- movement no longer pushes; a separate push action does.
* MPS  -- push is split per box colour.
* Ma   -- no avatar; a box is chosen by (x, y) and moved in a direction.
* MSa  -- like Ma plus a colour component that must match the chosen box.

Avatar variants observe an egocentric 5x5 window; avatar-less variants
observe the whole grid.
"""

from __future__ import annotations

import enum

from ..trees import ActionTree, ComponentSpec, Depth2Flattening, build_tree, flatten_to_depth2

__all__ = ["VariantId", "build_action_tree", "depth2_groups", "build_depth2_flattening"]

DIRECTION_LABELS = ("up", "down", "left", "right")
COLOUR_LABELS = ("red", "green", "blue")

# (dx, dy) per direction index; y grows downward
DIRECTION_VECTORS = ((0, -1), (0, 1), (-1, 0), (1, 0))


class VariantId(enum.Enum):
    M = "m"
    MP = "mp"
    MPS = "mps"
    MA = "ma"
    MSA = "msa"

    @classmethod
    def parse(cls, text: str) -> "VariantId":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(
                f"unknown variant {text!r}; expected one of {[v.value for v in cls]}"
            ) from None

    @property
    def uses_avatar(self) -> bool:
        return self in (VariantId.M, VariantId.MP, VariantId.MPS)

    @property
    def global_observation(self) -> bool:
        return not self.uses_avatar


def build_action_tree(variant: VariantId, width: int, height: int) -> ActionTree:
    """Static action tree for a variant on a width x height grid.

    For the avatar-less variants every (x, y, ...) combination is statically
    legal; which ones are *possible* in a given state is the valid tree's
    business, not this one's.
    """
    if variant is VariantId.M:
        comp = ComponentSpec("action", 3, ("rotate_left", "rotate_right", "forward"))
        return build_tree([comp], [(0,), (1,), (2,)])

    if variant is VariantId.MP:
        c0 = ComponentSpec("kind", 2, ("move", "push"))
        c1 = ComponentSpec("parameter", 3)
        # push takes a single parameter, sharing index 0
        return build_tree([c0, c1], [(0, 0), (0, 1), (0, 2), (1, 0)])

    if variant is VariantId.MPS:
        c0 = ComponentSpec("kind", 4, ("move", "push_red", "push_green", "push_blue"))
        c1 = ComponentSpec("parameter", 3)
        paths = [(0, 0), (0, 1), (0, 2), (1, 0), (2, 0), (3, 0)]
        return build_tree([c0, c1], paths)

    x = ComponentSpec("x", width)
    y = ComponentSpec("y", height)
    direction = ComponentSpec("direction", 4, DIRECTION_LABELS)
    if variant is VariantId.MA:
        paths = [(i, j, d) for i in range(width) for j in range(height) for d in range(4)]
        return build_tree([x, y, direction], paths)

    colour = ComponentSpec("colour", 3, COLOUR_LABELS)
    paths = [
        (i, j, d, c)
        for i in range(width)
        for j in range(height)
        for d in range(4)
        for c in range(3)
    ]
    return build_tree([x, y, direction, colour], paths)


def depth2_groups(variant: VariantId) -> tuple[tuple[int, ...], ...]:
    """Canonical component grouping for the depth-2 representation.

    x and y merge into one component; so do action type and parameter.
    """
    if variant is VariantId.M:
        return ((0,),)
    if variant in (VariantId.MP, VariantId.MPS):
        return ((0, 1),)
    if variant is VariantId.MA:
        return ((0, 1), (2,))
    return ((0, 1), (2, 3))


def build_depth2_flattening(variant: VariantId, width: int, height: int) -> Depth2Flattening:
    return flatten_to_depth2(build_action_tree(variant, width, height), depth2_groups(variant))

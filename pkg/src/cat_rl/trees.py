"""Tree-structured discrete action spaces.

An action is a fixed-length tuple of discrete components (c_0, ..., c_K).
The set of legal values for component k may depend on the values chosen for
components 0..k-1, which turns the action space into a tree: every
root-to-leaf path of the tree is one complete action.

Two tree flavours live here:

* :class:`ActionTree` -- the static space for a task.  It never changes and
  its per-component cardinalities determine the policy head widths.
* :class:`ValidActionTree` -- the subtree of actions that are mechanically
  possible in one particular environment state.  Environments emit one of
  these per step; masks over policy logits are read off its nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "TreeError",
    "TreeParseError",
    "ComponentSpec",
    "Mask",
    "TreePath",
    "ActionTree",
    "ValidActionTree",
    "Depth2Flattening",
    "build_tree",
    "count_logits",
    "flatten_to_depth2",
    "derive_mask",
    "collapse_masks",
    "serialize_valid_tree",
    "deserialize_valid_tree",
]


class TreeError(ValueError):
    """Structural problem with an action tree or a path through one."""


class TreeParseError(TreeError):
    """Malformed serialized tree; carries the offending position when known."""

    def __init__(self, message: str, pos: int | None = None):
        if pos is not None:
            message = f"{message} (at position {pos})"
        super().__init__(message)
        self.pos = pos


@dataclass(frozen=True)
class ComponentSpec:
    """One discrete action component: a name, a cardinality, and value labels."""

    name: str
    arity: int
    value_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.arity < 1:
            raise TreeError(f"component {self.name!r}: arity must be >= 1, got {self.arity}")
        labels = self.value_labels or tuple(str(i) for i in range(self.arity))
        if len(labels) != self.arity:
            raise TreeError(
                f"component {self.name!r}: {len(labels)} labels for arity {self.arity}"
            )
        if len(set(labels)) != len(labels):
            raise TreeError(f"component {self.name!r}: value labels must be unique")
        object.__setattr__(self, "value_labels", tuple(labels))


@dataclass(frozen=True)
class Mask:
    """Availability bits over one component's values at one tree node.

    bits[v] == 1 means value v may be selected.  A mask with no bit set is
    not a mask: a node that exists always has at least one child.
    """

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise TreeError(f"mask bits must be 0/1, got {self.bits}")
        if not any(self.bits):
            raise TreeError("mask must have at least one bit set")

    @classmethod
    def from_indices(cls, indices: Iterable[int], length: int) -> "Mask":
        bits = [0] * length
        for i in indices:
            if not 0 <= i < length:
                raise TreeError(f"mask index {i} out of range for length {length}")
            bits[i] = 1
        return cls(tuple(bits))

    @classmethod
    def all_ones(cls, length: int) -> "Mask":
        return cls((1,) * length)

    @classmethod
    def one_hot(cls, index: int, length: int) -> "Mask":
        return cls.from_indices([index], length)

    def __len__(self) -> int:
        return len(self.bits)

    def __or__(self, other: "Mask") -> "Mask":
        if len(other) != len(self):
            raise TreeError(f"mask length mismatch: {len(self)} vs {len(other)}")
        return Mask(tuple(a | b for a, b in zip(self.bits, other.bits)))

    def allows(self, value: int) -> bool:
        return 0 <= value < len(self.bits) and self.bits[value] == 1

    def implies(self, other: "Mask") -> bool:
        """True if every value this mask allows is also allowed by `other`."""
        return len(other) == len(self) and all(b <= o for b, o in zip(self.bits, other.bits))

    @property
    def allowed_indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int8)


@dataclass(frozen=True)
class TreePath:
    """A complete action: the selected values plus the masks they were drawn from."""

    selections: tuple[int, ...]
    masks_used: tuple[Mask, ...]

    def __post_init__(self):
        if len(self.selections) != len(self.masks_used):
            raise TreeError(
                f"{len(self.selections)} selections but {len(self.masks_used)} masks"
            )
        for k, (sel, mask) in enumerate(zip(self.selections, self.masks_used)):
            if not mask.allows(sel):
                raise TreeError(f"selection {sel} at depth {k} is masked out")


class ActionTree:
    """Static tree over action components; leaves are complete legal actions.

    Construct via :func:`build_tree`.  Immutable once built.
    """

    def __init__(self, components: Sequence[ComponentSpec],
                 children: dict[tuple[int, ...], tuple[int, ...]]):
        self.components = tuple(components)
        self._children = children

    @property
    def num_components(self) -> int:
        return len(self.components)

    @property
    def arities(self) -> tuple[int, ...]:
        return tuple(c.arity for c in self.components)

    def children_at(self, prefix: Sequence[int]) -> tuple[int, ...]:
        """Legal values of component len(prefix) beneath a partial selection."""
        key = tuple(prefix)
        if key not in self._children:
            raise TreeError(f"prefix {key} is not a path in the tree")
        return self._children[key]

    def contains_prefix(self, prefix: Sequence[int]) -> bool:
        prefix = tuple(prefix)
        return prefix in self._children or prefix in self._leaf_set

    def contains_path(self, path: Sequence[int]) -> bool:
        return tuple(path) in self._leaf_set

    @property
    def _leaf_set(self) -> frozenset[tuple[int, ...]]:
        cached = getattr(self, "_leaves_cache", None)
        if cached is None:
            cached = frozenset(self.leaves())
            self._leaves_cache = cached
        return cached

    def leaves(self) -> Iterator[tuple[int, ...]]:
        """Yield every legal action tuple, depth-first in value order."""
        stack: list[tuple[int, ...]] = [()]
        while stack:
            prefix = stack.pop()
            if len(prefix) == self.num_components:
                yield prefix
                continue
            for v in reversed(self._children[prefix]):
                stack.append(prefix + (v,))

    @property
    def num_leaves(self) -> int:
        return len(self._leaf_set)

    def full_valid_tree(self) -> "ValidActionTree":
        """The valid tree in a state where nothing is invalid."""

        def grow(prefix: tuple[int, ...]) -> dict:
            if len(prefix) == self.num_components:
                return {}
            return {v: grow(prefix + (v,)) for v in self._children[prefix]}

        return ValidActionTree(grow(()), arities=self.arities)


def build_tree(components: Sequence[ComponentSpec],
               legal_paths: Iterable[Sequence[int]]) -> ActionTree:
    """Build an :class:`ActionTree` from its component specs and legal actions.

    Duplicate paths are deduplicated.  Rejects an empty component list, paths
    of the wrong length, and values outside a component's arity.
    """
    components = tuple(components)
    if not components:
        raise TreeError("action tree needs at least one component")
    arities = [c.arity for c in components]

    paths: set[tuple[int, ...]] = set()
    for p in legal_paths:
        p = tuple(int(v) for v in p)
        if len(p) != len(components):
            raise TreeError(
                f"path {p} has length {len(p)}, expected {len(components)}"
            )
        for k, v in enumerate(p):
            if not 0 <= v < arities[k]:
                raise TreeError(
                    f"path {p}: value {v} out of range for component "
                    f"{components[k].name!r} (arity {arities[k]})"
                )
        paths.add(p)
    if not paths:
        raise TreeError("action tree needs at least one legal path")

    children: dict[tuple[int, ...], set[int]] = {}
    for p in paths:
        for k in range(len(components)):
            children.setdefault(p[:k], set()).add(p[k])
    frozen = {prefix: tuple(sorted(vals)) for prefix, vals in children.items()}
    return ActionTree(components, frozen)


def count_logits(tree: ActionTree) -> tuple[list[int], int]:
    """Per-component cardinalities and their sum (the policy head width)."""
    arities = list(tree.arities)
    return arities, sum(arities)


class ValidActionTree:
    """Per-state subtree of an action tree.

    `root` is a nested dict: each node maps an available component value to
    its child node; leaves are empty dicts.  An empty root means no action is
    possible in this state.  `arities` (per-depth cardinalities of the full
    tree) are carried along so masks of the right width can be derived; they
    may be None for trees deserialized without context.
    """

    def __init__(self, root: dict, arities: tuple[int, ...] | None = None):
        self.root = root
        self.arities = tuple(arities) if arities is not None else None
        self._depth = self._validate(root)

    def _validate(self, root: dict) -> int | None:
        depths: set[int] = set()

        def walk(node: dict, depth: int) -> None:
            if not isinstance(node, dict):
                raise TreeError(f"node at depth {depth} is not a mapping: {node!r}")
            if not node:
                depths.add(depth)
                return
            for value, child in node.items():
                if not isinstance(value, int) or value < 0:
                    raise TreeError(f"child key must be a nonnegative int, got {value!r}")
                if self.arities is not None:
                    if depth >= len(self.arities):
                        raise TreeError(f"tree deeper than its {len(self.arities)} components")
                    if value >= self.arities[depth]:
                        raise TreeError(
                            f"value {value} at depth {depth} exceeds arity {self.arities[depth]}"
                        )
                walk(child, depth + 1)

        walk(root, 0)
        if not root:
            return None
        if len(depths) != 1:
            raise TreeError(f"leaves at unequal depths {sorted(depths)}: actions must be complete")
        depth = depths.pop()
        if self.arities is not None and depth != len(self.arities):
            raise TreeError(f"leaf depth {depth} != component count {len(self.arities)}")
        return depth

    @property
    def is_empty(self) -> bool:
        return not self.root

    @property
    def depth(self) -> int | None:
        """Number of components in every path, or None for an empty tree."""
        return self._depth

    def node_at(self, prefix: Sequence[int]) -> dict:
        node = self.root
        for k, v in enumerate(prefix):
            if v not in node:
                raise TreeError(f"prefix {tuple(prefix)} leaves the tree at depth {k}")
            node = node[v]
        return node

    def has_prefix(self, prefix: Sequence[int]) -> bool:
        node = self.root
        for v in prefix:
            if v not in node:
                return False
            node = node[v]
        return True

    def children(self, prefix: Sequence[int]) -> tuple[int, ...]:
        return tuple(sorted(self.node_at(prefix).keys()))

    def paths(self) -> Iterator[tuple[int, ...]]:
        def walk(node: dict, prefix: tuple[int, ...]) -> Iterator[tuple[int, ...]]:
            if not node:
                yield prefix
                return
            for v in sorted(node):
                yield from walk(node[v], prefix + (v,))

        if self.root:
            yield from walk(self.root, ())

    def num_paths(self) -> int:
        return sum(1 for _ in self.paths())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ValidActionTree):
            return NotImplemented
        return self.root == other.root

    def __hash__(self):
        raise TypeError("ValidActionTree is not hashable")

    def __repr__(self):
        return f"ValidActionTree({serialize_valid_tree(self)})"


def derive_mask(valid: ValidActionTree, path_prefix: Sequence[int]) -> Mask:
    """Mask over the next component's values beneath `path_prefix`.

    Bit v is set iff path_prefix + (v,) is a prefix of some valid action.
    """
    if valid.arities is None:
        raise TreeError("valid tree carries no arities; cannot size the mask")
    prefix = tuple(path_prefix)
    node = valid.node_at(prefix)
    depth = len(prefix)
    if depth >= len(valid.arities):
        raise TreeError(f"prefix {prefix} already names a complete action")
    return Mask.from_indices(node.keys(), valid.arities[depth])


def collapse_masks(valid: ValidActionTree) -> list[Mask]:
    """Breadth-wise union of masks: one mask per depth, fused across prefixes.

    The depth-k mask ORs together the child sets of every depth-k node, so it
    no longer depends on what was selected above.  Never more restrictive
    than any per-prefix mask.
    """
    if valid.is_empty:
        raise TreeError("cannot collapse an empty valid tree")
    if valid.arities is None:
        raise TreeError("valid tree carries no arities; cannot size the masks")

    union: list[set[int]] = [set() for _ in valid.arities]

    def walk(node: dict, depth: int) -> None:
        if not node:
            return
        union[depth].update(node.keys())
        for child in node.values():
            walk(child, depth + 1)

    walk(valid.root, 0)
    return [Mask.from_indices(vals, arity) for vals, arity in zip(union, valid.arities)]


def serialize_valid_tree(valid: ValidActionTree) -> str:
    """Wire format: nested JSON objects, child indices as decimal string keys."""

    def to_jsonable(node: dict) -> dict:
        return {str(v): to_jsonable(child) for v, child in sorted(node.items())}

    return json.dumps(to_jsonable(valid.root), separators=(",", ":"))


def deserialize_valid_tree(text: str, arities: Sequence[int] | None = None) -> ValidActionTree:
    """Parse the JSON wire format back into a :class:`ValidActionTree`.

    Duplicate keys within one object are rejected, as are non-numeric keys
    and non-object values.
    """

    def pairs_hook(pairs):
        seen = {}
        for key, value in pairs:
            if key in seen:
                raise TreeParseError(f"duplicate child index {key!r} in one node")
            seen[key] = value
        return seen

    try:
        raw = json.loads(text, object_pairs_hook=pairs_hook)
    except json.JSONDecodeError as e:
        raise TreeParseError(f"invalid JSON: {e.msg}", pos=e.pos) from e

    def convert(node, path: str) -> dict:
        if not isinstance(node, dict):
            raise TreeParseError(f"expected an object at {path or 'root'}, got {node!r}")
        out = {}
        for key, child in node.items():
            if not key.isdigit():
                raise TreeParseError(f"child index {key!r} at {path or 'root'} is not decimal")
            out[int(key)] = convert(child, f"{path}/{key}")
        return out

    return ValidActionTree(convert(raw, ""), arities=tuple(arities) if arities else None)


@dataclass(frozen=True)
class Depth2Flattening:
    """Result of merging a tree's components into at most two groups.

    Each group becomes one component whose values enumerate the group's legal
    value combinations, ordered by their row-major mixed-radix code.  The
    mapping is invertible: `decode_path` recovers the original tuples.
    """

    source_arities: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    tree: ActionTree
    # per group: dense index -> original sub-tuple, and its inverse
    _decode: tuple[tuple[tuple[int, ...], ...], ...] = field(repr=False)
    _encode: tuple[dict[tuple[int, ...], int], ...] = field(repr=False)

    def encode_path(self, selections: Sequence[int]) -> tuple[int, ...]:
        selections = tuple(selections)
        if len(selections) != len(self.source_arities):
            raise TreeError(
                f"path length {len(selections)} != {len(self.source_arities)} components"
            )
        out = []
        for g, table in zip(self.groups, self._encode):
            sub = tuple(selections[i] for i in g)
            if sub not in table:
                raise TreeError(f"sub-selection {sub} for group {g} is not a legal combination")
            out.append(table[sub])
        return tuple(out)

    def decode_path(self, flat_selections: Sequence[int]) -> tuple[int, ...]:
        flat_selections = tuple(flat_selections)
        if len(flat_selections) != len(self.groups):
            raise TreeError(f"expected {len(self.groups)} flat selections")
        out: list[int] = [0] * len(self.source_arities)
        for g, table, v in zip(self.groups, self._decode, flat_selections):
            if not 0 <= v < len(table):
                raise TreeError(f"flat value {v} out of range for group {g}")
            for i, orig in zip(g, table[v]):
                out[i] = orig
        return tuple(out)

    def flatten_valid(self, valid: ValidActionTree) -> ValidActionTree:
        """Image of a per-state valid tree under the flattening."""
        root: dict = {}
        for path in valid.paths():
            node = root
            for v in self.encode_path(path):
                node = node.setdefault(v, {})
        return ValidActionTree(root, arities=self.tree.arities)


def flatten_to_depth2(tree: ActionTree,
                      groupings: Sequence[Sequence[int]]) -> Depth2Flattening:
    """Merge the tree's components into <= 2 ordered groups.

    `groupings` must partition 0..K in order with no gaps or overlaps.  Each
    group's values are its legal sub-combinations, ordered by row-major
    mixed-radix code over the member arities; the group arity is the number
    of such combinations (that is what the policy head must output).
    """
    groups = tuple(tuple(int(i) for i in g) for g in groupings)
    if not groups or len(groups) > 2:
        raise TreeError(f"need 1 or 2 groups, got {len(groups)}")
    flat_indices = [i for g in groups for i in g]
    if flat_indices != list(range(tree.num_components)):
        raise TreeError(
            f"groups {groups} must cover components 0..{tree.num_components - 1} "
            "in order without gaps or overlaps"
        )
    if any(not g for g in groups):
        raise TreeError("every group must be non-empty")

    arities = tree.arities
    leaves = sorted(tree.leaves())

    def radix_code(sub: tuple[int, ...], members: tuple[int, ...]) -> int:
        code = 0
        for pos, i in enumerate(members):
            code = code * arities[i] + sub[pos]
        return code

    decode_tables: list[tuple[tuple[int, ...], ...]] = []
    encode_tables: list[dict[tuple[int, ...], int]] = []
    for g in groups:
        subs = {tuple(leaf[i] for i in g) for leaf in leaves}
        ordered = sorted(subs, key=lambda s: radix_code(s, g))
        decode_tables.append(tuple(ordered))
        encode_tables.append({s: i for i, s in enumerate(ordered)})

    def group_name(g: tuple[int, ...]) -> str:
        return "+".join(tree.components[i].name for i in g)

    def group_labels(g: tuple[int, ...], table) -> tuple[str, ...]:
        labels = []
        for sub in table:
            parts = [tree.components[i].value_labels[v] for i, v in zip(g, sub)]
            labels.append("/".join(parts))
        return tuple(labels)

    flat_components = [
        ComponentSpec(group_name(g), len(table), group_labels(g, table))
        for g, table in zip(groups, decode_tables)
    ]
    flat_paths = {
        tuple(encode_tables[gi][tuple(leaf[i] for i in g)] for gi, g in enumerate(groups))
        for leaf in leaves
    }
    flat_tree = build_tree(flat_components, flat_paths)
    return Depth2Flattening(
        source_arities=arities,
        groups=groups,
        tree=flat_tree,
        _decode=tuple(decode_tables),
        _encode=tuple(encode_tables),
    )

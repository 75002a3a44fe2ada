"""Two-person skeleton topologies and their key-value file format.

A topology file holds ``key = value`` lines; ``#`` starts a comment.  Joint
ids in the file are 1-based and refer to one person; the second person
repeats the same layout.  Recognized keys::

    name, joints, persons, root, bones (``a-b`` pairs), arms, legs,
    excluded, source_order, correspondence
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid topology or run configuration."""


@dataclass(frozen=True)
class SkeletonTopology:
    """Per-person skeleton layout.  All indices are 0-based, per person."""

    joints: int
    bones: tuple
    root: int
    arms: tuple
    legs: tuple
    excluded: tuple = ()
    persons: int = 2
    name: str = "skeleton"
    source_order: tuple = ()
    correspondence: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        j = self.joints
        for a, b in self.bones:
            if not (0 <= a < j and 0 <= b < j) or a == b:
                raise ConfigError(f"bad bone ({a + 1}, {b + 1}) for {j} joints")
        if len(self.bones) != j - 1 or len(set(map(frozenset, self.bones))) != j - 1:
            raise ConfigError("bones must form a tree (joints - 1 distinct bones)")
        if not 0 <= self.root < j:
            raise ConfigError("root joint out of range")
        if np.any(self.root_distance < 0):
            raise ConfigError("bones do not connect every joint to the root")
        groups = [set(self.arms), set(self.legs), set(self.excluded)]
        for g in groups:
            if any(not 0 <= x < j for x in g):
                raise ConfigError("joint set refers to a joint out of range")
        if groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2]:
            raise ConfigError("arm, leg and excluded joint sets must be disjoint")
        if not self.arms or not self.legs:
            raise ConfigError("arm and leg joint sets must be non-empty")
        if self.source_order and sorted(self.source_order) != list(range(j)):
            raise ConfigError("source_order must be a permutation of the joints")

    @cached_property
    def root_distance(self) -> np.ndarray:
        """Number of bones between each joint and the root (-1 if unreachable)."""
        adj = {i: [] for i in range(self.joints)}
        for a, b in self.bones:
            adj[a].append(b)
            adj[b].append(a)
        dist = np.full(self.joints, -1)
        dist[self.root] = 0
        queue = deque([self.root])
        while queue:
            i = queue.popleft()
            for nb in adj[i]:
                if dist[nb] < 0:
                    dist[nb] = dist[i] + 1
                    queue.append(nb)
        return dist

    @property
    def total_joints(self):
        return self.joints * self.persons

    @cached_property
    def kept(self) -> np.ndarray:
        """Indices (into the full two-person layout) of joints used by the network."""
        per = [i for i in range(self.joints) if i not in set(self.excluded)]
        return np.array([p * self.joints + i for p in range(self.persons) for i in per])

    def _positions(self, joint_set):
        where = {g: i for i, g in enumerate(self.kept)}
        return np.array([where[p * self.joints + i]
                         for p in range(self.persons) for i in sorted(joint_set)])

    @cached_property
    def arm_positions(self):
        """Positions of both persons' arm joints among :attr:`kept`."""
        return self._positions(self.arms)

    @cached_property
    def leg_positions(self):
        return self._positions(self.legs)

    @cached_property
    def relations(self) -> np.ndarray:
        """Neighbour selectors of shape (3, K, K) over the kept joints.

        Slice 0 picks neighbours one bone closer to the root, slice 1 the
        joint itself, slice 2 neighbours one bone farther away.
        """
        kept = list(self.kept)
        where = {g: i for i, g in enumerate(kept)}
        rel = np.zeros((3, len(kept), len(kept)))
        rel[1] = np.eye(len(kept))
        dist = self.root_distance
        for p in range(self.persons):
            off = p * self.joints
            for a, b in self.bones:
                if off + a not in where or off + b not in where:
                    continue
                for i, nb in ((a, b), (b, a)):
                    row, col = where[off + i], where[off + nb]
                    if dist[nb] == dist[i] - 1:
                        rel[0, row, col] = 1
                    elif dist[nb] == dist[i] + 1:
                        rel[2, row, col] = 1
                    else:
                        raise ConfigError(
                            f"joints {i + 1} and {nb + 1} are neighbours at equal root distance")
        return rel


def _ints(text):
    text = text.strip()
    return tuple(int(x) for x in text.replace(",", " ").split()) if text else ()


def parse_topology(text: str) -> SkeletonTopology:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    try:
        joints = int(fields["joints"])
        bones = []
        for pair in fields["bones"].split(","):
            a, b = pair.strip().split("-")
            bones.append((int(a) - 1, int(b) - 1))
        return SkeletonTopology(
            joints=joints,
            bones=tuple(bones),
            root=int(fields["root"]) - 1,
            arms=tuple(i - 1 for i in _ints(fields["arms"])),
            legs=tuple(i - 1 for i in _ints(fields["legs"])),
            excluded=tuple(i - 1 for i in _ints(fields.get("excluded", ""))),
            persons=int(fields.get("persons", 2)),
            name=fields.get("name", "skeleton"),
            source_order=tuple(i - 1 for i in _ints(fields.get("source_order", ""))),
            correspondence=_ints(fields.get("correspondence", "")),
        )
    except KeyError as exc:
        raise ConfigError(f"topology is missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed topology: {exc}") from None


def format_topology(topo: SkeletonTopology) -> str:
    def ids(xs):
        return ", ".join(str(x + 1) for x in xs)

    lines = [
        f"name = {topo.name}",
        f"joints = {topo.joints}",
        f"persons = {topo.persons}",
        f"root = {topo.root + 1}",
        "bones = " + ", ".join(f"{a + 1}-{b + 1}" for a, b in topo.bones),
        f"arms = {ids(topo.arms)}",
        f"legs = {ids(topo.legs)}",
        f"excluded = {ids(topo.excluded)}",
    ]
    if topo.source_order:
        lines.append(f"source_order = {ids(topo.source_order)}")
    if topo.correspondence:
        lines.append("correspondence = " + ", ".join(map(str, topo.correspondence)))
    return "\n".join(lines) + "\n"


def load_topology(path) -> SkeletonTopology:
    return parse_topology(Path(path).read_text())


def builtin_topology(name: str) -> SkeletonTopology:
    """One of the topologies shipped with the package: ``sbu`` or ``ntu``."""
    data = resources.files("geomnet.topologies").joinpath(f"{name}.topo")
    if not data.is_file():
        raise ConfigError(f"no built-in topology named {name!r}")
    return parse_topology(data.read_text())


def toy_topology() -> SkeletonTopology:
    """Four joints per person: hip (root), spine, hand, foot."""
    return SkeletonTopology(joints=4, bones=((0, 1), (1, 2), (0, 3)), root=0,
                            arms=(1, 2), legs=(0, 3), name="toy")

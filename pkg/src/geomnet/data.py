"""Skeleton sequences: SBU loading, synthetic interactions, serialization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .topology import SkeletonTopology, builtin_topology

logger = logging.getLogger(__name__)

# Subject-pair folders of each cross-validation fold of the SBU dataset.
SBU_FOLDS = (
    ("s01s02", "s03s04", "s05s02", "s06s04"),
    ("s02s03", "s02s07", "s03s05", "s05s03"),
    ("s01s03", "s01s07", "s07s01", "s07s03"),
    ("s02s01", "s02s06", "s03s02", "s03s06"),
    ("s04s02", "s04s03", "s04s06", "s06s02", "s06s03"),
)


class ParseError(ValueError):
    pass


@dataclass
class SkeletonSequence:
    """Joint coordinates of shape (frames, persons * joints, 3)."""

    coords: np.ndarray
    label: int | None = None
    group: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 3 or self.coords.shape[-1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must have shape (frames, joints, 3), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates must be finite")

    @property
    def frames(self):
        return self.coords.shape[0]


@dataclass
class DatasetSplit:
    sequences: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return len(self.sequences)

    @property
    def labels(self):
        return np.array([s.label for s in self.sequences], dtype=int)

    def subset(self, groups, name=""):
        groups = set(groups)
        return DatasetSplit([s for s in self.sequences if s.group in groups], name)

    def check_labels(self, n_classes):
        bad = [s.label for s in self.sequences if s.label is None or not 0 <= s.label < n_classes]
        if bad:
            raise ValueError(f"labels out of range [0, {n_classes}): {sorted(set(map(str, bad)))}")


def normalize(seq: SkeletonSequence, topo: SkeletonTopology) -> SkeletonSequence:
    """Translate so the first person's root joint sits at the origin in frame 0."""
    origin = seq.coords[0, topo.root]
    return SkeletonSequence(seq.coords - origin, seq.label, seq.group)


# ------------------------------------------------------------------------ SBU


def read_sbu_file(path, topo: SkeletonTopology) -> np.ndarray:
    """Parse one ``skeleton_pos.txt``: one comma-separated line per frame.

    A line carries ``persons * joints * 3`` coordinates, optionally preceded by
    a frame index.
    """
    width = topo.total_joints * 3
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vals = [float(x) for x in line.split(",") if x.strip()]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if len(vals) == width + 1:
                vals = vals[1:]
            if len(vals) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} values, got {len(vals)}")
            frames.append(vals)
    if not frames:
        raise ParseError(f"{path}: no frames")
    coords = np.array(frames).reshape(len(frames), topo.total_joints, 3)
    if topo.source_order:
        order = np.array(topo.source_order)
        idx = np.concatenate([p * topo.joints + order for p in range(topo.persons)])
        coords = coords[:, idx]
    return coords


def load_sbu(path, topo: SkeletonTopology | None = None) -> DatasetSplit:
    """Load every ``<pair>/<class>/<take>/skeleton_pos.txt`` below ``path``.

    Class folders ``01``..``08`` become labels 0..7; the subject-pair folder
    name is kept as the sequence group for fold selection.
    """
    topo = topo or builtin_topology("sbu")
    root = Path(path)
    files = sorted(root.glob("**/skeleton_pos.txt"))
    if not files:
        logger.warning("no SBU sequences found under %s", root)
        return DatasetSplit([], name=str(root))
    seqs = []
    for f in files:
        rel = f.relative_to(root).parts
        if len(rel) < 4:
            raise ParseError(f"{f}: expected <pair>/<class>/<take>/skeleton_pos.txt")
        label = int(rel[-3]) - 1
        seqs.append(SkeletonSequence(read_sbu_file(f, topo), label, rel[-4]))
    return DatasetSplit(seqs, name=str(root))


def sbu_folds(split: DatasetSplit):
    """Yield ``(train, test)`` pairs for the five SBU folds."""
    for i, test_groups in enumerate(SBU_FOLDS):
        others = [g for j, f in enumerate(SBU_FOLDS) if j != i for g in f]
        yield split.subset(others, f"fold{i + 1}-train"), split.subset(test_groups, f"fold{i + 1}-test")


# ------------------------------------------------------------- serialization


def save_split(split: DatasetSplit, path):
    """Write one JSON record per line: label, frame count, joint count, flat coordinates."""
    with open(path, "w") as fh:
        for s in split.sequences:
            rec = {"label": s.label, "frames": s.frames, "joints": s.coords.shape[1],
                   "group": s.group, "coords": s.coords.reshape(-1).tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_split(path, name="") -> DatasetSplit:
    seqs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                coords = np.array(rec["coords"], dtype=float).reshape(rec["frames"], rec["joints"], 3)
            except (KeyError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            seqs.append(SkeletonSequence(coords, rec["label"], rec.get("group", "")))
    return DatasetSplit(seqs, name=name or str(path))


# ----------------------------------------------------------------- synthetic

# Rest pose of the 15-joint SBU skeleton in the person's own frame:
# (forward, up, left) in metres.
REST_POSE = np.array([
    [0.00, 1.65, 0.00],    # head
    [0.00, 1.45, 0.00],    # neck
    [0.00, 1.00, 0.00],    # torso
    [0.00, 1.45, 0.20],    # left shoulder
    [0.00, 1.15, 0.25],    # left elbow
    [0.00, 0.90, 0.25],    # left hand
    [0.00, 1.45, -0.20],   # right shoulder
    [0.00, 1.15, -0.25],   # right elbow
    [0.00, 0.90, -0.25],   # right hand
    [0.00, 0.95, 0.10],    # left hip
    [0.00, 0.50, 0.10],    # left knee
    [0.00, 0.05, 0.10],    # left foot
    [0.00, 0.95, -0.10],   # right hip
    [0.00, 0.50, -0.10],   # right knee
    [0.00, 0.05, -0.10],   # right foot
])
_ARM_CHAINS = ((3, (4, 5)), (6, (7, 8)))
_LEG_CHAINS = ((9, (10, 11)), (12, (13, 14)))


@dataclass(frozen=True)
class Archetype:
    """One interaction class.

    ``approach`` is how far the second person walks towards the first over
    the sequence (negative: walks away), ``sidestep`` how far it moves to its
    right, and ``lean_in`` how far the first person moves towards the second.
    Arms and legs swing in the sagittal plane with the given amplitudes
    (radians) and phases.
    """

    approach: float
    arm_amp: float = 1.0
    arm_phase: float = 0.0
    leg_amp: float = 0.4
    leg_phase: float = 0.0
    sidestep: float = 0.0
    lean_in: float = 0.0


def default_class_spec(n_classes=2):
    """Archetypes separated by at least 0.5 in :func:`trajectory_distance`.

    Two classes are an approach and a retreat; more classes take corners of
    the (approach, sidestep, lean-in) cube with distinct limb rhythms.
    """
    if n_classes == 2:
        return [Archetype(1.2, 1.2, 0.0, 0.4, 0.0),
                Archetype(-1.2, 1.2, np.pi, 0.4, np.pi)]
    if not 2 < n_classes <= 8:
        raise ValueError("default class spec supports 2..8 classes")
    out = []
    for i in range(n_classes):
        a, s_, l = (1.2 if (i >> b) & 1 == 0 else -1.2 for b in range(3))
        out.append(Archetype(a, 0.6 + 0.1 * i, i * np.pi / 4, 0.3 + 0.05 * i,
                             -i * np.pi / 4, sidestep=s_, lean_in=l))
    return out


def _swing(pose, chains, angle):
    c, s = np.cos(angle), np.sin(angle)
    out = pose.copy()
    for pivot, moving in chains:
        rel = pose[list(moving)] - pose[pivot]
        # rotate (forward, up) about the pivot; a positive angle lifts forward
        fwd = c * rel[:, 0] + s * -rel[:, 1]
        up = -s * -rel[:, 0] + c * rel[:, 1]
        out[list(moving), 0] = pose[pivot, 0] + fwd
        out[list(moving), 1] = pose[pivot, 1] + up
    return out


def archetype_trajectory(arch: Archetype, frames=20, gap=1.6):
    """Noise-free coordinates of shape (frames, 30, 3) for one archetype."""
    t = np.linspace(0.0, 1.0, frames)
    out = np.empty((frames, 30, 3))
    for f, tf in enumerate(t):
        people = []
        for person in range(2):
            shift = person * np.pi / 2
            pose = _swing(REST_POSE, _ARM_CHAINS,
                          arch.arm_amp * np.sin(2 * np.pi * tf + arch.arm_phase + shift))
            pose = _swing(pose, _LEG_CHAINS,
                          arch.leg_amp * np.sin(2 * np.pi * tf + arch.leg_phase + shift))
            world = np.empty_like(pose)
            if person == 0:
                world[:, 0] = pose[:, 0] + arch.lean_in * tf
                world[:, 2] = pose[:, 2]
            else:
                # faces the first person
                world[:, 0] = gap - arch.approach * tf - pose[:, 0]
                world[:, 2] = -pose[:, 2] - arch.sidestep * tf
            world[:, 1] = pose[:, 1]
            people.append(world)
        out[f] = np.concatenate(people)
    return out


def trajectory_distance(a, b):
    """Mean over frames and joints of the Euclidean joint displacement."""
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def generate_synthetic(class_spec, count, seed, sigma=0.02, frames=20) -> DatasetSplit:
    """Balanced two-person interaction sequences in the SBU joint layout.

    Sequence ``i`` belongs to class ``i % len(class_spec)``.  Each sequence
    gets Gaussian jitter of standard deviation ``sigma`` on every coordinate
    and a random horizontal offset of the whole scene.
    """
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(count):
        label = i % len(class_spec)
        coords = archetype_trajectory(class_spec[label], frames)
        coords = coords + rng.normal(scale=sigma, size=coords.shape) if sigma > 0 else coords
        offset = np.array([rng.uniform(-1, 1), 0.0, rng.uniform(-1, 1)])
        seqs.append(SkeletonSequence(coords + offset, label, f"synthetic-{i}"))
    return DatasetSplit(seqs, name=f"synthetic(seed={seed})")

"""Skeleton topologies, 2D/3D pose conventions, and the pose file codec.

Pose conventions used throughout the toolkit:

* ``Pose2D``: float array of shape (J, 2), dimensionless camera-tangent
  coordinates (x = X/Z). :func:`normalize_pose_2d` produces the canonical
  form with the root joint at the origin and unit mean joint distance.
* ``Pose3D``: float array of shape (J, 3) in camera frame, depth Z measured
  from the camera center.

Batches stack along a leading axis. All structures here are immutable after
construction and safe to share between workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CycleError,
    DegeneratePoseError,
    DuplicateEdgeError,
    FormatError,
    TopologyMismatchError,
)


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint tree and bone connectivity shared by every module.

    Attributes:
        name: Unique identifier (e.g. ``humanoid-9``).
        joint_names: Ordered list of J joint identifiers.
        parent: Parent index per joint; the root points at itself (or -1).
        edges: Ordered (i, j) joint pairs, one per bone.
        root: Index of the root joint (first joint by convention).
    """

    name: str
    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    root: int = 0

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def bone_count(self) -> int:
        return len(self.edges)

    def bone_index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Bone endpoints as two int arrays (starts, ends)."""
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        return e[:, 0], e[:, 1]


def _edges_from_parent(parent) -> tuple[tuple[int, int], ...]:
    return tuple(
        (int(p), int(j)) for j, p in enumerate(parent) if p != j and p >= 0
    )


def make_topology(name, joint_names, parent, edges=None, root=0) -> SkeletonTopology:
    """Build and validate a topology; edges default to the parent links."""
    parent = tuple(int(p) for p in parent)
    if edges is None:
        edges = _edges_from_parent(parent)
    topo = SkeletonTopology(
        name=name,
        joint_names=tuple(joint_names),
        parent=parent,
        edges=tuple((int(i), int(j)) for i, j in edges),
        root=int(root),
    )
    return validate_topology(topo)


def validate_topology(topology: SkeletonTopology) -> SkeletonTopology:
    """Check the topology invariants and return the topology unchanged.

    Raises:
        CycleError: parent links contain a cycle or do not reach the root.
        IndexError: an edge or parent references a joint index >= J.
        DuplicateEdgeError: duplicate or self-loop edge.
    """
    j = topology.joint_count
    if j <= 0:
        raise CycleError("topology has no joints")
    if len(topology.parent) != j:
        raise FormatError(
            f"parent list has {len(topology.parent)} entries for {j} joints"
        )
    if not (0 <= topology.root < j):
        raise IndexError(f"root index {topology.root} out of range for {j} joints")

    for child, par in enumerate(topology.parent):
        if par >= j:
            raise IndexError(f"parent[{child}]={par} references joint >= {j}")

    # Walk each joint to the root; a walk longer than J joints means a cycle.
    for start in range(j):
        seen = 0
        node = start
        while not (topology.parent[node] == node or topology.parent[node] < 0):
            node = topology.parent[node]
            seen += 1
            if seen > j:
                raise CycleError(f"parent links cycle starting from joint {start}")
        if node != topology.root:
            raise CycleError(
                f"joint {start} does not reach root {topology.root} "
                f"(terminates at {node})"
            )

    seen_edges = set()
    for i, k in topology.edges:
        if i == k:
            raise DuplicateEdgeError(f"self-loop edge ({i}, {k})")
        if not (0 <= i < j) or not (0 <= k < j):
            raise IndexError(f"edge ({i}, {k}) references joint >= {j}")
        key = (min(i, k), max(i, k))
        if key in seen_edges:
            raise DuplicateEdgeError(f"duplicate edge ({i}, {k})")
        seen_edges.add(key)
    return topology


# --- presets -----------------------------------------------------------------

_H17_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
)
_H17_PARENT = (0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

_H9_NAMES = (
    "pelvis", "spine", "head", "l_elbow", "l_hand", "r_elbow", "r_hand",
    "l_foot", "r_foot",
)
_H9_PARENT = (0, 0, 1, 1, 3, 1, 5, 0, 0)

_HAND_NAMES = ("wrist",) + tuple(
    f"{finger}_{part}"
    for finger in ("thumb", "index", "middle", "ring", "pinky")
    for part in ("mcp", "pip", "dip", "tip")
)
_HAND_PARENT = (0,) + tuple(
    0 if part == 0 else 4 * finger + part
    for finger in range(5)
    for part in range(4)
)


def topology_preset(name: str) -> SkeletonTopology:
    """Return one of the built-in presets: humanoid-17, humanoid-9, hand-21."""
    if name == "humanoid-17":
        return make_topology(name, _H17_NAMES, _H17_PARENT)
    if name == "humanoid-9":
        return make_topology(name, _H9_NAMES, _H9_PARENT)
    if name == "hand-21":
        return make_topology(name, _HAND_NAMES, _HAND_PARENT)
    raise KeyError(f"unknown topology preset {name!r}")


def load_topology(path) -> SkeletonTopology:
    """Load an arbitrary topology from a JSON descriptor.

    Format: ``{"name": str, "joints": [...], "parent": [...],
    "edges": [[i, j], ...], "root": int}`` with edges and root optional.
    """
    raw = json.loads(Path(path).read_text())
    return make_topology(
        name=raw.get("name", Path(path).stem),
        joint_names=raw["joints"],
        parent=raw["parent"],
        edges=raw.get("edges"),
        root=raw.get("root", 0),
    )


# --- normalization -------------------------------------------------------------

def normalize_pose_2d(pose, topology: SkeletonTopology) -> np.ndarray:
    """Canonicalize a 2D pose: root at the origin, unit mean joint distance.

    The scale divisor is the mean Euclidean distance of all J joints from the
    root (the root contributes distance zero). Idempotent, and invariant to
    input translation and positive uniform scaling.

    Raises:
        DegeneratePoseError: all joints coincide.
    """
    p = np.asarray(pose, dtype=np.float64)
    if p.shape != (topology.joint_count, 2):
        raise TopologyMismatchError(
            f"pose shape {p.shape} does not match topology "
            f"{topology.name} with {topology.joint_count} joints"
        )
    if not np.all(np.isfinite(p)):
        raise FormatError("pose contains non-finite values")
    centered = p - p[topology.root]
    mean_dist = float(np.mean(np.linalg.norm(centered, axis=1)))
    if mean_dist <= 0.0:
        raise DegeneratePoseError("all joints coincide; cannot normalize scale")
    return centered / mean_dist


# --- pose file codec -----------------------------------------------------------

@dataclass(frozen=True)
class PoseRecord:
    """One line of a pose file."""

    id: str
    p2d: np.ndarray
    p3d: np.ndarray | None = None
    topology: str = ""

    def __post_init__(self):
        object.__setattr__(self, "p2d", np.asarray(self.p2d, dtype=np.float64))
        if self.p3d is not None:
            object.__setattr__(self, "p3d", np.asarray(self.p3d, dtype=np.float64))


def pose_codec_write(path, records, topology: SkeletonTopology) -> None:
    """Write pose records as JSON lines.

    Each line carries ``{"topology", "p2d", "p3d", "id"}``; coordinates are
    serialized at full double precision so write-then-read is exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            if rec.p2d.shape != (topology.joint_count, 2):
                raise TopologyMismatchError(
                    f"record {rec.id!r} has {rec.p2d.shape[0]} joints, "
                    f"topology {topology.name} expects {topology.joint_count}"
                )
            if rec.p3d is not None and rec.p3d.shape != (topology.joint_count, 3):
                raise TopologyMismatchError(
                    f"record {rec.id!r} 3D pose shape {rec.p3d.shape} invalid "
                    f"for topology {topology.name}"
                )
            line = {
                "topology": topology.name,
                "p2d": [[float(x), float(y)] for x, y in rec.p2d],
                "p3d": None
                if rec.p3d is None
                else [[float(a), float(b), float(c)] for a, b, c in rec.p3d],
                "id": rec.id,
            }
            fh.write(json.dumps(line) + "\n")


def pose_codec_read(path, topology: SkeletonTopology) -> list[PoseRecord]:
    """Read a JSON-lines pose file written by :func:`pose_codec_write`.

    Raises:
        FormatError: malformed JSON, bad field counts, or non-numeric tokens;
            the message names the offending line number.
        TopologyMismatchError: a record disagrees with ``topology``.
    """
    records = []
    j = topology.joint_count
    with Path(path).open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if obj.get("topology") != topology.name:
                raise TopologyMismatchError(
                    f"line {lineno}: record topology {obj.get('topology')!r} "
                    f"!= expected {topology.name!r}"
                )
            p2d = obj.get("p2d")
            if not isinstance(p2d, list) or len(p2d) != j:
                raise TopologyMismatchError(
                    f"line {lineno}: p2d has {len(p2d) if isinstance(p2d, list) else '?'} "
                    f"joints, expected {j}"
                )
            try:
                p2d_arr = np.array(p2d, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise FormatError(f"line {lineno}: non-numeric p2d token") from exc
            if p2d_arr.shape != (j, 2):
                raise FormatError(f"line {lineno}: p2d entries must be [x, y] pairs")
            p3d = obj.get("p3d")
            p3d_arr = None
            if p3d is not None:
                if not isinstance(p3d, list) or len(p3d) != j:
                    raise TopologyMismatchError(
                        f"line {lineno}: p3d joint count != {j}"
                    )
                try:
                    p3d_arr = np.array(p3d, dtype=np.float64)
                except (TypeError, ValueError) as exc:
                    raise FormatError(f"line {lineno}: non-numeric p3d token") from exc
                if p3d_arr.shape != (j, 3):
                    raise FormatError(
                        f"line {lineno}: p3d entries must be [X, Y, Z] triples"
                    )
            records.append(
                PoseRecord(
                    id=str(obj.get("id", f"line-{lineno}")),
                    p2d=p2d_arr,
                    p3d=p3d_arr,
                    topology=topology.name,
                )
            )
    return records

"""Procedural articulated stick-figure world.

Generates the desk-scale training corpus: unlabeled images (skeleton renders
composited over procedural clutter), an unpaired 2D-pose prior drawn from
disjoint samples of the same pose distribution, and a held-out labeled test
split. Figures are posed by forward kinematics: each non-root joint hangs
off its parent at a canonical bone length in a direction parameterized by
two angles (polar from the figure's up axis, azimuth around it), sampled
uniformly within per-joint ranges. The whole figure is then spun by a global
azimuth (uniform on [-pi, pi]), tilted by a global elevation (normal), and
anchored with its root at depth delta on the optical axis, so every stored
2D pose is the exact perspective projection of its 3D pose and is
root-centered in tangent coordinates.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import DEFAULT_DELTA
from .errors import DatasetEmptyError, FormatError
from .renderer import RendererConfig, load_image_png, render, save_image_png
from .skeleton import PoseRecord, SkeletonTopology, pose_codec_read, pose_codec_write, topology_preset

# Synth poses live at camera-tangent scale (figure radius ~1.4 at depth 10),
# so the render frame covers [-0.3, 0.3] rather than the unit square.
SYNTH_POSE_EXTENT = 0.30
FIGURE_HEIGHT_MM = 1700.0


@dataclass(frozen=True)
class JointAngleRange:
    """Sampling box for one joint's direction: polar and azimuth bounds."""

    theta_min: float
    theta_max: float
    phi_min: float
    phi_max: float

    def __post_init__(self):
        if self.theta_min > self.theta_max or self.phi_min > self.phi_max:
            raise ValueError("angle range bounds out of order")


_H9_BONE_LENGTHS = {
    "spine": 0.9,
    "head": 0.5,
    "l_elbow": 0.55,
    "l_hand": 0.5,
    "r_elbow": 0.55,
    "r_hand": 0.5,
    "l_foot": 1.0,
    "r_foot": 1.0,
}

# Left limbs point to +x, right limbs to -x; phi stays inside (-pi, pi) so
# the inverse-kinematics angle recovery never wraps.
_H9_ANGLE_RANGES = {
    "spine": JointAngleRange(0.02, 0.30, -3.0, 3.0),
    "head": JointAngleRange(0.02, 0.45, -3.0, 3.0),
    "l_elbow": JointAngleRange(0.90, 2.00, 0.15, 1.45),
    "l_hand": JointAngleRange(0.50, 2.40, -0.40, 1.80),
    "r_elbow": JointAngleRange(0.90, 2.00, 1.70, 3.00),
    "r_hand": JointAngleRange(0.50, 2.40, 1.35, 3.10),
    "l_foot": JointAngleRange(2.55, 3.10, 0.15, 1.20),
    "r_foot": JointAngleRange(2.55, 3.10, 1.95, 2.95),
}


@dataclass(frozen=True)
class KinematicModel:
    """Canonical bone lengths, joint angle ranges, and global orientation law."""

    topology: SkeletonTopology
    bone_lengths: dict[str, float]
    angle_ranges: dict[str, JointAngleRange]
    global_azimuth_range: tuple[float, float] = (-np.pi, np.pi)
    global_elevation_mean: float = 0.12
    global_elevation_std: float = 0.06
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        for name, length in self.bone_lengths.items():
            if length <= 0:
                raise ValueError(f"bone length for {name} must be positive")

    @property
    def figure_height(self) -> float:
        up = self.bone_lengths["spine"] + self.bone_lengths["head"]
        down = max(self.bone_lengths["l_foot"], self.bone_lengths["r_foot"])
        return up + down

    @property
    def unit_scale_mm(self) -> float:
        """Millimeters per world unit, anchoring figure height to 1.7 m."""
        return FIGURE_HEIGHT_MM / self.figure_height


def default_kinematic_model() -> KinematicModel:
    return KinematicModel(
        topology=topology_preset("humanoid-9"),
        bone_lengths=dict(_H9_BONE_LENGTHS),
        angle_ranges=dict(_H9_ANGLE_RANGES),
    )


def _direction(theta, phi) -> np.ndarray:
    """Unit direction for polar angle theta from the up (-y) axis, azimuth phi."""
    st = np.sin(theta)
    return np.array([st * np.cos(phi), -np.cos(theta), st * np.sin(phi)])


def direction_to_angles(direction) -> tuple[float, float]:
    """Inverse of :func:`_direction` (the IK used by the range-check oracle)."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    theta = float(np.arccos(np.clip(-d[1], -1.0, 1.0)))
    phi = float(np.arctan2(d[2], d[0]))
    return theta, phi


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True)
class FigureDraw:
    """A sampled figure: its 3D pose plus the angles that produced it."""

    pose3d: np.ndarray
    joint_angles: dict[str, tuple[float, float]]
    global_azimuth: float
    global_elevation: float


def sample_figure(model: KinematicModel, rng: np.random.Generator) -> FigureDraw:
    """Draw joint angles and a global orientation; run forward kinematics."""
    topo = model.topology
    local = np.zeros((topo.joint_count, 3))
    angles = {}
    for j, name in enumerate(topo.joint_names):
        if j == topo.root:
            continue
        r = model.angle_ranges[name]
        theta = rng.uniform(r.theta_min, r.theta_max)
        phi = rng.uniform(r.phi_min, r.phi_max)
        angles[name] = (float(theta), float(phi))
        local[j] = local[topo.parent[j]] + model.bone_lengths[name] * _direction(
            theta, phi
        )
    azimuth = rng.uniform(*model.global_azimuth_range)
    elevation = rng.normal(model.global_elevation_mean, model.global_elevation_std)
    rotation = _rot_x(elevation) @ _rot_y(azimuth)
    pose = local @ rotation.T
    pose[:, 2] += model.delta  # root lands exactly on the optical axis at depth delta
    return FigureDraw(
        pose3d=pose,
        joint_angles=angles,
        global_azimuth=float(azimuth),
        global_elevation=float(elevation),
    )


def sample_pose3d(model: KinematicModel, rng: np.random.Generator) -> np.ndarray:
    """Sampled 3D pose with root at depth delta; bone lengths are canonical."""
    return sample_figure(model, rng).pose3d


def project_pose(pose3d: np.ndarray) -> np.ndarray:
    """Perspective projection to tangent coordinates (numpy convenience)."""
    p = np.asarray(pose3d, dtype=np.float64)
    return p[:, :2] / p[:, 2:3]


# --- clutter ---------------------------------------------------------------------

@dataclass(frozen=True)
class ClutterConfig:
    """Procedural background: gray ellipses plus Gaussian pixel noise."""

    ellipse_count: int = 3
    max_intensity: float = 0.5
    noise_amplitude: float = 0.06


def clutter_composite(
    skeleton_image: np.ndarray,
    rng: np.random.Generator,
    config: ClutterConfig = ClutterConfig(),
) -> np.ndarray:
    """Composite a clean skeleton render over clutter; output stays in [0, 1].

    With zero ellipses and zero noise the input is returned unchanged.
    """
    img = np.asarray(skeleton_image, dtype=np.float64)
    h, w = img.shape
    bg = np.zeros_like(img)
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(config.ellipse_count):
        cx = rng.uniform(0, w - 1)
        cy = rng.uniform(0, h - 1)
        a = rng.uniform(w / 16, w / 4)
        b = rng.uniform(h / 16, h / 4)
        angle = rng.uniform(0, np.pi)
        intensity = rng.uniform(0.15, config.max_intensity)
        dx, dy = xs - cx, ys - cy
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        bg = np.maximum(bg, intensity * mask)
    out = np.maximum(img, bg)
    if config.noise_amplitude > 0:
        out = out + config.noise_amplitude * rng.standard_normal(img.shape)
    return np.clip(out, 0.0, 1.0)


# --- dataset generation -------------------------------------------------------------

@dataclass(frozen=True)
class SplitCounts:
    train: int
    prior: int
    test: int
    val: int = 0


def synth_renderer_config(resolution: int = 64) -> RendererConfig:
    return RendererConfig(
        height=resolution, width=resolution, pose_extent=SYNTH_POSE_EXTENT
    )


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()[:16]


def generate_dataset(
    model: KinematicModel,
    counts: SplitCounts,
    renderer_config: RendererConfig,
    seed: int,
    out_dir,
    clutter: ClutterConfig = ClutterConfig(),
) -> dict:
    """Write a dataset directory and return its manifest.

    Layout::

        out_dir/
          manifest.json
          train/images/*.png          (unlabeled: no pose records exist)
          prior/poses.jsonl           (2D poses only)
          test/images/*.png + test/poses.jsonl   (2D + 3D ground truth)
          val/...                     (same as test; optional)

    Splits are disjoint by sample id and by the RNG streams that produced
    them; a fixed seed reproduces every byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    topo = model.topology
    split_names = ["train", "prior", "test", "val"]
    split_sizes = [counts.train, counts.prior, counts.test, counts.val]
    streams = np.random.SeedSequence(seed).spawn(len(split_names))

    manifest: dict = {
        "seed": seed,
        "topology": topo.name,
        "delta": model.delta,
        "unit_scale_mm": model.unit_scale_mm,
        "renderer": {
            "height": renderer_config.height,
            "width": renderer_config.width,
            "gamma": renderer_config.gamma,
            "pose_extent": renderer_config.pose_extent,
        },
        "clutter": {
            "ellipse_count": clutter.ellipse_count,
            "max_intensity": clutter.max_intensity,
            "noise_amplitude": clutter.noise_amplitude,
        },
        "splits": {},
    }
    manifest["config_hash"] = _config_hash(
        {k: manifest[k] for k in ("seed", "topology", "delta", "renderer", "clutter")}
    )

    for split, count, stream in zip(split_names, split_sizes, streams):
        if count <= 0:
            continue
        split_dir = out / split
        with_images = split in ("train", "test", "val")
        with_labels = split in ("test", "val")
        records = []
        if with_images:
            (split_dir / "images").mkdir(parents=True, exist_ok=True)
        child_seeds = stream.spawn(count)
        for i in range(count):
            rng = np.random.default_rng(child_seeds[i])
            draw = sample_figure(model, rng)
            p2d = project_pose(draw.pose3d)
            sample_id = f"{split}-{i:06d}"
            if with_images:
                clean = render(
                    torch.as_tensor(p2d, dtype=torch.float32), topo, renderer_config
                ).numpy()
                image = clutter_composite(clean, rng, clutter)
                save_image_png(image, split_dir / "images" / f"{sample_id}.png")
            if split == "prior":
                records.append(PoseRecord(id=sample_id, p2d=p2d, p3d=None))
            elif with_labels:
                records.append(PoseRecord(id=sample_id, p2d=p2d, p3d=draw.pose3d))
        if records:
            pose_codec_write(split_dir / "poses.jsonl", records, topo)
        manifest["splits"][split] = {
            "count": count,
            "images": with_images,
            "poses": bool(records),
            "labels_3d": with_labels,
        }

    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


@dataclass(frozen=True)
class SplitData:
    """In-memory view of one split; unlabeled splits carry images only."""

    ids: tuple[str, ...]
    images: np.ndarray | None = None  # (N, H, W) float32 in [0, 1]
    poses2d: np.ndarray | None = None  # (N, J, 2)
    poses3d: np.ndarray | None = None  # (N, J, 3)

    def __len__(self):
        return len(self.ids)


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json under {data_dir}")
    return json.loads(path.read_text())


def load_split(data_dir, split: str, topology: SkeletonTopology | None = None) -> SplitData:
    """Load one split. The train split never exposes pose annotations
    (none are written for it), prior exposes 2D poses only."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    if split not in manifest["splits"]:
        raise DatasetEmptyError(f"split {split!r} absent from {data_dir}")
    topo = topology or topology_preset(manifest["topology"])
    split_dir = data_dir / split

    ids: list[str] = []
    images = None
    poses2d = None
    poses3d = None

    pose_path = split_dir / "poses.jsonl"
    if pose_path.exists():
        records = pose_codec_read(pose_path, topo)
        ids = [r.id for r in records]
        poses2d = np.stack([r.p2d for r in records])
        if all(r.p3d is not None for r in records) and records:
            poses3d = np.stack([r.p3d for r in records])

    image_dir = split_dir / "images"
    if image_dir.exists():
        files = sorted(image_dir.glob("*.png"))
        if not ids:
            ids = [f.stem for f in files]
        elif [f.stem for f in files] != ids:
            raise FormatError(f"image files and pose records disagree in {split_dir}")
        images = np.stack([load_image_png(f) for f in files]).astype(np.float32)

    if not ids:
        raise DatasetEmptyError(f"split {split!r} in {data_dir} is empty")
    return SplitData(
        ids=tuple(ids), images=images, poses2d=poses2d, poses3d=poses3d
    )

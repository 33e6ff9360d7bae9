"""Perspective lift/projection, view rotations, and the self-supervision cycle.

The lift turns a 2D pose y (tangent coordinates) and per-joint depth offsets
d into a camera-frame 3D pose

    v_i = (x_i * z_i, y_i * z_i, z_i),   z_i = d_i + delta,

with delta fixed to 10 by default and every depth kept above one through a
smooth shifted-softplus bound (so gradients survive where a hard clamp would
kill them). Perspective projection inverts the lift exactly whenever the
bound is inactive.

View rotations compose an azimuth spin about the vertical (image-up) axis
with an elevation conjugation about the horizontal axis:

    R = R_e^T R_a R_e

Azimuths are drawn uniformly from [-pi, pi]; elevations from a normal
distribution whose mean/std are batch statistics of the predicted angles.

The consistency cycle rotates the lifted pose about its own centroid (which
the lift anchors at depth ~delta), so an identity rotation collapses the
cycle exactly and rotating by R then R^-1 returns the original pose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyBatchError, NonPositiveDepthError

DEFAULT_DELTA = 10.0

_DEPTH_FLOOR_EPS = 1e-3
_SOFTPLUS_BETA = 10.0


@dataclass(frozen=True)
class LiftOutput:
    """Raw lifter outputs: per-joint depth offsets and an elevation angle."""

    depth_offsets: torch.Tensor  # (..., J)
    elevation: torch.Tensor  # (...,) radians

    @property
    def joint_count(self) -> int:
        return self.depth_offsets.shape[-1]


@dataclass(frozen=True)
class RotationSpec:
    """An azimuth/elevation pair with its composed 3x3 matrix."""

    azimuth: float
    elevation: float
    matrix: torch.Tensor


@dataclass(frozen=True)
class ElevationStats:
    """Batchwise mean and standard deviation of predicted elevations."""

    mean: float
    std: float


def bounded_depth(raw_z: torch.Tensor) -> torch.Tensor:
    """Smooth lower bound keeping depths strictly above 1.

    Shifted softplus with sharpness beta = 10: exactly linear (identity) for
    raw_z - (1 + eps) > 2, smoothly flattening to 1 + eps below. Preserves
    gradient flow everywhere, unlike a hard clamp.
    """
    floor = 1.0 + _DEPTH_FLOOR_EPS
    t = raw_z - floor
    scaled = _SOFTPLUS_BETA * t
    soft = torch.where(
        scaled > 20.0,
        t,
        torch.log1p(torch.exp(scaled.clamp(max=20.0))) / _SOFTPLUS_BETA,
    )
    return floor + soft


def lift_to_3d(
    pose2d: torch.Tensor,
    lift: LiftOutput | torch.Tensor,
    delta: float = DEFAULT_DELTA,
) -> torch.Tensor:
    """Lift a 2D pose to 3D given depth offsets (Pose2D (..., J, 2) -> (..., J, 3))."""
    offsets = lift.depth_offsets if isinstance(lift, LiftOutput) else lift
    z = bounded_depth(offsets + delta)
    xy = pose2d * z.unsqueeze(-1)
    return torch.cat([xy, z.unsqueeze(-1)], dim=-1)


def perspective_project(pose3d: torch.Tensor) -> torch.Tensor:
    """Project (..., J, 3) camera-frame points to tangent coordinates X/Z, Y/Z.

    Raises:
        NonPositiveDepthError: any point has Z <= 0.
    """
    z = pose3d[..., 2]
    if bool((z <= 0).any()):
        raise NonPositiveDepthError(
            f"cannot project: min depth {float(z.min()):.6g} <= 0"
        )
    return pose3d[..., :2] / z.unsqueeze(-1)


# --- rotations ---------------------------------------------------------------

def _rot_y(angle: torch.Tensor) -> torch.Tensor:
    """Rotation about the vertical (image-up) axis; batched over angle."""
    c, s = torch.cos(angle), torch.sin(angle)
    zero = torch.zeros_like(c)
    one = torch.ones_like(c)
    rows = [
        torch.stack([c, zero, s], dim=-1),
        torch.stack([zero, one, zero], dim=-1),
        torch.stack([-s, zero, c], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def _rot_x(angle: torch.Tensor) -> torch.Tensor:
    """Rotation about the horizontal image axis (elevation tilt)."""
    c, s = torch.cos(angle), torch.sin(angle)
    zero = torch.zeros_like(c)
    one = torch.ones_like(c)
    rows = [
        torch.stack([one, zero, zero], dim=-1),
        torch.stack([zero, c, -s], dim=-1),
        torch.stack([zero, s, c], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def view_rotation_matrix(
    azimuth: torch.Tensor, elev_in: torch.Tensor, elev_out: torch.Tensor | None = None
) -> torch.Tensor:
    """Composed view rotation R = R_e(out)^T @ R_a @ R_e(in), batched.

    With elev_out omitted the two elevation factors coincide and this is the
    plain conjugated azimuth spin about the tilted vertical axis. Supplying a
    separate elev_out re-tilts the pose to a newly sampled elevation after
    the spin (the per-sample predicted angle canonicalizes, the sampled one
    restores).
    """
    if elev_out is None:
        elev_out = elev_in
    return _rot_x(elev_out).transpose(-1, -2) @ _rot_y(azimuth) @ _rot_x(elev_in)


def build_rotation(
    azimuth: float, elevation: float, dtype=torch.float64
) -> RotationSpec:
    """Rotation spec for scalar angles: R = R_e^T R_a R_e."""
    a = torch.as_tensor(float(azimuth), dtype=dtype)
    e = torch.as_tensor(float(elevation), dtype=dtype)
    return RotationSpec(
        azimuth=float(azimuth),
        elevation=float(elevation),
        matrix=view_rotation_matrix(a, e),
    )


def sample_azimuth(rng: np.random.Generator, size=None):
    """Uniform azimuth draw(s) on [-pi, pi]."""
    return rng.uniform(-np.pi, np.pi, size=size)


def elevation_stats(alphas) -> ElevationStats:
    """Batch mean / population standard deviation of predicted elevations.

    Raises:
        EmptyBatchError: the batch is empty.
    """
    values = np.asarray(
        alphas.detach().cpu().numpy() if torch.is_tensor(alphas) else alphas,
        dtype=np.float64,
    ).reshape(-1)
    if values.size == 0:
        raise EmptyBatchError("elevation statistics need a non-empty batch")
    return ElevationStats(mean=float(values.mean()), std=float(values.std()))


def sample_elevation(stats: ElevationStats, rng: np.random.Generator, size=None):
    """Draw elevation(s) from N(mean, std) of the batch statistics."""
    return rng.normal(stats.mean, stats.std, size=size)


# --- the self-supervision cycle ------------------------------------------------

def rotate_about_centroid(pose3d: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Rotate (..., J, 3) points about their own centroid, which stays put.

    The lift anchors the centroid near depth delta, so keeping it fixed keeps
    the rotated pose in front of the camera while collapsing exactly to the
    identity for R = I.
    """
    centroid = pose3d.mean(dim=-2, keepdim=True)
    rotated = (pose3d - centroid) @ rotation.transpose(-1, -2)
    return rotated + centroid


@dataclass(frozen=True)
class CycleResult:
    """All six pose stages of lift -> rotate -> project -> lift -> unrotate -> project."""

    v: torch.Tensor
    v_hat: torch.Tensor
    y_hat: torch.Tensor
    v_hat_prime: torch.Tensor
    v_prime: torch.Tensor
    y_prime: torch.Tensor


def consistency_cycle(
    pose2d: torch.Tensor,
    lifter,
    rotation,
    delta: float = DEFAULT_DELTA,
) -> CycleResult:
    """Run the full rotation-consistency cycle for a pose or batch.

    Args:
        pose2d: (J, 2) or (B, J, 2) tangent-coordinate pose(s).
        lifter: callable Pose2D -> LiftOutput (the trained lifting network or
            any stub); invoked exactly twice, first on the input pose, then on
            the reprojection of the rotated pose.
        rotation: RotationSpec, (3, 3) matrix, or (B, 3, 3) batch of matrices.
        delta: constant depth anchor for the lift.

    Returns:
        CycleResult with v, v_hat, y_hat, v_hat_prime, v_prime, y_prime.

    Raises:
        NonPositiveDepthError: a rotated pose crossed the camera plane.
    """
    mat = rotation.matrix if isinstance(rotation, RotationSpec) else rotation
    mat = mat.to(pose2d.dtype)

    v = lift_to_3d(pose2d, lifter(pose2d), delta)
    v_hat = rotate_about_centroid(v, mat)
    y_hat = perspective_project(v_hat)
    v_hat_prime = lift_to_3d(y_hat, lifter(y_hat), delta)
    v_prime = rotate_about_centroid(v_hat_prime, mat.transpose(-1, -2))
    y_prime = perspective_project(v_prime)
    return CycleResult(v, v_hat, y_hat, v_hat_prime, v_prime, y_prime)

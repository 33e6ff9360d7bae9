"""Protocol II evaluation: Procrustes alignment, P-MPJPE, PCK, AUC, figures.

Alignment removes rotation, translation, and uniform scale (similarity
Procrustes) per sample before measuring the mean per-joint position error,
so the metric is invariant to any similarity transform of the predictions.
PCK counts joints within a fixed threshold of the ground truth (150 units by
default); AUC averages PCK over 31 evenly spaced thresholds on [0, 150].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateTargetError,
    EmptyErrorsError,
    LengthMismatchError,
    ShapeMismatchError,
)

PCK_DEFAULT_THRESHOLD = 150.0
AUC_GRID_POINTS = 31


@dataclass(frozen=True)
class SimilarityTransform:
    """predicted -> target map: x |-> scale * (x @ rotation) + translation."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    residual: float


def procrustes_align(
    predicted: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, SimilarityTransform]:
    """Closed-form similarity alignment of one pose onto another.

    Returns the aligned copy of ``predicted`` and the transform that was
    applied. ``residual`` is the summed squared joint distance after
    alignment (the minimum over all similarity transforms).

    Raises:
        DegenerateTargetError: the target joints all coincide.
        ShapeMismatchError: shapes differ.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    targ = np.asarray(target, dtype=np.float64)
    if pred.shape != targ.shape:
        raise ShapeMismatchError(f"shapes {pred.shape} != {targ.shape}")

    mu_p = pred.mean(axis=0)
    mu_t = targ.mean(axis=0)
    p0 = pred - mu_p
    t0 = targ - mu_t
    norm_t = np.linalg.norm(t0)
    if norm_t <= 0:
        raise DegenerateTargetError("target pose has zero spatial spread")
    norm_p = np.linalg.norm(p0)
    if norm_p <= 0:
        # Degenerate prediction: best alignment collapses onto the target mean.
        aligned = np.broadcast_to(mu_t, targ.shape).copy()
        transform = SimilarityTransform(np.eye(3), 0.0, mu_t - mu_p, float(norm_t**2))
        return aligned, transform

    h = t0.T @ p0
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    corr = np.diag([1.0] * (h.shape[0] - 1) + [d])
    rotation = (u @ corr @ vt).T  # row-vector convention: x @ R
    scale = float((s * np.diag(corr)).sum() / (norm_p**2))
    translation = mu_t - scale * (mu_p @ rotation)
    aligned = scale * (pred @ rotation) + translation
    residual = float(np.sum((aligned - targ) ** 2))
    return aligned, SimilarityTransform(rotation, scale, translation, residual)


def per_joint_errors(predicted, target) -> np.ndarray:
    """Per-sample, per-joint Euclidean errors after Procrustes alignment.

    Inputs are stacks of poses, shape (N, J, 3). Output shape (N, J).
    """
    preds = np.asarray(predicted, dtype=np.float64)
    targs = np.asarray(target, dtype=np.float64)
    if len(preds) != len(targs):
        raise LengthMismatchError(f"{len(preds)} predictions vs {len(targs)} targets")
    errors = np.empty(preds.shape[:2], dtype=np.float64)
    for i, (p, t) in enumerate(zip(preds, targs)):
        aligned, _ = procrustes_align(p, t)
        errors[i] = np.linalg.norm(aligned - t, axis=-1)
    return errors


def p_mpjpe(predicted, target) -> float:
    """Mean per-joint position error after per-sample Procrustes alignment."""
    return float(per_joint_errors(predicted, target).mean())


def pck_auc(
    errors, threshold: float = PCK_DEFAULT_THRESHOLD
) -> tuple[float, float]:
    """PCK at the threshold and AUC over [0, threshold].

    PCK is the percentage of joints with error <= threshold (inclusive, so a
    perfect prediction scores 100 at every grid point); AUC averages PCK over
    31 evenly spaced thresholds from 0 to the threshold.

    Raises:
        EmptyErrorsError: no errors supplied.
    """
    err = np.asarray(errors, dtype=np.float64).reshape(-1)
    if err.size == 0:
        raise EmptyErrorsError("PCK/AUC need at least one error value")
    if np.any(err < 0):
        raise ValueError("errors must be non-negative")
    pck = 100.0 * float(np.mean(err <= threshold))
    grid = np.linspace(0.0, threshold, AUC_GRID_POINTS)
    auc = 100.0 * float(np.mean(err[None, :] <= grid[:, None]))
    return pck, auc


@dataclass(frozen=True)
class EvalReport:
    """Aggregate metrics of one evaluation run."""

    p_mpjpe: float
    pck: float
    auc: float
    per_sample_errors: np.ndarray
    threshold: float = PCK_DEFAULT_THRESHOLD
    unit_scale: float = 1.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "p_mpjpe": self.p_mpjpe,
                "pck": self.pck,
                "auc": self.auc,
                "threshold": self.threshold,
                "unit_scale": self.unit_scale,
                "num_samples": int(len(self.per_sample_errors)),
                "per_sample_mean_error": [
                    float(e) for e in np.mean(self.per_sample_errors, axis=-1)
                ],
            },
            indent=2,
            sort_keys=True,
        )


def evaluate_poses(
    predicted, target, unit_scale: float = 1.0, threshold: float = PCK_DEFAULT_THRESHOLD
) -> EvalReport:
    """Full Protocol II report; errors are scaled by unit_scale before PCK/AUC."""
    errors = per_joint_errors(predicted, target) * unit_scale
    pck, auc = pck_auc(errors, threshold)
    return EvalReport(
        p_mpjpe=float(errors.mean()),
        pck=pck,
        auc=auc,
        per_sample_errors=errors,
        threshold=threshold,
        unit_scale=unit_scale,
    )


def mean_pose_baseline(target) -> np.ndarray:
    """Coordinate-wise mean pose of a ground-truth set (the fixed baseline)."""
    return np.asarray(target, dtype=np.float64).mean(axis=0)


def emit_pose_figure(
    image,
    predicted,
    target=None,
    views=(0.0,),
    path="pose_figure.png",
    topology=None,
) -> Path:
    """Write a figure: the input image plus stick-figure views of the 3D pose.

    Predicted pose drawn in red, ground truth (if given) in green. ``views``
    lists azimuth angles (radians); each adds a panel showing the pose rotated
    about its centroid's vertical axis. An empty view list emits the image
    panel alone.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pred = np.asarray(predicted, dtype=np.float64)
    targ = None if target is None else np.asarray(target, dtype=np.float64)
    views = list(views)
    n_panels = 1 + len(views)
    fig, axes = plt.subplots(1, n_panels, figsize=(3 * n_panels, 3))
    axes = np.atleast_1d(axes)

    axes[0].imshow(np.asarray(image), cmap="gray", vmin=0.0, vmax=1.0)
    axes[0].set_title("input")
    axes[0].axis("off")

    def draw(ax, pose, color):
        if topology is not None:
            for i, j in topology.edges:
                ax.plot(
                    [pose[i, 0], pose[j, 0]],
                    [pose[i, 1], pose[j, 1]],
                    color=color,
                    linewidth=2,
                )
        ax.scatter(pose[:, 0], pose[:, 1], s=8, color=color)

    for k, azimuth in enumerate(views):
        ax = axes[k + 1]
        c, s = np.cos(azimuth), np.sin(azimuth)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

        def spin(pose):
            center = pose.mean(axis=0)
            return (pose - center) @ rot.T + center

        if targ is not None:
            tp = spin(targ)
            draw(ax, tp[:, :2], "green")
        pp = spin(pred)
        draw(ax, pp[:, :2], "red")
        ax.set_title(f"azimuth {np.degrees(azimuth):.0f}°")
        ax.set_aspect("equal")
        ax.invert_yaxis()

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out

"""All training loss terms and their weighted composition.

Reduction convention: every squared-error term is a mean over all tensor
elements (batch x joints x dims), so the default weights are independent of
batch size and resolution. The bone-length prior sums its per-bone Gaussian
log-likelihoods within a pose (its analytic minimum at the reference lengths
is N * log(sigma_b * sqrt(2*pi))) and averages over the batch.

The discriminator objective L_D = E[log D(real)] + E[log(1 - D(fake))] is a
quantity the discriminator maximizes; the generator minimizes the
non-saturating form -E[log D(fake)].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    DomainError,
    NonFiniteLossError,
    PairingError,
    ShapeMismatchError,
    ZeroSkeletonError,
)
from .skeleton import SkeletonTopology


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights plus the fixed hyperparameters of the priors.

    Defaults of 1 reproduce the plain unweighted composite loss; zeroing
    individual weights produces the ablation configurations.
    """

    w_d: float = 1.0
    w_omega: float = 1.0
    w_base: float = 1.0
    w_nf: float = 1.0
    w_bl: float = 1.0
    lambda_pixel: float = 0.1
    sigma_b: float = 0.1
    ref_bone_lengths: np.ndarray | None = field(default=None)

    def __post_init__(self):
        for name in ("w_d", "w_omega", "w_base", "w_nf", "w_bl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_pixel <= 0:
            raise ValueError("lambda_pixel must be positive")
        if self.sigma_b <= 0:
            raise ValueError("sigma_b must be positive")
        if self.ref_bone_lengths is not None:
            ref = np.asarray(self.ref_bone_lengths, dtype=np.float64)
            if abs(float(ref.mean()) - 1.0) > 1e-6:
                raise ValueError("reference relative bone lengths must have mean 1")
            object.__setattr__(self, "ref_bone_lengths", ref)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} != {tuple(b.shape)}")


def loss_2d(y_prime: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared coordinate difference between reprojected and input 2D poses."""
    _check_same_shape(y_prime, y, "loss_2d")
    return ((y_prime - y) ** 2).mean()


def loss_3d(v_hat_prime: torch.Tensor, v_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared coordinate difference between the two rotated-view 3D poses."""
    _check_same_shape(v_hat_prime, v_hat, "loss_3d")
    return ((v_hat_prime - v_hat) ** 2).mean()


def loss_def(
    v_j: torch.Tensor,
    v_k: torch.Tensor,
    v_prime_j: torch.Tensor,
    v_prime_k: torch.Tensor,
) -> torch.Tensor:
    """Change in the difference between two samples' 3D poses across the cycle."""
    _check_same_shape(v_j, v_k, "loss_def inputs")
    _check_same_shape(v_prime_j, v_prime_k, "loss_def outputs")
    diff = (v_prime_j - v_prime_k) - (v_j - v_k)
    return (diff**2).mean()


def derangement(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random derangement of batch indices (rejection sampled).

    Raises:
        PairingError: batch has fewer than two samples.
    """
    if batch_size < 2:
        raise PairingError("deformation pairing needs a batch of at least 2")
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == np.arange(batch_size)):
            return perm


def loss_def_batch(
    v: torch.Tensor, v_prime: torch.Tensor, rng: np.random.Generator
) -> torch.Tensor:
    """Deformation loss over a batch with a freshly drawn derangement pairing."""
    if v.dim() != 3:
        raise ShapeMismatchError("loss_def_batch expects (B, J, 3) tensors")
    pair = derangement(v.shape[0], rng)
    idx = torch.as_tensor(pair, dtype=torch.long, device=v.device)
    return loss_def(v, v[idx], v_prime, v_prime[idx])


def relative_bone_lengths(
    pose3d: torch.Tensor, topology: SkeletonTopology
) -> torch.Tensor:
    """Bone lengths divided by their per-pose mean; output mean is exactly 1.

    Accepts (J, 3) or (B, J, 3) (2D poses work too). Raises
    ZeroSkeletonError if every bone of a pose has zero length.
    """
    starts, ends = topology.bone_index_arrays()
    s = torch.as_tensor(starts, device=pose3d.device)
    e = torch.as_tensor(ends, device=pose3d.device)
    bones = pose3d.index_select(-2, e) - pose3d.index_select(-2, s)
    lengths = torch.linalg.vector_norm(bones, dim=-1)
    mean = lengths.mean(dim=-1, keepdim=True)
    if bool((mean <= 0).any()):
        raise ZeroSkeletonError("all bones have zero length")
    return lengths / mean


def loss_bl(
    pose3d: torch.Tensor, topology: SkeletonTopology, weights: LossWeights
) -> torch.Tensor:
    """Negative log-likelihood of relative bone lengths under a Gaussian prior.

    Summed over bones within a pose, averaged over the batch. Requires
    ``weights.ref_bone_lengths`` to be configured.
    """
    if weights.ref_bone_lengths is None:
        raise ValueError("LossWeights.ref_bone_lengths is not configured")
    b = relative_bone_lengths(pose3d, topology)
    ref = torch.as_tensor(weights.ref_bone_lengths, dtype=b.dtype, device=b.device)
    if ref.shape[-1] != b.shape[-1]:
        raise ShapeMismatchError(
            f"reference has {ref.shape[-1]} bones, pose has {b.shape[-1]}"
        )
    sigma = weights.sigma_b
    log_norm = math.log(sigma * math.sqrt(2.0 * math.pi))
    nll = ((b - ref) ** 2) / (2.0 * sigma**2) + log_norm
    per_pose = nll.sum(dim=-1)
    return per_pose.mean()


def _check_unit_interval(x: torch.Tensor, what: str):
    if bool((x <= 0).any()) or bool((x >= 1).any()):
        raise DomainError(f"{what} must lie strictly inside (0, 1)")


def loss_discriminator(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator objective (to maximize): E[log D(w)] + E[log(1 - D(s))]."""
    _check_unit_interval(d_real, "discriminator output on real samples")
    _check_unit_interval(d_fake, "discriminator output on fake samples")
    return torch.log(d_real).mean() + torch.log1p(-d_fake).mean()


def loss_generator_adv(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term: -E[log D(s)]."""
    _check_unit_interval(d_fake, "discriminator output on fake samples")
    return -torch.log(d_fake).mean()


def loss_omega(
    predicted_prior_joints: torch.Tensor,
    prior_joints: torch.Tensor,
    rendered_from_predicted: torch.Tensor,
    skeleton_image: torch.Tensor,
    lambda_pixel: float = 0.1,
) -> torch.Tensor:
    """Joint regression on rendered priors plus a weighted pixel reconstruction.

    First term: mean squared error between the regressed and true prior
    joints. Second term: lambda * mean squared pixel difference between the
    render of the predicted pose and the predicted skeleton image.
    """
    _check_same_shape(predicted_prior_joints, prior_joints, "loss_omega joints")
    _check_same_shape(rendered_from_predicted, skeleton_image, "loss_omega images")
    joint_term = ((predicted_prior_joints - prior_joints) ** 2).mean()
    pixel_term = ((rendered_from_predicted - skeleton_image) ** 2).mean()
    return joint_term + lambda_pixel * pixel_term


@dataclass(frozen=True)
class LossTerms:
    """Raw values of the seven composite-loss components."""

    adv: torch.Tensor
    omega: torch.Tensor
    pose2d: torch.Tensor
    pose3d: torch.Tensor
    deform: torch.Tensor
    nf: torch.Tensor
    bone: torch.Tensor

    @property
    def base(self):
        return self.pose2d + self.pose3d + self.deform

    def as_dict(self) -> dict:
        """The seven-term breakdown keyed like the metrics log."""

        def scalar(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        return {
            "loss_d": scalar(self.adv),
            "loss_omega": scalar(self.omega),
            "loss_2d": scalar(self.pose2d),
            "loss_3d": scalar(self.pose3d),
            "loss_def": scalar(self.deform),
            "loss_nf": scalar(self.nf),
            "loss_bl": scalar(self.bone),
        }


def loss_total(terms: LossTerms, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """Weighted composite loss and its per-term breakdown.

    total = w_d * adv + w_omega * omega + w_base * (2d + 3d + def)
            + w_nf * nf + w_bl * bone

    Raises:
        NonFiniteLossError: a component is NaN/inf; the message names it.
    """
    for name in ("adv", "omega", "pose2d", "pose3d", "deform", "nf", "bone"):
        value = getattr(terms, name)
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NonFiniteLossError(f"loss term {name!r} is not finite")
    total = (
        weights.w_d * terms.adv
        + weights.w_omega * terms.omega
        + weights.w_base * terms.base
        + weights.w_nf * terms.nf
        + weights.w_bl * terms.bone
    )
    return total, terms.as_dict()


def reference_bone_lengths_from_poses(
    poses2d, topology: SkeletonTopology
) -> np.ndarray:
    """Mean relative bone lengths over a 2D pose set (the prior proxy for 3D).

    The returned vector is renormalized to mean exactly 1 so it satisfies the
    LossWeights invariant.
    """
    arr = torch.as_tensor(np.asarray(poses2d, dtype=np.float64))
    rel = relative_bone_lengths(arr, topology)
    ref = rel.mean(dim=0).numpy()
    return ref / ref.mean()

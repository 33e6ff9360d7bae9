"""The four trainable networks of the pipeline.

* ``PhiNet``: convolutional encoder-decoder, image -> skeleton image, sigmoid
  output in [0, 1], no skip connections.
* ``OmegaNet``: convolutional regressor, skeleton image -> 2J coordinates,
  tanh-squashed onto the renderer's pose frame [-extent, extent].
* ``LambdaNet``: residual fully connected lifter, 2J coordinates -> J depth
  offsets plus one elevation angle.
* ``DiscNet``: convolutional binary classifier on skeleton images, output
  strictly inside (0, 1).

Architectures are deliberately small; training runs at desk scale on a CPU.
"""
from __future__ import annotations

import torch
from torch import nn

from .camera import LiftOutput
from .errors import ShapeMismatchError

_PROB_EPS = 1e-7


def _down_block(c_in, c_out, norm=True):
    # LeakyReLU keeps gradient flowing through momentarily-dead units.
    layers = [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(nn.LeakyReLU(0.1, inplace=True))
    return layers


class PhiNet(nn.Module):
    """Image to skeleton image (64x64 -> 64x64), values in [0, 1]."""

    def __init__(self, in_channels=1, base=32):
        super().__init__()
        c1, c2, c3 = base, base * 2, base * 4
        self.encoder = nn.Sequential(
            *_down_block(in_channels, c1, norm=False),
            *_down_block(c1, c2),
            *_down_block(c2, c3),
            *_down_block(c3, c3),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c3, c3, 4, stride=2, padding=1),
            nn.BatchNorm2d(c3),
            nn.LeakyReLU(0.1, inplace=True),
            nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1),
            nn.BatchNorm2d(c2),
            nn.LeakyReLU(0.1, inplace=True),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1),
            nn.BatchNorm2d(c1),
            nn.LeakyReLU(0.1, inplace=True),
            nn.ConvTranspose2d(c1, 1, 4, stride=2, padding=1),
        )
        # Skeleton images are sparse; start the output near-black so the
        # adversarial phase spends its steps on alignment, not on darkening.
        nn.init.constant_(self.decoder[-1].bias, -3.0)

    def forward(self, x):
        if x.dim() != 4:
            raise ShapeMismatchError(f"PhiNet expects (B, C, H, W), got {tuple(x.shape)}")
        return torch.sigmoid(self.decoder(self.encoder(x)))


class OmegaNet(nn.Module):
    """Skeleton image to 2D joint coordinates in the render frame."""

    def __init__(self, joint_count, pose_extent=1.0, base=32):
        super().__init__()
        self.joint_count = joint_count
        self.pose_extent = float(pose_extent)
        c1, c2, c3 = base, base * 2, base * 4
        self.features = nn.Sequential(
            *_down_block(1, c1, norm=False),
            *_down_block(c1, c2),
            *_down_block(c2, c3),
            *_down_block(c3, c3),
        )
        self.head = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(c3, 256),
            nn.LeakyReLU(0.1, inplace=True),
            nn.Linear(256, 2 * joint_count),
        )

    def forward(self, s):
        if s.dim() != 4 or s.shape[1] != 1:
            raise ShapeMismatchError(
                f"OmegaNet expects (B, 1, H, W), got {tuple(s.shape)}"
            )
        raw = torch.tanh(self.head(self.features(s)))
        return self.pose_extent * raw.view(-1, self.joint_count, 2)


class _ResidualBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(width, width),
            nn.BatchNorm1d(width),
            nn.ReLU(inplace=True),
            nn.Linear(width, width),
            nn.BatchNorm1d(width),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return x + self.body(x)


class LambdaNet(nn.Module):
    """2D pose to J depth offsets + 1 elevation angle (residual MLP)."""

    def __init__(self, joint_count, width=512, blocks=2):
        super().__init__()
        self.joint_count = joint_count
        self.inp = nn.Linear(2 * joint_count, width)
        self.blocks = nn.Sequential(*[_ResidualBlock(width) for _ in range(blocks)])
        self.head = nn.Linear(width, joint_count + 1)

    def forward(self, pose2d) -> LiftOutput:
        if pose2d.dim() != 3 or pose2d.shape[-1] != 2:
            raise ShapeMismatchError(
                f"LambdaNet expects (B, J, 2), got {tuple(pose2d.shape)}"
            )
        if pose2d.shape[1] != self.joint_count:
            raise ShapeMismatchError(
                f"LambdaNet built for {self.joint_count} joints, got {pose2d.shape[1]}"
            )
        h = self.inp(pose2d.reshape(pose2d.shape[0], -1))
        h = self.blocks(h)
        out = self.head(h)
        return LiftOutput(depth_offsets=out[:, :-1], elevation=out[:, -1])


class DiscNet(nn.Module):
    """Skeleton-image realism classifier; probabilities strictly in (0, 1)."""

    def __init__(self, base=32):
        super().__init__()
        c1, c2, c3 = base, base * 2, base * 4
        self.features = nn.Sequential(
            nn.Conv2d(1, c1, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),
            nn.BatchNorm2d(c2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c2, c3, 4, stride=2, padding=1),
            nn.BatchNorm2d(c3),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c3, c3, 4, stride=2, padding=1),
            nn.BatchNorm2d(c3),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Sequential(
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(c3, 1)
        )

    def forward(self, s):
        if s.dim() != 4 or s.shape[1] != 1:
            raise ShapeMismatchError(
                f"DiscNet expects (B, 1, H, W), got {tuple(s.shape)}"
            )
        prob = torch.sigmoid(self.head(self.features(s)))
        return prob.clamp(_PROB_EPS, 1.0 - _PROB_EPS).squeeze(-1)


def make_networks(joint_count, pose_extent, seed=0, base=32, lifter_width=512):
    """Construct all four networks with a seeded, reproducible initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        phi = PhiNet(base=base)
        omega = OmegaNet(joint_count, pose_extent=pose_extent, base=base)
        lam = LambdaNet(joint_count, width=lifter_width)
        disc = DiscNet(base=base)
    return phi, omega, lam, disc

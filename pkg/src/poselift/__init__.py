"""Self-supervised 3D pose lifting toolkit.

Trains an image -> 2D pose -> 3D pose pipeline from unlabeled images plus an
unpaired set of 2D poses, using rotation-consistency self-supervision, a
rendered-skeleton adversarial prior, a normalizing-flow 2D-pose prior, and a
bone-length prior. Ships a procedural stick-figure world for quantitative
validation. See the README for the CLI workflow.
"""

from . import (
    camera,
    errors,
    evaluation,
    flow_prior,
    losses,
    networks,
    renderer,
    skeleton,
    synth,
    training,
)
from .skeleton import SkeletonTopology, topology_preset

__all__ = [
    "camera",
    "errors",
    "evaluation",
    "flow_prior",
    "losses",
    "networks",
    "renderer",
    "skeleton",
    "synth",
    "training",
    "SkeletonTopology",
    "topology_preset",
]

__version__ = "0.1.0"

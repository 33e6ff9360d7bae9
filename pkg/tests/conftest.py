import numpy as np
import pytest
import torch

from poselift import skeleton, synth


@pytest.fixture(scope="session")
def topo9():
    return skeleton.topology_preset("humanoid-9")


@pytest.fixture(scope="session")
def topo17():
    return skeleton.topology_preset("humanoid-17")


@pytest.fixture(scope="session")
def kin_model():
    return synth.default_kinematic_model()


@pytest.fixture(scope="session")
def synth_poses(kin_model):
    """400 sampled (pose3d, pose2d) pairs shared across tests."""
    rng = np.random.default_rng(20240817)
    p3 = np.stack([synth.sample_pose3d(kin_model, rng) for _ in range(400)])
    p2 = p3[..., :2] / p3[..., 2:3]
    return p3, p2


def random_pose2d(rng, joints=9, scale=0.15):
    """A generic root-centered 2D pose for property tests."""
    pose = rng.normal(0.0, scale, size=(joints, 2))
    pose[0] = 0.0
    return pose


def finite_difference_grad(fn, x, h=1e-4):
    """Central-difference gradient of a scalar function of a numpy array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (fn(xp) - fn(xm)) / (2 * h)
        it.iternext()
    return grad


def torch_scalar_grad(fn, x):
    """Autograd gradient of a scalar torch function at a numpy point."""
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    out = fn(t)
    out.backward()
    return t.grad.numpy()

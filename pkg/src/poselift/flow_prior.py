"""Empirical 2D-pose prior: PCA subspace plus an affine coupling flow.

Pose vectors (flattened 2J coordinates) are projected onto a PCA subspace
and whitened by the retained eigenvalues; an invertible stack of affine
coupling layers then maps the whitened coordinates to a standard normal
base distribution. The change of variables gives an exact log-density

    log p(ybar) = log N(f(ybar); 0, I) + log |det df/dybar|

which is maximized on an unpaired pose set during pretraining and frozen
afterwards. Coupling scale outputs are tanh-bounded for stability and the
subnetworks are zero-initialized, so a fresh flow is exactly the identity.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import CorruptCheckpointError, RankError, VersionError

FLOW_CHECKPOINT_VERSION = 1


# --- PCA subspace ---------------------------------------------------------------

@dataclass(frozen=True)
class PcaSubspace:
    """Mean, orthonormal basis rows, and eigenvalues of the retained subspace.

    ``project`` whitens by sqrt(eigenvalue) so the flow sees unit-variance
    coordinates; ``reconstruct`` undoes both steps.
    """

    mean: np.ndarray  # (2J,)
    basis: np.ndarray  # (n_components, 2J), orthonormal rows
    eigenvalues: np.ndarray  # (n_components,)

    @property
    def n_components(self) -> int:
        return self.basis.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[1]


def _as_matrix(poses) -> np.ndarray:
    arr = np.asarray(poses, dtype=np.float64)
    if arr.ndim == 3:  # (N, J, 2) -> (N, 2J)
        arr = arr.reshape(arr.shape[0], -1)
    if arr.ndim != 2:
        raise ValueError(f"expected (N, D) or (N, J, 2) data, got shape {arr.shape}")
    return arr


def pca_fit(poses, n_components: int) -> PcaSubspace:
    """Fit the top principal directions of flattened pose vectors.

    Raises:
        RankError: fewer samples than n_components, or data rank too low.
    """
    x = _as_matrix(poses)
    n, d = x.shape
    if n_components > d:
        raise RankError(f"n_components {n_components} exceeds data dimension {d}")
    if n < n_components:
        raise RankError(f"{n} samples cannot support {n_components} components")
    mean = x.mean(axis=0)
    centered = x - mean
    # SVD of the centered data; eigenvalues of the covariance are s^2 / N.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = (s**2) / n
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size else 0
    if rank < n_components:
        raise RankError(
            f"data rank {rank} is below the requested {n_components} components"
        )
    return PcaSubspace(
        mean=mean,
        basis=vt[:n_components],
        eigenvalues=eigenvalues[:n_components],
    )


def _pose_matrix(pca: PcaSubspace, poses) -> tuple[np.ndarray, bool]:
    """Flatten pose input to an (N, 2J) matrix; flags single-pose input."""
    arr = np.asarray(poses, dtype=np.float64)
    if arr.ndim == 1:
        return arr.reshape(1, -1), True
    if arr.ndim == 2 and arr.shape == (pca.ambient_dim // 2, 2):
        return arr.reshape(1, -1), True
    if arr.ndim == 3:
        return arr.reshape(arr.shape[0], -1), False
    return arr, False


def pca_project(pca: PcaSubspace, poses) -> np.ndarray:
    """Project pose vectors onto the subspace, whitened per-component."""
    x, single = _pose_matrix(pca, poses)
    coords = ((x - pca.mean) @ pca.basis.T) / np.sqrt(pca.eigenvalues)
    return coords[0] if single else coords


def pca_reconstruct(pca: PcaSubspace, coords) -> np.ndarray:
    """Invert :func:`pca_project` back to flattened pose vectors."""
    c = np.asarray(coords, dtype=np.float64)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    out = (c * np.sqrt(pca.eigenvalues)) @ pca.basis + pca.mean
    return out[0] if single else out


# --- affine coupling flow ---------------------------------------------------------

class AffineCoupling(nn.Module):
    """One affine coupling layer with a binary mask and bounded log-scales."""

    def __init__(self, dim, hidden=64, mask=None, s_max=2.0):
        super().__init__()
        if mask is None:
            mask = torch.arange(dim) % 2
        self.register_buffer("mask", mask.to(torch.get_default_dtype()))
        self.s_max = s_max
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 2 * dim),
        )
        # Zero-init the head so a fresh layer is exactly the identity map.
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def _scale_shift(self, masked):
        st = self.net(masked)
        s, t = st.chunk(2, dim=-1)
        free = 1.0 - self.mask
        s = self.s_max * torch.tanh(s) * free
        t = t * free
        return s, t

    def forward(self, x):
        masked = x * self.mask
        s, t = self._scale_shift(masked)
        z = masked + (1.0 - self.mask) * (x * torch.exp(s) + t)
        return z, s.sum(dim=-1)

    def inverse(self, z):
        masked = z * self.mask
        s, t = self._scale_shift(masked)
        x = masked + (1.0 - self.mask) * (z - t) * torch.exp(-s)
        return x, -s.sum(dim=-1)


class FlowPrior(nn.Module):
    """Stack of coupling layers with a standard normal base distribution."""

    def __init__(self, dim, n_layers=8, hidden=64, s_max=2.0):
        super().__init__()
        self.dim = dim
        masks = []
        base = torch.arange(dim) % 2
        for i in range(n_layers):
            masks.append(base if i % 2 == 0 else 1 - base)
        self.layers = nn.ModuleList(
            AffineCoupling(dim, hidden=hidden, mask=m, s_max=s_max) for m in masks
        )

    def forward(self, x):
        """Data -> base: returns (z, log|det Jacobian|)."""
        log_det = torch.zeros(x.shape[:-1], dtype=x.dtype, device=x.device)
        z = x
        for layer in self.layers:
            z, ld = layer(z)
            log_det = log_det + ld
        return z, log_det

    def inverse(self, z):
        """Base -> data: returns (x, log|det Jacobian|) of the inverse map."""
        log_det = torch.zeros(z.shape[:-1], dtype=z.dtype, device=z.device)
        x = z
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x)
            log_det = log_det + ld
        return x, log_det

    def log_prob(self, x):
        z, log_det = self.forward(x)
        base = -0.5 * (z**2).sum(dim=-1) - 0.5 * self.dim * float(np.log(2 * np.pi))
        return base + log_det


def make_flow(dim, n_layers=8, hidden=64, s_max=2.0, seed=0) -> FlowPrior:
    """Construct a flow with seeded subnetwork initialization.

    Fresh flows are exact identity maps (zero-initialized coupling heads),
    so the seed only fixes the hidden-layer weights.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        flow = FlowPrior(dim, n_layers=n_layers, hidden=hidden, s_max=s_max)
    return flow


def flow_forward(flow: FlowPrior, x: torch.Tensor):
    return flow.forward(x)


def flow_inverse(flow: FlowPrior, z: torch.Tensor):
    return flow.inverse(z)


def log_density(flow: FlowPrior, pca: PcaSubspace, poses):
    """Exact log-density of pose(s) under the prior, at the PCA coordinates.

    Returns a float for a single pose, an (N,) array for a batch.
    """
    coords = pca_project(pca, poses)
    single = coords.ndim == 1
    param = next(flow.parameters())
    x = torch.as_tensor(np.atleast_2d(coords), dtype=param.dtype, device=param.device)
    with torch.no_grad():
        lp = flow.log_prob(x).cpu().numpy()
    return float(lp[0]) if single else lp


def nll_loss(flow: FlowPrior, coords: torch.Tensor) -> torch.Tensor:
    """Mean negative log-density of a batch of (whitened) PCA coordinates."""
    return -flow.log_prob(coords).mean()


def pretrain_flow(
    flow: FlowPrior,
    pca: PcaSubspace,
    poses,
    epochs: int = 60,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
    log_every: int = 0,
    val_fraction: float = 0.1,
) -> list[float]:
    """Train the flow by NLL on an unpaired pose set; returns per-epoch NLL.

    A deterministic tail of the data (``val_fraction``) is held aside and the
    parameters of the best-validation epoch are restored at the end, so the
    frozen prior never ships an overfit late epoch. Bit-reproducible for a
    fixed seed. Callers freeze the result with :func:`freeze_flow`.
    """
    coords = torch.as_tensor(pca_project(pca, poses), dtype=torch.float32)
    n_val = int(coords.shape[0] * val_fraction)
    if n_val >= 8:
        train_coords, val_coords = coords[:-n_val], coords[-n_val:]
    else:
        train_coords, val_coords = coords, None
    n = train_coords.shape[0]
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(flow.parameters(), lr=lr)
    history = []
    best_val = float("inf")
    best_state = {k: v.clone() for k, v in flow.state_dict().items()}
    flow.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss = nll_loss(flow, train_coords[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / max(seen, 1))
        if val_coords is not None:
            with torch.no_grad():
                val_nll = nll_loss(flow, val_coords).item()
            if val_nll < best_val:
                best_val = val_nll
                best_state = {k: v.clone() for k, v in flow.state_dict().items()}
        if log_every and (epoch + 1) % log_every == 0:
            print(f"flow epoch {epoch + 1}/{epochs} nll {history[-1]:.4f}")
    if val_coords is not None:
        flow.load_state_dict(best_state)
    flow.eval()
    return history


def freeze_flow(flow: FlowPrior) -> FlowPrior:
    """Disable gradients on all flow parameters (the frozen-prior contract)."""
    for p in flow.parameters():
        p.requires_grad_(False)
    flow.eval()
    return flow


def flow_checksum(flow: FlowPrior) -> str:
    """SHA-256 over the flow parameters; used to verify the frozen contract."""
    h = hashlib.sha256()
    for name, p in sorted(flow.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- persistence -------------------------------------------------------------------

def save_flow_checkpoint(path, flow: FlowPrior, pca: PcaSubspace, meta=None) -> None:
    """Write a versioned, checksummed flow checkpoint."""
    from pathlib import Path

    payload = io.BytesIO()
    torch.save(
        {
            "dim": flow.dim,
            "n_layers": len(flow.layers),
            "hidden": flow.layers[0].net[0].out_features,
            "s_max": flow.layers[0].s_max,
            "state": flow.state_dict(),
            "pca_mean": pca.mean,
            "pca_basis": pca.basis,
            "pca_eigenvalues": pca.eigenvalues,
            "meta": dict(meta or {}),
        },
        payload,
    )
    blob = payload.getvalue()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": FLOW_CHECKPOINT_VERSION,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "blob": blob,
        },
        path,
    )


def load_flow_checkpoint(path) -> tuple[FlowPrior, PcaSubspace, dict]:
    """Load a flow checkpoint; verifies version and checksum."""
    try:
        wrapper = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CorruptCheckpointError(f"cannot read flow checkpoint {path}: {exc}") from exc
    version = wrapper.get("version")
    if version != FLOW_CHECKPOINT_VERSION:
        raise VersionError(
            f"flow checkpoint version {version} != supported {FLOW_CHECKPOINT_VERSION}"
        )
    blob = wrapper["blob"]
    if hashlib.sha256(blob).hexdigest() != wrapper.get("sha256"):
        raise CorruptCheckpointError(f"flow checkpoint {path} failed its checksum")
    data = torch.load(io.BytesIO(blob), weights_only=False)
    flow = FlowPrior(
        data["dim"],
        n_layers=data["n_layers"],
        hidden=data["hidden"],
        s_max=data["s_max"],
    )
    flow.load_state_dict(data["state"])
    pca = PcaSubspace(
        mean=data["pca_mean"],
        basis=data["pca_basis"],
        eigenvalues=data["pca_eigenvalues"],
    )
    return freeze_flow(flow), pca, data.get("meta", {})

"""End-to-end training: alternating discriminator/generator updates over the
full rotation-consistency graph, with checkpointing and a JSON-lines metrics
log.

Each step renders a batch of unpaired prior poses to skeleton images,
updates the discriminator on real-vs-predicted skeletons, then runs the
whole pipeline (image -> skeleton image -> 2D pose -> lift -> rotate ->
reproject -> lift -> unrotate) and applies one generator update on the
seven-term composite loss. The flow prior is frozen throughout; its
parameter checksum is verified by the tests.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import (
    DEFAULT_DELTA,
    consistency_cycle,
    lift_to_3d,
    view_rotation_matrix,
)
from .errors import (
    CorruptCheckpointError,
    DatasetEmptyError,
    NonFiniteLossError,
    PairingError,
    ShapeMismatchError,
    VersionError,
)
from .evaluation import p_mpjpe
from .flow_prior import FlowPrior, PcaSubspace, freeze_flow
from .losses import (
    LossTerms,
    LossWeights,
    loss_2d,
    loss_3d,
    loss_bl,
    loss_def_batch,
    loss_discriminator,
    loss_generator_adv,
    loss_omega,
    loss_total,
)
from .networks import make_networks
from .renderer import RendererConfig, render_batch
from .skeleton import SkeletonTopology, make_topology

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce a run; serialized next to its outputs."""

    steps: int = 1000
    batch_size: int = 64
    lr_gen: float = 2e-4
    lr_disc: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    grad_clip: float = 5.0
    delta: float = DEFAULT_DELTA
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: int = 1000
    net_base_channels: int = 32
    lifter_width: int = 512

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr_gen": self.lr_gen,
            "lr_disc": self.lr_disc,
            "adam_betas": list(self.adam_betas),
            "grad_clip": self.grad_clip,
            "delta": self.delta,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "checkpoint_every": self.checkpoint_every,
            "net_base_channels": self.net_base_channels,
            "lifter_width": self.lifter_width,
        }


@dataclass
class TrainState:
    """Mutable training state: networks, optimizers, RNG streams, and priors."""

    topology: SkeletonTopology
    renderer: RendererConfig
    weights: LossWeights
    config: TrainConfig
    phi: torch.nn.Module
    omega: torch.nn.Module
    lam: torch.nn.Module
    disc: torch.nn.Module
    opt_gen: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    flow: FlowPrior
    pca: PcaSubspace
    step: int = 0
    np_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    torch_gen: torch.Generator = field(default_factory=torch.Generator)

    # torch copies of the PCA for differentiable density evaluation
    _pca_mean: torch.Tensor = field(init=False, repr=False)
    _pca_basis: torch.Tensor = field(init=False, repr=False)
    _pca_scale: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        self._pca_mean = torch.as_tensor(self.pca.mean, dtype=torch.float32)
        self._pca_basis = torch.as_tensor(self.pca.basis, dtype=torch.float32)
        self._pca_scale = torch.as_tensor(
            np.sqrt(self.pca.eigenvalues), dtype=torch.float32
        )

    def project_flow_coords(self, poses: torch.Tensor) -> torch.Tensor:
        """Differentiable whitened PCA projection of (B, J, 2) poses."""
        flat = poses.reshape(poses.shape[0], -1)
        return ((flat - self._pca_mean) @ self._pca_basis.T) / self._pca_scale

    def generator_modules(self):
        return {"phi": self.phi, "omega": self.omega, "lambda": self.lam}


def init_train_state(
    config: TrainConfig,
    topology: SkeletonTopology,
    renderer: RendererConfig,
    weights: LossWeights,
    flow: FlowPrior,
    pca: PcaSubspace,
) -> TrainState:
    phi, omega, lam, disc = make_networks(
        topology.joint_count,
        renderer.pose_extent,
        seed=config.seed,
        base=config.net_base_channels,
        lifter_width=config.lifter_width,
    )
    gen_params = (
        list(phi.parameters()) + list(omega.parameters()) + list(lam.parameters())
    )
    opt_gen = torch.optim.Adam(gen_params, lr=config.lr_gen, betas=config.adam_betas)
    opt_disc = torch.optim.Adam(
        disc.parameters(), lr=config.lr_disc, betas=config.adam_betas
    )
    torch_gen = torch.Generator()
    torch_gen.manual_seed(config.seed)
    return TrainState(
        topology=topology,
        renderer=renderer,
        weights=weights,
        config=config,
        phi=phi,
        omega=omega,
        lam=lam,
        disc=disc,
        opt_gen=opt_gen,
        opt_disc=opt_disc,
        flow=freeze_flow(flow),
        pca=pca,
        step=0,
        np_rng=np.random.default_rng(config.seed),
        torch_gen=torch_gen,
    )


def train_step(
    state: TrainState, images: torch.Tensor, prior_poses: torch.Tensor
) -> dict:
    """One discriminator update followed by one generator update.

    Args:
        images: (B, H, W) or (B, 1, H, W) float tensor in [0, 1].
        prior_poses: (B, J, 2) unpaired prior poses.

    Returns:
        Metrics record: the seven-term breakdown, the composite total, and
        the discriminator objective.
    """
    if images.shape[0] < 2:
        raise PairingError("train_step needs a batch of at least 2 samples")
    if images.dim() == 3:
        images = images.unsqueeze(1)
    if prior_poses.shape[-2] != state.topology.joint_count:
        raise ShapeMismatchError(
            f"prior poses have {prior_poses.shape[-2]} joints, topology "
            f"{state.topology.name} expects {state.topology.joint_count}"
        )
    state.phi.train()
    state.omega.train()
    state.lam.train()
    state.disc.train()
    cfg = state.config
    weights = state.weights

    # Rendered prior skeletons: real samples for D, supervision for Omega.
    with torch.no_grad():
        w = render_batch(prior_poses, state.topology, state.renderer).unsqueeze(1)

    # --- discriminator update (maximize the adversarial objective)
    with torch.no_grad():
        s_fixed = state.phi(images)
    d_objective = loss_discriminator(state.disc(w), state.disc(s_fixed))
    state.opt_disc.zero_grad(set_to_none=True)
    (-d_objective).backward()
    state.opt_disc.step()

    # --- generator update over the full consistency graph
    s = state.phi(images)
    y = state.omega(s)

    first_lift = state.lam(y)
    alpha = first_lift.elevation
    mu_e = alpha.mean()
    sigma_e = torch.sqrt(alpha.var(unbiased=False) + 1e-8)
    batch = y.shape[0]
    azimuths = torch.as_tensor(
        state.np_rng.uniform(-math.pi, math.pi, size=batch), dtype=y.dtype
    )
    eps = torch.randn(batch, generator=state.torch_gen, dtype=y.dtype)
    sampled_elev = mu_e + sigma_e * eps  # reparameterized draw from N(mu_e, sigma_e)
    rotations = view_rotation_matrix(azimuths, alpha, sampled_elev)

    def lifter(pose2d):
        return first_lift if pose2d is y else state.lam(pose2d)

    cyc = consistency_cycle(y, lifter, rotations, cfg.delta)

    l2 = loss_2d(cyc.y_prime, y)
    l3 = loss_3d(cyc.v_hat_prime, cyc.v_hat)
    ldef = loss_def_batch(cyc.v, cyc.v_prime, state.np_rng)
    lnf = -state.flow.log_prob(state.project_flow_coords(cyc.y_hat)).mean()
    lbl = loss_bl(cyc.v, state.topology, weights)
    ladv = loss_generator_adv(state.disc(s))
    kappa_y = render_batch(y, state.topology, state.renderer).unsqueeze(1)
    lomega = loss_omega(
        state.omega(w), prior_poses, kappa_y, s, weights.lambda_pixel
    )

    terms = LossTerms(
        adv=ladv, omega=lomega, pose2d=l2, pose3d=l3, deform=ldef, nf=lnf, bone=lbl
    )
    total, breakdown = loss_total(terms, weights)

    state.opt_gen.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for g in state.opt_gen.param_groups for p in g["params"]],
            cfg.grad_clip,
        )
    state.opt_gen.step()
    state.step += 1

    return {
        "step": state.step,
        "terms": breakdown,
        "loss_total": float(total.detach()),
        "disc_objective": float(d_objective.detach()),
    }


def predict(state: TrainState, image) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic test-time pipeline: image -> skeleton image -> 2D -> 3D.

    Only the three pipeline networks run; the discriminator and the flow are
    never invoked. Accepts one (H, W) image or a (B, H, W) batch.
    """
    arr = torch.as_tensor(
        np.asarray(image, dtype=np.float32), dtype=torch.float32
    )
    single = arr.dim() == 2
    if single:
        arr = arr.unsqueeze(0)
    arr = arr.unsqueeze(1)  # (B, 1, H, W)

    modes = [(m, m.training) for m in (state.phi, state.omega, state.lam)]
    for m, _ in modes:
        m.eval()
    try:
        with torch.no_grad():
            s = state.phi(arr)
            y = state.omega(s)
            lift = state.lam(y)
            v = lift_to_3d(y, lift, state.config.delta)
    finally:
        for m, was_training in modes:
            m.train(was_training)

    s_np = s[:, 0].numpy()
    y_np = y.numpy()
    v_np = v.numpy()
    if single:
        return s_np[0], y_np[0], v_np[0]
    return s_np, y_np, v_np


def validate(state: TrainState, images, poses3d, batch_size: int = 256) -> float:
    """P-MPJPE of the current model over a labeled split."""
    preds = []
    for start in range(0, len(images), batch_size):
        _, _, v = predict(state, images[start : start + batch_size])
        preds.append(v)
    return p_mpjpe(np.concatenate(preds), np.asarray(poses3d))


# --- checkpointing ------------------------------------------------------------------


def _weights_to_dict(w: LossWeights) -> dict:
    return {
        "w_d": w.w_d,
        "w_omega": w.w_omega,
        "w_base": w.w_base,
        "w_nf": w.w_nf,
        "w_bl": w.w_bl,
        "lambda_pixel": w.lambda_pixel,
        "sigma_b": w.sigma_b,
        "ref_bone_lengths": None
        if w.ref_bone_lengths is None
        else np.asarray(w.ref_bone_lengths),
    }


def _weights_from_dict(d: dict) -> LossWeights:
    return LossWeights(
        w_d=d["w_d"],
        w_omega=d["w_omega"],
        w_base=d["w_base"],
        w_nf=d["w_nf"],
        w_bl=d["w_bl"],
        lambda_pixel=d["lambda_pixel"],
        sigma_b=d["sigma_b"],
        ref_bone_lengths=d["ref_bone_lengths"],
    )


def checkpoint_save(path, state: TrainState) -> None:
    """Write a versioned, checksummed training checkpoint."""
    payload = io.BytesIO()
    torch.save(
        {
            "topology": state.topology.name,
            "topology_fields": {
                "name": state.topology.name,
                "joint_names": list(state.topology.joint_names),
                "parent": list(state.topology.parent),
                "edges": [list(e) for e in state.topology.edges],
                "root": state.topology.root,
            },
            "joint_count": state.topology.joint_count,
            "renderer": {
                "height": state.renderer.height,
                "width": state.renderer.width,
                "gamma": state.renderer.gamma,
                "pose_extent": state.renderer.pose_extent,
            },
            "weights": _weights_to_dict(state.weights),
            "config": state.config.to_dict(),
            "step": state.step,
            "nets": {
                "phi": state.phi.state_dict(),
                "omega": state.omega.state_dict(),
                "lambda": state.lam.state_dict(),
                "disc": state.disc.state_dict(),
            },
            "optimizers": {
                "gen": state.opt_gen.state_dict(),
                "disc": state.opt_disc.state_dict(),
            },
            "flow": {
                "dim": state.flow.dim,
                "n_layers": len(state.flow.layers),
                "hidden": state.flow.layers[0].net[0].out_features,
                "s_max": state.flow.layers[0].s_max,
                "state": state.flow.state_dict(),
            },
            "pca": {
                "mean": state.pca.mean,
                "basis": state.pca.basis,
                "eigenvalues": state.pca.eigenvalues,
            },
            "np_rng": state.np_rng.bit_generator.state,
            "torch_gen": state.torch_gen.get_state(),
        },
        payload,
    )
    blob = payload.getvalue()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "topology": state.topology.name,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "blob": blob,
        },
        path,
    )


def checkpoint_load(path, expected_topology: str | None = None) -> TrainState:
    """Restore a TrainState; verifies version, checksum, and topology."""
    try:
        wrapper = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(wrapper, dict) or "blob" not in wrapper:
        raise CorruptCheckpointError(f"checkpoint {path} has no payload")
    if wrapper.get("version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {wrapper.get('version')} != supported "
            f"{CHECKPOINT_VERSION}"
        )
    blob = wrapper["blob"]
    if hashlib.sha256(blob).hexdigest() != wrapper.get("sha256"):
        raise CorruptCheckpointError(f"checkpoint {path} failed its checksum")
    if expected_topology and wrapper.get("topology") != expected_topology:
        raise VersionError(
            f"checkpoint topology {wrapper.get('topology')!r} does not match "
            f"requested topology {expected_topology!r}"
        )
    data = torch.load(io.BytesIO(blob), weights_only=False)

    tf = data["topology_fields"]
    topology = make_topology(
        tf["name"], tf["joint_names"], tf["parent"], edges=tf["edges"], root=tf["root"]
    )
    renderer = RendererConfig(**data["renderer"])
    weights = _weights_from_dict(data["weights"])
    cfg_dict = data["config"]
    cfg_dict["adam_betas"] = tuple(cfg_dict["adam_betas"])
    config = TrainConfig(**cfg_dict)
    flow_meta = data["flow"]
    flow = FlowPrior(
        flow_meta["dim"],
        n_layers=flow_meta["n_layers"],
        hidden=flow_meta["hidden"],
        s_max=flow_meta["s_max"],
    )
    flow.load_state_dict(flow_meta["state"])
    pca = PcaSubspace(
        mean=data["pca"]["mean"],
        basis=data["pca"]["basis"],
        eigenvalues=data["pca"]["eigenvalues"],
    )
    state = init_train_state(config, topology, renderer, weights, flow, pca)
    state.phi.load_state_dict(data["nets"]["phi"])
    state.omega.load_state_dict(data["nets"]["omega"])
    state.lam.load_state_dict(data["nets"]["lambda"])
    state.disc.load_state_dict(data["nets"]["disc"])
    state.opt_gen.load_state_dict(data["optimizers"]["gen"])
    state.opt_disc.load_state_dict(data["optimizers"]["disc"])
    state.step = data["step"]
    state.np_rng.bit_generator.state = data["np_rng"]
    state.torch_gen.set_state(data["torch_gen"])
    return state


# --- the fit loop ------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    state: TrainState
    metrics_path: Path
    best_checkpoint: Path
    best_val: float | None


def fit(
    config: TrainConfig,
    topology: SkeletonTopology,
    renderer: RendererConfig,
    weights: LossWeights,
    flow: FlowPrior,
    pca: PcaSubspace,
    train_images,
    prior_poses,
    val_images=None,
    val_poses3d=None,
    out_dir="runs/default",
    resume_from=None,
    log_every: int = 0,
) -> FitResult:
    """Run training for ``config.steps`` steps with periodic validation.

    Writes ``metrics.jsonl`` (one record per step), periodic checkpoints, a
    step-0 checkpoint of the untrained model, and ``best.ckpt``/``last.ckpt``.
    Returns the best-by-validation state when a validation split is given,
    otherwise the final state.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    n_train = len(train_images)
    n_prior = len(prior_poses)
    if n_train == 0 or n_prior == 0:
        raise DatasetEmptyError("training needs non-empty train and prior splits")

    if resume_from is not None:
        state = checkpoint_load(resume_from, expected_topology=topology.name)
    else:
        state = init_train_state(config, topology, renderer, weights, flow, pca)
        checkpoint_save(out / "step0.ckpt", state)

    images_t = torch.as_tensor(np.asarray(train_images, dtype=np.float32))
    prior_t = torch.as_tensor(np.asarray(prior_poses, dtype=np.float32))

    has_val = val_images is not None and val_poses3d is not None
    best_val = None
    best_path = out / "best.ckpt"
    metrics_path = out / "metrics.jsonl"
    mode = "a" if resume_from is not None and metrics_path.exists() else "w"

    with metrics_path.open(mode) as log:
        while state.step < config.steps:
            img_idx = state.np_rng.choice(
                n_train, size=min(config.batch_size, n_train), replace=n_train < config.batch_size
            )
            prior_idx = state.np_rng.choice(
                n_prior, size=min(config.batch_size, n_prior), replace=n_prior < config.batch_size
            )
            record = train_step(state, images_t[img_idx], prior_t[prior_idx])

            do_eval = has_val and (
                state.step % config.eval_every == 0 or state.step == config.steps
            )
            if do_eval:
                val_err = validate(state, val_images, val_poses3d)
                record["val_p_mpjpe"] = val_err
                if best_val is None or val_err < best_val:
                    best_val = val_err
                    checkpoint_save(best_path, state)
            if state.step % config.checkpoint_every == 0 or state.step == config.steps:
                checkpoint_save(out / f"step{state.step:06d}.ckpt", state)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if log_every and state.step % log_every == 0:
                msg = f"step {state.step}/{config.steps} total {record['loss_total']:.4f}"
                if "val_p_mpjpe" in record:
                    msg += f" val {record['val_p_mpjpe']:.4f}"
                print(msg, flush=True)

    checkpoint_save(out / "last.ckpt", state)
    if not best_path.exists():
        checkpoint_save(best_path, state)
    final_state = checkpoint_load(best_path) if has_val else state
    return FitResult(
        state=final_state,
        metrics_path=metrics_path,
        best_checkpoint=best_path,
        best_val=best_val,
    )

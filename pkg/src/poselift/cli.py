"""Command-line surface binding the toolkit into reproducible workflows.

Commands::

    synth-gen      generate the procedural stick-figure dataset
    pretrain-flow  fit the normalizing-flow 2D-pose prior on the prior split
    train          run self-supervised training (needs a flow checkpoint)
    eval           Protocol II metrics of a checkpoint on a labeled split
    lift           predict 2D + 3D pose for one image (optional figure)
    render         rasterize a pose file to PNG skeleton images
    plot           loss and validation curves from a metrics log
    import-poses   converter stub: external 2D-pose JSON -> pose file

Every command is deterministic under a fixed ``--seed``; outputs land only
under ``--out`` together with a resolved-config snapshot. Exit codes: 2 for
configuration errors, 3 for IO errors, 4 for data errors, 5 for numeric
failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import errors as err
from .skeleton import PoseRecord, load_topology, pose_codec_read, pose_codec_write, topology_preset

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

_DATA_ERRORS = (
    err.FormatError,
    err.TopologyMismatchError,
    err.DatasetEmptyError,
    err.CorruptCheckpointError,
    err.VersionError,
    err.RankError,
    err.DegeneratePoseError,
)
_NUMERIC_ERRORS = (
    err.NonFiniteLossError,
    err.NonPositiveDepthError,
    err.DomainError,
    err.DegenerateTargetError,
)


def _write_config_snapshot(out_dir: Path, command: str, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    resolved["command"] = command
    (out_dir / f"config-{command}.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True)
    )


def _resolve_topology(name_or_path: str):
    if name_or_path in ("humanoid-17", "humanoid-9", "hand-21"):
        return topology_preset(name_or_path)
    return load_topology(name_or_path)


# --- commands -----------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    from .synth import (
        ClutterConfig,
        SplitCounts,
        default_kinematic_model,
        generate_dataset,
        synth_renderer_config,
    )

    out = Path(args.out)
    _write_config_snapshot(out, "synth-gen", args)
    model = default_kinematic_model()
    manifest = generate_dataset(
        model,
        SplitCounts(train=args.train, prior=args.prior, test=args.test, val=args.val),
        synth_renderer_config(args.resolution),
        seed=args.seed,
        out_dir=out,
        clutter=ClutterConfig(
            ellipse_count=args.ellipses, noise_amplitude=args.noise
        ),
    )
    print(f"wrote dataset to {out} (config hash {manifest['config_hash']})")
    return 0


def cmd_pretrain_flow(args) -> int:
    from .flow_prior import (
        make_flow,
        pca_fit,
        pca_project,
        pretrain_flow,
        save_flow_checkpoint,
        nll_loss,
    )
    import torch

    topo = _resolve_topology(args.topology)
    records = pose_codec_read(args.poses, topo)
    poses = np.stack([r.p2d for r in records])
    if len(poses) < args.n_pca:
        print(
            f"error: prior set of {len(poses)} poses is smaller than "
            f"n_pca={args.n_pca}",
            file=sys.stderr,
        )
        return EXIT_DATA
    out = Path(args.out)
    _write_config_snapshot(out.parent if out.suffix else out, "pretrain-flow", args)

    # Held-out tail for the final NLL report.
    n_holdout = max(1, len(poses) // 10)
    train_poses, holdout = poses[:-n_holdout], poses[-n_holdout:]
    pca = pca_fit(train_poses, args.n_pca)
    flow = make_flow(args.n_pca, n_layers=args.layers, seed=args.seed)
    history = pretrain_flow(
        flow,
        pca,
        train_poses,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        log_every=max(1, args.epochs // 10),
    )
    ckpt_path = out if out.suffix else out / "flow.ckpt"
    save_flow_checkpoint(
        ckpt_path,
        flow,
        pca,
        meta={"topology": topo.name, "epochs": args.epochs, "seed": args.seed},
    )
    curve_path = ckpt_path.with_suffix(".nll.json")
    curve_path.write_text(json.dumps({"epoch_nll": history}, indent=2))
    with torch.no_grad():
        holdout_nll = float(
            nll_loss(flow, torch.as_tensor(pca_project(pca, holdout), dtype=torch.float32))
        )
    print(f"wrote flow checkpoint to {ckpt_path}; held-out NLL {holdout_nll:.4f}")
    return 0


def _load_weights(args, prior_poses, topo):
    from .losses import LossWeights, reference_bone_lengths_from_poses

    ref = reference_bone_lengths_from_poses(prior_poses, topo)
    return LossWeights(
        w_d=args.w_d,
        w_omega=args.w_omega,
        w_base=args.w_base,
        w_nf=args.w_nf,
        w_bl=args.w_bl,
        ref_bone_lengths=ref,
    )


def cmd_train(args) -> int:
    import torch

    from .flow_prior import load_flow_checkpoint
    from .renderer import RendererConfig
    from .synth import load_manifest, load_split
    from .training import TrainConfig, fit

    data_dir = Path(args.data)
    manifest = load_manifest(data_dir)
    topo = topology_preset(manifest["topology"])
    renderer = RendererConfig(**manifest["renderer"])
    train_split = load_split(data_dir, "train", topo)
    prior_split = load_split(data_dir, "prior", topo)
    val_split = None
    if args.val_split and args.val_split in manifest["splits"]:
        val_split = load_split(data_dir, args.val_split, topo)

    flow, pca, _ = load_flow_checkpoint(args.flow)
    weights = _load_weights(args, prior_split.poses2d, topo)
    out = Path(args.out)
    _write_config_snapshot(out, "train", args)

    config = TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        lr_gen=args.lr_gen,
        lr_disc=args.lr_disc,
        seed=args.seed,
        eval_every=args.eval_every,
        checkpoint_every=args.checkpoint_every,
        delta=manifest["delta"],
    )
    result = fit(
        config,
        topo,
        renderer,
        weights,
        flow,
        pca,
        train_images=train_split.images,
        prior_poses=prior_split.poses2d,
        val_images=None if val_split is None else val_split.images,
        val_poses3d=None if val_split is None else val_split.poses3d,
        out_dir=out,
        resume_from=args.resume,
        log_every=args.log_every,
    )
    msg = f"training finished at step {result.state.step}; metrics in {result.metrics_path}"
    if result.best_val is not None:
        msg += f"; best val P-MPJPE {result.best_val:.5f}"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_poses
    from .synth import load_manifest, load_split
    from .training import checkpoint_load, predict

    data_dir = Path(args.data)
    manifest = load_manifest(data_dir)
    topo = topology_preset(manifest["topology"])
    split = load_split(data_dir, args.split, topo)
    if split.poses3d is None:
        print(f"error: split {args.split!r} has no 3D labels", file=sys.stderr)
        return EXIT_DATA
    state = checkpoint_load(args.checkpoint, expected_topology=topo.name)

    preds = []
    for start in range(0, len(split), 256):
        _, _, v = predict(state, split.images[start : start + 256])
        preds.append(v)
    unit_scale = manifest["unit_scale_mm"] if args.mm else 1.0
    report = evaluate_poses(
        np.concatenate(preds), split.poses3d, unit_scale=unit_scale
    )
    out = Path(args.out)
    _write_config_snapshot(out, "eval", args)
    (out / "report.json").write_text(report.to_json())
    print(
        f"P-MPJPE {report.p_mpjpe:.6f}  PCK@{report.threshold:g} {report.pck:.2f}  "
        f"AUC {report.auc:.2f}  (unit scale {unit_scale:g})"
    )
    return 0


def cmd_lift(args) -> int:
    from .evaluation import emit_pose_figure
    from .renderer import load_image_png
    from .training import checkpoint_load, predict

    state = checkpoint_load(args.checkpoint)
    image = load_image_png(args.image)
    skeleton_img, p2d, p3d = predict(state, image)
    out = Path(args.out)
    _write_config_snapshot(out, "lift", args)
    pose_path = out / (Path(args.image).stem + ".pose.json")
    pose_path.write_text(
        json.dumps(
            {"p2d": p2d.tolist(), "p3d": p3d.tolist()}, indent=2, sort_keys=True
        )
    )
    if args.figure:
        views = [np.radians(float(v)) for v in args.views.split(",") if v != ""]
        emit_pose_figure(
            image,
            p3d,
            None,
            views=views,
            path=out / (Path(args.image).stem + ".figure.png"),
            topology=state.topology,
        )
    print(f"wrote {pose_path}")
    return 0


def cmd_render(args) -> int:
    import torch

    from .renderer import RendererConfig, render, save_image_png

    topo = _resolve_topology(args.topology)
    records = pose_codec_read(args.poses, topo)
    out = Path(args.out)
    _write_config_snapshot(out, "render", args)
    config = RendererConfig(
        height=args.resolution,
        width=args.resolution,
        gamma=args.gamma,
        pose_extent=args.extent,
    )
    for rec in records:
        img = render(torch.as_tensor(rec.p2d, dtype=torch.float32), topo, config)
        save_image_png(img, out / f"{rec.id}.png")
    print(f"rendered {len(records)} poses to {out}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = []
    with open(args.metrics) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        print("error: metrics log is empty", file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out)
    _write_config_snapshot(out, "plot", args)
    steps = [r["step"] for r in records]
    term_keys = sorted(records[0]["terms"].keys())
    written = []
    for key in term_keys:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, [r["terms"][key] for r in records])
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        fig.tight_layout()
        path = out / f"{key}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    val_points = [(r["step"], r["val_p_mpjpe"]) for r in records if "val_p_mpjpe" in r]
    if val_points:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot([p[0] for p in val_points], [p[1] for p in val_points], marker="o")
        ax.set_xlabel("step")
        ax.set_ylabel("val P-MPJPE")
        fig.tight_layout()
        fig.savefig(out / "val_p_mpjpe.png", dpi=110)
        plt.close(fig)
        written.append(out / "val_p_mpjpe.png")
    print(f"wrote {len(written)} plots to {out}")
    return 0


def cmd_import_poses(args) -> int:
    """Converter stub: maps a generic JSON array of 2D poses to the codec.

    Input format: a JSON file holding either ``[[[x, y], ...], ...]`` or
    ``{"poses": [...]}`` with one (J, 2) pose per entry. Real-dataset loaders
    are out of scope; adapt external data to this shape upstream.
    """
    topo = _resolve_topology(args.topology)
    raw = json.loads(Path(args.input).read_text())
    poses = raw["poses"] if isinstance(raw, dict) else raw
    records = []
    for i, pose in enumerate(poses):
        arr = np.asarray(pose, dtype=np.float64)
        if arr.shape != (topo.joint_count, 2):
            raise err.TopologyMismatchError(
                f"pose {i} has shape {arr.shape}, expected ({topo.joint_count}, 2)"
            )
        records.append(PoseRecord(id=f"import-{i:06d}", p2d=arr))
    out = Path(args.out)
    _write_config_snapshot(out.parent if out.suffix else out, "import-poses", args)
    target = out if out.suffix else out / "poses.jsonl"
    pose_codec_write(target, records, topo)
    print(f"imported {len(records)} poses to {target}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poselift",
        description="Self-supervised 3D pose lifting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--prior", type=int, default=2000)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--ellipses", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.06)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("pretrain-flow", help="pretrain the 2D-pose flow prior")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topology", default="humanoid-9")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-pca", type=int, default=10, dest="n_pca")
    p.add_argument("--layers", type=int, default=8)
    p.set_defaults(func=cmd_pretrain_flow)

    p = sub.add_parser("train", help="run self-supervised training")
    p.add_argument("--data", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr-gen", type=float, default=2e-4, dest="lr_gen")
    p.add_argument("--lr-disc", type=float, default=1e-4, dest="lr_disc")
    p.add_argument("--eval-every", type=int, default=200, dest="eval_every")
    p.add_argument(
        "--checkpoint-every", type=int, default=1000, dest="checkpoint_every"
    )
    p.add_argument("--val-split", default="val", dest="val_split")
    p.add_argument("--resume", default=None)
    p.add_argument("--log-every", type=int, default=0, dest="log_every")
    p.add_argument("--w-d", type=float, default=1.0, dest="w_d")
    p.add_argument("--w-omega", type=float, default=1.0, dest="w_omega")
    p.add_argument("--w-base", type=float, default=1.0, dest="w_base")
    p.add_argument("--w-nf", type=float, default=1.0, dest="w_nf")
    p.add_argument("--w-bl", type=float, default=1.0, dest="w_bl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--mm", action="store_true", help="report in millimeters")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lift", help="lift a single image to a 3D pose")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", action="store_true")
    p.add_argument("--views", default="0,45,90")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("render", help="render a pose file to PNGs")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topology", default="humanoid-9")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--gamma", type=float, default=float(np.log(2.0) / 2.25))
    p.add_argument("--extent", type=float, default=1.0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("plot", help="plot loss/metric curves from a metrics log")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("import-poses", help="convert external 2D poses to the codec")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--topology", default="humanoid-17")
    p.set_defaults(func=cmd_import_poses)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching the config-error code
        return int(exc.code) if exc.code is not None else EXIT_CONFIG
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

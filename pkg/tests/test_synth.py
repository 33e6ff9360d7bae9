import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from poselift import camera, synth
from poselift.synth import (
    ClutterConfig,
    JointAngleRange,
    KinematicModel,
    SplitCounts,
    clutter_composite,
    default_kinematic_model,
    direction_to_angles,
    generate_dataset,
    load_split,
    sample_figure,
    sample_pose3d,
    synth_renderer_config,
)


def dir_hash(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestFigureSampling:
    def test_collapsed_ranges_give_constant_pose(self):
        base = default_kinematic_model()
        frozen_ranges = {
            name: JointAngleRange(r.theta_min, r.theta_min, r.phi_min, r.phi_min)
            for name, r in base.angle_ranges.items()
        }
        model = KinematicModel(
            topology=base.topology,
            bone_lengths=base.bone_lengths,
            angle_ranges=frozen_ranges,
            global_azimuth_range=(0.4, 0.4),
            global_elevation_mean=0.1,
            global_elevation_std=0.0,
        )
        rng = np.random.default_rng(110)
        first = sample_pose3d(model, rng)
        for _ in range(5):
            assert np.allclose(sample_pose3d(model, rng), first, atol=1e-12)

    def test_bone_lengths_exactly_canonical(self, kin_model):
        rng = np.random.default_rng(111)
        topo = kin_model.topology
        for _ in range(50):
            pose = sample_pose3d(kin_model, rng)
            for (i, j) in topo.edges:
                name = topo.joint_names[j]
                length = np.linalg.norm(pose[j] - pose[i])
                assert length == pytest.approx(kin_model.bone_lengths[name], abs=1e-9)

    def test_root_anchored_on_axis_at_delta(self, kin_model):
        rng = np.random.default_rng(112)
        for _ in range(20):
            pose = sample_pose3d(kin_model, rng)
            assert np.allclose(pose[kin_model.topology.root], [0.0, 0.0, 10.0], atol=1e-12)

    def test_ik_recovers_angles_inside_ranges(self, kin_model):
        # Inverse-kinematics oracle over 10^4 samples: undo the global
        # rotation, recover each joint's direction angles, check the box.
        rng = np.random.default_rng(113)
        topo = kin_model.topology
        for _ in range(1250):  # 1250 figures x 8 joints = 10^4 angle checks
            draw = sample_figure(kin_model, rng)
            pose = draw.pose3d.copy()
            pose[:, 2] -= kin_model.delta
            undo = (
                synth._rot_x(draw.global_elevation) @ synth._rot_y(draw.global_azimuth)
            ).T
            local = pose @ undo.T
            for j, name in enumerate(topo.joint_names):
                if j == topo.root:
                    continue
                r = kin_model.angle_ranges[name]
                theta, phi = direction_to_angles(local[j] - local[topo.parent[j]])
                assert r.theta_min - 1e-9 <= theta <= r.theta_max + 1e-9
                assert r.phi_min - 1e-9 <= phi <= r.phi_max + 1e-9
                sampled_theta, sampled_phi = draw.joint_angles[name]
                assert theta == pytest.approx(sampled_theta, abs=1e-9)
                assert phi == pytest.approx(sampled_phi, abs=1e-9)

    def test_global_elevation_statistics_recoverable(self, kin_model):
        rng = np.random.default_rng(114)
        elevations = [sample_figure(kin_model, rng).global_elevation for _ in range(10_000)]
        stats = camera.elevation_stats(np.array(elevations))
        assert abs(stats.mean - kin_model.global_elevation_mean) < 0.02
        assert abs(stats.std - kin_model.global_elevation_std) < 0.02


class TestClutter:
    def test_identity_with_zero_config(self):
        rng = np.random.default_rng(115)
        img = rng.uniform(0, 1, size=(64, 64))
        out = clutter_composite(
            img, rng, ClutterConfig(ellipse_count=0, noise_amplitude=0.0)
        )
        assert np.array_equal(out, img)

    def test_output_clamped_to_unit_interval(self):
        rng = np.random.default_rng(116)
        for _ in range(1000 // 10):
            img = rng.uniform(0, 1, size=(32, 32))
            out = clutter_composite(img, rng)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_mean_absolute_deviation_bounded(self):
        # Ellipses can raise a pixel by at most max_intensity over at most the
        # summed ellipse coverage; noise adds at most its amplitude in MAD
        # expectation. Measured over a batch of composites.
        rng = np.random.default_rng(117)
        config = ClutterConfig(ellipse_count=3, max_intensity=0.5, noise_amplitude=0.06)
        deviations = []
        for _ in range(50):
            img = np.zeros((64, 64))
            out = clutter_composite(img, rng, config)
            deviations.append(np.abs(out - img).mean())
        coverage_bound = config.ellipse_count * np.pi / 16.0  # max ellipse area frac
        bound = config.max_intensity * coverage_bound + config.noise_amplitude
        assert np.mean(deviations) <= bound

    def test_skeleton_signal_survives(self, kin_model, synth_poses):
        import torch

        from poselift.renderer import render

        _, poses2d = synth_poses
        rng = np.random.default_rng(118)
        rcfg = synth_renderer_config(64)
        correlations = []
        for p2 in poses2d[:20]:
            clean = render(
                torch.as_tensor(p2, dtype=torch.float32), kin_model.topology, rcfg
            ).numpy()
            noisy = clutter_composite(clean, rng)
            c = np.corrcoef(clean.ravel(), noisy.ravel())[0, 1]
            correlations.append(c)
        assert min(correlations) > 0.2


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory, kin_model):
    out = tmp_path_factory.mktemp("ds")
    manifest = generate_dataset(
        kin_model,
        SplitCounts(train=8, prior=10, test=6, val=4),
        synth_renderer_config(32),
        seed=1234,
        out_dir=out,
    )
    return out, manifest


class TestDatasetGeneration:

    def test_deterministic_bytes(self, tmp_path, kin_model):
        dirs = []
        for i in range(2):
            out = tmp_path / f"run{i}"
            generate_dataset(
                kin_model,
                SplitCounts(train=3, prior=3, test=2),
                synth_renderer_config(32),
                seed=7,
                out_dir=out,
            )
            dirs.append(dir_hash(out))
        assert dirs[0] == dirs[1]

    def test_split_ids_disjoint(self, small_dataset):
        out, _ = small_dataset
        ids = {}
        for split in ("train", "prior", "test", "val"):
            data = load_split(out, split)
            ids[split] = set(data.ids)
        all_ids = [i for s in ids.values() for i in s]
        assert len(all_ids) == len(set(all_ids))

    def test_projection_recheck_oracle(self, small_dataset):
        # Every stored 2D test pose equals the projection of its stored 3D.
        out, _ = small_dataset
        for split in ("test", "val"):
            data = load_split(out, split)
            reproj = data.poses3d[..., :2] / data.poses3d[..., 2:]
            assert np.abs(reproj - data.poses2d).max() < 1e-9

    def test_train_split_is_unlabeled(self, small_dataset):
        out, manifest = small_dataset
        train = load_split(out, "train")
        assert train.images is not None
        assert train.poses2d is None
        assert train.poses3d is None
        assert not (out / "train" / "poses.jsonl").exists()
        assert manifest["splits"]["train"]["labels_3d"] is False

    def test_prior_split_poses_only(self, small_dataset):
        out, _ = small_dataset
        prior = load_split(out, "prior")
        assert prior.images is None
        assert prior.poses2d is not None
        assert prior.poses3d is None

    def test_manifest_records_seed_and_hash(self, small_dataset):
        out, manifest = small_dataset
        on_disk = json.loads((out / "manifest.json").read_text())
        assert on_disk["seed"] == 1234
        assert on_disk["config_hash"] == manifest["config_hash"]
        assert on_disk["unit_scale_mm"] == pytest.approx(708.3333333333334)

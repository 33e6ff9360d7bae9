import numpy as np
import pytest

from poselift import skeleton
from poselift.errors import (
    CycleError,
    DegeneratePoseError,
    DuplicateEdgeError,
    FormatError,
    TopologyMismatchError,
)


class TestTopology:
    def test_presets_are_valid_trees(self):
        for name, joints, bones in [
            ("humanoid-17", 17, 16),
            ("humanoid-9", 9, 8),
            ("hand-21", 21, 20),
        ]:
            topo = skeleton.topology_preset(name)
            assert topo.joint_count == joints
            assert topo.bone_count == bones
            assert skeleton.validate_topology(topo) is topo

    def test_self_loop_edge_rejected(self):
        with pytest.raises(DuplicateEdgeError):
            skeleton.make_topology(
                "bad", ["a", "b", "c", "d"], [0, 0, 1, 2],
                edges=[(0, 1), (1, 2), (3, 3)],
            )

    def test_duplicate_edge_rejected(self):
        with pytest.raises(DuplicateEdgeError):
            skeleton.make_topology(
                "bad", ["a", "b", "c"], [0, 0, 1],
                edges=[(0, 1), (1, 2), (1, 0)],
            )

    def test_two_node_cycle_detected(self):
        parent = [0, 0, 5, 2, 3, 2]
        parent[2], parent[5] = 5, 2
        with pytest.raises(CycleError):
            skeleton.make_topology("bad", list("abcdef"), parent)

    def test_edge_out_of_range(self):
        with pytest.raises(IndexError):
            skeleton.make_topology(
                "bad", ["a", "b"], [0, 0], edges=[(0, 1), (0, 5)]
            )

    def test_parent_out_of_range(self):
        with pytest.raises(IndexError):
            skeleton.make_topology("bad", ["a", "b"], [0, 7])

    def test_load_topology_roundtrip(self, tmp_path):
        desc = {
            "name": "toy",
            "joints": ["root", "mid", "tip"],
            "parent": [0, 0, 1],
        }
        path = tmp_path / "toy.json"
        import json

        path.write_text(json.dumps(desc))
        topo = skeleton.load_topology(path)
        assert topo.joint_count == 3
        assert topo.edges == ((0, 1), (1, 2))


class TestNormalize:
    def test_identity_on_already_normalized(self, topo9):
        rng = np.random.default_rng(0)
        pose = rng.normal(size=(9, 2))
        normed = skeleton.normalize_pose_2d(pose, topo9)
        again = skeleton.normalize_pose_2d(normed, topo9)
        assert np.allclose(again, normed, atol=1e-9)

    def test_translation_invariance(self, topo9):
        rng = np.random.default_rng(1)
        pose = rng.normal(size=(9, 2))
        a = skeleton.normalize_pose_2d(pose, topo9)
        b = skeleton.normalize_pose_2d(pose + np.array([5.0, 5.0]), topo9)
        assert np.allclose(a, b, atol=1e-9)

    def test_scale_invariance(self, topo9):
        rng = np.random.default_rng(2)
        pose = rng.normal(size=(9, 2))
        a = skeleton.normalize_pose_2d(pose, topo9)
        b = skeleton.normalize_pose_2d(pose * 37.5, topo9)
        assert np.allclose(a, b, atol=1e-9)

    def test_postconditions_recomputed_independently(self, topo17):
        # Oracle: recompute the root position and mean norm from scratch.
        rng = np.random.default_rng(3)
        pose = rng.normal(2.0, 3.0, size=(17, 2))
        out = skeleton.normalize_pose_2d(pose, topo17)
        assert np.allclose(out[topo17.root], 0.0, atol=1e-12)
        mean_dist = np.mean(np.sqrt((out**2).sum(axis=1)))
        assert abs(mean_dist - 1.0) < 1e-6

    def test_degenerate_pose_raises(self, topo9):
        pose = np.ones((9, 2)) * 4.2
        with pytest.raises(DegeneratePoseError):
            skeleton.normalize_pose_2d(pose, topo9)


class TestCodec:
    def _random_records(self, rng, topo, n, with_3d=False):
        recs = []
        for i in range(n):
            p2d = rng.normal(size=(topo.joint_count, 2))
            p3d = rng.normal(size=(topo.joint_count, 3)) + 10 if with_3d else None
            recs.append(skeleton.PoseRecord(id=f"r{i:04d}", p2d=p2d, p3d=p3d))
        return recs

    def test_roundtrip_bitwise(self, tmp_path, topo17):
        rng = np.random.default_rng(4)
        recs = self._random_records(rng, topo17, 100, with_3d=True)
        path = tmp_path / "poses.jsonl"
        skeleton.pose_codec_write(path, recs, topo17)
        back = skeleton.pose_codec_read(path, topo17)
        assert len(back) == 100
        for a, b in zip(recs, back):
            assert a.id == b.id
            assert np.array_equal(a.p2d, b.p2d)
            assert np.array_equal(a.p3d, b.p3d)

    def test_roundtrip_all_presets(self, tmp_path):
        rng = np.random.default_rng(5)
        for name in ("humanoid-17", "humanoid-9", "hand-21"):
            topo = skeleton.topology_preset(name)
            recs = self._random_records(rng, topo, 10)
            path = tmp_path / f"{name}.jsonl"
            skeleton.pose_codec_write(path, recs, topo)
            back = skeleton.pose_codec_read(path, topo)
            for a, b in zip(recs, back):
                assert np.array_equal(a.p2d, b.p2d)

    def test_joint_count_mismatch(self, tmp_path, topo17):
        topo16 = skeleton.make_topology(
            "humanoid-17", [f"j{i}" for i in range(16)], [0] + [0] * 15
        )
        rng = np.random.default_rng(6)
        recs = self._random_records(rng, topo16, 1)
        path = tmp_path / "short.jsonl"
        skeleton.pose_codec_write(path, recs, topo16)
        with pytest.raises(TopologyMismatchError):
            skeleton.pose_codec_read(path, topo17)

    def test_non_numeric_token_names_line(self, tmp_path, topo9):
        path = tmp_path / "bad.jsonl"
        good = {
            "topology": "humanoid-9",
            "p2d": [[0.0, 0.0]] * 9,
            "p3d": None,
            "id": "ok",
        }
        import json

        bad = dict(good)
        bad["p2d"] = [["oops", 0.0]] + [[0.0, 0.0]] * 8
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(FormatError, match="line 2"):
            skeleton.pose_codec_read(path, topo9)

    def test_malformed_json_names_line(self, tmp_path, topo9):
        path = tmp_path / "broken.jsonl"
        path.write_text("{not json}\n")
        with pytest.raises(FormatError, match="line 1"):
            skeleton.pose_codec_read(path, topo9)

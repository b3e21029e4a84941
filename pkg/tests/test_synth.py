import json

import numpy as np
import pytest

from mmdpose import fbi
from mmdpose.skeleton import link_lengths
from mmdpose.synth import (NUM_ACTIONS, CameraModel, ProjectionError, Sample, SynthConfig, clean_copy, corrupt,
                           load_defaults, make_dataset, make_out_of_domain, project, sample_pose, sample_rng,
                           unproject)

from oracles import pinhole


def test_defaults_file_is_complete():
    d = load_defaults()
    assert len(d["action_presets"]) == NUM_ACTIONS
    assert d["noise_2d_std"] == 3.0 and d["coarse_z_noise_std"] == 30.0 and d["fbi_flip_prob"] == 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig.default(noise_2d_std=-1.0)
    with pytest.raises(ValueError):
        SynthConfig.default(fbi_flip_prob=1.5)
    with pytest.raises(ValueError):
        CameraModel(0.0, (0, 0), 5000)


def test_bone_lengths_match_config(synth_cfg, poses, topo):
    expected = synth_cfg.reference_link_lengths(topo)
    got = link_lengths(poses, topo)
    assert np.max(np.abs(got - expected) / expected) < 1e-9


def test_collapsed_ranges_give_rest_pose(synth_cfg, topo):
    ranges = {name: [[0.1, 0.1], [-0.2, -0.2], [0.3, 0.3]] for name in synth_cfg.joint_angle_ranges}
    cfg = SynthConfig.default(joint_angle_ranges=ranges, action_presets=[])
    a = sample_pose(cfg, sample_rng(0, 0))
    b = sample_pose(cfg, sample_rng(9, 77))
    assert np.array_equal(a, b)


def test_sampling_deterministic(synth_cfg):
    a = sample_pose(synth_cfg, sample_rng(4, 12), 3)
    b = sample_pose(synth_cfg, sample_rng(4, 12), 3)
    c = sample_pose(synth_cfg, sample_rng(4, 13), 3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_projection_examples():
    cam = CameraModel(1000.0, (0.0, 0.0), 5000.0)
    p = np.zeros((17, 3))
    p[1] = [100, 0, 0]
    uv = project(p, cam)
    assert uv[1, 0] == pytest.approx(20.0, abs=1e-12)
    assert np.array_equal(uv[0], [0.0, 0.0])
    cam2 = CameraModel(2000.0, (0.0, 0.0), 5000.0)
    assert np.allclose(project(p, cam2), 2 * uv)


def test_projection_matches_oracle(poses):
    cam = CameraModel.default()
    uv = project(poses[:10], cam)
    for pose, row in zip(poses[:10], uv):
        for j in range(17):
            u, v = pinhole(pose[j], cam.focal_length, *cam.principal_point, cam.subject_distance)
            assert row[j] == pytest.approx([u, v], rel=1e-12)


def test_projection_error_names_joint():
    p = np.zeros((17, 3))
    p[6, 2] = -6000.0
    with pytest.raises(ProjectionError) as exc:
        project(p, CameraModel.default())
    assert exc.value.joint == 6


def test_projection_roundtrip(poses):
    cam = CameraModel.default()
    back = unproject(project(poses, cam), poses[..., 2], cam)
    assert np.allclose(back, poses, rtol=1e-9, atol=1e-9)


def _sample(topo, poses):
    p = poses[0]
    uv = project(p, CameraModel.default())
    labels = fbi.label_fbi(p, topo)
    return Sample(0, 0, p, uv, uv, p[:, 2], p[:, 2], labels, labels)


def test_corrupt_zero_noise_is_identity(topo, poses):
    s = _sample(topo, poses)
    cfg = clean_copy(SynthConfig.default())
    c = corrupt(s, cfg, np.random.default_rng(0))
    assert np.array_equal(c.pose2d_noisy, s.pose2d)
    assert np.array_equal(c.coarse_z_noisy, s.coarse_z_gt)
    assert np.array_equal(c.fbi_noisy, s.fbi_gt)


def test_corrupt_keeps_ground_truth_and_valid_labels(topo, poses):
    s = _sample(topo, poses)
    cfg = SynthConfig.default(fbi_flip_prob=1.0)
    c = corrupt(s, cfg, np.random.default_rng(1))
    assert np.array_equal(c.pose3d_gt, s.pose3d_gt) and np.array_equal(c.fbi_gt, s.fbi_gt)
    assert np.all(fbi.one_hot(c.fbi_noisy).sum(-1) == 1)


def test_corrupt_noise_statistics(topo, poses):
    s = _sample(topo, poses)
    cfg = SynthConfig.default(noise_2d_std=2.0)
    rng = np.random.default_rng(2)
    noise = np.concatenate([(corrupt(s, cfg, rng).pose2d_noisy - s.pose2d).ravel() for _ in range(3000)])
    assert noise.size >= 1e5
    assert abs(noise.std() - 2.0) / 2.0 < 0.05


def test_split_arithmetic():
    ds = make_dataset(SynthConfig.default(count=10, seed=1))
    assert len(ds.train) == 8 and len(ds.test) == 2


def test_dataset_deterministic_and_consistent(small_ds, synth_cfg, topo):
    again = make_dataset(synth_cfg, CameraModel.default())
    for f in small_ds.FIELDS:
        assert np.array_equal(getattr(small_ds, f), getattr(again, f))
    assert np.array_equal(small_ds.fbi_gt, fbi.label_fbi(small_ds.pose3d_gt, topo))
    assert set(np.unique(small_ds.action)) == set(range(NUM_ACTIONS))
    assert np.all(small_ds.pose3d_gt[:, 0] == 0.0)
    assert np.array_equal(small_ds.coarse_z_gt, small_ds.pose3d_gt[..., 2])
    assert np.all((small_ds.fbi_noisy >= 0) & (small_ds.fbi_noisy <= 2))


def test_action_bins_are_distinct(small_ds):
    means = [small_ds.pose3d_gt[small_ds.action == a].mean(0) for a in range(NUM_ACTIONS)]
    gaps = [np.abs(means[a] - means[b]).max() for a in range(NUM_ACTIONS) for b in range(a)]
    assert min(gaps) > 20.0


def test_out_of_domain_differs(synth_cfg, small_ds):
    ood = make_out_of_domain(synth_cfg, count=50)
    assert len(ood) == 50 and np.all(ood.action == -1)
    assert np.abs(ood.pose3d_gt.mean(0) - small_ds.pose3d_gt.mean(0)).max() > 50.0


def test_config_json_is_serializable(synth_cfg):
    assert json.loads(json.dumps(synth_cfg.to_json()))["count"] == 900

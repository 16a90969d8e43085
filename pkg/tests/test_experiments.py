"""
Desk-scale experiments on the analytic room-with-sphere scene at 64x48.

Each one maps and tracks a real synthetic sequence on the CPU and takes minutes.
"""
import dataclasses
import math

import numpy as np
import pytest
import torch

from unislam.config import RunConfig
from unislam.datasets.base import FrameSequence
from unislam.datasets.synthetic import load_scene, synth_generate
from unislam.evaluation import ate_rmse, mesh_accuracy_completion, rendering_metrics
from unislam.geometry import Pose
from unislam.meshing import cull_mesh, extract_field_mesh, extract_mesh
from unislam.slam import InsertionReason, Slam

pytestmark = [pytest.mark.slow, pytest.mark.acceptance]

FRAMES = 20
MESH_CELL = 0.02


def experiment_config(**changes):
    values = {
        'geometry_levels': 8,
        'appearance_levels': 8,
        'base_resolution': 8,
        'finest_voxel': 0.02,
        'table_size_log2': 14,
        'decoder_hidden': 32,
        'n_stratified': 24,
        'n_importance': 8,
        'tracking_rays': 512,
        'mapping_rays': 1024,
        'tracking_iterations': 20,
        'mapping_iterations': 10,
        'first_frame_iterations': 200,
        'lr_rotation': 4e-3,
        'lr_translation': 2e-3,
        'render_chunk': 2048,
        'seed': 0,
    }
    values.update(changes)
    return RunConfig(**values)


def perturb(pose, generator, distance=0.01, degrees=2.0):
    direction = torch.randn(3, generator=generator, dtype=torch.float64)
    axis = torch.randn(3, generator=generator, dtype=torch.float64)
    moved = Pose(pose.quaternion, pose.translation + distance * direction / direction.norm())
    return moved.retract(math.radians(degrees) * axis / axis.norm())


def corrupt(sequence, fraction=0.1, seed=0):
    """Invalid depth and random color on a seeded `fraction` of the pixels of every frame."""
    generator = torch.Generator().manual_seed(seed)
    frames = []
    for frame in sequence:
        hit = torch.rand(frame.depth.shape, generator=generator, dtype=torch.float64) < fraction
        noise = torch.rand(frame.color.shape, generator=generator, dtype=torch.float64)
        frames.append(dataclasses.replace(
            frame,
            color=torch.where(hit[..., None], noise, frame.color),
            depth=torch.where(hit, torch.zeros_like(frame.depth), frame.depth),
        ))
    return dataclasses.replace(sequence, frames=frames)


@pytest.fixture(scope='module')
def room_scene():
    scene, _ = load_scene('room-sphere', frames=FRAMES, resolution=(64, 48))
    return scene


@pytest.fixture(scope='module')
def room_sequence(room_scene):
    return synth_generate(room_scene)


@pytest.fixture(scope='module')
def room_run(room_sequence):
    return Slam(experiment_config(), room_sequence).run()


def test_end_to_end_accuracy(room_scene, room_sequence, room_run):
    config = experiment_config()

    rmse, _ = ate_rmse(room_run.poses, room_sequence.gt_poses())
    rendering = rendering_metrics(room_run.field, room_sequence, room_run.poses, config)
    poses = room_sequence.gt_poses()
    ground_truth = cull_mesh(extract_mesh(room_scene, room_scene.bounds(), MESH_CELL), poses, room_sequence.intrinsics)
    reconstructed = cull_mesh(extract_field_mesh(room_run.field, MESH_CELL), poses, room_sequence.intrinsics)
    mesh = mesh_accuracy_completion(reconstructed, ground_truth, n_samples=50000)

    assert rmse < 0.5
    assert rendering.depth_l1_cm < 1.0
    assert mesh.comp_ratios_pct[0.01] > 90.0


def test_first_pose_is_never_optimised(room_sequence, room_run):
    assert room_run.poses[0].equals(room_sequence[0].gt_pose)
    assert room_run.keyframes[0].pose.equals(room_sequence[0].gt_pose)


def test_tracking_recovers_perturbed_poses(room_sequence, room_run):
    slam = Slam(experiment_config(tracking_iterations=20), room_sequence, field=room_run.field)
    frame = room_sequence[FRAMES // 2]
    generator = torch.Generator().manual_seed(11)
    recovered = 0

    for _ in range(50):
        initial = perturb(frame.gt_pose, generator)
        pose = slam.track_frame(frame, initial).pose
        if pose.distance_to(frame.gt_pose) < 2e-3 and pose.angle_to(frame.gt_pose) < 0.2:
            recovered += 1

    assert recovered >= 48


def test_tracking_keeps_a_static_camera_still(room_sequence, room_run):
    slam = Slam(experiment_config(), room_sequence, field=room_run.field)
    frame = room_sequence[FRAMES // 2]

    result = slam.track_frame(frame, frame.gt_pose)

    assert result.pose.distance_to(frame.gt_pose) < 2e-3
    assert result.pose.angle_to(frame.gt_pose) < 0.2


def test_zero_motion_sequence_stays_at_the_first_pose(room_sequence):
    first = room_sequence[0]
    frames = [dataclasses.replace(first, index=index, timestamp=float(index)) for index in range(6)]
    static = FrameSequence(frames, room_sequence.intrinsics, 'synthetic', room_sequence.bounds)

    result = Slam(experiment_config(mapping_period=2), static).run()

    assert all(pose.distance_to(first.gt_pose) < 2e-3 for pose in result.poses)
    assert all(pose.angle_to(first.gt_pose) < 0.2 for pose in result.poses)


def test_global_mapping_descends(room_sequence):
    config = experiment_config(first_frame_iterations=20, mapping_rays=2048)
    slam = Slam(config, room_sequence)
    slam.init_first_frame()
    slam.poses = room_sequence.gt_poses()
    for index in (4, 8, 12, 16):
        slam.insert_keyframe(room_sequence[index], room_sequence[index].gt_pose, InsertionReason.CONSTANT)
    current = room_sequence[FRAMES - 1]

    losses = np.array(slam.map_step(current, current.gt_pose, list(slam.keyframes), 40, 'gba').losses)

    assert len(slam.keyframes) == 5
    windows = losses.reshape(8, 5).mean(axis=1)
    assert np.all(np.isfinite(losses))
    assert np.mean(np.diff(windows) < 0) >= 0.75
    assert windows[-1] < windows[0]


def test_confidence_reweighting_limits_corruption(room_sequence, room_run):
    corrupted = corrupt(room_sequence)
    clean_rmse, _ = ate_rmse(room_run.poses, room_sequence.gt_poses())

    masked = Slam(experiment_config(), corrupted).run()
    unmasked = Slam(experiment_config(use_confidence_mask=False), corrupted).run()
    masked_rmse, _ = ate_rmse(masked.poses, room_sequence.gt_poses())
    unmasked_rmse, _ = ate_rmse(unmasked.poses, room_sequence.gt_poses())

    assert masked_rmse < 2 * clean_rmse
    assert unmasked_rmse > masked_rmse


def test_corruption_hits_a_tenth_of_the_pixels(room_sequence):
    corrupted = corrupt(room_sequence)

    invalid = [float((frame.depth == 0).double().mean() - (source.depth == 0).double().mean())
               for frame, source in zip(corrupted, room_sequence)]

    assert all(0.05 < share < 0.15 for share in invalid)

import dataclasses

import pytest
import torch

from tests.conftest import UNIT_BOUNDS, small_config
from unislam.config import parse_config
from unislam.datasets.base import Frame, FrameSequence
from unislam.datasets.tum import read_trajectory
from unislam.exceptions import DatasetError, RayMissError, SlamError
from unislam.field import load_checkpoint
from unislam.geometry import Pose, look_at
from unislam.selftest import SCHEDULER_CONFIG, SCHEDULER_TRACE
from unislam.slam import (
    InsertionReason,
    MappingAction,
    ScheduleDecision,
    Slam,
    covisibility,
    estimate_bounds,
    frame_rays,
    resolve_scene_bounds,
    sample_pixels,
    schedule,
    write_outputs,
)


@pytest.fixture
def scheduler_config():
    return small_config(**SCHEDULER_CONFIG)


@pytest.mark.parametrize('frame,beta,overlaps,expected', SCHEDULER_TRACE)
def test_schedule_trace(scheduler_config, frame, beta, overlaps, expected):
    assert schedule(frame, beta, overlaps, scheduler_config).action == expected


def test_schedule_loop_anchor_is_earliest_on_ties(scheduler_config):
    decision = schedule(206, 1e-4, {0: 0.97, 5: 0.99, 90: 0.99}, scheduler_config)

    assert decision.extra_mapping is MappingAction.LLCO
    assert decision.loop_anchor == 5
    assert decision.oc_max == 0.99


def test_schedule_ignores_young_keyframes(scheduler_config):
    decision = schedule(150, 1e-4, {0: 0.97, 60: 1.0}, scheduler_config)

    assert decision.loop_anchor == 0
    assert decision.oc_max == 0.97


def test_schedule_disabled_stages(scheduler_config):
    config = scheduler_config.replace(enable_lba=False, enable_gba=False)

    decision = schedule(104, 2e-3, {0: 0.99}, config)

    assert decision.extra_mapping is MappingAction.LLCO
    assert not decision.do_gba
    assert schedule(104, 2e-3, {}, config).action == 'none'


def test_schedule_decision_action():
    decision = ScheduleDecision(frame=4, extra_mapping=MappingAction.LBA, do_gba=True, beta=0.1, oc_max=0.0)

    assert decision.action == 'lba+gba'
    assert decision.maps
    assert not ScheduleDecision(5, MappingAction.NONE, False, 0.0, 0.0).maps
    assert ScheduleDecision(5, MappingAction.NONE, False, 0.0, 0.0).action == 'none'


def test_sample_pixels(intrinsics):
    u, v = sample_pixels(intrinsics, 200, torch.Generator().manual_seed(0))

    assert u.shape == v.shape == (200,)
    assert int(u.min()) >= 0 and int(u.max()) < intrinsics.width
    assert int(v.min()) >= 0 and int(v.max()) < intrinsics.height


def test_sample_pixels_respects_edge_crop(intrinsics):
    cropped = intrinsics.with_crop(3)

    u, v = sample_pixels(cropped, 200, torch.Generator().manual_seed(0))

    assert int(u.min()) >= 3 and int(u.max()) < intrinsics.width - 3
    assert int(v.min()) >= 3 and int(v.max()) < intrinsics.height - 3


def test_frame_rays_reads_targets(intrinsics, camera_pose):
    color = torch.rand(12, 16, 3, dtype=torch.float64)
    depth = torch.rand(12, 16, dtype=torch.float64) + 0.5

    batch = frame_rays(camera_pose, intrinsics, color, depth, 20, torch.Generator().manual_seed(1))

    assert len(batch) == 20
    assert batch.valid_depth.all()
    assert torch.all(batch.target_color >= 0) and torch.all(batch.target_color <= 1)


def test_covisibility_identical_and_turned(intrinsics):
    config = small_config(covisibility_pixels=50)
    bounds = torch.tensor([UNIT_BOUNDS[:3], UNIT_BOUNDS[3:]], dtype=torch.float64)
    pose = look_at((0.0, -0.8, 0.1), (0.0, 0.0, 0.0))
    depth = torch.full((12, 16), 0.8, dtype=torch.float64)
    turned = pose.compose(Pose(torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64), torch.zeros(3)))
    generator = torch.Generator().manual_seed(0)

    assert covisibility(pose, depth, pose, intrinsics, config, generator, bounds) == pytest.approx(1.0)
    assert covisibility(pose, depth, turned, intrinsics, config, generator, bounds) == 0.0


def test_covisibility_invalid_depth_uses_scene_box(intrinsics):
    config = small_config(covisibility_pixels=20)
    bounds = torch.tensor([UNIT_BOUNDS[:3], UNIT_BOUNDS[3:]], dtype=torch.float64)
    pose = look_at((0.0, -0.8, 0.1), (0.0, 0.0, 0.0))
    depth = torch.zeros(12, 16, dtype=torch.float64)

    overlap = covisibility(pose, depth, pose, intrinsics, config, torch.Generator().manual_seed(0), bounds)

    assert overlap == pytest.approx(1.0)


def test_estimate_bounds_covers_points_and_camera(intrinsics, camera_pose):
    depth = torch.full((12, 16), 0.5, dtype=torch.float64)
    frame = Frame(0, 0.0, torch.zeros(12, 16, 3, dtype=torch.float64), depth)

    bounds = estimate_bounds(frame, camera_pose, intrinsics, margin=0.1)

    low, high = torch.tensor(bounds[:3]), torch.tensor(bounds[3:])
    assert torch.all(camera_pose.translation > low) and torch.all(camera_pose.translation < high)
    assert torch.all(high - low > 0.2)


def test_estimate_bounds_without_depth(intrinsics, camera_pose):
    frame = Frame(0, 0.0, torch.zeros(12, 16, 3, dtype=torch.float64), torch.zeros(12, 16, dtype=torch.float64))

    with pytest.raises(RayMissError):
        estimate_bounds(frame, camera_pose, intrinsics)


def test_resolve_scene_bounds_order(tiny_sequence):
    first_pose = tiny_sequence[0].gt_pose
    config_bounds = (-2.0, -2.0, -2.0, 2.0, 2.0, 2.0)
    without_bounds = dataclasses.replace(tiny_sequence, bounds=None)

    assert resolve_scene_bounds(small_config(bounds=config_bounds), tiny_sequence, first_pose) == list(config_bounds)
    assert resolve_scene_bounds(small_config(), tiny_sequence, first_pose) == list(tiny_sequence.bounds)
    estimated = resolve_scene_bounds(small_config(), without_bounds, first_pose)
    assert len(estimated) == 6
    assert all(low < high for low, high in zip(estimated[:3], estimated[3:]))


def test_slam_refuses_empty_sequence(intrinsics):
    with pytest.raises(DatasetError):
        Slam(small_config(), FrameSequence([], intrinsics, 'generic'))


def test_insert_keyframe_order(tiny_sequence):
    slam = Slam(small_config(), tiny_sequence)
    slam.insert_keyframe(tiny_sequence[2], Pose.identity(), InsertionReason.LOCAL)

    with pytest.raises(SlamError, match='does not follow keyframe 2'):
        slam.insert_keyframe(tiny_sequence[1], Pose.identity(), InsertionReason.LOCAL)


def test_initial_guess_constant_velocity(tiny_sequence):
    slam = Slam(small_config(), tiny_sequence)
    slam.poses = [Pose.identity(), Pose(torch.tensor([0.0, 0.0, 0.0, 1.0]), torch.tensor([0.1, 0.0, 0.0]))]

    assert slam.initial_guess(1).distance_to(Pose.identity()) == 0.0
    assert slam.initial_guess(2).translation.tolist() == pytest.approx([0.2, 0.0, 0.0])


@pytest.mark.slow
def test_slam_run_and_outputs(tiny_sequence, tmp_path):
    config = small_config(mapping_period=2, loop_min_gap=2)
    slam = Slam(config, tiny_sequence)

    result = slam.run()

    assert len(result.poses) == len(tiny_sequence)
    assert [row.frame for row in result.trace] == list(range(len(tiny_sequence)))
    assert result.trace[0].action == 'first'
    assert result.poses[0].distance_to(tiny_sequence[0].gt_pose) == 0.0
    indices = [keyframe.index for keyframe in result.keyframes]
    assert indices[0] == 0 and 2 in indices
    assert indices == sorted(set(indices))
    assert all(torch.isfinite(pose.translation).all() for pose in result.poses)

    paths = write_outputs(result, config, slam.intrinsics, tmp_path / 'out')

    assert {path.name for path in paths.values()} == {
        'trajectory.txt', 'trace.csv', 'diagnostics.csv', 'config.txt', 'checkpoint.pt',
    }
    stamps, poses = read_trajectory(paths['trajectory'])
    assert stamps == pytest.approx(tiny_sequence.timestamps())
    assert len(poses) == len(tiny_sequence)
    assert paths['trace'].read_text().splitlines()[0] == 'frame,beta,oc_max,action,loss,tx,ty,tz,qx,qy,qz,qw'
    assert len(paths['diagnostics'].read_text().splitlines()) == len(tiny_sequence) + 1
    assert parse_config(paths['config'].read_text()) == config
    field, extras = load_checkpoint(paths['checkpoint'])
    assert extras['keyframes'] == indices
    assert field.checksum() == result.field.checksum()


def test_tracking_leaves_the_field_untouched(tiny_sequence):
    slam = Slam(small_config(tracking_iterations=3), tiny_sequence)
    slam.init_first_frame()
    before = slam.field.checksum()
    frame = tiny_sequence[1]

    result = slam.track_frame(frame, tiny_sequence[0].gt_pose)

    assert slam.field.checksum() == before
    assert len(result.losses) == 3
    assert all(block.values.requires_grad for block in slam.field.blocks())


@pytest.mark.slow
def test_slam_runs_are_reproducible(tiny_sequence):
    config = small_config(mapping_period=2, seed=5)

    first = Slam(config, tiny_sequence).run()
    second = Slam(config, tiny_sequence).run()

    assert all(left.equals(right) for left, right in zip(first.poses, second.poses))
    assert [row.values() for row in first.trace] == [row.values() for row in second.trace]
    assert first.field.checksum() == second.field.checksum()

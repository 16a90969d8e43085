import argparse
import dataclasses
import logging
import os
import pathlib
from typing import Callable, Dict, List, Optional, Sequence

import torch

from unislam import __version__
from unislam.config import RunConfig, load_config, parse_config
from unislam.constants import (
    DATASET_TAGS,
    EXIT_OK,
    EXIT_RUNTIME_FAILURE,
    EXIT_VALIDATION_ERROR,
    REPLICA_DEPTH_SCALE,
    UNCERTAINTY_IMAGE_SCALE,
)
from unislam.datasets import load_sequence
from unislam.datasets.base import FrameSequence, write_color, write_depth, write_gray
from unislam.datasets.synthetic import load_scene, synth_generate
from unislam.datasets.tum import associate, read_trajectory, write_trajectory
from unislam.evaluation import MetricReport, ate_rmse, mesh_accuracy_completion, mesh_report_fields
from unislam.exceptions import CheckpointError, DatasetError, EvaluationError, SlamError
from unislam.field import SceneField, load_checkpoint
from unislam.geometry import CameraIntrinsics, Pose
from unislam.meshing import cull_mesh, extract_field_mesh, extract_mesh, read_ply, write_ply
from unislam.rendering import render_image
from unislam.selftest import SUITES, format_results, run_selftest
from unislam.slam import Slam, write_outputs

logger = logging.getLogger(__name__)

LOG_LEVEL_VARIABLE = 'UNISLAM_LOG_LEVEL'
THREADS_VARIABLE = 'UNISLAM_THREADS'

Job = Callable[[], int]


def _existing(path: str, kind: str = 'file') -> pathlib.Path:
    resolved = pathlib.Path(path)
    if kind == 'file' and not resolved.is_file():
        raise DatasetError(f'{path} is not a file.')
    if kind == 'directory' and not resolved.is_dir():
        raise DatasetError(f'{path} is not a directory.')
    return resolved


def _output_directory(path: str) -> pathlib.Path:
    resolved = pathlib.Path(path)
    if resolved.exists() and not resolved.is_dir():
        raise DatasetError(f'Output {path} exists and is not a directory.')
    return resolved


def _output_file(path: str) -> pathlib.Path:
    resolved = pathlib.Path(path)
    if resolved.is_dir():
        raise DatasetError(f'Output {path} is a directory.')
    if not resolved.parent.exists():
        raise DatasetError(f'Output directory {resolved.parent} does not exist.')
    return resolved


def _checkpoint_config(extras: Dict) -> RunConfig:
    text = extras.get('config')
    if not isinstance(text, str):
        raise CheckpointError('Checkpoint carries no run configuration.')
    return parse_config(text)


def _checkpoint_intrinsics(extras: Dict) -> CameraIntrinsics:
    values = extras.get('intrinsics')
    if not values:
        raise CheckpointError('Checkpoint carries no camera intrinsics.')
    return CameraIntrinsics.from_values(values)


def _report_destination(path: Optional[str]) -> Optional[pathlib.Path]:
    return None if path is None else _output_file(path)


def _emit(report: MetricReport, destination: Optional[pathlib.Path]) -> None:
    print(report.to_text(), end='')  # noqa: T201
    if destination is not None:
        report.write(destination)


def prepare_synth(args: argparse.Namespace) -> Job:
    resolution = None
    if args.width or args.height:
        if not (args.width and args.height):
            raise DatasetError('--width and --height go together.')
        resolution = (args.width, args.height)
    scene, _ = load_scene(args.scene, frames=args.frames, resolution=resolution)
    scene.poses()
    out_dir = _output_directory(args.out)

    def job() -> int:
        sequence = synth_generate(scene, out_dir)
        mesh = extract_mesh(scene, scene.bounds(), args.mesh_cell, color_source=scene)
        write_ply(mesh, out_dir / 'gt_mesh.ply')
        write_trajectory(out_dir / 'groundtruth.txt', sequence.timestamps(), sequence.gt_poses())
        logger.info('synthetic dataset with %d frames written to %s', len(sequence), out_dir)
        return EXIT_OK
    return job


def _limit_frames(sequence: FrameSequence, frames: Optional[int]) -> FrameSequence:
    if frames is None or frames >= len(sequence):
        return sequence
    if frames < 1:
        raise DatasetError(f'--frames must be positive, got {frames}.')
    return dataclasses.replace(sequence, frames=sequence.frames[:frames])


def prepare_run(args: argparse.Namespace) -> Job:
    config = load_config(_existing(args.config), dataset=args.dataset_type)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    intrinsics = CameraIntrinsics.from_values(config.camera) if config.camera else None
    sequence = load_sequence(_existing(args.dataset, 'directory'), intrinsics=intrinsics, edge_crop=config.edge_crop)
    sequence = _limit_frames(sequence, args.frames)
    out_dir = _output_directory(args.out)

    def job() -> int:
        slam = Slam(config, sequence)
        result = slam.run()
        write_outputs(result, config, slam.intrinsics, out_dir)
        if sequence.has_ground_truth and len(sequence) >= 3:
            rmse, mean = ate_rmse(result.poses, sequence.gt_poses())
            MetricReport(ate_rmse_cm=rmse, ate_mean_cm=mean, seed=config.seed, config_digest=config.digest).write(
                out_dir / 'metrics',
            )
            logger.info('ATE RMSE %.3f cm over %d frames', rmse, len(sequence))
        return EXIT_OK
    return job


def prepare_eval_traj(args: argparse.Namespace) -> Job:
    estimated_stamps, estimated = read_trajectory(_existing(args.estimated))
    gt_stamps, ground_truth = read_trajectory(_existing(args.ground_truth))
    destination = _report_destination(args.out)
    if len(estimated) != len(ground_truth) or estimated_stamps != gt_stamps:
        matches = associate(estimated_stamps, gt_stamps, args.max_difference)
        if len(matches) < 3:
            raise EvaluationError(f'Only {len(matches)} poses could be associated by timestamp.')
        estimated = [estimated[i] for i, _ in matches]
        ground_truth = [ground_truth[j] for _, j in matches]

    def job() -> int:
        rmse, mean = ate_rmse(estimated, ground_truth, with_scale=args.scale)
        _emit(MetricReport(ate_rmse_cm=rmse, ate_mean_cm=mean), destination)
        return EXIT_OK
    return job


def prepare_eval_mesh(args: argparse.Namespace) -> Job:
    reconstructed = read_ply(_existing(args.reconstructed))
    ground_truth = read_ply(_existing(args.ground_truth))
    destination = _report_destination(args.out)

    def job() -> int:
        metrics = mesh_accuracy_completion(reconstructed, ground_truth, n_samples=args.samples, seed=args.seed)
        _emit(MetricReport(seed=args.seed, **mesh_report_fields(metrics)), destination)
        return EXIT_OK
    return job


def prepare_mesh(args: argparse.Namespace) -> Job:
    field, extras = load_checkpoint(_existing(args.checkpoint))
    out_path = _output_file(args.out)
    poses: List[Pose] = []
    intrinsics = None
    if args.cull:
        _, poses = read_trajectory(_existing(args.cull))
        intrinsics = _checkpoint_intrinsics(extras)

    def job() -> int:
        mesh = extract_field_mesh(field, cell_size=args.res, max_cells=args.max_cells)
        if intrinsics is not None:
            mesh = cull_mesh(mesh, poses, intrinsics)
        write_ply(mesh, out_path, binary=args.binary)
        return EXIT_OK
    return job


def _render_views(
    field: SceneField, poses: Sequence[Pose], intrinsics: CameraIntrinsics, config: RunConfig, out_dir: pathlib.Path,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, pose in enumerate(poses):
        image = render_image(field, pose, intrinsics, config, seed=config.seed + index)
        write_color(out_dir / f'color{index:06d}.png', image.color)
        write_depth(out_dir / f'depth{index:06d}.png', image.depth, REPLICA_DEPTH_SCALE)
        write_gray(out_dir / f'uncertainty{index:06d}.png', image.pixel_uncertainty, UNCERTAINTY_IMAGE_SCALE)
        write_depth(out_dir / f'depth_uncertainty{index:06d}.png', image.depth_uncertainty, REPLICA_DEPTH_SCALE)
        logger.info('rendered view %d of %d', index + 1, len(poses))


def prepare_render(args: argparse.Namespace) -> Job:
    field, extras = load_checkpoint(_existing(args.checkpoint))
    config = _checkpoint_config(extras)
    intrinsics = _checkpoint_intrinsics(extras)
    _, poses = read_trajectory(_existing(args.poses))
    if args.index is not None:
        if not 0 <= args.index < len(poses):
            raise DatasetError(f'Pose index {args.index} outside the {len(poses)} poses of {args.poses}.')
        poses = [poses[args.index]]
    out_dir = _output_directory(args.out)

    def job() -> int:
        _render_views(field, poses, intrinsics, config, out_dir)
        return EXIT_OK
    return job


def prepare_selftest(args: argparse.Namespace) -> Job:
    unknown = [name for name in args.suite or [] if name not in SUITES]
    if unknown:
        raise SlamError(f'Unknown suites {unknown}, expected some of {list(SUITES)}.')

    def job() -> int:
        results = run_selftest(args.suite)
        print(format_results(results))  # noqa: T201
        return EXIT_OK if all(result.passed for result in results) else EXIT_RUNTIME_FAILURE
    return job


COMMANDS: Dict[str, Callable[[argparse.Namespace], Job]] = {
    'synth': prepare_synth,
    'run': prepare_run,
    'eval-traj': prepare_eval_traj,
    'eval-mesh': prepare_eval_mesh,
    'mesh': prepare_mesh,
    'render': prepare_render,
    'selftest': prepare_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='unislam', description='Dense RGB-D SLAM with uncertainty-aware mapping.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument(
        '--log-level', default=os.environ.get(LOG_LEVEL_VARIABLE, 'INFO').upper(),
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
    )
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='render a synthetic RGB-D dataset from an analytic scene')
    synth.add_argument('scene', help='built-in scene name (room-sphere) or scene file')
    synth.add_argument('out')
    synth.add_argument('--frames', type=int)
    synth.add_argument('--width', type=int)
    synth.add_argument('--height', type=int)
    synth.add_argument('--mesh-cell', type=float, default=0.01, help='cell size of the ground-truth mesh')

    run = commands.add_parser('run', help='track and map a sequence')
    run.add_argument('config')
    run.add_argument('dataset')
    run.add_argument('out')
    run.add_argument('--dataset-type', choices=DATASET_TAGS)
    run.add_argument('--seed', type=int)
    run.add_argument('--frames', type=int, help='process only the first frames')

    eval_traj = commands.add_parser('eval-traj', help='absolute trajectory error of TUM-format trajectories')
    eval_traj.add_argument('estimated')
    eval_traj.add_argument('ground_truth')
    eval_traj.add_argument('--scale', action='store_true', help='also estimate a scale in the alignment')
    eval_traj.add_argument('--max-difference', type=float, default=0.02)
    eval_traj.add_argument('--out', help='report path; .txt and .csv are written')

    eval_mesh = commands.add_parser('eval-mesh', help='accuracy and completion between two meshes')
    eval_mesh.add_argument('reconstructed')
    eval_mesh.add_argument('ground_truth')
    eval_mesh.add_argument('--samples', type=int, default=200000)
    eval_mesh.add_argument('--seed', type=int, default=0)
    eval_mesh.add_argument('--out', help='report path; .txt and .csv are written')

    mesh = commands.add_parser('mesh', help='extract a mesh from a checkpoint')
    mesh.add_argument('checkpoint')
    mesh.add_argument('out')
    mesh.add_argument('--res', type=float, default=0.01)
    mesh.add_argument('--max-cells', type=int, default=64_000_000)
    mesh.add_argument('--cull', help='TUM trajectory whose camera frusta keep faces')
    mesh.add_argument('--binary', action='store_true')

    render = commands.add_parser('render', help='render color, depth and uncertainty images')
    render.add_argument('checkpoint')
    render.add_argument('poses', help='TUM-format pose file')
    render.add_argument('out')
    render.add_argument('--index', type=int, help='render only this pose')

    selftest = commands.add_parser('selftest', help='run the property suites')
    selftest.add_argument('--suite', action='append', choices=list(SUITES))
    return parser


def configure_threads() -> None:
    threads = os.environ.get(THREADS_VARIABLE)
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            logger.warning('ignoring %s=%r, expected an integer', THREADS_VARIABLE, threads)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION_ERROR

    logging.basicConfig(level=args.log_level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    configure_threads()

    try:
        job = COMMANDS[args.command](args)
    except SlamError as e:
        logger.error('%s: %s', args.command, e)
        return EXIT_VALIDATION_ERROR
    try:
        return job()
    except Exception:  # noqa: B902
        logger.exception('%s failed', args.command)
        return EXIT_RUNTIME_FAILURE

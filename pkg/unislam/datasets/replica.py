import logging
import pathlib
import re
from typing import Dict, List, Optional

import torch

from unislam.columns import Column
from unislam.constants import REPLICA_DEPTH_SCALE, REPLICA_INTRINSICS
from unislam.datasets.base import (
    BOUNDS_FILE,
    CAMERA_FILE,
    Frame,
    FrameSequence,
    PathLike,
    read_color,
    read_depth,
    resolve_bounds,
    resolve_intrinsics,
    run_parser,
    write_bounds_file,
    write_camera_file,
    write_color,
    write_depth,
)
from unislam.exceptions import DatasetError, SkipRow
from unislam.geometry import CameraIntrinsics, Pose
from unislam.parsers.text import BaseTextParser
from unislam.processors import FloatProcessor

logger = logging.getLogger(__name__)

_FRAME_PATTERN = re.compile(r'^frame(\d{6})\.jpg$')
_DEPTH_PATTERN = re.compile(r'^depth(\d{6})\.png$')


class ReplicaTrajectoryParser(BaseTextParser):
    """One row-major camera-to-world 4x4 matrix per line."""

    expected_fields = 16
    columns = [Column(f'm{index:02d}', index, FloatProcessor(), required=True) for index in range(16)]

    def clean_row(self, row_data: Dict, row: List, row_index: int) -> Dict:
        row_data = super().clean_row(row_data, row, row_index)
        bottom = [row_data[f'm{index:02d}'] for index in range(12, 16)]
        if bottom != [0.0, 0.0, 0.0, 1.0]:
            self.add_errors(f'last matrix row must be 0 0 0 1, got {bottom}', row_index=row_index)
            raise SkipRow(f'Row {row_index} is not a rigid transform.')
        return row_data


def read_matrices(path: PathLike) -> List[Pose]:
    poses = []
    for row in run_parser(ReplicaTrajectoryParser, path):
        values = [row[f'm{index:02d}'] for index in range(16)]
        poses.append(Pose.from_matrix(torch.tensor(values, dtype=torch.float64).reshape(4, 4)))
    return poses


def write_matrices(path: PathLike, poses: List[Pose]) -> None:
    lines = [' '.join(repr(value) for value in pose.matrix().reshape(-1).tolist()) for pose in poses]
    pathlib.Path(path).write_text('\n'.join(lines) + '\n')


def _numbered(directory: pathlib.Path, pattern: 're.Pattern') -> List[pathlib.Path]:
    files = [path for path in directory.iterdir() if pattern.match(path.name)]
    return sorted(files, key=lambda path: int(pattern.match(path.name).group(1)))  # type: ignore


def load_replica(
    directory: PathLike, intrinsics: Optional[CameraIntrinsics] = None, edge_crop: int = 0,
) -> FrameSequence:
    directory = pathlib.Path(directory)
    results = directory / 'results'
    trajectory = directory / 'traj.txt'
    if not results.is_dir() or not trajectory.exists():
        raise DatasetError(f'{directory} must contain results/ and traj.txt.')

    color_files = _numbered(results, _FRAME_PATTERN)
    depth_files = _numbered(results, _DEPTH_PATTERN)
    poses = read_matrices(trajectory)
    if not (len(color_files) == len(depth_files) == len(poses)):
        raise DatasetError(
            f'{directory}: {len(color_files)} color images, {len(depth_files)} depth images '
            f'and {len(poses)} trajectory rows do not match.',
        )

    frames = [
        Frame(
            index=index,
            timestamp=float(index),
            color=read_color(color_file),
            depth=read_depth(depth_file, REPLICA_DEPTH_SCALE),
            gt_pose=pose,
        )
        for index, (color_file, depth_file, pose) in enumerate(zip(color_files, depth_files, poses))
    ]
    default = CameraIntrinsics.from_values(
        [REPLICA_INTRINSICS[key] for key in REPLICA_INTRINSICS], edge_crop=edge_crop,
    )
    sequence = FrameSequence(
        frames=frames,
        intrinsics=resolve_intrinsics(directory, default, intrinsics),
        dataset='replica',
        bounds=resolve_bounds(directory),
    )
    logger.info('loaded %d Replica frames from %s', len(sequence), directory)
    return sequence


def write_replica(sequence: FrameSequence, directory: PathLike) -> pathlib.Path:
    """Writes a sequence in the layout `load_replica` reads, camera and bounds files included."""
    directory = pathlib.Path(directory)
    results = directory / 'results'
    results.mkdir(parents=True, exist_ok=True)
    for frame in sequence:
        write_color(results / f'frame{frame.index:06d}.jpg', frame.color)
        write_depth(results / f'depth{frame.index:06d}.png', frame.depth, REPLICA_DEPTH_SCALE)
    write_matrices(directory / 'traj.txt', [frame.gt_pose or Pose.identity() for frame in sequence])
    write_camera_file(directory / CAMERA_FILE, sequence.intrinsics)
    if sequence.bounds:
        write_bounds_file(directory / BOUNDS_FILE, sequence.bounds)
    logger.info('wrote %d frames to %s', len(sequence), directory)
    return directory

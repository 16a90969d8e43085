import logging
import pathlib
from typing import Dict, List, Optional, Tuple

import numpy as np

from unislam.columns import Column
from unislam.constants import TUM_DEPTH_SCALE, TUM_INTRINSICS, TUM_MAX_TIME_DIFFERENCE
from unislam.datasets.base import (
    Frame,
    FrameSequence,
    PathLike,
    read_color,
    read_depth,
    resolve_bounds,
    resolve_intrinsics,
    run_parser,
)
from unislam.exceptions import DatasetError, SkipRow
from unislam.geometry import CameraIntrinsics, Pose
from unislam.parsers.text import BaseTextParser
from unislam.processors import FloatProcessor, StringProcessor

logger = logging.getLogger(__name__)

TRAJECTORY_FIELDS = ('timestamp', 'tx', 'ty', 'tz', 'qx', 'qy', 'qz', 'qw')


class TumIndexParser(BaseTextParser):
    """rgb.txt / depth.txt: `timestamp filename` per line."""

    expected_fields = 2
    columns = [
        Column('timestamp', 0, FloatProcessor(), required=True, unique=True),
        Column('path', 1, StringProcessor(), required=True),
    ]


class TumTrajectoryParser(BaseTextParser):
    """`timestamp tx ty tz qx qy qz qw` per line."""

    expected_fields = 8
    columns = [
        Column(name, index, FloatProcessor(), required=True, unique=index == 0)
        for index, name in enumerate(TRAJECTORY_FIELDS)
    ]

    def clean_row(self, row_data: Dict, row: List, row_index: int) -> Dict:
        row_data = super().clean_row(row_data, row, row_index)
        if all(row_data[name] == 0 for name in ('qx', 'qy', 'qz', 'qw')):
            self.add_errors('quaternion has zero norm', row_index=row_index)
            raise SkipRow(f'Row {row_index} holds an invalid quaternion.')
        return row_data


def associate(
    first: List[float], second: List[float], max_difference: float = TUM_MAX_TIME_DIFFERENCE,
) -> List[Tuple[int, int]]:
    """
    Greedy one-to-one matching of timestamps, closest pairs first.

    Returns index pairs sorted by the first list.
    """
    if not first or not second:
        return []
    first_stamps = np.asarray(first, dtype=np.float64)
    second_stamps = np.asarray(second, dtype=np.float64)
    order = np.argsort(second_stamps, kind='stable')
    ordered = second_stamps[order]
    lows = np.searchsorted(ordered, first_stamps - max_difference, side='left')
    highs = np.searchsorted(ordered, first_stamps + max_difference, side='right')

    candidates = []
    for i, (low, high) in enumerate(zip(lows, highs)):
        for j in order[low:high]:
            difference = abs(first_stamps[i] - second_stamps[j])
            if difference <= max_difference:
                candidates.append((float(difference), i, int(j)))
    candidates.sort()

    used_first, used_second = set(), set()
    matches = []
    for _, i, j in candidates:
        if i in used_first or j in used_second:
            continue
        used_first.add(i)
        used_second.add(j)
        matches.append((i, j))
    return sorted(matches)


def nearest_poses(timestamps: List[float], trajectory: List[Dict]) -> List[Pose]:
    stamps = np.array([row['timestamp'] for row in trajectory])
    order = np.argsort(stamps)
    stamps = stamps[order]
    poses = []
    for timestamp in timestamps:
        position = int(np.searchsorted(stamps, timestamp))
        neighbours = [index for index in (position - 1, position) if 0 <= index < len(stamps)]
        best = min(neighbours, key=lambda index: abs(stamps[index] - timestamp))
        row = trajectory[int(order[best])]
        poses.append(Pose.from_tum([row[name] for name in TRAJECTORY_FIELDS[1:]]))
    return poses


def read_trajectory(path: PathLike) -> Tuple[List[float], List[Pose]]:
    rows = run_parser(TumTrajectoryParser, path)
    poses = [Pose.from_tum([row[name] for name in TRAJECTORY_FIELDS[1:]]) for row in rows]
    return [row['timestamp'] for row in rows], poses


def write_trajectory(path: PathLike, timestamps: List[float], poses: List[Pose]) -> None:
    lines = []
    for timestamp, pose in zip(timestamps, poses):
        values = ' '.join(f'{value:.9f}' for value in pose.to_tum())
        lines.append(f'{timestamp:.6f} {values}')
    pathlib.Path(path).write_text('\n'.join(lines) + '\n')


def load_tum(
    directory: PathLike, intrinsics: Optional[CameraIntrinsics] = None, edge_crop: int = 0,
) -> FrameSequence:
    directory = pathlib.Path(directory)
    missing = [name for name in ('rgb.txt', 'depth.txt') if not (directory / name).exists()]
    if missing:
        raise DatasetError(f'{directory} is missing index files {missing}.')

    color_rows = run_parser(TumIndexParser, directory / 'rgb.txt')
    depth_rows = run_parser(TumIndexParser, directory / 'depth.txt')
    matches = associate([row['timestamp'] for row in color_rows], [row['timestamp'] for row in depth_rows])
    dropped = len(color_rows) - len(matches)
    if dropped:
        logger.warning('%s: dropped %d color frames without a depth frame within %.3f s',
                       directory, dropped, TUM_MAX_TIME_DIFFERENCE)

    timestamps = [color_rows[i]['timestamp'] for i, _ in matches]
    gt_poses: List[Optional[Pose]] = [None] * len(matches)
    groundtruth = directory / 'groundtruth.txt'
    if groundtruth.exists():
        trajectory = run_parser(TumTrajectoryParser, groundtruth)
        if not trajectory:
            raise DatasetError(f'{groundtruth} holds no poses.')
        gt_poses = list(nearest_poses(timestamps, trajectory))

    frames = []
    for index, ((color_index, depth_index), pose) in enumerate(zip(matches, gt_poses)):
        frames.append(Frame(
            index=index,
            timestamp=timestamps[index],
            color=read_color(directory / color_rows[color_index]['path']),
            depth=read_depth(directory / depth_rows[depth_index]['path'], TUM_DEPTH_SCALE),
            gt_pose=pose,
        ))

    default = CameraIntrinsics.from_values([TUM_INTRINSICS[key] for key in TUM_INTRINSICS], edge_crop=edge_crop)
    sequence = FrameSequence(
        frames=frames,
        intrinsics=resolve_intrinsics(directory, default, intrinsics),
        dataset='tum',
        bounds=resolve_bounds(directory),
    )
    logger.info('loaded %d TUM frames from %s', len(sequence), directory)
    return sequence

import pathlib
from typing import Optional

from unislam.datasets.base import Frame, FrameSequence, PathLike
from unislam.datasets.replica import load_replica
from unislam.datasets.synthetic import SCENE_FILE
from unislam.datasets.tum import load_tum
from unislam.exceptions import DatasetError
from unislam.geometry import CameraIntrinsics


def load_sequence(
    directory: PathLike, intrinsics: Optional[CameraIntrinsics] = None, edge_crop: int = 0,
) -> FrameSequence:
    """Picks the loader from the directory layout: TUM index files or a Replica results/ folder."""
    directory = pathlib.Path(directory)
    if (directory / 'rgb.txt').exists():
        return load_tum(directory, intrinsics=intrinsics, edge_crop=edge_crop)
    if (directory / 'results').is_dir():
        sequence = load_replica(directory, intrinsics=intrinsics, edge_crop=edge_crop)
        if (directory / SCENE_FILE).exists():
            sequence.dataset = 'synthetic'
        return sequence
    raise DatasetError(f'{directory} is neither a TUM nor a Replica style dataset.')


__all__ = ['Frame', 'FrameSequence', 'load_sequence', 'load_replica', 'load_tum']

import dataclasses
import logging
import pathlib
from typing import Iterator, List, Optional, Tuple, Type, Union

import cv2
import numpy as np
import torch

from unislam.columns import Column
from unislam.exceptions import DatasetError, ParserError
from unislam.geometry import CameraIntrinsics, Pose
from unislam.parsers.text import BaseTextParser
from unislam.processors import FloatProcessor, StringProcessor

logger = logging.getLogger(__name__)

PathLike = Union[pathlib.Path, str]

CAMERA_FILE = 'camera.txt'
BOUNDS_FILE = 'bounds.txt'
CAMERA_KEYS = ('fx', 'fy', 'cx', 'cy', 'width', 'height')


@dataclasses.dataclass(frozen=True, eq=False)
class Frame:
    index: int
    timestamp: float
    color: torch.Tensor
    depth: torch.Tensor
    gt_pose: Optional[Pose] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape[0], self.depth.shape[1]


@dataclasses.dataclass(eq=False)
class FrameSequence:
    frames: List[Frame]
    intrinsics: CameraIntrinsics
    dataset: str
    bounds: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        errors = []
        shapes = {frame.shape for frame in self.frames}
        if len(shapes) > 1:
            errors.append(f'frames have different image sizes: {sorted(shapes)}')
        expected = (self.intrinsics.height, self.intrinsics.width)
        if shapes and shapes != {expected}:
            errors.append(f'image size {sorted(shapes)[0]} does not match the camera size {expected}')
        if any(bool((frame.depth < 0).any()) for frame in self.frames):
            errors.append('depth images hold negative values')
        with_pose = sum(frame.gt_pose is not None for frame in self.frames)
        if 0 < with_pose < len(self.frames):
            errors.append(f'only {with_pose} of {len(self.frames)} frames carry a ground-truth pose')
        if errors:
            raise DatasetError(errors)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> Frame:
        return self.frames[index]

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.frames)

    @property
    def has_ground_truth(self) -> bool:
        return bool(self.frames) and self.frames[0].gt_pose is not None

    def gt_poses(self) -> List[Pose]:
        return [frame.gt_pose for frame in self.frames if frame.gt_pose is not None]

    def timestamps(self) -> List[float]:
        return [frame.timestamp for frame in self.frames]


def decode_depth(raw: np.ndarray, scale: float) -> torch.Tensor:
    return torch.from_numpy(raw.astype(np.float64) / scale)


def encode_depth(depth: Union[np.ndarray, torch.Tensor], scale: float) -> np.ndarray:
    values = np.asarray(depth, dtype=np.float64)
    raw = np.round(values * scale)
    if (raw > np.iinfo(np.uint16).max).any():
        raise DatasetError(f'Depth beyond {np.iinfo(np.uint16).max / scale:.3f} m does not fit a 16-bit PNG.')
    return raw.astype(np.uint16)


def quantize_depth(depth: Union[np.ndarray, torch.Tensor], scale: float) -> torch.Tensor:
    return decode_depth(encode_depth(depth, scale), scale)


def read_color(path: PathLike) -> torch.Tensor:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f'Unable to read image {path}.')
    image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    return torch.from_numpy(image.astype(np.float64) / 255.0)


def read_depth(path: PathLike, scale: float) -> torch.Tensor:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f'Unable to read depth image {path}.')
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise DatasetError(f'Depth image {path} must be a single channel 16-bit PNG, got {raw.dtype} {raw.shape}.')
    return decode_depth(raw, scale)


def write_color(path: PathLike, color: Union[np.ndarray, torch.Tensor]) -> None:
    image = np.round(np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR), [cv2.IMWRITE_JPEG_QUALITY, 100]):
        raise DatasetError(f'Unable to write image {path}.')


def write_depth(path: PathLike, depth: Union[np.ndarray, torch.Tensor], scale: float) -> None:
    if not cv2.imwrite(str(path), encode_depth(depth, scale)):
        raise DatasetError(f'Unable to write depth image {path}.')


def write_gray(path: PathLike, values: Union[np.ndarray, torch.Tensor], scale: float) -> None:
    image = np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * scale).astype(np.uint8)
    if not cv2.imwrite(str(path), image):
        raise DatasetError(f'Unable to write image {path}.')


class CameraFileParser(BaseTextParser):
    """`key = value` lines with the pinhole camera of a dataset."""

    expected_fields = 3
    columns = [
        Column('key', 0, StringProcessor(), required=True, unique=True),
        Column('value', 2, FloatProcessor(), required=True),
    ]

    def clean_column_key(self, value: str) -> str:
        if value not in CAMERA_KEYS:
            raise DatasetError(f'unknown camera key {value}, expected one of {list(CAMERA_KEYS)}')
        return value


class BoundsFileParser(BaseTextParser):
    expected_fields = 6
    columns = [
        Column(name, index, FloatProcessor(), required=True)
        for index, name in enumerate(('min_x', 'min_y', 'min_z', 'max_x', 'max_y', 'max_z'))
    ]


def run_parser(parser_cls: Type[BaseTextParser], path: PathLike) -> List[dict]:
    parser = parser_cls(file_path=path)
    try:
        parser(raise_errors=True)
    except ParserError as e:
        raise DatasetError(e.messages)
    return parser.cleaned_data


def read_camera_file(path: PathLike, edge_crop: int = 0) -> CameraIntrinsics:
    values = {row['key']: row['value'] for row in run_parser(CameraFileParser, path)}
    missing = [key for key in CAMERA_KEYS if key not in values]
    if missing:
        raise DatasetError(f'file: {path}, missing camera keys {missing}')
    return CameraIntrinsics.from_values([values[key] for key in CAMERA_KEYS], edge_crop=edge_crop)


def write_camera_file(path: PathLike, intrinsics: CameraIntrinsics) -> None:
    lines = [f'{key} = {value!r}' for key, value in zip(CAMERA_KEYS, intrinsics.as_values())]
    pathlib.Path(path).write_text('\n'.join(lines) + '\n')


def read_bounds_file(path: PathLike) -> Optional[Tuple[float, ...]]:
    rows = run_parser(BoundsFileParser, path)
    if len(rows) != 1:
        raise DatasetError(f'file: {path}, expected exactly one line of bounds, got {len(rows)}')
    row = rows[0]
    return tuple(row[column.name] for column in BoundsFileParser.columns)


def write_bounds_file(path: PathLike, bounds: Tuple[float, ...]) -> None:
    pathlib.Path(path).write_text(' '.join(repr(float(value)) for value in bounds) + '\n')


def resolve_intrinsics(
    directory: pathlib.Path, default: CameraIntrinsics, override: Optional[CameraIntrinsics],
) -> CameraIntrinsics:
    if override is not None:
        return override
    camera_file = directory / CAMERA_FILE
    if camera_file.exists():
        return read_camera_file(camera_file, edge_crop=default.edge_crop)
    return default


def resolve_bounds(directory: pathlib.Path) -> Optional[Tuple[float, ...]]:
    bounds_file = directory / BOUNDS_FILE
    if bounds_file.exists():
        return read_bounds_file(bounds_file)
    return None

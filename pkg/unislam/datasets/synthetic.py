import dataclasses
import io
import logging
import math
import pathlib
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from typing_extensions import Protocol

from unislam.columns import Column
from unislam.constants import REPLICA_DEPTH_SCALE
from unislam.datasets.base import Frame, FrameSequence, PathLike, quantize_depth
from unislam.datasets.replica import load_replica, write_replica
from unislam.exceptions import DatasetError, ParserError, SkipRow
from unislam.geometry import CameraIntrinsics, Pose, look_at
from unislam.parsers.text import BaseTextParser
from unislam.processors import ChoiceProcessor, VectorProcessor, choices

logger = logging.getLogger(__name__)

SCENE_FILE = 'scene.txt'
BUILTIN_SCENES = ('room-sphere',)

# values expected per scene key
SCENE_KEYS = {
    'room': 6,
    'sphere': 4,
    'box': 6,
    'subtract_sphere': 4,
    'subtract_box': 6,
    'orbit': 6,
    'target': 3,
    'frames': 1,
    'camera': 6,
}
REPEATED_KEYS = ('sphere', 'box', 'subtract_sphere', 'subtract_box')

ROOM_SPHERE_SCENE = """\
# unit room with a sphere on a pedestal and a box cut by a sphere
room = -1.0 -1.0 -0.6 1.0 1.0 1.0
sphere = 0.0 0.0 0.0 0.3
box = 0.0 0.0 -0.45 0.12 0.12 0.15
box = 0.5 -0.45 -0.45 0.15 0.15 0.15
subtract_sphere = 0.5 -0.45 -0.3 0.1
orbit = 0.0 0.0 0.1 0.8 -100.0 40.0
target = 0.0 0.0 0.0
frames = 20
camera = 50.0 50.0 31.5 23.5 64 48
"""

TRACE_TOLERANCE = 1e-7
TRACE_MAX_STEPS = 1000
BOUNDS_MARGIN = 0.1


class Primitive(Protocol):
    def sdf(self, points: np.ndarray) -> np.ndarray:
        ...


def _box_sdf(points: np.ndarray, center: np.ndarray, half_size: np.ndarray) -> np.ndarray:
    offset = np.abs(points - center) - half_size
    outside = np.linalg.norm(np.maximum(offset, 0.0), axis=-1)
    inside = np.minimum(offset.max(axis=-1), 0.0)
    return outside + inside


@dataclasses.dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius


@dataclasses.dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    half_size: Tuple[float, float, float]

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return _box_sdf(points, np.asarray(self.center), np.asarray(self.half_size))


@dataclasses.dataclass(frozen=True)
class Room:
    """Axis-aligned box seen from inside: positive in the interior."""

    low: Tuple[float, float, float]
    high: Tuple[float, float, float]

    def sdf(self, points: np.ndarray) -> np.ndarray:
        low, high = np.asarray(self.low), np.asarray(self.high)
        return -_box_sdf(points, (low + high) / 2.0, (high - low) / 2.0)


@dataclasses.dataclass(frozen=True)
class Orbit:
    """Horizontal arc of `sweep` degrees around `center`, starting at `start` degrees."""

    center: Tuple[float, float, float]
    radius: float
    start: float
    sweep: float

    def eyes(self, frames: int) -> np.ndarray:
        steps = np.arange(frames, dtype=np.float64) / max(frames - 1, 1)
        angles = np.radians(self.start + self.sweep * steps)
        center = np.asarray(self.center, dtype=np.float64)
        offsets = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=-1) * self.radius
        return center + offsets


@dataclasses.dataclass(frozen=True)
class SyntheticScene:
    room: Room
    solids: Tuple[Primitive, ...]
    holes: Tuple[Primitive, ...]
    orbit: Orbit
    target: Tuple[float, float, float]
    frames: int
    intrinsics: CameraIntrinsics

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact room distance combined with the objects: union by min, subtraction by max(a, -b)."""
        points = np.asarray(points, dtype=np.float64)
        distance = self.room.sdf(points)
        if self.solids:
            objects = np.min([solid.sdf(points) for solid in self.solids], axis=0)
            for hole in self.holes:
                objects = np.maximum(objects, -hole.sdf(points))
            distance = np.minimum(distance, objects)
        return distance

    def color(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        frequencies = np.array([[2.1, 0.7, 1.3], [0.9, 2.5, 0.4], [1.2, 1.1, 2.7]])
        phases = np.array([0.3, 1.7, 4.1])
        return 0.5 + 0.35 * np.sin(points @ frequencies.T * math.pi + phases)

    def bounds(self, margin: float = BOUNDS_MARGIN) -> Tuple[float, ...]:
        low = np.asarray(self.room.low) - margin
        high = np.asarray(self.room.high) + margin
        return tuple(float(value) for value in np.concatenate([low, high]))

    def poses(self) -> List[Pose]:
        eyes = self.orbit.eyes(self.frames)
        clearance = self.sdf(eyes)
        if (clearance <= 0).any():
            outside = int(np.argmax(clearance <= 0))
            raise DatasetError(
                f'Camera {outside} at {eyes[outside].tolist()} leaves the free interior of the room.',
            )
        return [look_at(eye, self.target) for eye in eyes]


def sphere_trace(
    scene: SyntheticScene,
    origins: np.ndarray,
    directions: np.ndarray,
    tolerance: float = TRACE_TOLERANCE,
    max_steps: int = TRACE_MAX_STEPS,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    March unit rays through the scene SDF.

    Returns the hit distances and a converged mask; rays that do not reach |sdf| < tolerance
    within `max_steps` keep a distance of 0.
    """
    distances = np.zeros(origins.shape[0])
    converged = np.zeros(origins.shape[0], dtype=bool)
    active = np.arange(origins.shape[0])
    for _ in range(max_steps):
        if not active.size:
            break
        step = scene.sdf(origins[active] + directions[active] * distances[active, None])
        done = np.abs(step) < tolerance
        converged[active[done]] = True
        distances[active[~done]] += step[~done]
        active = active[~done]
    distances[~converged] = 0.0
    return distances, converged


def render_depth(scene: SyntheticScene, pose: Pose, intrinsics: Optional[CameraIntrinsics] = None) -> np.ndarray:
    """Exact z-depth map of a view; 0 where sphere tracing did not converge."""
    intrinsics = (intrinsics or scene.intrinsics).with_crop(0)
    u, v = intrinsics.pixel_grid()
    camera_directions = intrinsics.camera_directions(u, v).numpy()
    scale = np.linalg.norm(camera_directions, axis=-1)
    rotation = pose.rotation_matrix().numpy()
    directions = (camera_directions / scale[:, None]) @ rotation.T
    origins = np.broadcast_to(pose.translation.numpy(), directions.shape)
    distances, converged = sphere_trace(scene, origins, directions)
    missed = int((~converged).sum())
    if missed:
        logger.debug('%d rays did not converge and are marked invalid', missed)
    return (distances / scale).reshape(intrinsics.height, intrinsics.width)


def render_color(scene: SyntheticScene, pose: Pose, depth: np.ndarray) -> np.ndarray:
    intrinsics = scene.intrinsics.with_crop(0)
    u, v = intrinsics.pixel_grid()
    camera_points = intrinsics.camera_directions(u, v).numpy() * depth.reshape(-1, 1)
    points = pose.transform_points(torch.from_numpy(camera_points)).numpy()
    color = scene.color(points)
    color[depth.reshape(-1) == 0] = 0.0
    return color.reshape(intrinsics.height, intrinsics.width, 3)


class SceneFileParser(BaseTextParser):
    """`key = numbers` lines describing a synthetic scene."""

    columns = [
        Column('key', 0, ChoiceProcessor(choices(*SCENE_KEYS)), required=True),
        Column('values', 1, VectorProcessor(), required=True),
    ]

    def iterate_file_rows(self) -> Iterator[Tuple[int, List[Any]]]:
        with self.open_file() as text_file:
            for row_index, line in enumerate(text_file):
                stripped = line.split(self.comment_prefix, 1)[0].strip()
                if not stripped:
                    continue
                if '=' not in stripped:
                    self.add_errors(f'expected "key = values", got "{stripped}"', row_index=row_index)
                    continue
                yield row_index, [part.strip() for part in stripped.split('=', 1)]

    def clean_row(self, row_data: Dict, row: List, row_index: int) -> Dict:
        row_data = super().clean_row(row_data, row, row_index)
        expected = SCENE_KEYS[row_data['key']]
        if len(row_data['values']) != expected:
            self.add_errors(
                f'{row_data["key"]} takes {expected} numbers, got {len(row_data["values"])}', row_index=row_index,
            )
            raise SkipRow(f'Row {row_index} has a wrong number of values.')
        return row_data

    def clean(self, data: List) -> List:
        seen: Dict[str, int] = {}
        for row in data:
            key = row['key']
            if key in seen and key not in REPEATED_KEYS:
                self.add_errors(f'key {key} repeats row {seen[key]}', row_index=row['row_index'])
            seen.setdefault(key, row['row_index'])
        missing = [key for key in ('room', 'orbit', 'target') if key not in seen]
        if missing:
            self.add_errors(f'scene is missing keys {missing}')
        return data


def _triple(values: Sequence[float]) -> Tuple[float, float, float]:
    return float(values[0]), float(values[1]), float(values[2])


def parse_scene(
    text: str, frames: Optional[int] = None, resolution: Optional[Tuple[int, int]] = None,
) -> SyntheticScene:
    """
    Build a scene from its text description.

    `frames` and `resolution` (width, height) override the file; a resolution change rescales
    the focal lengths and principal point.
    """
    parser = SceneFileParser(file_contents=io.StringIO(text))
    try:
        parser(raise_errors=True)
    except ParserError as e:
        raise DatasetError(e.messages)

    entries: Dict[str, List[List[float]]] = {}
    for row in parser.cleaned_data:
        entries.setdefault(row['key'], []).append(row['values'])

    room_values = entries['room'][0]
    room = Room(_triple(room_values[:3]), _triple(room_values[3:]))
    if any(high <= low for low, high in zip(room.low, room.high)):
        raise DatasetError(f'Room {room_values} has no interior.')
    solids: List[Primitive] = [Sphere(_triple(values[:3]), values[3]) for values in entries.get('sphere', [])]
    solids += [Box(_triple(values[:3]), _triple(values[3:])) for values in entries.get('box', [])]
    holes: List[Primitive] = [Sphere(_triple(values[:3]), values[3]) for values in entries.get('subtract_sphere', [])]
    holes += [Box(_triple(values[:3]), _triple(values[3:])) for values in entries.get('subtract_box', [])]

    orbit_values = entries['orbit'][0]
    camera_values = entries.get('camera', [[50.0, 50.0, 31.5, 23.5, 64, 48]])[0]
    intrinsics = CameraIntrinsics.from_values(camera_values)
    if resolution is not None:
        intrinsics = _rescale(intrinsics, *resolution)
    count = frames if frames is not None else int(entries.get('frames', [[20]])[0][0])
    if count < 1:
        raise DatasetError(f'A synthetic sequence needs at least one frame, got {count}.')

    return SyntheticScene(
        room=room,
        solids=tuple(solids),
        holes=tuple(holes),
        orbit=Orbit(_triple(orbit_values[:3]), orbit_values[3], orbit_values[4], orbit_values[5]),
        target=_triple(entries['target'][0]),
        frames=count,
        intrinsics=intrinsics,
    )


def _rescale(intrinsics: CameraIntrinsics, width: int, height: int) -> CameraIntrinsics:
    scale_x = width / intrinsics.width
    scale_y = height / intrinsics.height
    return CameraIntrinsics(
        fx=intrinsics.fx * scale_x,
        fy=intrinsics.fy * scale_y,
        cx=(intrinsics.cx + 0.5) * scale_x - 0.5,
        cy=(intrinsics.cy + 0.5) * scale_y - 0.5,
        width=width,
        height=height,
    )


def load_scene(
    scene_source: Union[PathLike, str], frames: Optional[int] = None, resolution: Optional[Tuple[int, int]] = None,
) -> Tuple[SyntheticScene, str]:
    """Accepts a built-in scene name or a scene file; returns the scene and its text."""
    if str(scene_source) in BUILTIN_SCENES:
        text = ROOM_SPHERE_SCENE
    else:
        path = pathlib.Path(scene_source)
        if not path.exists():
            raise DatasetError(f'Scene {scene_source} is neither a file nor one of {list(BUILTIN_SCENES)}.')
        text = path.read_text()
    return parse_scene(text, frames=frames, resolution=resolution), text


def _numbers(*values: float) -> str:
    return ' '.join(repr(float(value)) for value in values)


def _primitive_line(prefix: str, primitive: Primitive) -> str:
    if isinstance(primitive, Sphere):
        return f'{prefix}sphere = {_numbers(*primitive.center, primitive.radius)}'
    if isinstance(primitive, Box):
        return f'{prefix}box = {_numbers(*primitive.center, *primitive.half_size)}'
    raise DatasetError(f'Primitive {primitive!r} has no text form.')


def serialize_scene(scene: SyntheticScene) -> str:
    orbit = scene.orbit
    lines = [f'room = {_numbers(*scene.room.low, *scene.room.high)}']
    lines += [_primitive_line('', solid) for solid in scene.solids]
    lines += [_primitive_line('subtract_', hole) for hole in scene.holes]
    lines += [
        f'orbit = {_numbers(*orbit.center, orbit.radius, orbit.start, orbit.sweep)}',
        f'target = {_numbers(*scene.target)}',
        f'frames = {scene.frames}',
        f'camera = {_numbers(*scene.intrinsics.as_values())}',
    ]
    return '\n'.join(lines) + '\n'


def synth_generate(scene: SyntheticScene, out_dir: Optional[PathLike] = None) -> FrameSequence:
    """
    Render the scene along its trajectory.

    Depths are quantized to the 16-bit Replica encoding so the in-memory sequence equals what
    `load_replica` reads back; with `out_dir` the sequence is written and returned reloaded.
    """
    poses = scene.poses()
    frames = []
    for index, pose in enumerate(poses):
        depth = render_depth(scene, pose)
        frames.append(Frame(
            index=index,
            timestamp=float(index),
            color=torch.from_numpy(render_color(scene, pose, depth)),
            depth=quantize_depth(depth, REPLICA_DEPTH_SCALE),
            gt_pose=pose,
        ))
    sequence = FrameSequence(frames=frames, intrinsics=scene.intrinsics, dataset='synthetic', bounds=scene.bounds())
    logger.info('rendered %d synthetic frames at %dx%d', len(sequence), scene.intrinsics.width,
                scene.intrinsics.height)
    if out_dir is None:
        return sequence

    directory = write_replica(sequence, out_dir)
    (directory / SCENE_FILE).write_text(serialize_scene(scene))
    reloaded = load_replica(directory)
    return dataclasses.replace(reloaded, dataset='synthetic')

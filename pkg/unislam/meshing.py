import dataclasses
import logging
import pathlib
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import trimesh
from skimage import measure
from typing_extensions import Protocol

from unislam.exceptions import MeshError
from unislam.field import BoundsLike, SceneField, as_bounds
from unislam.geometry import CameraIntrinsics, PoseLike

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
QUERY_CHUNK = 65536


class SdfSource(Protocol):
    def sdf(self, points: np.ndarray) -> np.ndarray:
        ...


class ColorSource(Protocol):
    def color(self, points: np.ndarray) -> np.ndarray:
        ...


@dataclasses.dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError(f'Face indices must lie in [0, {len(self.vertices)}).')
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise MeshError(f'{len(self.colors)} vertex colors for {len(self.vertices)} vertices.')

    @classmethod
    def empty(cls) -> 'TriangleMesh':
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return not len(self.faces)

    def face_areas(self) -> np.ndarray:
        corners = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=-1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def keep_faces(self, mask: np.ndarray) -> 'TriangleMesh':
        """Keeps the selected faces and drops vertices no longer referenced."""
        faces = self.faces[mask]
        used, remapped = np.unique(faces.reshape(-1), return_inverse=True)
        return TriangleMesh(
            vertices=self.vertices[used],
            faces=remapped.reshape(-1, 3),
            colors=None if self.colors is None else self.colors[used],
        )

    def to_trimesh(self) -> trimesh.Trimesh:
        vertex_colors = None
        if self.colors is not None:
            vertex_colors = np.round(np.clip(self.colors, 0.0, 1.0) * 255).astype(np.uint8)
        return trimesh.Trimesh(self.vertices, self.faces, vertex_colors=vertex_colors, process=False)


class FieldSurface:
    """Numpy view of the field's metric SDF and color, queried in chunks without gradients."""

    def __init__(self, field: SceneField, chunk: int = QUERY_CHUNK) -> None:
        self.field = field
        self.chunk = chunk

    def _query(self, points: np.ndarray, color: bool) -> np.ndarray:
        results = []
        with torch.no_grad():
            for start in range(0, len(points), self.chunk):
                chunk = torch.from_numpy(np.ascontiguousarray(points[start:start + self.chunk], dtype=np.float64))
                if color:
                    results.append(self.field.query_color(chunk).numpy())
                else:
                    results.append((self.field.query_sdf(chunk) * self.field.truncation).numpy())
        if not results:
            return np.zeros((0, 3) if color else (0,))
        return np.concatenate(results)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self._query(points, color=False)

    def color(self, points: np.ndarray) -> np.ndarray:
        return self._query(points, color=True)


def lattice_axes(bounds: BoundsLike, cell_size: float) -> List[np.ndarray]:
    if cell_size <= 0:
        raise MeshError(f'Cell size must be positive, got {cell_size}.')
    low, high = as_bounds(bounds).numpy()
    counts = np.floor((high - low) / cell_size + 1e-9).astype(int) + 1
    return [low[axis] + cell_size * np.arange(counts[axis]) for axis in range(3)]


def sample_lattice(source: SdfSource, axes: Sequence[np.ndarray]) -> np.ndarray:
    grid = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)
    values = source.sdf(grid.reshape(-1, 3))
    return np.asarray(values, dtype=np.float64).reshape(grid.shape[:3])


def extract_mesh(
    source: SdfSource,
    bounds: BoundsLike,
    cell_size: float = 0.01,
    max_cells: int = 64_000_000,
    color_source: Optional[ColorSource] = None,
) -> TriangleMesh:
    """
    Zero isosurface of `source` on a regular lattice by classic marching cubes.

    Vertices are linear interpolations along lattice edges; triangles with area below
    1e-12 are dropped.
    """
    axes = lattice_axes(bounds, cell_size)
    shape = tuple(len(axis) for axis in axes)
    lattice_points = int(np.prod(shape))
    if lattice_points > max_cells:
        raise MeshError(
            f'Lattice {shape} holds {lattice_points} points, above the budget of {max_cells}; '
            f'use a cell size larger than {cell_size}.',
        )
    if min(shape) < 2:
        raise MeshError(f'Bounds span less than one cell of {cell_size} m along an axis.')

    volume = sample_lattice(source, axes)
    if not np.isfinite(volume).all():
        raise MeshError('The SDF lattice holds non-finite values.')
    if volume.min() > 0.0 or volume.max() < 0.0:
        logger.info('no zero crossing in a %s lattice, mesh is empty', shape)
        return TriangleMesh.empty()

    vertices, faces, _, _ = measure.marching_cubes(
        volume, level=0.0, spacing=(cell_size,) * 3, method='lorensen', allow_degenerate=False,
    )
    origin = np.array([axis[0] for axis in axes])
    mesh = TriangleMesh(vertices.astype(np.float64) + origin, faces)
    mesh = mesh.keep_faces(mesh.face_areas() > DEGENERATE_AREA)
    if color_source is not None and len(mesh.vertices):
        mesh.colors = np.clip(color_source.color(mesh.vertices), 0.0, 1.0)
    logger.info('extracted %d vertices and %d faces at %.3f m cells', len(mesh.vertices), len(mesh.faces), cell_size)
    return mesh


def extract_field_mesh(
    field: SceneField, cell_size: float = 0.01, max_cells: int = 64_000_000, bounds: Optional[BoundsLike] = None,
) -> TriangleMesh:
    surface = FieldSurface(field)
    return extract_mesh(
        surface, field.bounds if bounds is None else bounds, cell_size, max_cells, color_source=surface,
    )


def visible_mask(points: np.ndarray, poses: Sequence[PoseLike], intrinsics: CameraIntrinsics) -> np.ndarray:
    """True for points inside the viewing frustum of at least one pose."""
    visible = np.zeros(len(points), dtype=bool)
    crop = intrinsics.edge_crop
    world = torch.from_numpy(np.asarray(points, dtype=np.float64))
    for pose in poses:
        camera = (world - pose.translation_vector()) @ pose.rotation_matrix()
        u, v, z = intrinsics.project(camera)
        inside = (
            (z > 0)
            & (u >= crop - 0.5) & (u < intrinsics.width - crop - 0.5)
            & (v >= crop - 0.5) & (v < intrinsics.height - crop - 0.5)
        )
        visible |= inside.numpy()
    return visible


def cull_mesh(mesh: TriangleMesh, poses: Sequence[PoseLike], intrinsics: CameraIntrinsics) -> TriangleMesh:
    """Drops triangles whose centroid lies outside every camera frustum."""
    if mesh.is_empty:
        return mesh
    keep = visible_mask(mesh.centroids(), poses, intrinsics)
    logger.info('culling kept %d of %d faces', int(keep.sum()), len(mesh.faces))
    return mesh.keep_faces(keep)


def write_ply(mesh: TriangleMesh, path: Union[pathlib.Path, str], binary: bool = False) -> None:
    if mesh.is_empty:
        raise MeshError(f'Refusing to write an empty mesh to {path}.')
    mesh.to_trimesh().export(str(path), file_type='ply', encoding='binary' if binary else 'ascii')
    logger.info('mesh written to %s', path)


def read_ply(path: Union[pathlib.Path, str]) -> TriangleMesh:
    try:
        loaded = trimesh.load(str(path), file_type='ply', process=False, force='mesh')
    except (OSError, ValueError) as e:
        raise MeshError(f'Unable to read mesh {path}: {e}')
    colors = None
    if loaded.visual.kind == 'vertex':
        colors = np.asarray(loaded.visual.vertex_colors)[:, :3] / 255.0
    return TriangleMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces), colors)


import dataclasses
import math
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.spatial.transform import Rotation
from typing_extensions import Protocol

from unislam.exceptions import RenderingError
from unislam.gradients import BlockRole, ParameterBlock

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[float]]

_TAYLOR_THRESHOLD = 1e-8


def _as_tensor(values: ArrayLike) -> torch.Tensor:
    if torch.is_tensor(values):
        return values.to(torch.float64)
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    edge_crop: int = 0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise RenderingError(f'Focal lengths must be positive, got fx={self.fx}, fy={self.fy}.')
        if self.width <= 0 or self.height <= 0:
            raise RenderingError(f'Image size must be positive, got {self.width}x{self.height}.')
        if self.edge_crop < 0 or 2 * self.edge_crop >= min(self.width, self.height):
            raise RenderingError(
                f'Edge crop {self.edge_crop} must be below half the image size {self.width}x{self.height}.',
            )

    @classmethod
    def from_values(cls, values: Sequence[float], edge_crop: int = 0) -> 'CameraIntrinsics':
        fx, fy, cx, cy, width, height = values
        return cls(float(fx), float(fy), float(cx), float(cy), int(width), int(height), edge_crop)

    def with_crop(self, edge_crop: int) -> 'CameraIntrinsics':
        return dataclasses.replace(self, edge_crop=edge_crop)

    def as_values(self) -> List[float]:
        return [self.fx, self.fy, self.cx, self.cy, float(self.width), float(self.height)]

    def matrix(self) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=torch.float64,
        )

    def contains(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        crop = self.edge_crop
        return (u >= crop) & (u < self.width - crop) & (v >= crop) & (v < self.height - crop)

    def pixel_grid(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """All pixels of the cropped region in row-major order."""
        crop = self.edge_crop
        v, u = torch.meshgrid(
            torch.arange(crop, self.height - crop), torch.arange(crop, self.width - crop), indexing='ij',
        )
        return u.reshape(-1), v.reshape(-1)

    def camera_directions(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Unnormalised camera-space directions with unit z."""
        u = u.to(torch.float64)
        v = v.to(torch.float64)
        return torch.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, torch.ones_like(u)], dim=-1)

    def project(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        z = points[..., 2]
        safe_z = torch.where(z.abs() > 1e-12, z, torch.ones_like(z))
        u = self.fx * points[..., 0] / safe_z + self.cx
        v = self.fy * points[..., 1] / safe_z + self.cy
        return u, v, z


class PoseLike(Protocol):
    def rotation_matrix(self) -> torch.Tensor:
        ...

    def translation_vector(self) -> torch.Tensor:
        ...


def skew(vector: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(vector[0])
    x, y, z = vector[0], vector[1], vector[2]
    return torch.stack([
        torch.stack([zero, -z, y]),
        torch.stack([z, zero, -x]),
        torch.stack([-y, x, zero]),
    ])


def axis_angle_to_matrix(rotation_vector: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, differentiable at the origin through its Taylor expansion."""
    theta_sq = (rotation_vector * rotation_vector).sum()
    small = theta_sq < _TAYLOR_THRESHOLD
    safe_theta_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = safe_theta_sq.sqrt()

    first = torch.where(small, 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0, torch.sin(theta) / theta)
    second = torch.where(
        small, 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0, (1.0 - torch.cos(theta)) / safe_theta_sq,
    )
    generator = skew(rotation_vector)
    identity = torch.eye(3, dtype=rotation_vector.dtype)
    return identity + first * generator + second * (generator @ generator)


def quaternion_to_matrix(quaternion: torch.Tensor) -> torch.Tensor:
    x, y, z, w = (quaternion / quaternion.norm()).unbind()
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)]),
        torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)]),
        torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]),
    ])


def quaternion_multiply(left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
    left_vector, left_scalar = left[:3], left[3]
    right_vector, right_scalar = right[:3], right[3]
    vector = left_scalar * right_vector + right_scalar * left_vector + torch.cross(left_vector, right_vector, dim=0)
    scalar = left_scalar * right_scalar - (left_vector * right_vector).sum()
    return torch.cat([vector, scalar.reshape(1)])


def axis_angle_to_quaternion(rotation_vector: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(Rotation.from_rotvec(rotation_vector.detach().numpy()).as_quat(), dtype=torch.float64)


def matrix_to_quaternion(matrix: ArrayLike) -> torch.Tensor:
    rotation = Rotation.from_matrix(_as_tensor(matrix).numpy())
    return torch.as_tensor(rotation.as_quat(), dtype=torch.float64)


@dataclasses.dataclass(frozen=True, eq=False)
class Pose:
    """
    Camera-to-world rigid transform in OpenCV camera axes (x right, y down, z forward).

    The rotation is a unit quaternion in (x, y, z, w) order; it is re-normalised on construction.
    """

    quaternion: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self) -> None:
        quaternion = _as_tensor(self.quaternion).detach().reshape(4)
        translation = _as_tensor(self.translation).detach().reshape(3)
        norm = quaternion.norm()
        if not bool(torch.isfinite(quaternion).all()) or float(norm) == 0.0:
            raise RenderingError(f'Invalid pose quaternion {quaternion.tolist()}.')
        if not bool(torch.isfinite(translation).all()):
            raise RenderingError(f'Invalid pose translation {translation.tolist()}.')
        object.__setattr__(self, 'quaternion', quaternion / norm)
        object.__setattr__(self, 'translation', translation.clone())

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64), torch.zeros(3, dtype=torch.float64))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> 'Pose':
        matrix = _as_tensor(matrix).reshape(4, 4)
        return cls(matrix_to_quaternion(matrix[:3, :3]), matrix[:3, 3])

    @classmethod
    def from_tum(cls, values: Sequence[float]) -> 'Pose':
        tx, ty, tz, qx, qy, qz, qw = values
        return cls(
            torch.tensor([qx, qy, qz, qw], dtype=torch.float64), torch.tensor([tx, ty, tz], dtype=torch.float64),
        )

    def to_tum(self) -> List[float]:
        return self.translation.tolist() + self.quaternion.tolist()

    def rotation_matrix(self) -> torch.Tensor:
        return quaternion_to_matrix(self.quaternion)

    def translation_vector(self) -> torch.Tensor:
        return self.translation

    def matrix(self) -> torch.Tensor:
        result = torch.eye(4, dtype=torch.float64)
        result[:3, :3] = self.rotation_matrix()
        result[:3, 3] = self.translation
        return result

    def inverse(self) -> 'Pose':
        conjugate = self.quaternion * torch.tensor([-1.0, -1.0, -1.0, 1.0], dtype=torch.float64)
        return Pose(conjugate, -(quaternion_to_matrix(conjugate) @ self.translation))

    def compose(self, other: 'Pose') -> 'Pose':
        quaternion = quaternion_multiply(self.quaternion, other.quaternion)
        return Pose(quaternion, self.rotation_matrix() @ other.translation + self.translation)

    def retract(self, rotation_vector: torch.Tensor) -> 'Pose':
        """Right-multiplies the rotation by Exp(rotation_vector) and re-normalises."""
        increment = axis_angle_to_quaternion(rotation_vector)
        return Pose(quaternion_multiply(self.quaternion, increment), self.translation)

    def transform_points(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation_matrix().T + self.translation

    def world_to_camera(self, points: torch.Tensor) -> torch.Tensor:
        return (points - self.translation) @ self.rotation_matrix()

    def distance_to(self, other: 'Pose') -> float:
        return float((self.translation - other.translation).norm())

    def angle_to(self, other: 'Pose') -> float:
        """Relative rotation angle in degrees."""
        dot = float((self.quaternion * other.quaternion).sum().abs().clamp(max=1.0))
        return math.degrees(2.0 * math.acos(dot))

    def equals(self, other: 'Pose') -> bool:
        return torch.equal(self.quaternion, other.quaternion) and torch.equal(self.translation, other.translation)


def constant_velocity_guess(previous: Pose, before_previous: Pose) -> Pose:
    """Applies the last relative camera motion once more."""
    motion = before_previous.inverse().compose(previous)
    return previous.compose(motion)


def look_at(eye: ArrayLike, target: ArrayLike, up: ArrayLike = (0.0, 0.0, 1.0)) -> Pose:
    eye_array = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye_array
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise RenderingError(f'Viewing direction {forward.tolist()} is parallel to the up vector.')
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    matrix = np.eye(4)
    matrix[:3, :3] = np.stack([right, down, forward], axis=1)
    matrix[:3, 3] = eye_array
    return Pose.from_matrix(matrix)


class PoseVariable:
    """
    Optimisable pose: R = R(q)·Exp(δ), translation optimised directly.

    `fold()` absorbs δ into the quaternion and resets δ to zero after every optimiser step.
    """

    def __init__(self, pose: Pose, name: str, lr_rotation: float, lr_translation: float) -> None:
        self.base = pose
        self.rotation = ParameterBlock(f'{name}.rotation', BlockRole.POSE_ROTATION, torch.zeros(3), lr_rotation)
        self.translation = ParameterBlock(
            f'{name}.translation', BlockRole.POSE_TRANSLATION, pose.translation, lr_translation,
        )

    def blocks(self) -> List[ParameterBlock]:
        return [self.rotation, self.translation]

    def rotation_matrix(self) -> torch.Tensor:
        return self.base.rotation_matrix() @ axis_angle_to_matrix(self.rotation.values)

    def translation_vector(self) -> torch.Tensor:
        return self.translation.values

    def current(self) -> Pose:
        return Pose(self.base.retract(self.rotation.snapshot()).quaternion, self.translation.snapshot())

    def fold(self) -> Pose:
        self.base = self.current()
        self.rotation.assign(torch.zeros(3, dtype=torch.float64))
        return self.base

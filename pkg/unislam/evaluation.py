import dataclasses
import logging
import math
import pathlib
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import trimesh
from scipy.spatial import cKDTree

from unislam.config import RunConfig
from unislam.datasets.base import FrameSequence
from unislam.exceptions import EvaluationError
from unislam.field import SceneField
from unislam.geometry import Pose
from unislam.meshing import TriangleMesh
from unislam.rendering import render_image

logger = logging.getLogger(__name__)

COMPLETION_THRESHOLDS = (0.01, 0.03, 0.05)

PositionsLike = Union[np.ndarray, Sequence[Pose]]


@dataclasses.dataclass
class MetricReport:
    ate_rmse_cm: Optional[float] = None
    ate_mean_cm: Optional[float] = None
    depth_l1_cm: Optional[float] = None
    psnr_db: Optional[float] = None
    acc_cm: Optional[float] = None
    comp_cm: Optional[float] = None
    comp_ratio_1cm_pct: Optional[float] = None
    comp_ratio_3cm_pct: Optional[float] = None
    comp_ratio_5cm_pct: Optional[float] = None
    seed: Optional[int] = None
    config_digest: Optional[str] = None

    def __post_init__(self) -> None:
        negative = [
            name for name, value in self.metrics().items()
            if value is not None and not (value >= 0)
        ]
        if negative:
            raise EvaluationError(f'Metrics {negative} must be non-negative.')

    def metrics(self) -> Dict[str, Optional[float]]:
        return {
            field.name: getattr(self, field.name) for field in dataclasses.fields(self)
            if field.name not in ('seed', 'config_digest')
        }

    def as_dict(self) -> Dict[str, Union[float, int, str, None]]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f'{name} = {_format(value)}' for name, value in self.as_dict().items() if value is not None]
        return '\n'.join(lines) + '\n'

    def csv_header(self) -> str:
        return ','.join(self.as_dict())

    def csv_row(self) -> str:
        return ','.join('' if value is None else _format(value) for value in self.as_dict().values())

    def write(self, path: Union[pathlib.Path, str]) -> Tuple[pathlib.Path, pathlib.Path]:
        """Writes `<path>.txt` and `<path>.csv`."""
        base = pathlib.Path(path)
        text_path = base.with_suffix('.txt')
        csv_path = base.with_suffix('.csv')
        text_path.write_text(self.to_text())
        csv_path.write_text(f'{self.csv_header()}\n{self.csv_row()}\n')
        return text_path, csv_path


def _format(value: Union[float, int, str]) -> str:
    if isinstance(value, float):
        return 'inf' if math.isinf(value) else f'{value:.6f}'
    return str(value)


def _positions(trajectory: PositionsLike) -> np.ndarray:
    if isinstance(trajectory, np.ndarray):
        positions = np.asarray(trajectory, dtype=np.float64)
    else:
        positions = np.stack([pose.translation.numpy() for pose in trajectory]) if len(trajectory) else np.zeros((0, 3))
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise EvaluationError(f'Trajectory positions must have shape (N, 3), got {positions.shape}.')
    return positions


def align_trajectories(
    estimated: np.ndarray, ground_truth: np.ndarray, with_scale: bool = False,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Closed-form least-squares alignment of estimated onto ground-truth positions.

    Returns (R, t, s) with gt ≈ s·R·est + t; the scale stays 1 unless `with_scale`.
    """
    estimated_mean = estimated.mean(axis=0)
    gt_mean = ground_truth.mean(axis=0)
    estimated_centered = estimated - estimated_mean
    gt_centered = ground_truth - gt_mean

    covariance = gt_centered.T @ estimated_centered / len(estimated)
    u, singular, vh = np.linalg.svd(covariance)
    correction = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vh) < 0:
        correction[2, 2] = -1.0
    rotation = u @ correction @ vh

    scale = 1.0
    if with_scale:
        variance = (estimated_centered ** 2).sum() / len(estimated)
        if variance <= 0:
            raise EvaluationError('Cannot estimate a scale for a trajectory without motion.')
        scale = float(np.trace(np.diag(singular) @ correction) / variance)
    translation = gt_mean - scale * rotation @ estimated_mean
    return rotation, translation, scale


def ate_residuals(estimated: PositionsLike, ground_truth: PositionsLike, with_scale: bool = False) -> np.ndarray:
    estimated_positions = _positions(estimated)
    gt_positions = _positions(ground_truth)
    if len(estimated_positions) != len(gt_positions):
        raise EvaluationError(
            f'Trajectories differ in length: {len(estimated_positions)} estimated, {len(gt_positions)} ground truth.',
        )
    if len(estimated_positions) < 3:
        raise EvaluationError(f'ATE needs at least 3 poses, got {len(estimated_positions)}.')
    rotation, translation, scale = align_trajectories(estimated_positions, gt_positions, with_scale)
    aligned = scale * estimated_positions @ rotation.T + translation
    return np.linalg.norm(aligned - gt_positions, axis=-1)


def ate_rmse(estimated: PositionsLike, ground_truth: PositionsLike, with_scale: bool = False) -> Tuple[float, float]:
    """Aligned absolute trajectory error as (RMSE, mean) in centimetres."""
    residuals = ate_residuals(estimated, ground_truth, with_scale)
    rmse = float(np.sqrt(np.mean(residuals ** 2))) * 100.0
    mean = float(np.mean(residuals)) * 100.0
    return rmse, mean


def psnr(rendered: Union[np.ndarray, torch.Tensor], reference: Union[np.ndarray, torch.Tensor]) -> float:
    rendered_array = np.asarray(rendered, dtype=np.float64)
    reference_array = np.asarray(reference, dtype=np.float64)
    if rendered_array.shape != reference_array.shape:
        raise EvaluationError(f'Image shapes differ: {rendered_array.shape} and {reference_array.shape}.')
    mse = float(np.mean((rendered_array - reference_array) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def depth_l1_maps(
    rendered: Sequence[Union[np.ndarray, torch.Tensor]], sensor: Sequence[Union[np.ndarray, torch.Tensor]],
) -> float:
    """Mean absolute depth error over valid sensor pixels of all maps, in centimetres."""
    if len(rendered) != len(sensor):
        raise EvaluationError(f'{len(rendered)} rendered depth maps for {len(sensor)} sensor maps.')
    errors: List[np.ndarray] = []
    for rendered_map, sensor_map in zip(rendered, sensor):
        rendered_array = np.asarray(rendered_map, dtype=np.float64)
        sensor_array = np.asarray(sensor_map, dtype=np.float64)
        if rendered_array.shape != sensor_array.shape:
            raise EvaluationError(f'Depth shapes differ: {rendered_array.shape} and {sensor_array.shape}.')
        valid = sensor_array > 0
        errors.append(np.abs(rendered_array[valid] - sensor_array[valid]))
    values = np.concatenate(errors) if errors else np.zeros(0)
    if not values.size:
        raise EvaluationError('No valid sensor depth to compare against.')
    return float(values.mean()) * 100.0


@dataclasses.dataclass(frozen=True)
class RenderingMetrics:
    depth_l1_cm: float
    psnr_db: float
    frames: Tuple[int, ...]


def rendering_metrics(
    field: SceneField,
    sequence: FrameSequence,
    poses: Sequence[Pose],
    config: RunConfig,
    stride: Optional[int] = None,
) -> RenderingMetrics:
    """Depth L1 and mean PSNR of full renders at every `stride`-th frame, guided by the sensor depth."""
    if len(poses) != len(sequence):
        raise EvaluationError(f'{len(poses)} poses for {len(sequence)} frames.')
    stride = stride or config.eval_stride
    indices = tuple(range(0, len(sequence), stride))
    rendered_depths, sensor_depths, scores = [], [], []
    for index in indices:
        frame = sequence[index]
        image = render_image(field, poses[index], sequence.intrinsics, config, guide_depth=frame.depth, seed=index)
        rendered_depths.append(image.depth)
        sensor_depths.append(frame.depth)
        scores.append(psnr(image.color.clamp(0.0, 1.0), frame.color))
    finite = [score for score in scores if math.isfinite(score)]
    mean_psnr = sum(finite) / len(finite) if finite else math.inf
    metrics = RenderingMetrics(
        depth_l1_cm=depth_l1_maps(rendered_depths, sensor_depths), psnr_db=mean_psnr, frames=indices,
    )
    logger.info('depth L1 %.3f cm, PSNR %.2f dB over %d frames', metrics.depth_l1_cm, metrics.psnr_db, len(indices))
    return metrics


def depth_l1(
    field: SceneField, poses: Sequence[Pose], sequence: FrameSequence, config: RunConfig, stride: Optional[int] = None,
) -> float:
    return rendering_metrics(field, sequence, poses, config, stride).depth_l1_cm


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise EvaluationError('Cannot sample an empty mesh.')
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), count, seed=seed)
    return np.asarray(points, dtype=np.float64)


@dataclasses.dataclass(frozen=True)
class MeshMetrics:
    acc_cm: float
    comp_cm: float
    comp_ratios_pct: Dict[float, float]


def nearest_distances(queries: np.ndarray, reference: np.ndarray) -> np.ndarray:
    distances, _ = cKDTree(reference).query(queries, k=1, workers=-1)
    return np.asarray(distances, dtype=np.float64)


def mesh_accuracy_completion(
    reconstructed: TriangleMesh,
    ground_truth: TriangleMesh,
    n_samples: int = 200000,
    seed: int = 0,
    thresholds: Sequence[float] = COMPLETION_THRESHOLDS,
) -> MeshMetrics:
    """
    Accuracy (reconstructed to ground truth) and completion (ground truth to reconstructed)
    as mean nearest-neighbour distances between surface samples, plus completion ratios.
    Both meshes are sampled with the same seed, so swapping the arguments swaps the two distances.
    """
    if reconstructed.is_empty or ground_truth.is_empty:
        raise EvaluationError('Mesh metrics need two non-empty meshes.')
    reconstructed_points = sample_surface(reconstructed, n_samples, seed)
    gt_points = sample_surface(ground_truth, n_samples, seed)

    accuracy = nearest_distances(reconstructed_points, gt_points)
    completion = nearest_distances(gt_points, reconstructed_points)
    ratios = {threshold: float((completion < threshold).mean()) * 100.0 for threshold in sorted(thresholds)}
    metrics = MeshMetrics(
        acc_cm=float(accuracy.mean()) * 100.0,
        comp_cm=float(completion.mean()) * 100.0,
        comp_ratios_pct=ratios,
    )
    logger.info('mesh accuracy %.3f cm, completion %.3f cm, ratios %s', metrics.acc_cm, metrics.comp_cm, ratios)
    return metrics


def mesh_report_fields(metrics: MeshMetrics) -> Dict[str, float]:
    fields = {'acc_cm': metrics.acc_cm, 'comp_cm': metrics.comp_cm}
    for threshold, ratio in metrics.comp_ratios_pct.items():
        key = f'comp_ratio_{round(threshold * 100)}cm_pct'
        if key in {field.name for field in dataclasses.fields(MetricReport)}:
            fields[key] = ratio
    return fields

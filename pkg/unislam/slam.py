import csv
import dataclasses
import enum
import logging
import math
import pathlib
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch

from unislam.config import RunConfig, serialize_config
from unislam.datasets.base import Frame, FrameSequence
from unislam.datasets.tum import write_trajectory
from unislam.evaluation import psnr
from unislam.exceptions import AllMaskedBatch, DatasetError, RayMissError, SlamError
from unislam.field import SceneField, init_field, save_checkpoint
from unislam.geometry import CameraIntrinsics, Pose, PoseLike, PoseVariable, constant_velocity_guess
from unislam.gradients import (
    AdamOptimizer,
    AdamSettings,
    LossEvaluation,
    ParameterBlock,
    compute_gradients,
    set_determinism,
)
from unislam.objective import LossWeights, Mode, evaluate_objective
from unislam.rendering import (
    RayBatch, RenderedRays, generate_rays, image_uncertainty, ray_box_intersection, render_rays,
)

logger = logging.getLogger(__name__)

BOUNDS_MARGIN = 0.5
TRACE_FIELDS = ('frame', 'beta', 'oc_max', 'action', 'loss', 'tx', 'ty', 'tz', 'qx', 'qy', 'qz', 'qw')
DIAGNOSTIC_FIELDS = ('frame', 'beta', 'translational_speed', 'angular_speed')


class MappingAction(str, enum.Enum):
    NONE = 'none'
    LBA = 'lba'
    LLCO = 'llco'


class InsertionReason(str, enum.Enum):
    FIRST = 'first'
    CONSTANT = 'constant'
    LOCAL = 'local'
    LLCO = 'llco'


@dataclasses.dataclass(frozen=True)
class ScheduleDecision:
    frame: int
    extra_mapping: MappingAction
    do_gba: bool
    beta: float
    oc_max: float
    loop_anchor: Optional[int] = None
    do_track: bool = True

    @property
    def action(self) -> str:
        parts = [] if self.extra_mapping is MappingAction.NONE else [self.extra_mapping.value]
        if self.do_gba:
            parts.append('gba')
        return '+'.join(parts) or 'none'

    @property
    def maps(self) -> bool:
        return self.do_gba or self.extra_mapping is not MappingAction.NONE


@dataclasses.dataclass(eq=False)
class Keyframe:
    index: int
    pose: Pose
    color: torch.Tensor
    depth: torch.Tensor
    reason: InsertionReason


@dataclasses.dataclass(frozen=True)
class TraceRow:
    frame: int
    beta: float
    oc_max: float
    action: str
    loss: float
    pose: Pose

    def values(self) -> List[str]:
        return [str(self.frame), repr(self.beta), repr(self.oc_max), self.action, repr(self.loss)] + [
            repr(value) for value in self.pose.to_tum()
        ]


@dataclasses.dataclass(frozen=True)
class DiagnosticRow:
    frame: int
    beta: float
    translational_speed: float
    angular_speed: float

    def values(self) -> List[str]:
        return [str(self.frame), repr(self.beta), repr(self.translational_speed), repr(self.angular_speed)]


@dataclasses.dataclass(frozen=True)
class TrackingResult:
    pose: Pose
    beta: float
    loss: float
    losses: Tuple[float, ...]


@dataclasses.dataclass(frozen=True)
class MappingResult:
    pose: Pose
    beta: float
    losses: Tuple[float, ...]

    @property
    def loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


@dataclasses.dataclass
class SlamResult:
    poses: List[Pose]
    timestamps: List[float]
    trace: List[TraceRow]
    diagnostics: List[DiagnosticRow]
    keyframes: List[Keyframe]
    field: SceneField


def schedule(
    frame_index: int, beta: float, loop_candidates: Mapping[int, float], config: RunConfig,
) -> ScheduleDecision:
    """
    Decide the mapping work after tracking a frame.

    Local BA fires when the image uncertainty exceeds its threshold; otherwise a loop-closure
    optimisation fires when a keyframe at least `loop_min_gap` frames older overlaps the current
    view above the co-visibility threshold. Global BA runs every `mapping_period` frames
    independently of both.
    """
    eligible = {
        index: overlap for index, overlap in loop_candidates.items() if frame_index - index >= config.loop_min_gap
    }
    oc_max = max(eligible.values(), default=0.0)
    anchor = None
    extra = MappingAction.NONE
    if config.enable_lba and beta > config.image_uncertainty_threshold:
        extra = MappingAction.LBA
    elif config.enable_llco and oc_max > config.covisibility_threshold:
        extra = MappingAction.LLCO
        anchor = min(index for index, overlap in eligible.items() if overlap == oc_max)
    return ScheduleDecision(
        frame=frame_index,
        extra_mapping=extra,
        do_gba=config.enable_gba and frame_index % config.mapping_period == 0,
        beta=beta,
        oc_max=oc_max,
        loop_anchor=anchor,
    )


def sample_pixels(
    intrinsics: CameraIntrinsics, count: int, generator: torch.Generator,
) -> Tuple[torch.Tensor, torch.Tensor]:
    u, v = intrinsics.pixel_grid()
    index = torch.randint(0, u.numel(), (count,), generator=generator)
    return u[index], v[index]


def frame_rays(
    pose: PoseLike,
    intrinsics: CameraIntrinsics,
    color: torch.Tensor,
    depth: torch.Tensor,
    count: int,
    generator: torch.Generator,
) -> RayBatch:
    u, v = sample_pixels(intrinsics, count, generator)
    return generate_rays(pose, intrinsics, u, v, sensor_depth=depth[v, u], target_color=color[v, u])


def covisibility(
    source_pose: Pose,
    source_depth: torch.Tensor,
    target_pose: Pose,
    intrinsics: CameraIntrinsics,
    config: RunConfig,
    generator: torch.Generator,
    bounds: torch.Tensor,
) -> float:
    """
    Fraction of 3D points seen from the source view that land inside the target image.

    Points lie along `covisibility_pixels` sampled rays: `covisibility_samples` per ray across the
    truncation band around the sensor depth, or across the scene box where the depth is invalid.
    """
    u, v = sample_pixels(intrinsics, config.covisibility_pixels, generator)
    batch = generate_rays(source_pose, intrinsics, u, v, sensor_depth=source_depth[v, u])
    near, far, hit = ray_box_intersection(batch.origins, batch.directions, bounds, config.near_min)
    distance = batch.sensor_distance
    valid = batch.valid_depth
    low = torch.where(valid, (distance - config.truncation).clamp_min(config.near_min), near)
    high = torch.where(valid, distance + config.truncation, far)
    usable = valid | hit
    if not bool(usable.any()):
        return 0.0

    steps = torch.linspace(0.0, 1.0, config.covisibility_samples, dtype=torch.float64)
    distances = low[usable, None] + (high - low)[usable, None] * steps
    points = batch.origins[usable, None, :] + batch.directions[usable, None, :] * distances[..., None]
    camera_points = target_pose.world_to_camera(points.reshape(-1, 3))
    u, v, z = intrinsics.project(camera_points)
    crop = intrinsics.edge_crop
    inside = (
        (z > 0)
        & (u >= crop - 0.5) & (u < intrinsics.width - crop - 0.5)
        & (v >= crop - 0.5) & (v < intrinsics.height - crop - 0.5)
    )
    return float(inside.to(torch.float64).mean())


def estimate_bounds(
    frame: Frame, pose: Pose, intrinsics: CameraIntrinsics, margin: float = BOUNDS_MARGIN,
) -> List[float]:
    u, v = intrinsics.with_crop(0).pixel_grid()
    depth = frame.depth[v, u]
    valid = depth > 0
    if not bool(valid.any()):
        raise RayMissError('The first frame has no valid depth to estimate scene bounds from.')
    camera_points = intrinsics.camera_directions(u[valid], v[valid]) * depth[valid, None]
    points = pose.transform_points(camera_points)
    points = torch.cat([points, pose.translation[None, :]])
    low = points.min(dim=0).values - margin
    high = points.max(dim=0).values + margin
    return low.tolist() + high.tolist()


def resolve_scene_bounds(config: RunConfig, sequence: FrameSequence, first_pose: Pose) -> List[float]:
    if config.bounds:
        return list(config.bounds)
    if sequence.bounds:
        return list(sequence.bounds)
    bounds = estimate_bounds(sequence[0], first_pose, sequence.intrinsics)
    logger.warning('no scene bounds given, estimated %s from the first frame', [round(value, 3) for value in bounds])
    return bounds


class Slam:
    """
    Sequential tracking and mapping over a frame sequence.

    The first frame's pose is the gauge anchor and is never optimised; every frame that
    triggers a mapping step becomes a keyframe.
    """

    def __init__(self, config: RunConfig, sequence: FrameSequence, field: Optional[SceneField] = None) -> None:
        if not len(sequence):
            raise DatasetError('Cannot run on an empty sequence.')
        self.config = config
        self.sequence = sequence
        self.intrinsics = sequence.intrinsics.with_crop(config.edge_crop or sequence.intrinsics.edge_crop)
        first = sequence[0]
        self.first_pose = first.gt_pose if first.gt_pose is not None else Pose.identity()
        self.field = field or init_field(config, resolve_scene_bounds(config, sequence, self.first_pose))
        self.generator = torch.Generator().manual_seed(config.seed)
        self.adam_settings = AdamSettings(config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.tracking_weights = LossWeights.from_config(config, Mode.TRACKING)
        self.mapping_weights = LossWeights.from_config(config, Mode.MAPPING)
        self.keyframes: List[Keyframe] = []
        self.poses: List[Pose] = []
        self.trace: List[TraceRow] = []
        self.diagnostics: List[DiagnosticRow] = []

    def _render(self, batch: RayBatch) -> Tuple[RayBatch, RenderedRays]:
        _, _, hit = ray_box_intersection(batch.origins, batch.directions, self.field.bounds, self.config.near_min)
        if not bool(hit.all()):
            logger.debug('%d rays miss the scene box and are dropped', int((~hit).sum()))
            batch = batch.keep(hit)
        if not len(batch):
            raise RayMissError('Every sampled ray misses the scene box.')
        return batch, render_rays(self.field, batch, self.config, self.generator)

    def _tracking_loss(self, pose: PoseVariable, frame: Frame) -> Tuple[LossEvaluation, RenderedRays]:
        rendered = None
        for attempt in range(2):
            batch, rendered = self._render(
                frame_rays(pose, self.intrinsics, frame.color, frame.depth, self.config.tracking_rays, self.generator),
            )
            try:
                return evaluate_objective(rendered, batch, self.tracking_weights, self.config), rendered
            except AllMaskedBatch:
                logger.warning('frame %d: tracking batch fully masked (attempt %d)', frame.index, attempt + 1)
        logger.warning('frame %d: tracking without the confidence mask for this iteration', frame.index)
        return evaluate_objective(rendered, batch, self.tracking_weights, self.config, use_mask=False), rendered

    def track_frame(self, frame: Frame, initial: Pose) -> TrackingResult:
        """Optimise the camera pose of `frame` against the frozen field."""
        variable = PoseVariable(initial, f'frame{frame.index}', self.config.lr_rotation, self.config.lr_translation)
        optimizer = AdamOptimizer(variable.blocks(), self.adam_settings)
        losses = []
        beta = math.nan
        with self.field.frozen():
            for iteration in range(self.config.tracking_iterations):
                evaluation, rendered = self._tracking_loss(variable, frame)
                beta = image_uncertainty(rendered.pixel_uncertainty)
                report = compute_gradients(evaluation, variable.blocks())
                optimizer.step(report)
                variable.fold()
                losses.append(evaluation.item())
                logger.debug('frame %d tracking iteration %d loss %.6g', frame.index, iteration, losses[-1])
            if not losses:
                with torch.no_grad():
                    evaluation, rendered = self._tracking_loss(variable, frame)
                beta = image_uncertainty(rendered.pixel_uncertainty)
                losses.append(evaluation.item())
        pose = variable.current()
        logger.info(
            'frame %d tracked: beta %.3e, loss %.4g, moved %.4f m / %.3f deg from the initial guess',
            frame.index, beta, losses[-1], pose.distance_to(initial), pose.angle_to(initial),
        )
        return TrackingResult(pose=pose, beta=beta, loss=losses[-1], losses=tuple(losses))

    def covisibility(self, source: Union[Frame, Keyframe], source_pose: Pose, target_pose: Pose) -> float:
        return covisibility(
            source_pose, source.depth, target_pose, self.intrinsics, self.config, self.generator, self.field.bounds,
        )

    def loop_candidates(self, frame: Frame, pose: Pose) -> Dict[int, float]:
        """Overlap of every sufficiently old keyframe with the current view, keyframe to current."""
        return {
            keyframe.index: self.covisibility(keyframe, keyframe.pose, pose)
            for keyframe in self.keyframes
            if frame.index - keyframe.index >= self.config.loop_min_gap
        }

    def select_keyframes(self, decision: ScheduleDecision, frame: Frame, pose: Pose) -> List[Keyframe]:
        action = decision.extra_mapping
        if action is MappingAction.LBA:
            scores = [(self.covisibility(frame, pose, keyframe.pose), keyframe) for keyframe in self.keyframes]
            ranked = sorted(
                ((score, keyframe) for score, keyframe in scores if score > 0), key=lambda item: -item[0],
            )
            return sorted((keyframe for _, keyframe in ranked[:self.config.lba_window]), key=lambda kf: kf.index)
        if action is MappingAction.LLCO:
            return [keyframe for keyframe in self.keyframes if keyframe.index >= (decision.loop_anchor or 0)]
        return list(self.keyframes)

    def _mapping_loss(self, batch: RayBatch, rendered: RenderedRays, frame_index: int) -> LossEvaluation:
        try:
            return evaluate_objective(rendered, batch, self.mapping_weights, self.config)
        except AllMaskedBatch as e:
            logger.warning('frame %d: mapping batch fully masked, continuing color-only', frame_index)
            color = e.available_terms['rgb']
            return LossEvaluation(total=self.mapping_weights.rgb * color, terms={'rgb': color})

    def map_step(
        self, frame: Frame, pose: Pose, keyframes: Sequence[Keyframe], iterations: int, label: str,
    ) -> MappingResult:
        """
        Jointly optimise the field and the poses of the selected keyframes and the current frame.

        Rays split evenly across the keyframes, the remainder goes to the current frame; the
        first frame's pose stays fixed.
        """
        if not keyframes and frame.index != 0:
            logger.warning('frame %d: empty keyframe selection for %s, mapping the current frame only',
                           frame.index, label)
        sources: List[Tuple[Union[Frame, Keyframe], Union[Pose, PoseVariable]]] = []
        variables: List[PoseVariable] = []
        for keyframe in keyframes:
            if keyframe.index == frame.index:
                continue
            target: Union[Pose, PoseVariable] = keyframe.pose
            if keyframe.index != 0:
                target = PoseVariable(
                    keyframe.pose, f'keyframe{keyframe.index}', self.config.lr_rotation, self.config.lr_translation,
                )
                variables.append(target)
            sources.append((keyframe, target))
        current: Union[Pose, PoseVariable] = pose
        if frame.index != 0:
            current = PoseVariable(pose, f'frame{frame.index}', self.config.lr_rotation, self.config.lr_translation)
            variables.append(current)
        sources.append((frame, current))

        per_source = self.config.mapping_rays // len(sources)
        counts = [per_source] * (len(sources) - 1)
        counts.append(self.config.mapping_rays - per_source * (len(sources) - 1))

        blocks: List[ParameterBlock] = list(self.field.blocks())
        for variable in variables:
            blocks.extend(variable.blocks())
        optimizer = AdamOptimizer(blocks, self.adam_settings)

        losses = []
        beta = math.nan
        for iteration in range(iterations):
            batches = [
                frame_rays(target, self.intrinsics, source.color, source.depth, count, self.generator)
                for (source, target), count in zip(sources, counts) if count > 0
            ]
            batch, rendered = self._render(RayBatch.concat(batches))
            evaluation = self._mapping_loss(batch, rendered, frame.index)
            beta = image_uncertainty(rendered.pixel_uncertainty)
            report = compute_gradients(evaluation, blocks)
            optimizer.step(report)
            for variable in variables:
                variable.fold()
            losses.append(evaluation.item())
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug(
                    'frame %d %s iteration %d loss %.6g psnr %.3f dB', frame.index, label, iteration, losses[-1],
                    psnr(rendered.color.detach(), batch.target_color),
                )

        updated = {keyframe.index: target for keyframe, target in sources if isinstance(target, PoseVariable)}
        for keyframe in keyframes:
            variable = updated.get(keyframe.index)
            if variable is not None and keyframe.index != frame.index:
                keyframe.pose = variable.current()
                self.poses[keyframe.index] = keyframe.pose
        new_pose = current.current() if isinstance(current, PoseVariable) else pose
        logger.info(
            'frame %d %s over %d keyframes: loss %.4g -> %.4g',
            frame.index, label, len(sources) - 1, losses[0] if losses else math.nan,
            losses[-1] if losses else math.nan,
        )
        return MappingResult(pose=new_pose, beta=beta, losses=tuple(losses))

    def insert_keyframe(self, frame: Frame, pose: Pose, reason: InsertionReason) -> Keyframe:
        if self.keyframes and self.keyframes[-1].index >= frame.index:
            raise SlamError(f'Keyframe {frame.index} does not follow keyframe {self.keyframes[-1].index}.')
        keyframe = Keyframe(frame.index, pose, frame.color, frame.depth, reason)
        self.keyframes.append(keyframe)
        logger.info('frame %d inserted as keyframe (%s), %d keyframes', frame.index, reason.value, len(self.keyframes))
        return keyframe

    def init_first_frame(self) -> MappingResult:
        frame = self.sequence[0]
        self.poses = [self.first_pose]
        result = self.map_step(frame, self.first_pose, [], self.config.first_frame_iterations, 'first-frame mapping')
        self.insert_keyframe(frame, self.first_pose, InsertionReason.FIRST)
        self._record(frame, result.beta, 0.0, InsertionReason.FIRST.value, result.loss)
        return result

    def initial_guess(self, index: int) -> Pose:
        if index >= 2:
            return constant_velocity_guess(self.poses[index - 1], self.poses[index - 2])
        return self.poses[index - 1]

    def process_frame(self, frame: Frame) -> ScheduleDecision:
        tracking = self.track_frame(frame, self.initial_guess(frame.index))
        self.poses.append(tracking.pose)
        candidates = self.loop_candidates(frame, tracking.pose) if self.config.enable_llco else {}
        decision = schedule(frame.index, tracking.beta, candidates, self.config)

        pose = tracking.pose
        reason = None
        if decision.extra_mapping is not MappingAction.NONE:
            selected = self.select_keyframes(decision, frame, pose)
            pose = self.map_step(frame, pose, selected, self.config.mapping_iterations,
                                 decision.extra_mapping.value).pose
            reason = InsertionReason.LOCAL if decision.extra_mapping is MappingAction.LBA else InsertionReason.LLCO
        if decision.do_gba:
            pose = self.map_step(frame, pose, list(self.keyframes), self.config.mapping_iterations, 'gba').pose
            reason = reason or InsertionReason.CONSTANT
        self.poses[frame.index] = pose
        if reason is not None:
            self.insert_keyframe(frame, pose, reason)
        logger.info('frame %d schedule: %s (beta %.3e, oc %.3f)', frame.index, decision.action,
                    decision.beta, decision.oc_max)
        self._record(frame, tracking.beta, decision.oc_max, decision.action, tracking.loss)
        return decision

    def _record(self, frame: Frame, beta: float, oc_max: float, action: str, loss: float) -> None:
        pose = self.poses[frame.index]
        self.trace.append(TraceRow(frame.index, beta, oc_max, action, loss, pose))
        translational = angular = 0.0
        if frame.index > 0:
            previous = self.poses[frame.index - 1]
            elapsed = frame.timestamp - self.sequence[frame.index - 1].timestamp
            scale = 1.0 / elapsed if elapsed > 0 else 1.0
            translational = pose.distance_to(previous) * scale
            angular = pose.angle_to(previous) * scale
        self.diagnostics.append(DiagnosticRow(frame.index, beta, translational, angular))

    def run(self) -> SlamResult:
        set_determinism(self.config.deterministic)
        logger.info('running on %d frames (%s), config digest %s', len(self.sequence), self.sequence.dataset,
                    self.config.digest)
        self.init_first_frame()
        for frame in self.sequence.frames[1:]:
            self.process_frame(frame)
        return SlamResult(
            poses=list(self.poses),
            timestamps=self.sequence.timestamps(),
            trace=list(self.trace),
            diagnostics=list(self.diagnostics),
            keyframes=list(self.keyframes),
            field=self.field,
        )


def _write_rows(path: pathlib.Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    with open(path, 'w', newline='') as csv_file:
        writer = csv.writer(csv_file)
        writer.writerow(header)
        writer.writerows(rows)


def write_outputs(
    result: SlamResult, config: RunConfig, intrinsics: CameraIntrinsics, out_dir: Union[pathlib.Path, str],
) -> Dict[str, pathlib.Path]:
    """Trajectory (TUM format), run trace, diagnostics and the field checkpoint."""
    directory = pathlib.Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        'trajectory': directory / 'trajectory.txt',
        'trace': directory / 'trace.csv',
        'diagnostics': directory / 'diagnostics.csv',
        'checkpoint': directory / 'checkpoint.pt',
        'config': directory / 'config.txt',
    }
    write_trajectory(paths['trajectory'], result.timestamps, result.poses)
    _write_rows(paths['trace'], TRACE_FIELDS, [row.values() for row in result.trace])
    _write_rows(paths['diagnostics'], DIAGNOSTIC_FIELDS, [row.values() for row in result.diagnostics])
    paths['config'].write_text(serialize_config(config))
    save_checkpoint(result.field, paths['checkpoint'], extras={
        'intrinsics': intrinsics.as_values(),
        'keyframes': [keyframe.index for keyframe in result.keyframes],
        'config': serialize_config(config),
        'config_digest': config.digest,
        'seed': config.seed,
    })
    return paths


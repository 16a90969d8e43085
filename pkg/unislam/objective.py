import dataclasses
import enum
from typing import Dict, Tuple

import torch

from unislam.config import RunConfig
from unislam.exceptions import AllMaskedBatch, RenderingError
from unislam.gradients import LossEvaluation
from unislam.rendering import RayBatch, RenderedRays

CENTER_BAND = 0.4

TERM_NAMES = ('rgb', 'depth', 'sdf_center', 'sdf_tail', 'free_space')


class Mode(str, enum.Enum):
    TRACKING = 'tracking'
    MAPPING = 'mapping'


@dataclasses.dataclass(frozen=True)
class LossWeights:
    rgb: float
    depth: float
    sdf_center: float
    sdf_tail: float
    free_space: float
    mode: Mode

    @classmethod
    def from_config(cls, config: RunConfig, mode: Mode) -> 'LossWeights':
        prefix = f'{mode.value}_w_'
        return cls(
            rgb=getattr(config, f'{prefix}rgb'),
            depth=getattr(config, f'{prefix}depth'),
            sdf_center=getattr(config, f'{prefix}sdf_center'),
            sdf_tail=getattr(config, f'{prefix}sdf_tail'),
            free_space=getattr(config, f'{prefix}free_space'),
            mode=mode,
        )

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in TERM_NAMES}


@dataclasses.dataclass
class RayClassification:
    """
    Per-sample SDF targets of the valid-depth rays and the per-ray confidence mask.

    Every sample falls in exactly one of the center band, the tail or the free space, which
    holds the samples at least one truncation away from the surface on either side.
    """

    sdf_target: torch.Tensor
    center: torch.Tensor
    tail: torch.Tensor
    free_space: torch.Tensor
    confidence: torch.Tensor
    valid_depth: torch.Tensor

    @property
    def confident_rays(self) -> int:
        return int((self.confidence * self.valid_depth).sum())


def confidence_mask(pixel_uncertainty: torch.Tensor, threshold: float) -> torch.Tensor:
    return (pixel_uncertainty.detach() <= threshold).to(torch.float64)


def classify(rendered: RenderedRays, truncation: float, threshold: float, use_mask: bool = True) -> RayClassification:
    surface = rendered.surface
    target = surface.sensor_distance[:, None] - surface.distances
    magnitude = target.abs()
    center = magnitude <= CENTER_BAND * truncation
    tail = (magnitude > CENTER_BAND * truncation) & (magnitude < truncation)
    if use_mask:
        confidence = confidence_mask(rendered.pixel_uncertainty, threshold)
    else:
        confidence = torch.ones_like(rendered.pixel_uncertainty.detach())
    return RayClassification(
        sdf_target=target,
        center=center,
        tail=tail,
        free_space=magnitude >= truncation,
        confidence=confidence,
        valid_depth=rendered.valid_depth,
    )


def _subset_mean(residuals: torch.Tensor, subset: torch.Tensor) -> torch.Tensor:
    counts = subset.sum(dim=-1).clamp_min(1).to(torch.float64)
    return (residuals * subset).sum(dim=-1) / counts


def sdf_losses(
    rendered: RenderedRays, classification: RayClassification, truncation: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    confident = classification.confident_rays
    if confident == 0:
        raise AllMaskedBatch()
    phi = rendered.surface.phi
    ray_confidence = classification.confidence[rendered.surface.ray_index]
    truncated_residual = (phi * truncation - classification.sdf_target) ** 2
    free_residual = (phi - 1.0) ** 2

    center = (ray_confidence * _subset_mean(truncated_residual, classification.center)).sum() / confident
    tail = (ray_confidence * _subset_mean(truncated_residual, classification.tail)).sum() / confident
    free_space = (ray_confidence * _subset_mean(free_residual, classification.free_space)).sum() / confident
    return center, tail, free_space


def color_depth_losses(
    rendered: RenderedRays, batch: RayBatch, classification: RayClassification, mode: Mode,
) -> Tuple[torch.Tensor, torch.Tensor]:
    if batch.target_color is None:
        raise RenderingError('Ray batch carries no target colors.')
    color_residual = ((batch.target_color - rendered.color) ** 2).sum(dim=-1)
    confident = classification.confident_rays
    masked = classification.confidence * classification.valid_depth

    if confident == 0:
        available = {'rgb': color_residual.mean()} if mode is Mode.MAPPING else {}
        raise AllMaskedBatch(available_terms=available)

    if mode is Mode.MAPPING:
        color = color_residual.mean()
    else:
        color = (color_residual * masked).sum() / confident

    depth_residual = (batch.sensor_distance - rendered.depth) ** 2
    depth = (depth_residual * masked).sum() / confident
    return color, depth


def total_loss(terms: Dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    factors = weights.as_dict()
    total = torch.zeros((), dtype=torch.float64)
    for name, value in terms.items():
        total = total + factors[name] * value
    return total


def evaluate_objective(
    rendered: RenderedRays, batch: RayBatch, weights: LossWeights, config: RunConfig, use_mask: bool = True,
) -> LossEvaluation:
    """
    Full tracking or mapping loss.

    A batch without confident valid-depth rays raises `AllMaskedBatch`; in mapping mode the
    exception carries the color term so the caller can continue color-only.
    """
    classification = classify(
        rendered, config.truncation, config.pixel_uncertainty_threshold, use_mask and config.use_confidence_mask,
    )
    color, depth = color_depth_losses(rendered, batch, classification, weights.mode)
    center, tail, free_space = sdf_losses(rendered, classification, config.truncation)
    terms = {
        'rgb': color,
        'depth': depth,
        'sdf_center': center,
        'sdf_tail': tail,
        'free_space': free_space,
    }
    return LossEvaluation(total=total_loss(terms, weights), terms=terms)

import dataclasses
import logging
from typing import List, Optional, Sequence, Tuple

import torch

from unislam.config import RunConfig
from unislam.exceptions import RayMissError, RenderingError
from unislam.field import SceneField
from unislam.geometry import CameraIntrinsics, PoseLike

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class RayBatch:
    """
    Rays with their supervision.

    `sensor_depth` is the sensor z-depth (0 marks an invalid pixel); `distance_scale` converts
    it to a distance along the unit ray direction.
    """

    origins: torch.Tensor
    directions: torch.Tensor
    pixels: torch.Tensor
    distance_scale: torch.Tensor
    sensor_depth: torch.Tensor
    target_color: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.origins.shape[0]

    @property
    def sensor_distance(self) -> torch.Tensor:
        return self.sensor_depth * self.distance_scale

    @property
    def valid_depth(self) -> torch.Tensor:
        return self.sensor_depth > 0

    def keep(self, mask: torch.Tensor) -> 'RayBatch':
        return RayBatch(
            origins=self.origins[mask],
            directions=self.directions[mask],
            pixels=self.pixels[mask],
            distance_scale=self.distance_scale[mask],
            sensor_depth=self.sensor_depth[mask],
            target_color=None if self.target_color is None else self.target_color[mask],
        )

    @classmethod
    def concat(cls, batches: Sequence['RayBatch']) -> 'RayBatch':
        colors = [batch.target_color for batch in batches]
        return cls(
            origins=torch.cat([batch.origins for batch in batches]),
            directions=torch.cat([batch.directions for batch in batches]),
            pixels=torch.cat([batch.pixels for batch in batches]),
            distance_scale=torch.cat([batch.distance_scale for batch in batches]),
            sensor_depth=torch.cat([batch.sensor_depth for batch in batches]),
            target_color=None if any(color is None for color in colors) else torch.cat(colors),  # type: ignore
        )


@dataclasses.dataclass
class Composite:
    weights: torch.Tensor
    color: torch.Tensor
    depth: torch.Tensor
    termination: torch.Tensor
    transmittance: torch.Tensor
    pixel_uncertainty: torch.Tensor
    depth_uncertainty: torch.Tensor


@dataclasses.dataclass
class SurfaceSamples:
    """Samples of the valid-depth rays, the only ones that carry SDF supervision."""

    ray_index: torch.Tensor
    distances: torch.Tensor
    phi: torch.Tensor
    sensor_distance: torch.Tensor


@dataclasses.dataclass
class RenderedRays:
    color: torch.Tensor
    depth: torch.Tensor
    termination: torch.Tensor
    pixel_uncertainty: torch.Tensor
    depth_uncertainty: torch.Tensor
    valid_depth: torch.Tensor
    surface: SurfaceSamples

    def __len__(self) -> int:
        return self.color.shape[0]


@dataclasses.dataclass
class ImageRender:
    color: torch.Tensor
    depth: torch.Tensor
    pixel_uncertainty: torch.Tensor
    depth_uncertainty: torch.Tensor


def generate_rays(
    pose: PoseLike,
    intrinsics: CameraIntrinsics,
    u: torch.Tensor,
    v: torch.Tensor,
    sensor_depth: Optional[torch.Tensor] = None,
    target_color: Optional[torch.Tensor] = None,
) -> RayBatch:
    inside = intrinsics.contains(u, v)
    if not bool(inside.all()):
        outside = torch.stack([u, v], dim=-1)[~inside][:5].tolist()
        raise RenderingError(f'Pixels {outside} lie outside the cropped image region.')

    camera_directions = intrinsics.camera_directions(u, v)
    norms = camera_directions.norm(dim=-1)
    directions = (camera_directions / norms[:, None]) @ pose.rotation_matrix().T
    origins = pose.translation_vector().expand(directions.shape[0], 3)
    if sensor_depth is None:
        sensor_depth = torch.zeros_like(norms)
    return RayBatch(
        origins=origins,
        directions=directions,
        pixels=torch.stack([u, v], dim=-1),
        distance_scale=norms,
        sensor_depth=sensor_depth.to(torch.float64),
        target_color=target_color,
    )


def ray_box_intersection(
    origins: torch.Tensor, directions: torch.Tensor, bounds: torch.Tensor, near_min: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test; returns near, far and the hit mask with near clamped to `near_min`."""
    origins = origins.detach()
    directions = directions.detach()
    tiny = torch.full_like(directions, 1e-12)
    safe = torch.where(directions.abs() < 1e-12, torch.where(directions < 0, -tiny, tiny), directions)
    first = (bounds[0] - origins) / safe
    second = (bounds[1] - origins) / safe
    near = torch.minimum(first, second).max(dim=-1).values.clamp_min(near_min)
    far = torch.maximum(first, second).min(dim=-1).values
    return near, far, far > near


def sample_ray(
    near: torch.Tensor,
    far: torch.Tensor,
    sensor_distance: Optional[torch.Tensor],
    config: RunConfig,
    generator: torch.Generator,
) -> torch.Tensor:
    """
    Stratified distances in [near, far], one uniform draw per equal sub-interval, plus
    `n_importance` uniform draws in the truncation band around the sensor distance.
    """
    count = near.shape[0]
    if bool((far <= near).any()):
        raise RayMissError('Ray misses the scene bounds.')
    steps = config.n_stratified
    edges = torch.arange(steps, dtype=torch.float64) / steps
    jitter = torch.rand(count, steps, generator=generator, dtype=torch.float64) / steps
    span = (far - near)[:, None]
    distances = near[:, None] + span * (edges[None, :] + jitter)

    if sensor_distance is not None and config.n_importance > 0:
        band_low = (sensor_distance - config.truncation).clamp_min(config.near_min)
        band_high = sensor_distance + config.truncation
        draws = torch.rand(count, config.n_importance, generator=generator, dtype=torch.float64)
        importance = band_low[:, None] + (band_high - band_low)[:, None] * draws
        distances = torch.cat([distances, importance], dim=-1)

    return torch.sort(distances, dim=-1).values


def sdf_to_density(phi: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(-phi / alpha) / alpha


def spacing_scaled(densities: torch.Tensor, distances: torch.Tensor) -> torch.Tensor:
    spacing = distances[..., 1:] - distances[..., :-1]
    spacing = torch.cat([spacing, spacing[..., -1:]], dim=-1)
    return densities * spacing


def pixel_uncertainty(termination: torch.Tensor) -> torch.Tensor:
    """Squared residual transmittance of a ray, 0 for an opaque hit and 1 for a ray that hits nothing."""
    return (1.0 - termination) ** 2


def composite(densities: torch.Tensor, colors: torch.Tensor, distances: torch.Tensor) -> Composite:
    """
    Volume rendering over the last axis.

    w_i = exp(-sum_{j<i} σ_j)·(1 - exp(-σ_i)); the weights telescope so that Σw = 1 - exp(-Σσ).
    """
    if not bool(torch.isfinite(densities).all()) or bool((densities < 0).any()):
        raise RenderingError('Densities must be finite and non-negative.')
    exclusive = torch.cumsum(densities, dim=-1) - densities
    weights = torch.exp(-exclusive) * -torch.expm1(-densities)

    color = (weights[..., None] * colors).sum(dim=-2)
    depth = (weights * distances).sum(dim=-1)
    termination = weights.sum(dim=-1)
    transmittance = torch.exp(-densities.sum(dim=-1))

    variance = (weights * (depth[..., None] - distances) ** 2).sum(dim=-1)
    positive = variance > 0
    depth_uncertainty = torch.where(
        positive, torch.sqrt(torch.where(positive, variance, torch.ones_like(variance))), torch.zeros_like(variance),
    )
    return Composite(
        weights=weights,
        color=color,
        depth=depth,
        termination=termination,
        transmittance=transmittance,
        pixel_uncertainty=pixel_uncertainty(termination),
        depth_uncertainty=depth_uncertainty,
    )


def image_uncertainty(pixel_uncertainties: torch.Tensor) -> float:
    if pixel_uncertainties.numel() == 0:
        raise RenderingError('Image uncertainty needs at least one pixel.')
    return float(pixel_uncertainties.detach().mean())


def _render_group(
    field: SceneField,
    batch: RayBatch,
    near: torch.Tensor,
    far: torch.Tensor,
    guided: bool,
    config: RunConfig,
    generator: torch.Generator,
) -> Tuple[Composite, torch.Tensor, torch.Tensor]:
    distances = sample_ray(near, far, batch.sensor_distance if guided else None, config, generator)
    points = batch.origins[:, None, :] + batch.directions[:, None, :] * distances[..., None]
    flat_points = points.reshape(-1, 3)
    phi = field.query_sdf(flat_points).reshape(distances.shape)
    colors = field.query_color(flat_points).reshape(*distances.shape, 3)
    densities = sdf_to_density(phi, field.alpha_value())
    if config.spacing_scaled_density:
        densities = spacing_scaled(densities, distances)
    return composite(densities, colors, distances), distances, phi


def render_rays(
    field: SceneField,
    batch: RayBatch,
    config: RunConfig,
    generator: torch.Generator,
    near: Optional[torch.Tensor] = None,
    far: Optional[torch.Tensor] = None,
) -> RenderedRays:
    """
    Render a batch; valid-depth rays get the importance band, the others stratified samples only.

    `near`/`far` override the scene-box interval per ray.
    """
    box_near, box_far, hit = ray_box_intersection(batch.origins, batch.directions, field.bounds, config.near_min)
    if near is None or far is None:
        if not bool(hit.all()):
            raise RayMissError(f'{int((~hit).sum())} rays miss the scene bounds.')
        near = box_near if near is None else near
        far = box_far if far is None else far

    valid = batch.valid_depth
    valid_index = torch.nonzero(valid).reshape(-1)
    invalid_index = torch.nonzero(~valid).reshape(-1)

    parts: List[Composite] = []
    surface_distances = torch.zeros(0, config.n_stratified + config.n_importance, dtype=torch.float64)
    surface_phi = surface_distances
    if valid_index.numel():
        valid_batch = batch.keep(valid_index)
        rendered, surface_distances, surface_phi = _render_group(
            field, valid_batch, near[valid_index], far[valid_index], True, config, generator,
        )
        parts.append(rendered)
    if invalid_index.numel():
        rendered, _, _ = _render_group(
            field, batch.keep(invalid_index), near[invalid_index], far[invalid_index], False, config, generator,
        )
        parts.append(rendered)

    inverse = torch.argsort(torch.cat([valid_index, invalid_index]))

    def gather(name: str) -> torch.Tensor:
        return torch.cat([getattr(part, name) for part in parts])[inverse]

    return RenderedRays(
        color=gather('color'),
        depth=gather('depth'),
        termination=gather('termination'),
        pixel_uncertainty=gather('pixel_uncertainty'),
        depth_uncertainty=gather('depth_uncertainty'),
        valid_depth=valid,
        surface=SurfaceSamples(
            ray_index=valid_index,
            distances=surface_distances,
            phi=surface_phi,
            sensor_distance=batch.sensor_distance[valid_index],
        ),
    )


def render_image(
    field: SceneField,
    pose: PoseLike,
    intrinsics: CameraIntrinsics,
    config: RunConfig,
    guide_depth: Optional[torch.Tensor] = None,
    seed: int = 0,
) -> ImageRender:
    """
    Render every pixel of a view; depth maps are z-depth.

    Without a guide depth a stratified pass supplies the guide for a second, banded pass.
    Pixels whose ray misses the scene box stay empty with uncertainty 1.
    """
    intrinsics = intrinsics.with_crop(0)
    generator = torch.Generator().manual_seed(seed)
    u, v = intrinsics.pixel_grid()
    shape = (intrinsics.height, intrinsics.width)
    color = torch.zeros(u.shape[0], 3, dtype=torch.float64)
    depth = torch.zeros(u.shape[0], dtype=torch.float64)
    uncertainty = torch.ones(u.shape[0], dtype=torch.float64)
    depth_uncertainty = torch.zeros(u.shape[0], dtype=torch.float64)

    with torch.no_grad():
        for start in range(0, u.shape[0], config.render_chunk):
            chunk = slice(start, start + config.render_chunk)
            guide = None if guide_depth is None else guide_depth.reshape(-1)[chunk]
            batch = generate_rays(pose, intrinsics, u[chunk], v[chunk], sensor_depth=guide)
            _, _, hit = ray_box_intersection(batch.origins, batch.directions, field.bounds, config.near_min)
            index = torch.nonzero(hit).reshape(-1) + start
            batch = batch.keep(hit)
            if not len(batch):
                continue
            if guide is None:
                rough = render_rays(field, batch, config, generator)
                batch.sensor_depth = torch.where(
                    rough.termination > 0.5, rough.depth / batch.distance_scale, torch.zeros_like(rough.depth),
                )
            rendered = render_rays(field, batch, config, generator)
            color[index] = rendered.color
            depth[index] = rendered.depth / batch.distance_scale
            uncertainty[index] = rendered.pixel_uncertainty
            depth_uncertainty[index] = rendered.depth_uncertainty

    return ImageRender(
        color=color.reshape(*shape, 3),
        depth=depth.reshape(shape),
        pixel_uncertainty=uncertainty.reshape(shape),
        depth_uncertainty=depth_uncertainty.reshape(shape),
    )

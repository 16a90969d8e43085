import math

import pytest
import torch

from tests.conftest import small_config, tensor
from unislam.exceptions import RayMissError, RenderingError
from unislam.field import as_bounds
from unislam.geometry import Pose, PoseVariable
from unislam.rendering import (
    RayBatch, composite, generate_rays, image_uncertainty, pixel_uncertainty, ray_box_intersection, render_image,
    render_rays, sample_ray, sdf_to_density, spacing_scaled,
)


def centre_rays(intrinsics, pose, depth=None):
    u = tensor([7.5, 0.0, 15.0])
    v = tensor([5.5, 0.0, 11.0])
    sensor_depth = None if depth is None else tensor(depth)
    return generate_rays(pose, intrinsics, u, v, sensor_depth=sensor_depth, target_color=torch.zeros(3, 3))


def test_generate_rays_directions(intrinsics):
    batch = centre_rays(intrinsics, Pose.identity(), depth=[1.0, 1.0, 0.0])

    assert len(batch) == 3
    assert torch.allclose(batch.directions.norm(dim=-1), torch.ones(3, dtype=torch.float64))
    assert torch.allclose(batch.directions[0], tensor([0.0, 0.0, 1.0]))
    assert batch.valid_depth.tolist() == [True, True, False]
    # a z-depth of 1 lies further along the ray towards the image corner
    assert batch.sensor_distance[0].item() == pytest.approx(1.0)
    assert batch.sensor_distance[1].item() == pytest.approx(math.sqrt(1 + (7.5 / 20) ** 2 + (5.5 / 20) ** 2))


def test_generate_rays_rotates_with_the_pose(intrinsics, camera_pose):
    batch = centre_rays(intrinsics, camera_pose)

    assert torch.allclose(batch.origins[0], camera_pose.translation)
    expected = -camera_pose.translation / camera_pose.translation.norm()
    assert torch.allclose(batch.directions[0], expected)


def test_generate_rays_rejects_cropped_pixels(intrinsics):
    with pytest.raises(RenderingError):
        generate_rays(Pose.identity(), intrinsics.with_crop(2), tensor([1.0]), tensor([5.0]))


def test_ray_batch_keep_and_concat(intrinsics):
    batch = centre_rays(intrinsics, Pose.identity(), depth=[1.0, 2.0, 3.0])

    kept = batch.keep(tensor([1.0, 0.0, 1.0]) > 0)
    joined = RayBatch.concat([kept, batch])

    assert kept.sensor_depth.tolist() == [1.0, 3.0]
    assert len(joined) == 5
    assert joined.target_color.shape == (5, 3)


def test_ray_box_intersection():
    bounds = as_bounds((-1, -1, -1, 1, 1, 1))
    origins = tensor([[0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, 3.0, -3.0]])
    directions = tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

    near, far, hit = ray_box_intersection(origins, directions, bounds, near_min=0.05)

    assert near[:2].tolist() == pytest.approx([2.0, 0.05])
    assert far[:2].tolist() == pytest.approx([4.0, 1.0])
    assert hit.tolist() == [True, True, False]


def test_sample_ray_is_sorted_and_stratified():
    config = small_config(n_stratified=4, n_importance=3, truncation=0.1)
    generator = torch.Generator().manual_seed(0)
    near, far = tensor([1.0, 0.5]), tensor([3.0, 2.5])

    distances = sample_ray(near, far, tensor([2.0, 0.08]), config, generator)

    assert distances.shape == (2, 7)
    assert bool((distances[:, 1:] >= distances[:, :-1]).all())
    assert bool((distances[0] >= 1.0).all()) and bool((distances[0] <= 3.0).all())
    in_band = (distances[0] >= 1.9) & (distances[0] <= 2.1)
    assert int(in_band.sum()) >= 3
    # the band is clamped to the minimal near distance
    assert float(distances[1].min()) >= config.near_min


def test_sample_ray_misses():
    with pytest.raises(RayMissError):
        sample_ray(tensor([1.0]), tensor([1.0]), None, small_config(), torch.Generator())


def test_sdf_to_density():
    alpha = tensor(0.1)

    densities = sdf_to_density(tensor([0.0, 1.0, -1.0]), alpha)

    assert densities[0].item() == pytest.approx(5.0)
    assert densities[1].item() < 1e-3
    assert densities[2].item() == pytest.approx(10.0, rel=1e-3)


def test_spacing_scaled_repeats_the_last_spacing():
    scaled = spacing_scaled(tensor([[1.0, 1.0, 1.0]]), tensor([[0.0, 0.5, 2.0]]))

    assert scaled.tolist() == [[0.5, 1.5, 1.5]]


def test_composite_single_opaque_sample():
    densities = tensor([[0.0, 50.0, 0.0]])
    colors = tensor([[[0.0, 0.0, 0.0], [0.2, 0.4, 0.6], [1.0, 1.0, 1.0]]])

    result = composite(densities, colors, tensor([[1.0, 2.0, 3.0]]))

    assert result.termination.item() == pytest.approx(1.0)
    assert result.depth.item() == pytest.approx(2.0)
    assert result.color[0].tolist() == pytest.approx([0.2, 0.4, 0.6])
    assert result.pixel_uncertainty.item() == pytest.approx(0.0, abs=1e-12)
    assert result.depth_uncertainty.item() == pytest.approx(0.0, abs=1e-9)


def test_composite_empty_ray():
    result = composite(torch.zeros(1, 4, dtype=torch.float64), torch.ones(1, 4, 3), tensor([[1.0, 2.0, 3.0, 4.0]]))

    assert result.termination.item() == 0.0
    assert result.pixel_uncertainty.item() == 1.0
    assert result.depth_uncertainty.item() == 0.0


def test_composite_weights_and_uncertainty_agree():
    generator = torch.Generator().manual_seed(1)
    densities = torch.rand(16, 32, generator=generator, dtype=torch.float64) * 0.2
    distances = torch.sort(torch.rand(16, 32, generator=generator, dtype=torch.float64), dim=-1).values

    result = composite(densities, torch.rand(16, 32, 3, dtype=torch.float64), distances)

    assert torch.allclose(result.termination, 1 - torch.exp(-densities.sum(dim=-1)), atol=1e-12)
    assert torch.equal(result.pixel_uncertainty, pixel_uncertainty(result.termination))
    assert torch.allclose(result.pixel_uncertainty, result.transmittance ** 2, atol=1e-12)
    assert bool(((result.pixel_uncertainty >= 0) & (result.pixel_uncertainty <= 1)).all())
    assert bool((result.weights >= 0).all())


def test_composite_depth_uncertainty_is_differentiable_when_zero():
    densities = tensor([[0.0, 0.0]]).requires_grad_(True)

    result = composite(densities, torch.zeros(1, 2, 3, dtype=torch.float64), tensor([[1.0, 2.0]]))
    result.depth_uncertainty.sum().backward()

    assert bool(torch.isfinite(densities.grad).all())


@pytest.mark.parametrize('densities', ([[-0.1, 1.0]], [[math.nan, 1.0]], [[math.inf, 1.0]]))
def test_composite_rejects_invalid_densities(densities):
    with pytest.raises(RenderingError):
        composite(tensor(densities), torch.zeros(1, 2, 3), tensor([[1.0, 2.0]]))


def test_image_uncertainty():
    assert image_uncertainty(tensor([0.0, 0.5, 1.0])) == pytest.approx(0.5)
    with pytest.raises(RenderingError):
        image_uncertainty(torch.zeros(0, dtype=torch.float64))


def test_render_rays_keeps_ray_order(field_factory, intrinsics, camera_pose):
    config = small_config()
    field = field_factory()
    batch = centre_rays(intrinsics, camera_pose, depth=[0.0, 0.6, 0.0])

    rendered = render_rays(field, batch, config, torch.Generator().manual_seed(0))

    assert rendered.color.shape == (3, 3)
    assert rendered.depth.shape == (3,)
    assert rendered.valid_depth.tolist() == [False, True, False]
    assert rendered.surface.ray_index.tolist() == [1]
    assert rendered.surface.phi.shape == (1, config.n_stratified + config.n_importance)
    assert torch.allclose(rendered.pixel_uncertainty, (1 - rendered.termination) ** 2)


def test_render_rays_is_seeded(field_factory, intrinsics, camera_pose):
    config = small_config()
    field = field_factory()
    batch = centre_rays(intrinsics, camera_pose, depth=[0.5, 0.6, 0.0])

    first = render_rays(field, batch, config, torch.Generator().manual_seed(4))
    second = render_rays(field, batch, config, torch.Generator().manual_seed(4))

    assert torch.equal(first.color, second.color)
    assert torch.equal(first.depth, second.depth)


def test_render_rays_outside_the_box(field_factory, intrinsics):
    pose = Pose([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 5.0])
    batch = centre_rays(intrinsics, pose)

    with pytest.raises(RayMissError):
        render_rays(field_factory(), batch, small_config(), torch.Generator())

    near, far = torch.full((3,), 0.1, dtype=torch.float64), torch.full((3,), 1.0, dtype=torch.float64)
    rendered = render_rays(field_factory(), batch, small_config(), torch.Generator(), near=near, far=far)
    assert rendered.depth.shape == (3,)


def test_render_rays_gradients_reach_field_and_pose(field_factory, intrinsics, camera_pose):
    field = field_factory(feature_init_range=0.5, decoder_output_scale=1.0)
    variable = PoseVariable(camera_pose, 'frame', 1e-3, 1e-3)
    batch = generate_rays(variable, intrinsics, tensor([7.5, 3.0]), tensor([5.5, 8.0]), sensor_depth=tensor([0.6, 0.7]))

    rendered = render_rays(field, batch, small_config(), torch.Generator().manual_seed(0))
    (rendered.color.sum() + rendered.depth.sum()).backward()

    assert float(field.geometry_decoder.parameters.values.grad.abs().sum()) > 0
    assert float(variable.translation.values.grad.abs().sum()) > 0
    assert float(variable.rotation.values.grad.abs().sum()) > 0


def test_render_image(field_factory, intrinsics, camera_pose):
    config = small_config()

    image = render_image(field_factory(), camera_pose, intrinsics.with_crop(2), config, seed=1)
    again = render_image(field_factory(), camera_pose, intrinsics, config, seed=1)

    assert image.color.shape == (12, 16, 3)
    assert image.depth.shape == (12, 16)
    assert image.pixel_uncertainty.shape == (12, 16)
    assert image.depth_uncertainty.shape == (12, 16)
    assert torch.equal(image.color, again.color)
    assert bool(((image.pixel_uncertainty >= 0) & (image.pixel_uncertainty <= 1)).all())


def test_render_image_empty_outside_the_box(field_factory, intrinsics):
    pose = Pose([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 5.0])

    image = render_image(field_factory(), pose, intrinsics, small_config())

    assert torch.equal(image.pixel_uncertainty, torch.ones(12, 16, dtype=torch.float64))
    assert torch.equal(image.depth, torch.zeros(12, 16, dtype=torch.float64))

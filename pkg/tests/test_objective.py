import pytest
import torch

from tests.conftest import small_config, tensor
from unislam.exceptions import AllMaskedBatch, RenderingError
from unislam.objective import (
    CENTER_BAND, LossWeights, Mode, classify, color_depth_losses, confidence_mask, evaluate_objective, sdf_losses,
    total_loss,
)
from unislam.rendering import RayBatch, RenderedRays, SurfaceSamples


TRUNCATION = 0.1


def make_batch(sensor_depth, target_color):
    count = len(sensor_depth)
    return RayBatch(
        origins=torch.zeros(count, 3, dtype=torch.float64),
        directions=tensor([[0.0, 0.0, 1.0]] * count),
        pixels=torch.zeros(count, 2, dtype=torch.float64),
        distance_scale=torch.ones(count, dtype=torch.float64),
        sensor_depth=tensor(sensor_depth),
        target_color=tensor(target_color),
    )


def make_rendered(batch, color, depth, uncertainty, distances, phi):
    valid = batch.valid_depth
    index = torch.nonzero(valid).reshape(-1)
    uncertainty = tensor(uncertainty)
    return RenderedRays(
        color=tensor(color),
        depth=tensor(depth),
        termination=1 - uncertainty.sqrt(),
        pixel_uncertainty=uncertainty,
        depth_uncertainty=torch.zeros(len(batch), dtype=torch.float64),
        valid_depth=valid,
        surface=SurfaceSamples(
            ray_index=index,
            distances=tensor(distances),
            phi=tensor(phi),
            sensor_distance=batch.sensor_distance[index],
        ),
    )


@pytest.fixture
def two_rays():
    batch = make_batch([1.0, 0.0], [[0.5, 0.5, 0.5], [1.0, 0.0, 0.0]])
    # samples at signed targets 0.5 (free), 0.08 (tail), 0.02 (center) and -0.2 (free, behind the surface)
    rendered = make_rendered(
        batch,
        color=[[0.4, 0.5, 0.5], [0.0, 0.0, 0.0]],
        depth=[0.9, 2.0],
        uncertainty=[0.0, 1.0],
        distances=[[0.5, 0.92, 0.98, 1.2]],
        phi=[[0.5, 0.5, 0.1, -1.0]],
    )
    return batch, rendered


def test_loss_weights_from_config():
    config = small_config(tracking_w_rgb=2.0, mapping_w_free_space=7.0)

    tracking = LossWeights.from_config(config, Mode.TRACKING)
    mapping = LossWeights.from_config(config, Mode.MAPPING)

    assert tracking.rgb == 2.0
    assert tracking.as_dict()['sdf_center'] == config.tracking_w_sdf_center
    assert mapping.free_space == 7.0
    assert mapping.mode is Mode.MAPPING


def test_confidence_mask_is_inclusive():
    assert confidence_mask(tensor([0.0, 0.01, 0.02]), 0.01).tolist() == [1.0, 1.0, 0.0]


def test_classify(two_rays):
    _, rendered = two_rays

    classification = classify(rendered, TRUNCATION, threshold=0.01)

    assert classification.sdf_target[0].tolist() == pytest.approx([0.5, 0.08, 0.02, -0.2])
    assert classification.free_space[0].tolist() == [True, False, False, True]
    assert classification.tail[0].tolist() == [False, True, False, False]
    assert classification.center[0].tolist() == [False, False, True, False]
    assert classification.confidence.tolist() == [1.0, 0.0]
    assert classification.confident_rays == 1


def test_classify_band_edges():
    truncation = 0.5
    batch = make_batch([1.0], [[0.0, 0.0, 0.0]])
    edges = [1.0 - CENTER_BAND * truncation, 1.0 - truncation, 1.0 + truncation]
    rendered = make_rendered(batch, [[0.0, 0.0, 0.0]], [1.0], [0.0], [edges], [[0.0, 0.0, 0.0]])

    classification = classify(rendered, truncation, threshold=0.01)

    assert classification.center[0].tolist() == [True, False, False]
    assert classification.tail[0].tolist() == [False, False, False]
    assert classification.free_space[0].tolist() == [False, True, True]


def test_classify_without_mask(two_rays):
    _, rendered = two_rays

    assert classify(rendered, TRUNCATION, 0.01, use_mask=False).confidence.tolist() == [1.0, 1.0]


@pytest.mark.parametrize('mode', (Mode.TRACKING, Mode.MAPPING))
def test_evaluate_objective_terms(two_rays, mode):
    batch, rendered = two_rays
    config = small_config(truncation=TRUNCATION, pixel_uncertainty_threshold=0.01)

    evaluation = evaluate_objective(rendered, batch, LossWeights.from_config(config, mode), config)
    terms = {name: value.item() for name, value in evaluation.terms.items()}

    expected_rgb = 0.01 if mode is Mode.TRACKING else (0.01 + 1.0) / 2
    assert terms['rgb'] == pytest.approx(expected_rgb)
    assert terms['depth'] == pytest.approx(0.01)
    assert terms['sdf_center'] == pytest.approx((0.1 * TRUNCATION - 0.02) ** 2)
    assert terms['sdf_tail'] == pytest.approx((0.5 * TRUNCATION - 0.08) ** 2)
    assert terms['free_space'] == pytest.approx((0.25 + 4.0) / 2)
    weights = LossWeights.from_config(config, mode).as_dict()
    assert evaluation.item() == pytest.approx(sum(weights[name] * value for name, value in terms.items()))


def test_evaluate_objective_all_masked(two_rays):
    batch, rendered = two_rays
    rendered.pixel_uncertainty = tensor([0.5, 1.0])
    config = small_config(truncation=TRUNCATION, pixel_uncertainty_threshold=0.01)

    with pytest.raises(AllMaskedBatch) as tracking_info:
        evaluate_objective(rendered, batch, LossWeights.from_config(config, Mode.TRACKING), config)
    with pytest.raises(AllMaskedBatch) as mapping_info:
        evaluate_objective(rendered, batch, LossWeights.from_config(config, Mode.MAPPING), config)

    assert tracking_info.value.available_terms == {}
    assert set(mapping_info.value.available_terms) == {'rgb'}
    assert mapping_info.value.available_terms['rgb'].item() == pytest.approx((0.01 + 1.0) / 2)


def test_evaluate_objective_unmasked_fallback(two_rays):
    batch, rendered = two_rays
    rendered.pixel_uncertainty = tensor([0.5, 1.0])
    config = small_config(truncation=TRUNCATION, pixel_uncertainty_threshold=0.01)

    evaluation = evaluate_objective(
        rendered, batch, LossWeights.from_config(config, Mode.TRACKING), config, use_mask=False,
    )

    assert evaluation.terms['depth'].item() == pytest.approx(0.01)


def test_evaluate_objective_needs_target_colors(two_rays):
    batch, rendered = two_rays
    batch.target_color = None
    config = small_config(truncation=TRUNCATION)

    with pytest.raises(RenderingError):
        evaluate_objective(rendered, batch, LossWeights.from_config(config, Mode.TRACKING), config)


def test_total_loss_skips_missing_terms():
    weights = LossWeights(rgb=2.0, depth=1.0, sdf_center=1.0, sdf_tail=1.0, free_space=1.0, mode=Mode.MAPPING)

    assert total_loss({'rgb': tensor(0.5)}, weights).item() == pytest.approx(1.0)


def test_sdf_losses(two_rays):
    _, rendered = two_rays
    classification = classify(rendered, TRUNCATION, threshold=0.01)

    center, tail, free_space = sdf_losses(rendered, classification, TRUNCATION)

    assert center.item() == pytest.approx((0.1 * TRUNCATION - 0.02) ** 2)
    assert tail.item() == pytest.approx((0.5 * TRUNCATION - 0.08) ** 2)
    assert free_space.item() == pytest.approx((0.25 + 4.0) / 2)


def test_sdf_losses_all_masked(two_rays):
    _, rendered = two_rays
    rendered.pixel_uncertainty = tensor([0.5, 1.0])

    with pytest.raises(AllMaskedBatch):
        sdf_losses(rendered, classify(rendered, TRUNCATION, threshold=0.01), TRUNCATION)


@pytest.mark.parametrize('mode, expected_rgb', ((Mode.TRACKING, 0.01), (Mode.MAPPING, (0.01 + 1.0) / 2)))
def test_color_depth_losses(two_rays, mode, expected_rgb):
    batch, rendered = two_rays
    classification = classify(rendered, TRUNCATION, threshold=0.01)

    color, depth = color_depth_losses(rendered, batch, classification, mode)

    assert color.item() == pytest.approx(expected_rgb)
    assert depth.item() == pytest.approx(0.01)


def test_classify_partitions_every_sample():
    generator = torch.Generator().manual_seed(4)
    sensor_depth = (torch.rand(6, generator=generator, dtype=torch.float64) + 0.5).tolist()
    batch = make_batch(sensor_depth, [[0.0, 0.0, 0.0]] * 6)
    distances = torch.rand(6, 40, generator=generator, dtype=torch.float64) * 2.0
    rendered = make_rendered(batch, [[0.0, 0.0, 0.0]] * 6, sensor_depth, [0.0] * 6, distances.tolist(),
                             torch.zeros(6, 40).tolist())

    classification = classify(rendered, TRUNCATION, threshold=0.01)

    center, tail, free_space = classification.center, classification.tail, classification.free_space
    assert torch.all(center | tail | free_space)
    assert not torch.any(center & tail)
    assert not torch.any(center & free_space)
    assert not torch.any(tail & free_space)


def test_free_space_supervises_samples_behind_the_surface():
    batch = make_batch([1.0], [[0.0, 0.0, 0.0]])
    rendered = make_rendered(batch, [[0.0, 0.0, 0.0]], [1.0], [0.0], [[0.5, 1.2]], [[1.0, -50.0]])

    classification = classify(rendered, TRUNCATION, threshold=0.01)
    center, tail, free_space = sdf_losses(rendered, classification, TRUNCATION)

    assert classification.free_space[0].tolist() == [True, True]
    assert free_space.item() == pytest.approx((-50.0 - 1.0) ** 2 / 2)
    assert center.item() == tail.item() == 0.0


@pytest.mark.parametrize('mode', (Mode.TRACKING, Mode.MAPPING))
def test_duplicated_rays_leave_losses_unchanged(two_rays, mode):
    batch, rendered = two_rays
    doubled_batch = make_batch([1.0, 0.0, 1.0, 0.0], [[0.5, 0.5, 0.5], [1.0, 0.0, 0.0]] * 2)
    doubled = make_rendered(
        doubled_batch,
        color=[[0.4, 0.5, 0.5], [0.0, 0.0, 0.0]] * 2,
        depth=[0.9, 2.0] * 2,
        uncertainty=[0.0, 1.0] * 2,
        distances=[[0.5, 0.92, 0.98, 1.2]] * 2,
        phi=[[0.5, 0.5, 0.1, -1.0]] * 2,
    )
    config = small_config(truncation=TRUNCATION, pixel_uncertainty_threshold=0.01)
    weights = LossWeights.from_config(config, mode)

    single = evaluate_objective(rendered, batch, weights, config)
    repeated = evaluate_objective(doubled, doubled_batch, weights, config)

    for name, value in single.terms.items():
        assert repeated.terms[name].item() == pytest.approx(value.item()), name
    assert repeated.item() == pytest.approx(single.item())

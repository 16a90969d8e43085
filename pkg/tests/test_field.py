import pytest
import torch

from unislam.exceptions import CheckpointError, ConfigError
from unislam.field import as_bounds, encode, level_resolutions, load_checkpoint, save_checkpoint
from tests.conftest import UNIT_BOUNDS, tensor


@pytest.mark.parametrize(
    'levels, base, finest, expected',
    (
        (1, 16, 100, [100]),
        (2, 2, 4, [2, 4]),
        (4, 2, 16, [2, 4, 8, 16]),
        (3, 4, 6, [4, 5, 6]),
    ),
)
def test_level_resolutions(levels, base, finest, expected):
    assert level_resolutions(levels, base, finest) == expected


def test_level_resolutions_too_many_levels():
    with pytest.raises(ConfigError):
        level_resolutions(5, 4, 6)


@pytest.mark.parametrize('values', ((0, 0, 0, 1, 0, 1), (0, 0, 0, 1, 1, float('nan'))))
def test_as_bounds_rejects_empty_boxes(values):
    with pytest.raises(ConfigError):
        as_bounds(values)


def test_init_field_layout(field_factory):
    field = field_factory()

    assert field.geometry_grid.resolutions == [2, 4]
    assert field.geometry_grid.table_sizes() == [27, 125]
    assert field.geometry_grid.features.size == (27 + 125) * 2
    assert [block.name for block in field.blocks()] == [
        'geometry_grid', 'appearance_grid', 'geometry_decoder', 'appearance_decoder', 'alpha',
    ]
    assert field.alpha_value().item() == pytest.approx(0.1)
    assert field.alpha.lower_bound == pytest.approx(1e-4)
    assert torch.equal(field.bounds, as_bounds(UNIT_BOUNDS))


def test_init_field_is_seeded(field_factory):
    assert field_factory().checksum() == field_factory().checksum()
    assert field_factory().checksum() != field_factory(seed=1).checksum()


def test_hashed_levels_use_the_table_size(field_factory):
    field = field_factory(table_size_log2=4)

    assert field.geometry_grid.is_dense(0) is False
    assert field.geometry_grid.table_sizes() == [16, 16]

    points = torch.rand(50, 3, dtype=torch.float64) * 2 - 1
    corners = torch.randint(0, 5, (50, 3))
    assert int(field.geometry_grid.corner_index(1, corners).max()) < 16
    assert field.query_sdf(points).shape == (50,)


def test_encode_interpolates_trilinearly(field_factory):
    field = field_factory(geometry_levels=1, appearance_levels=1, finest_voxel=1.0)
    grid = field.geometry_grid
    table = grid.level_table(0)
    # lattice point (1, 1, 1) of a 3x3x3 dense table is the box centre
    centre_row = 1 + 1 * 3 + 1 * 9

    features = encode(tensor([[0.0, 0.0, 0.0]]), grid)
    half_way = encode(tensor([[0.5, 0.0, 0.0]]), grid)

    assert torch.allclose(features[0], table[centre_row])
    assert torch.allclose(half_way[0], (table[centre_row] + table[centre_row + 1]) / 2)


def test_encode_clamps_points_outside_the_box(field_factory):
    field = field_factory()

    inside = field.query_sdf(tensor([[1.0, 0.2, -0.3]]))
    outside = field.query_sdf(tensor([[3.0, 0.2, -0.3]]))

    assert torch.allclose(inside, outside)
    assert field.out_of_bounds_queries == 1


def test_query_ranges(field_factory):
    field = field_factory(feature_init_range=1.0, decoder_output_scale=1.0)
    points = torch.rand(200, 3, dtype=torch.float64) * 2 - 1

    sdf = field.query_sdf(points)
    color = field.query_color(points)

    assert sdf.shape == (200,)
    assert color.shape == (200, 3)
    assert bool((sdf.abs() < 1).all())
    assert bool(((color > 0) & (color < 1)).all())


def test_queries_are_differentiable(field_factory):
    field = field_factory(feature_init_range=0.5, decoder_output_scale=1.0)
    points = torch.rand(20, 3, dtype=torch.float64) * 2 - 1

    (field.query_sdf(points).sum() + field.query_color(points).sum()).backward()

    for block in field.blocks()[:4]:
        assert block.values.grad is not None
        assert float(block.values.grad.abs().sum()) > 0


def test_frozen_field_has_no_gradients(field_factory):
    field = field_factory()

    with field.frozen():
        assert not any(block.values.requires_grad for block in field.blocks())
        assert not field.query_sdf(tensor([[0.1, 0.2, 0.3]])).requires_grad

    assert all(block.values.requires_grad for block in field.blocks())


def test_checkpoint_round_trip(field_factory, tmp_path):
    field = field_factory(seed=3, table_size_log2=4)
    path = tmp_path / 'checkpoint.pt'
    points = torch.rand(10, 3, dtype=torch.float64) * 2 - 1

    save_checkpoint(field, path, extras={'config': 'seed = 3\n', 'seed': 3})
    loaded, extras = load_checkpoint(path)

    assert loaded.checksum() == field.checksum()
    assert extras == {'config': 'seed = 3\n', 'seed': 3}
    assert loaded.truncation == field.truncation
    assert loaded.alpha.lower_bound == field.alpha.lower_bound
    assert torch.equal(loaded.query_sdf(points), field.query_sdf(points))
    assert torch.equal(loaded.query_color(points), field.query_color(points))


def test_load_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'missing.pt')


def test_load_checkpoint_wrong_version(tmp_path):
    path = tmp_path / 'checkpoint.pt'
    torch.save({'version': 999}, str(path))

    with pytest.raises(CheckpointError) as exc_info:
        load_checkpoint(path)

    assert exc_info.value.messages == [f'Checkpoint {path} has an unsupported version.']

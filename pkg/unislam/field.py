import contextlib
import dataclasses
import hashlib
import logging
import math
import pathlib
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from unislam.config import RunConfig
from unislam.constants import CHECKPOINT_VERSION, HASH_PRIMES
from unislam.exceptions import CheckpointError, ConfigError
from unislam.gradients import BlockRole, ParameterBlock

logger = logging.getLogger(__name__)

BoundsLike = Union[torch.Tensor, Sequence[float], Sequence[Sequence[float]]]

_CORNER_OFFSETS = torch.tensor(
    [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=torch.int64,
)


def as_bounds(values: BoundsLike) -> torch.Tensor:
    """Scene box as a (2, 3) tensor of minimum and maximum corners."""
    bounds = torch.as_tensor(values, dtype=torch.float64).reshape(2, 3)
    if not bool(torch.isfinite(bounds).all()) or bool((bounds[1] <= bounds[0]).any()):
        raise ConfigError(f'Scene bounds {bounds.tolist()} must have positive volume.')
    return bounds


def level_resolutions(levels: int, base_resolution: int, finest_resolution: int) -> List[int]:
    if levels == 1:
        return [finest_resolution]
    if finest_resolution - base_resolution < levels - 1:
        raise ConfigError(
            f'Finest lattice {finest_resolution} cannot hold {levels} strictly increasing levels '
            f'from base {base_resolution}; use a smaller voxel size or fewer levels.',
        )
    growth = math.exp((math.log(finest_resolution) - math.log(base_resolution)) / (levels - 1))
    resolutions = []
    for level in range(levels):
        resolution = int(math.floor(base_resolution * growth ** level + 1e-9))
        if resolutions:
            resolution = max(resolution, resolutions[-1] + 1)
        resolutions.append(resolution)
    resolutions[-1] = finest_resolution
    for level in range(levels - 2, -1, -1):
        resolutions[level] = min(resolutions[level], resolutions[level + 1] - 1)
    return resolutions


@dataclasses.dataclass(eq=False)
class HashGrid:
    resolutions: List[int]
    feature_dim: int
    table_size_log2: int
    bounds: torch.Tensor
    features: ParameterBlock

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim

    @property
    def extent(self) -> float:
        return float((self.bounds[1] - self.bounds[0]).max())

    def is_dense(self, level: int) -> bool:
        return (self.resolutions[level] + 1) ** 3 <= 2 ** self.table_size_log2

    def table_size(self, level: int) -> int:
        if self.is_dense(level):
            return (self.resolutions[level] + 1) ** 3
        return 2 ** self.table_size_log2

    def table_sizes(self) -> List[int]:
        return [self.table_size(level) for level in range(self.levels)]

    def level_table(self, level: int) -> torch.Tensor:
        offset = sum(self.table_sizes()[:level]) * self.feature_dim
        size = self.table_size(level) * self.feature_dim
        return self.features.values[offset:offset + size].reshape(-1, self.feature_dim)

    def corner_index(self, level: int, corners: torch.Tensor) -> torch.Tensor:
        """Table rows of integer lattice corners (..., 3)."""
        x, y, z = corners.unbind(-1)
        if self.is_dense(level):
            side = self.resolutions[level] + 1
            return x + y * side + z * side * side
        hashed = (x * HASH_PRIMES[0]) ^ (y * HASH_PRIMES[1]) ^ (z * HASH_PRIMES[2])
        return hashed & (2 ** self.table_size_log2 - 1)


def build_hash_grid(
    name: str,
    role: BlockRole,
    levels: int,
    bounds: torch.Tensor,
    finest_voxel: float,
    base_resolution: int,
    feature_dim: int,
    table_size_log2: int,
    learning_rate: float,
    init_range: float,
    generator: torch.Generator,
) -> HashGrid:
    extent = float((bounds[1] - bounds[0]).max())
    finest_resolution = max(1, int(math.ceil(extent / finest_voxel - 1e-9)))
    resolutions = level_resolutions(levels, base_resolution, finest_resolution)
    total_rows = sum(
        (resolution + 1) ** 3 if (resolution + 1) ** 3 <= 2 ** table_size_log2 else 2 ** table_size_log2
        for resolution in resolutions
    )
    values = (torch.rand(total_rows * feature_dim, generator=generator, dtype=torch.float64) * 2 - 1) * init_range
    return HashGrid(
        resolutions=resolutions,
        feature_dim=feature_dim,
        table_size_log2=table_size_log2,
        bounds=bounds,
        features=ParameterBlock(name, role, values, learning_rate),
    )


def encode(points: torch.Tensor, grid: HashGrid) -> torch.Tensor:
    """Concatenated trilinearly interpolated features of every level, shape (N, L·F)."""
    low, high = grid.bounds
    clamped = torch.minimum(torch.maximum(points, low), high)
    unit = (clamped - low) / grid.extent

    outputs = []
    for level, resolution in enumerate(grid.resolutions):
        scaled = unit * resolution
        cell = torch.floor(scaled.detach()).clamp(max=resolution - 1).to(torch.int64)
        fraction = scaled - cell.to(torch.float64)

        corners = cell[:, None, :] + _CORNER_OFFSETS[None, :, :]
        offsets = _CORNER_OFFSETS[None, :, :].to(torch.bool)
        weights = torch.where(offsets, fraction[:, None, :], 1.0 - fraction[:, None, :]).prod(dim=-1)

        table = grid.level_table(level)
        corner_features = table[grid.corner_index(level, corners)]
        outputs.append((weights[..., None] * corner_features).sum(dim=1))
    return torch.cat(outputs, dim=-1)


@dataclasses.dataclass(eq=False)
class Decoder:
    """Perceptron with two hidden layers; the flat parameter block is unpacked on every call."""

    in_dim: int
    hidden: int
    out_dim: int
    activation: str
    output_activation: str
    parameters: ParameterBlock

    def layer_shapes(self) -> List[Tuple[int, ...]]:
        return [
            (self.hidden, self.in_dim), (self.hidden,),
            (self.hidden, self.hidden), (self.hidden,),
            (self.out_dim, self.hidden), (self.out_dim,),
        ]

    def unpack(self) -> List[torch.Tensor]:
        tensors = []
        offset = 0
        for shape in self.layer_shapes():
            size = math.prod(shape)
            tensors.append(self.parameters.values[offset:offset + size].reshape(shape))
            offset += size
        return tensors

    def __call__(self, features: torch.Tensor) -> torch.Tensor:
        first_weight, first_bias, second_weight, second_bias, out_weight, out_bias = self.unpack()
        hidden = self._activate(features @ first_weight.T + first_bias)
        hidden = self._activate(hidden @ second_weight.T + second_bias)
        output = hidden @ out_weight.T + out_bias
        if self.output_activation == 'tanh':
            return torch.tanh(output)
        return torch.sigmoid(output)

    def _activate(self, values: torch.Tensor) -> torch.Tensor:
        if self.activation == 'softplus':
            return F.softplus(values)
        return torch.relu(values)


def build_decoder(
    name: str,
    role: BlockRole,
    in_dim: int,
    hidden: int,
    out_dim: int,
    activation: str,
    output_activation: str,
    output_scale: float,
    learning_rate: float,
    generator: torch.Generator,
) -> Decoder:
    chunks = []
    for fan_in, fan_out in ((in_dim, hidden), (hidden, hidden)):
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append((torch.rand(fan_out * fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
        chunks.append((torch.rand(fan_out, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
    bound = output_scale / math.sqrt(hidden)
    chunks.append((torch.rand(out_dim * hidden, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
    chunks.append(torch.zeros(out_dim, dtype=torch.float64))
    return Decoder(
        in_dim=in_dim,
        hidden=hidden,
        out_dim=out_dim,
        activation=activation,
        output_activation=output_activation,
        parameters=ParameterBlock(name, role, torch.cat(chunks), learning_rate),
    )


@dataclasses.dataclass(eq=False)
class SceneField:
    geometry_grid: HashGrid
    appearance_grid: HashGrid
    geometry_decoder: Decoder
    appearance_decoder: Decoder
    alpha: ParameterBlock
    truncation: float
    out_of_bounds_queries: int = 0

    @property
    def bounds(self) -> torch.Tensor:
        return self.geometry_grid.bounds

    def blocks(self) -> List[ParameterBlock]:
        return [
            self.geometry_grid.features,
            self.appearance_grid.features,
            self.geometry_decoder.parameters,
            self.appearance_decoder.parameters,
            self.alpha,
        ]

    def block(self, name: str) -> ParameterBlock:
        for block in self.blocks():
            if block.name == name:
                return block
        raise KeyError(name)

    def alpha_value(self) -> torch.Tensor:
        return self.alpha.values[0]

    def _count_outside(self, points: torch.Tensor) -> None:
        low, high = self.bounds
        outside = int(((points < low) | (points > high)).any(dim=-1).sum())
        self.out_of_bounds_queries += outside

    def query_sdf(self, points: torch.Tensor) -> torch.Tensor:
        self._count_outside(points)
        return self.geometry_decoder(encode(points, self.geometry_grid))[..., 0]

    def query_color(self, points: torch.Tensor) -> torch.Tensor:
        self._count_outside(points)
        return self.appearance_decoder(encode(points, self.appearance_grid))

    def checksum(self) -> str:
        digest = hashlib.sha1()
        for block in self.blocks():
            digest.update(block.name.encode())
            digest.update(block.values.detach().numpy().tobytes())
        return digest.hexdigest()

    @contextlib.contextmanager
    def frozen(self) -> Iterator['SceneField']:
        for block in self.blocks():
            block.values.requires_grad_(False)
        try:
            yield self
        finally:
            for block in self.blocks():
                block.values.requires_grad_(True)


def init_field(config: RunConfig, bounds: BoundsLike) -> SceneField:
    bounds = as_bounds(bounds)
    generator = torch.Generator().manual_seed(config.seed)
    grid_arguments: Dict[str, Any] = {
        'bounds': bounds,
        'finest_voxel': config.finest_voxel,
        'base_resolution': config.base_resolution,
        'feature_dim': config.feature_dim,
        'table_size_log2': config.table_size_log2,
        'init_range': config.feature_init_range,
        'generator': generator,
    }
    geometry_grid = build_hash_grid(
        'geometry_grid', BlockRole.GEOMETRY_GRID, config.geometry_levels,
        learning_rate=config.lr_geometry_grid, **grid_arguments,
    )
    appearance_grid = build_hash_grid(
        'appearance_grid', BlockRole.APPEARANCE_GRID, config.appearance_levels,
        learning_rate=config.lr_appearance_grid, **grid_arguments,
    )
    decoder_arguments: Dict[str, Any] = {
        'hidden': config.decoder_hidden,
        'activation': config.decoder_activation,
        'output_scale': config.decoder_output_scale,
        'learning_rate': config.lr_decoder,
        'generator': generator,
    }
    field = SceneField(
        geometry_grid=geometry_grid,
        appearance_grid=appearance_grid,
        geometry_decoder=build_decoder(
            'geometry_decoder', BlockRole.GEOMETRY_DECODER, geometry_grid.output_dim,
            out_dim=1, output_activation='tanh', **decoder_arguments,
        ),
        appearance_decoder=build_decoder(
            'appearance_decoder', BlockRole.APPEARANCE_DECODER, appearance_grid.output_dim,
            out_dim=3, output_activation='sigmoid', **decoder_arguments,
        ),
        alpha=ParameterBlock(
            'alpha', BlockRole.ALPHA, torch.tensor([config.alpha_init], dtype=torch.float64), config.lr_alpha,
            lower_bound=config.alpha_min,
        ),
        truncation=config.truncation,
    )
    logger.info(
        'field initialised: geometry levels %s, appearance levels %s, %d parameters',
        geometry_grid.resolutions, appearance_grid.resolutions, sum(block.size for block in field.blocks()),
    )
    return field


def query_sdf(field: SceneField, points: torch.Tensor) -> torch.Tensor:
    return field.query_sdf(points)


def query_color(field: SceneField, points: torch.Tensor) -> torch.Tensor:
    return field.query_color(points)


def _grid_header(grid: HashGrid) -> Dict[str, Any]:
    return {
        'resolutions': list(grid.resolutions),
        'feature_dim': grid.feature_dim,
        'table_size_log2': grid.table_size_log2,
        'table_sizes': grid.table_sizes(),
    }


def _decoder_header(decoder: Decoder) -> Dict[str, Any]:
    return {
        'in_dim': decoder.in_dim,
        'hidden': decoder.hidden,
        'out_dim': decoder.out_dim,
        'activation': decoder.activation,
        'output_activation': decoder.output_activation,
    }


def save_checkpoint(
    field: SceneField, path: Union[pathlib.Path, str], extras: Optional[Dict[str, Any]] = None,
) -> None:
    payload = {
        'version': CHECKPOINT_VERSION,
        'header': {
            'bounds': field.bounds.tolist(),
            'truncation': field.truncation,
            'geometry_grid': _grid_header(field.geometry_grid),
            'appearance_grid': _grid_header(field.appearance_grid),
            'geometry_decoder': _decoder_header(field.geometry_decoder),
            'appearance_decoder': _decoder_header(field.appearance_decoder),
            'alpha_lower_bound': field.alpha.lower_bound,
        },
        'blocks': {
            block.name: {'values': block.snapshot(), 'role': block.role.value, 'learning_rate': block.learning_rate}
            for block in field.blocks()
        },
        'extras': extras or {},
    }
    torch.save(payload, str(path))
    logger.info('checkpoint written to %s', path)


def _restore_block(blocks: Dict[str, Any], name: str, lower_bound: Optional[float] = None) -> ParameterBlock:
    try:
        entry = blocks[name]
    except KeyError:
        raise CheckpointError(f'Checkpoint has no block {name}.')
    return ParameterBlock(name, BlockRole(entry['role']), entry['values'], entry['learning_rate'], lower_bound)


def load_checkpoint(path: Union[pathlib.Path, str]) -> Tuple[SceneField, Dict[str, Any]]:
    try:
        payload = torch.load(str(path), weights_only=True)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f'Unable to read checkpoint {path}: {e}')
    if not isinstance(payload, dict) or payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'Checkpoint {path} has an unsupported version.')

    header = payload['header']
    blocks = payload['blocks']
    bounds = as_bounds(header['bounds'])
    grids = {}
    for name in ('geometry_grid', 'appearance_grid'):
        grid_header = header[name]
        grid = HashGrid(
            resolutions=list(grid_header['resolutions']),
            feature_dim=grid_header['feature_dim'],
            table_size_log2=grid_header['table_size_log2'],
            bounds=bounds,
            features=_restore_block(blocks, name),
        )
        if grid.table_sizes() != list(grid_header['table_sizes']):
            raise CheckpointError(f'Checkpoint {path}: table sizes of {name} do not match its header.')
        grids[name] = grid
    decoders = {
        name: Decoder(parameters=_restore_block(blocks, name), **header[name])
        for name in ('geometry_decoder', 'appearance_decoder')
    }
    field = SceneField(
        geometry_grid=grids['geometry_grid'],
        appearance_grid=grids['appearance_grid'],
        geometry_decoder=decoders['geometry_decoder'],
        appearance_decoder=decoders['appearance_decoder'],
        alpha=_restore_block(blocks, 'alpha', header['alpha_lower_bound']),
        truncation=header['truncation'],
    )
    return field, payload['extras']

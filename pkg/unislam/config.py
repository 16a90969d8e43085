import dataclasses
import hashlib
import logging
import pathlib
import re
import typing
from typing import Any, Dict, List, Optional, Tuple, Union

from unislam.constants import CONFIG_KEY_PATTERN, DATASET_TAGS
from unislam.exceptions import ColumnError, ConfigError
from unislam.processors import (
    BaseProcessor,
    BooleanProcessor,
    ChoiceProcessor,
    FloatProcessor,
    IntegerProcessor,
    VectorProcessor,
    choices,
)

logger = logging.getLogger(__name__)

META_PROCESSOR = 'unislam_processor'
DATASET_SECTIONS = ('replica', 'scannet', 'tum')

_SECTION_PATTERN = re.compile(r'^\[\s*([a-z][a-z0-9_]*)\s*\]$')

PositiveFloat = FloatProcessor(0.0)
NonNegativeFloat = FloatProcessor(0.0, include_min=True)
UnitInterval = FloatProcessor(0.0, 1.0)
PositiveInteger = IntegerProcessor(1)
NonNegativeInteger = IntegerProcessor(0)
Flag = BooleanProcessor()


def config_field(default: Any, processor: BaseProcessor) -> Any:
    return dataclasses.field(default=default, metadata={META_PROCESSOR: processor})


@dataclasses.dataclass(frozen=True)
class ConfigField:
    name: str
    processor: BaseProcessor
    default: Any


@dataclasses.dataclass(frozen=True)
class RunConfig:
    dataset: str = config_field('generic', ChoiceProcessor(choices(*DATASET_TAGS)))
    seed: int = config_field(0, NonNegativeInteger)
    deterministic: bool = config_field(True, Flag)

    geometry_levels: int = config_field(16, PositiveInteger)
    appearance_levels: int = config_field(16, PositiveInteger)
    finest_voxel: float = config_field(0.02, PositiveFloat)
    base_resolution: int = config_field(16, PositiveInteger)
    feature_dim: int = config_field(2, PositiveInteger)
    table_size_log2: int = config_field(19, IntegerProcessor(4, 30))
    decoder_hidden: int = config_field(32, PositiveInteger)
    decoder_activation: str = config_field('relu', ChoiceProcessor(choices('relu', 'softplus')))
    feature_init_range: float = config_field(1e-4, NonNegativeFloat)
    decoder_output_scale: float = config_field(1e-3, PositiveFloat)
    alpha_init: float = config_field(0.1, PositiveFloat)
    alpha_min: float = config_field(1e-4, PositiveFloat)

    lr_geometry_grid: float = config_field(5e-2, NonNegativeFloat)
    lr_appearance_grid: float = config_field(5e-2, NonNegativeFloat)
    lr_decoder: float = config_field(5e-3, NonNegativeFloat)
    lr_alpha: float = config_field(5e-3, NonNegativeFloat)
    lr_rotation: float = config_field(1e-3, NonNegativeFloat)
    lr_translation: float = config_field(1e-3, NonNegativeFloat)
    adam_beta1: float = config_field(0.9, FloatProcessor(0.0, 1.0, include_min=True))
    adam_beta2: float = config_field(0.999, FloatProcessor(0.0, 1.0, include_min=True))
    adam_eps: float = config_field(1e-8, PositiveFloat)

    n_stratified: int = config_field(32, PositiveInteger)
    n_importance: int = config_field(10, NonNegativeInteger)
    truncation: float = config_field(0.06, PositiveFloat)
    near_min: float = config_field(0.05, NonNegativeFloat)
    spacing_scaled_density: bool = config_field(False, Flag)

    pixel_uncertainty_threshold: float = config_field(1e-2, FloatProcessor(0.0, 1.0, include_min=True))
    image_uncertainty_threshold: float = config_field(1e-3, FloatProcessor(0.0, 1.0, include_min=True))
    use_confidence_mask: bool = config_field(True, Flag)
    covisibility_threshold: float = config_field(0.95, UnitInterval)
    covisibility_pixels: int = config_field(50, PositiveInteger)
    covisibility_samples: int = config_field(8, PositiveInteger)
    loop_min_gap: int = config_field(100, NonNegativeInteger)

    tracking_rays: int = config_field(2000, PositiveInteger)
    mapping_rays: int = config_field(4000, PositiveInteger)
    tracking_iterations: int = config_field(8, NonNegativeInteger)
    mapping_iterations: int = config_field(13, NonNegativeInteger)
    first_frame_iterations: int = config_field(200, NonNegativeInteger)
    mapping_period: int = config_field(4, PositiveInteger)
    lba_window: int = config_field(20, PositiveInteger)
    enable_lba: bool = config_field(True, Flag)
    enable_llco: bool = config_field(True, Flag)
    enable_gba: bool = config_field(True, Flag)

    tracking_w_rgb: float = config_field(5.0, NonNegativeFloat)
    tracking_w_depth: float = config_field(1.0, NonNegativeFloat)
    tracking_w_sdf_center: float = config_field(200.0, NonNegativeFloat)
    tracking_w_sdf_tail: float = config_field(50.0, NonNegativeFloat)
    tracking_w_free_space: float = config_field(10.0, NonNegativeFloat)
    mapping_w_rgb: float = config_field(5.0, NonNegativeFloat)
    mapping_w_depth: float = config_field(0.1, NonNegativeFloat)
    mapping_w_sdf_center: float = config_field(200.0, NonNegativeFloat)
    mapping_w_sdf_tail: float = config_field(10.0, NonNegativeFloat)
    mapping_w_free_space: float = config_field(5.0, NonNegativeFloat)

    edge_crop: int = config_field(0, NonNegativeInteger)
    bounds: Tuple[float, ...] = config_field((), VectorProcessor(length=6))
    camera: Tuple[float, ...] = config_field((), VectorProcessor(length=6))

    eval_stride: int = config_field(5, PositiveInteger)
    mesh_resolution: float = config_field(0.01, PositiveFloat)
    mesh_samples: int = config_field(200000, PositiveInteger)
    mesh_max_cells: int = config_field(64_000_000, PositiveInteger)
    render_chunk: int = config_field(4096, PositiveInteger)

    def replace(self, **changes: Any) -> 'RunConfig':
        return dataclasses.replace(self, **changes)

    @property
    def digest(self) -> str:
        return hashlib.sha1(serialize_config(self).encode()).hexdigest()[:12]


DATASET_OVERRIDES: Dict[str, Dict[str, Any]] = {
    'replica': {
        'appearance_levels': 19,
    },
    'scannet': {
        'mapping_period': 5,
        'mapping_iterations': 20,
        'n_stratified': 48,
        'tracking_iterations': 20,
        'edge_crop': 75,
        'lr_translation': 5e-4,
        'lr_rotation': 3e-3,
    },
    'tum': {
        'image_uncertainty_threshold': 2e-3,
        'mapping_period': 4,
        'tracking_rays': 4000,
        'mapping_rays': 4000,
        'edge_crop': 20,
        'tracking_iterations': 20,
        'mapping_iterations': 20,
        'n_stratified': 48,
        'lr_geometry_grid': 2e-2,
        'lr_appearance_grid': 2e-2,
        'lr_translation': 1e-2,
        'lr_rotation': 5e-3,
    },
}


def get_config_fields(config_cls: typing.Type[RunConfig] = RunConfig) -> List[ConfigField]:
    fields = []
    for dataclass_field in dataclasses.fields(config_cls):
        fields.append(
            ConfigField(
                name=dataclass_field.name,
                processor=dataclass_field.metadata[META_PROCESSOR],
                default=dataclass_field.default,
            ),
        )
    return fields


def _read_sections(text: str) -> Dict[Optional[str], Dict[str, Tuple[int, str]]]:
    sections: Dict[Optional[str], Dict[str, Tuple[int, str]]] = {None: {}}
    current: Optional[str] = None
    errors = []
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        section_match = _SECTION_PATTERN.match(line)
        if section_match:
            current = section_match.group(1)
            if current not in DATASET_SECTIONS:
                errors.append(f'line {line_number}: unknown section [{current}]')
            sections.setdefault(current, {})
            continue
        if '=' not in line:
            errors.append(f'line {line_number}: expected "key = value", got "{line}"')
            continue
        key, value = (part.strip() for part in line.split('=', 1))
        if not re.match(CONFIG_KEY_PATTERN, key):
            errors.append(f'line {line_number}: invalid key "{key}"')
            continue
        if key in sections[current]:
            errors.append(f'line {line_number}: duplicate key {key}')
            continue
        sections[current][key] = (line_number, value)
    if errors:
        raise ConfigError(errors)
    return sections


def _process_values(
    entries: Dict[str, Tuple[int, str]], fields: Dict[str, ConfigField], section: Optional[str],
) -> Dict[str, Any]:
    values = {}
    errors = []
    where = f'[{section}] ' if section else ''
    for key, (line_number, raw_value) in entries.items():
        field = fields.get(key)
        if field is None:
            errors.append(f'line {line_number}: {where}unknown key {key}')
            continue
        if section is not None and key == 'dataset':
            errors.append(f'line {line_number}: {where}key dataset is only allowed at top level')
            continue
        try:
            value = field.processor(raw_value)
        except ColumnError as e:
            errors.append(f'line {line_number}: {where}{key}: {e}')
            continue
        if value is None:
            value = field.default
        if isinstance(value, list):
            value = tuple(value)
        values[key] = value
    if errors:
        raise ConfigError(errors)
    return values


def _select_dataset(
    requested: Optional[str], top_level: Dict[str, Any], sections: Dict[Optional[str], Any],
) -> str:
    present = [name for name in sections if name is not None]
    if requested is not None:
        if requested not in DATASET_TAGS:
            raise ConfigError(f'Unknown dataset {requested}, expected one of {list(DATASET_TAGS)}.')
        return requested
    if 'dataset' in top_level:
        return top_level['dataset']
    if len(present) == 1:
        return present[0]
    if len(present) > 1:
        raise ConfigError(f'Several dataset sections {present} present, set the dataset key.')
    return 'generic'


def parse_config(text: str, dataset: Optional[str] = None) -> RunConfig:
    fields = {field.name: field for field in get_config_fields()}
    sections = _read_sections(text)
    top_level = _process_values(sections[None], fields, None)
    active = _select_dataset(dataset, top_level, sections)

    values = dict(top_level)
    values.update(DATASET_OVERRIDES.get(active, {}))
    if active in sections:
        values.update(_process_values(sections[active], fields, active))
    values['dataset'] = active

    config = RunConfig(**values)
    _check_consistency(config)
    return config


def _check_consistency(config: RunConfig) -> None:
    errors = []
    if config.bounds and any(high <= low for low, high in zip(config.bounds[:3], config.bounds[3:])):
        errors.append('bounds: every maximum must exceed its minimum')
    if config.camera and (config.camera[0] <= 0 or config.camera[1] <= 0):
        errors.append('camera: focal lengths must be positive')
    if config.alpha_min > config.alpha_init:
        errors.append('alpha_min must not exceed alpha_init')
    if errors:
        raise ConfigError(errors)


def load_config(path: Union[pathlib.Path, str, None] = None, dataset: Optional[str] = None) -> RunConfig:
    text = ''
    if path is not None:
        try:
            text = pathlib.Path(path).read_text()
        except OSError as e:
            raise ConfigError(f'Unable to read config {path}: {e}')
    config = parse_config(text, dataset=dataset)
    logger.info('loaded config %s (dataset %s, digest %s)', path or '<defaults>', config.dataset, config.digest)
    return config


def serialize_config(config: RunConfig) -> str:
    fields = get_config_fields()
    lines = []
    for field in fields:
        lines.append(f'{field.name} = {_to_text(field, getattr(config, field.name))}')
    overrides = DATASET_OVERRIDES.get(config.dataset)
    if overrides:
        lines.append('')
        lines.append(f'[{config.dataset}]')
        for field in fields:
            if field.name in overrides:
                lines.append(f'{field.name} = {_to_text(field, getattr(config, field.name))}')
    return '\n'.join(lines) + '\n'


def _to_text(field: ConfigField, value: Any) -> str:
    if isinstance(value, tuple) and not value:
        return ''
    return field.processor.to_text(value)


import cv2
import numpy as np
import pytest
import torch

from unislam.columns import Column
from unislam.config import RunConfig
from unislam.datasets.base import CAMERA_FILE, write_camera_file
from unislam.datasets.synthetic import load_scene, synth_generate
from unislam.field import init_field
from unislam.geometry import CameraIntrinsics, look_at
from unislam.parsers.base import BaseParser


UNIT_BOUNDS = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)


def small_config(**changes):
    """Tiny but complete pipeline: two dense levels per grid, few samples and iterations."""
    values = {
        'geometry_levels': 2,
        'appearance_levels': 2,
        'base_resolution': 2,
        'finest_voxel': 0.5,
        'table_size_log2': 8,
        'decoder_hidden': 8,
        'n_stratified': 8,
        'n_importance': 4,
        'tracking_rays': 32,
        'mapping_rays': 48,
        'tracking_iterations': 2,
        'mapping_iterations': 2,
        'first_frame_iterations': 3,
        'covisibility_pixels': 10,
        'render_chunk': 64,
    }
    values.update(changes)
    return RunConfig(**values)


def raise_(ex, *args, **kwargs):
    raise ex(*args, **kwargs)


@pytest.fixture
def base_parser():
    class Parser(BaseParser):
        add_row_index = True
        skip_empty_rows = True
        columns = [Column('first_name', index=1)]

    return Parser(file_path='test_file_path')


@pytest.fixture
def row_factory():
    def row(values):
        return list(values)

    return row


@pytest.fixture
def text_file_factory(tmp_path):
    def _text_file_factory(text, name='data.txt'):
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path
    return _text_file_factory


@pytest.fixture
def config_factory():
    return small_config


@pytest.fixture
def field_factory():
    def _field_factory(bounds=UNIT_BOUNDS, **changes):
        return init_field(small_config(**changes), bounds)
    return _field_factory


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)


@pytest.fixture
def camera_pose():
    return look_at((0.0, -0.6, 0.1), (0.0, 0.0, 0.0))


@pytest.fixture(scope='session')
def tiny_scene():
    scene, _ = load_scene('room-sphere', frames=4, resolution=(16, 12))
    return scene


@pytest.fixture(scope='session')
def tiny_sequence(tiny_scene):
    return synth_generate(tiny_scene)


@pytest.fixture
def tum_dataset_factory(tmp_path):
    """Writes a TUM RGB-D style directory with constant images and an optional trajectory."""
    def _tum_dataset_factory(
        color_stamps=(1.0, 2.0, 3.0), depth_stamps=(1.005, 2.005, 3.005), raw_depth=10000,
        poses=None, size=(8, 6),
    ):
        directory = tmp_path / 'tum'
        (directory / 'rgb').mkdir(parents=True, exist_ok=True)
        (directory / 'depth').mkdir(parents=True, exist_ok=True)
        width, height = size
        color_lines = ['# color images', '# file: test', '# timestamp filename']
        for stamp in color_stamps:
            name = f'rgb/{stamp:.6f}.png'
            cv2.imwrite(str(directory / name), np.full((height, width, 3), 128, dtype=np.uint8))
            color_lines.append(f'{stamp:.6f} {name}')
        depth_lines = ['# depth maps']
        for stamp in depth_stamps:
            name = f'depth/{stamp:.6f}.png'
            cv2.imwrite(str(directory / name), np.full((height, width), raw_depth, dtype=np.uint16))
            depth_lines.append(f'{stamp:.6f} {name}')
        camera = CameraIntrinsics(10.0, 10.0, (width - 1) / 2, (height - 1) / 2, width, height)
        write_camera_file(directory / CAMERA_FILE, camera)
        (directory / 'rgb.txt').write_text('\n'.join(color_lines) + '\n')
        (directory / 'depth.txt').write_text('\n'.join(depth_lines) + '\n')
        if poses is not None:
            lines = ['# ground truth trajectory']
            for stamp, pose in poses:
                lines.append(f'{stamp:.4f} ' + ' '.join(f'{value:.6f}' for value in pose.to_tum()))
            (directory / 'groundtruth.txt').write_text('\n'.join(lines) + '\n')
        return directory
    return _tum_dataset_factory


def tensor(values):
    return torch.tensor(values, dtype=torch.float64)

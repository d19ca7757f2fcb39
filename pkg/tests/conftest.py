import numpy as np
import pytest

from ctnodule.ct_io import CtVolume
from ctnodule.encoder import EncoderConfig, random_encoder_params


def make_volume(nx=16, ny=16, nz=16, fill=None, spacing=(1.0, 1.0, 1.0),
                origin=(0.0, 0.0, 0.0), direction=None, dtype=np.int16):
    """Synthetic CtVolume; fill is a callable (x, y, z) -> value or a constant."""
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    if fill is None:
        values = (x + y * nx + z * nx * ny)
    elif callable(fill):
        values = fill(x, y, z)
    else:
        values = np.full((nx, ny, nz), fill)
    voxels = np.ascontiguousarray(values.transpose(2, 1, 0)).astype(dtype)
    return CtVolume(
        (nx, ny, nz),
        spacing,
        origin,
        np.eye(3) if direction is None else direction,
        voxels,
    )


@pytest.fixture(scope="session")
def tiny_config():
    return EncoderConfig(
        image_size=56, patch_size=14, embed_dim=32, depth=2, num_heads=4,
        mlp_ratio=4.0, pretrain_grid=4,
    )


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return random_encoder_params(tiny_config, seed=7)
